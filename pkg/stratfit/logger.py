"""Logging configuration for stratfit."""

import logging
import sys
from pathlib import Path
from typing import Optional, Union


def setup_logger(name: str = "stratfit", level: int = logging.INFO,
                 log_file: Optional[Union[str, Path]] = None) -> logging.Logger:
    """Setup logger for stratfit.
    
    Args:
        name: Logger name
        level: Logging level
        log_file: Optional file that receives a copy of every record
        
    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)
    
    # Remove existing handlers
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()
    
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    
    # Progress goes to stderr so stdout stays clean for results
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)
    
    if log_file is not None:
        file_handler = logging.FileHandler(str(log_file), encoding='utf-8')
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    
    return logger


# Default logger instance
logger = setup_logger()
