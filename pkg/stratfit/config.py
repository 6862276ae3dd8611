"""Run configuration for stratfit."""

import itertools
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .errors import StratFitError


class Config:
    """Manages the JSON run configuration of a stratfit command."""

    def __init__(self, config_file: Optional[Union[str, Path]] = None):
        """Initialize config manager.

        Args:
            config_file: JSON file to read. When None the configuration
                starts empty and only flag overrides apply.
        """
        self.config_file = Path(config_file) if config_file is not None else None
        self._config: Dict[str, Any] = {}
        self.load()

    def load(self) -> None:
        """Load configuration from file.

        Raises:
            StratFitError: If the file is missing or not valid JSON
        """
        if self.config_file is None:
            self._config = {}
            return
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                loaded = json.load(f)
        except FileNotFoundError:
            raise StratFitError(f"config file not found: {self.config_file}")
        except (json.JSONDecodeError, IOError) as e:
            raise StratFitError(f"cannot read config file {self.config_file}: {e}")
        if not isinstance(loaded, dict):
            raise StratFitError(f"config file {self.config_file} must hold a JSON object")
        self._config = loaded

    def get(self, key: str, default: Any = None) -> Any:
        """Get a configuration value.

        Args:
            key: Configuration key (supports dot notation, e.g., 'solver.eps_abs')
            default: Default value if key not found

        Returns:
            Configuration value or default
        """
        keys = key.split('.')
        value = self._config
        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    def set(self, key: str, value: Any) -> None:
        """Set a configuration value in memory.

        Args:
            key: Configuration key (supports dot notation)
            value: Value to set
        """
        keys = key.split('.')
        config = self._config
        for k in keys[:-1]:
            if not isinstance(config.get(k), dict):
                config[k] = {}
            config = config[k]
        config[keys[-1]] = value

    def override(self, key: str, value: Any) -> None:
        """Apply a command-line override; None means the flag was not given."""
        if value is not None:
            self.set(key, value)

    def loss_spec(self) -> Dict[str, Any]:
        """Get the loss description.

        Returns:
            Dictionary with at least a 'kind' entry
        """
        spec = self.get('loss')
        if spec is None:
            raise StratFitError("no loss configured (use --loss or the 'loss' config section)")
        return _as_spec(spec)

    def reg_spec(self) -> Dict[str, Any]:
        """Get the local regularizer description (defaults to zero)."""
        return _as_spec(self.get('reg', {'kind': 'zero'}))

    def graph_spec(self) -> Any:
        """Get the graph description or graph file path.

        Returns:
            A dictionary spec, or a path string naming a graph file
        """
        spec = self.get('graph')
        if spec is None:
            raise StratFitError("no graph configured (use --graph or the 'graph' config section)")
        return spec

    def model_options(self) -> Dict[str, Any]:
        """Get StratifiedModel options (standardize, intercept)."""
        options = self.get('model', {})
        return dict(options) if isinstance(options, dict) else {}

    def solver_config(self):
        """Build the solver configuration.

        Returns:
            SolverConfig assembled from the 'solver' section
        """
        from .solver import SolverConfig

        section = self.get('solver', {}) or {}
        try:
            return SolverConfig.from_dict(section)
        except (TypeError, ValueError) as e:
            raise StratFitError(f"invalid solver configuration: {e}")

    def grid(self) -> List[Dict[str, Any]]:
        """Get the cross-validation grid as a list of cells.

        The grid may be a list of cells or a mapping from hyper-parameter
        to candidate values, expanded as a Cartesian product in key order.

        Returns:
            List of hyper-parameter dictionaries
        """
        return expand_grid(self.get('cv.grid', []))


def _as_spec(spec: Any) -> Dict[str, Any]:
    if isinstance(spec, str):
        return {'kind': spec}
    if isinstance(spec, dict) and 'kind' in spec:
        return dict(spec)
    raise StratFitError(f"expected a kind name or an object with 'kind', got {spec!r}")


def parse_inline(value: Optional[str]) -> Any:
    """Parse a flag value that is either inline JSON, a JSON file or a bare name.

    Args:
        value: Raw flag value

    Returns:
        Parsed JSON value, or the string itself
    """
    if value is None:
        return None
    text = value.strip()
    if text.startswith('{') or text.startswith('['):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise StratFitError(f"invalid inline JSON {value!r}: {e}")
    if text.endswith('.json') and Path(text).is_file():
        with open(text, 'r', encoding='utf-8') as f:
            return json.load(f)
    return text


def expand_grid(grid: Any) -> List[Dict[str, Any]]:
    """Expand a grid description into a list of cells.

    Args:
        grid: List of dicts, or dict mapping keys to value lists

    Returns:
        List of hyper-parameter dictionaries
    """
    if isinstance(grid, dict):
        keys = list(grid.keys())
        values = [v if isinstance(v, list) else [v] for v in grid.values()]
        return [dict(zip(keys, combo)) for combo in itertools.product(*values)]
    if isinstance(grid, list):
        if not all(isinstance(cell, dict) for cell in grid):
            raise StratFitError("grid cells must be JSON objects")
        return [dict(cell) for cell in grid]
    raise StratFitError(f"grid must be a list or an object, got {type(grid).__name__}")
