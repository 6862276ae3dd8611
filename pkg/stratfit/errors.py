"""Exceptions raised by stratfit."""

from typing import Hashable, Optional, Sequence


class StratFitError(Exception):
    """Base class for every error raised on purpose by stratfit."""


class GraphError(StratFitError, ValueError):
    """Invalid regularization graph or graph description."""


class DataError(StratFitError, ValueError):
    """Malformed dataset, outcome outside the model domain, or shape mismatch."""


class UnknownNodeError(StratFitError, KeyError):
    """A record's stratification key does not name a graph node."""

    def __init__(self, key: Hashable, suggestions: Sequence = (), others: Sequence = ()):
        self.key = key
        self.suggestions = list(suggestions)
        self.keys = [key] + list(others)
        message = f"unknown stratification key {key!r}"
        if self.suggestions:
            message += f" (nearest known keys: {', '.join(repr(s) for s in self.suggestions)})"
        if others:
            message += f"; also unknown: {', '.join(repr(k) for k in others)}"
        super().__init__(message)

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the message readable
        return self.args[0]


class ProxError(StratFitError):
    """Evaluating a proximal operator failed at a node."""

    def __init__(self, message: str, node: Optional[int] = None):
        self.node = node
        if node is not None:
            message = f"node {node}: {message}"
        super().__init__(message)


class NotFittedError(StratFitError):
    """Operation needs a fitted model."""


class ModelFileError(StratFitError):
    """Model file is malformed or incompatible."""


class DisconnectedGraphWarning(UserWarning):
    """Regularization graph has more than one connected component."""
