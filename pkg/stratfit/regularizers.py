"""Local regularizers r and their proximal operators.

Every function works on a single parameter vector of length n or on a
K x n block, row by row.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

KINDS = ('zero', 'sum-squares', 'l1', 'elastic', 'l2', 'indicator')
SETS = ('full', 'nonneg', 'box', 'simplex')
SEPARABLE = ('zero', 'sum-squares', 'l1', 'elastic', 'indicator')


@dataclass(frozen=True)
class Regularizer:
    """Local regularization function r plus its constraint set.

    Attributes:
        kind: One of zero, sum-squares, l1, elastic, l2, indicator
        gamma: Scale of sum-squares ((gamma/2)||x||^2), l1 (gamma||x||_1)
            and l2 (gamma||x||_2)
        l1: l1 weight of the elastic penalty
        l2: Sum-of-squares weight of the elastic penalty
        domain: Constraint set: full, nonneg, box or simplex
        lo: Lower bound of the box
        hi: Upper bound of the box
        skip_intercept: Leave the intercept coordinates unregularized
        intercept: Coordinates treated as the intercept (negative indices
            count from the end)
    """

    kind: str = 'zero'
    gamma: float = 1.0
    l1: float = 0.0
    l2: float = 0.0
    domain: str = 'full'
    lo: Optional[float] = None
    hi: Optional[float] = None
    skip_intercept: bool = False
    intercept: Tuple[int, ...] = field(default=(-1,))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}; expected one of {KINDS}")
        if self.domain not in SETS:
            raise ValueError(f"unknown constraint set {self.domain!r}; expected one of {SETS}")
        for name in ('gamma', 'l1', 'l2'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.domain == 'box':
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ValueError(f"box requires lo < hi, got [{self.lo}, {self.hi}]")
        if self.domain == 'simplex' and self.kind not in ('zero', 'indicator'):
            raise ValueError("the simplex set composes only with the zero regularizer")
        if self.kind == 'l2' and self.domain not in ('full', 'nonneg'):
            raise ValueError("the l2 norm composes only with the full space or the nonnegative orthant")
        object.__setattr__(self, 'intercept', tuple(int(i) for i in self.intercept))

    @classmethod
    def from_dict(cls, spec: Mapping[str, Any]) -> 'Regularizer':
        """Build from a config entry such as
        ``{"kind": "elastic", "l1": 0.1, "l2": 1.0, "skip_intercept": true}``."""
        spec = dict(spec)
        if 'set' in spec:
            spec['domain'] = spec.pop('set')
        if 'intercept' in spec:
            value = spec['intercept']
            spec['intercept'] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        unknown = set(spec) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown regularizer fields: {sorted(unknown)}")
        return cls(**spec)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {'kind': self.kind, 'set': self.domain}
        if self.kind in ('sum-squares', 'l1', 'l2'):
            out['gamma'] = self.gamma
        if self.kind == 'elastic':
            out['l1'] = self.l1
            out['l2'] = self.l2
        if self.domain == 'box':
            out['lo'] = self.lo
            out['hi'] = self.hi
        if self.skip_intercept:
            out['skip_intercept'] = True
            out['intercept'] = list(self.intercept)
        return out

    def with_params(self, **changes: Any) -> 'Regularizer':
        return replace(self, **changes)

    def free_mask(self, n: int) -> np.ndarray:
        """Boolean mask of coordinates the regularizer leaves untouched."""
        mask = np.zeros(n, dtype=bool)
        if self.skip_intercept:
            for i in self.intercept:
                if -n <= i < n:
                    mask[i] = True
        return mask


def project(v: np.ndarray, domain: str, lo: Optional[float] = None,
            hi: Optional[float] = None) -> np.ndarray:
    """Euclidean projection onto a constraint set, row by row."""
    v = np.asarray(v, dtype=float)
    if domain == 'full':
        return v.copy()
    if domain == 'nonneg':
        return np.maximum(v, 0.0)
    if domain == 'box':
        return np.clip(v, lo, hi)
    if domain == 'simplex':
        return project_simplex(v)
    raise ValueError(f"unknown constraint set {domain!r}")


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Sort-based Euclidean projection of each row onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    flat = np.atleast_2d(v)
    n = flat.shape[1]
    u = -np.sort(-flat, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    rho = cond.sum(axis=1) - 1
    tau = css[np.arange(flat.shape[0]), rho] / (rho + 1)
    out = np.maximum(flat - tau[:, None], 0.0)
    return out.reshape(v.shape)


def soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    """(v - t)_+ - (-v - t)_+ elementwise."""
    return np.maximum(v - t, 0.0) - np.maximum(-v - t, 0.0)


def _in_set(v: np.ndarray, r: Regularizer, atol: float = 1e-12) -> bool:
    if r.domain == 'full':
        return True
    if r.domain == 'nonneg':
        return bool(np.all(v >= -atol))
    if r.domain == 'box':
        return bool(np.all((v >= r.lo - atol) & (v <= r.hi + atol)))
    return bool(np.all(v >= -atol) and np.allclose(v.sum(axis=-1), 1.0, atol=1e-9))


def reg_eval(r: Regularizer, theta: np.ndarray) -> float:
    """Value of r at a vector (or the sum over the rows of a block).

    Returns:
        The regularizer value, +inf outside the constraint set
    """
    theta = np.asarray(theta, dtype=float)
    block = np.atleast_2d(theta)
    keep = ~r.free_mask(block.shape[1])
    active = block[:, keep]
    if not _in_set(active, r):
        return float('inf')
    if r.kind == 'sum-squares':
        return 0.5 * r.gamma * float(np.sum(active ** 2))
    if r.kind == 'l1':
        return r.gamma * float(np.sum(np.abs(active)))
    if r.kind == 'elastic':
        return r.l1 * float(np.sum(np.abs(active))) + 0.5 * r.l2 * float(np.sum(active ** 2))
    if r.kind == 'l2':
        return r.gamma * float(np.sum(np.linalg.norm(active, axis=1)))
    return 0.0


def reg_prox(r: Regularizer, v: np.ndarray, t: float) -> np.ndarray:
    """prox_{t r}(v) = argmin_x ( t r(x) + (1/2)||x - v||^2 ), row by row.

    Coordinates marked as intercept pass through unchanged.
    """
    if not t > 0:
        raise ValueError(f"prox step t must be positive, got {t}")
    v = np.asarray(v, dtype=float)
    block = np.atleast_2d(v)
    free = r.free_mask(block.shape[1])
    keep = ~free
    out = block.copy()
    if not keep.any():
        return out.reshape(v.shape)
    x = block[:, keep]

    if r.kind == 'sum-squares':
        x = x / (1.0 + r.gamma * t)
    elif r.kind == 'l1':
        x = soft_threshold(x, r.gamma * t)
    elif r.kind == 'elastic':
        x = soft_threshold(x, r.l1 * t) / (1.0 + r.l2 * t)
    elif r.kind == 'l2':
        if r.domain == 'nonneg':
            x = np.maximum(x, 0.0)
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        with np.errstate(divide='ignore', invalid='ignore'):
            factor = np.where(norms > 0, np.maximum(1.0 - r.gamma * t / norms, 0.0), 0.0)
        x = factor * x

    # Separable penalties compose with nonneg/box by clipping; simplex is zero-only
    if r.domain != 'full':
        x = project(x, r.domain, r.lo, r.hi)

    out[:, keep] = x
    return out.reshape(v.shape)
