"""Base data models: local losses, their proximal operators, predictions and scores.

The local loss of node k is the plain sum over its records,
l_k(theta) = sum_{i: z_i = k} l(theta, x_i, y_i), restricted to the model's
parameter domain Theta.
"""

import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.stats
from scipy.special import expit, gammaln, logsumexp, softmax

from .errors import DataError, ProxError
from .logger import logger

DEFAULT_EPS = 1e-5
INNER_MAX_ITER = 100
INNER_GTOL = 1e-9


@dataclass
class NodeData:
    """Records of one node: features (None for no-feature formulations) and outcomes."""

    features: Optional[np.ndarray]
    outcomes: np.ndarray

    def __post_init__(self):
        self.outcomes = np.asarray(self.outcomes, dtype=float)
        if self.features is not None:
            self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
            if self.features.shape[0] != self.outcomes.shape[0]:
                raise DataError(f"{self.features.shape[0]} feature rows but "
                                f"{self.outcomes.shape[0]} outcomes")

    @property
    def count(self) -> int:
        return int(self.outcomes.shape[0])

    @classmethod
    def empty(cls, n_features: Optional[int] = None, outcome_dim: Optional[int] = None) -> 'NodeData':
        features = None if n_features is None else np.zeros((0, n_features))
        outcomes = np.zeros((0,) if not outcome_dim else (0, outcome_dim))
        return cls(features, outcomes)


class LossModel(ABC):
    """A base data model: loss family, parameter shape and domain Theta.

    Subclasses implement the per-node proximal operator through sufficient
    statistics: ``summarize`` turns a NodeData into whatever ``prox_node``
    needs, so the statistics are computed once per fit.
    """

    kind: ClassVar[str]
    uses_features: ClassVar[bool] = False
    metrics: ClassVar[Tuple[str, ...]] = ('anll',)

    def __init__(self, eps: float = DEFAULT_EPS, n_features: Optional[int] = None, **options: Any):
        if not eps > 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.eps = float(eps)
        self.n_features = None if n_features is None else int(n_features)
        self.options = dict(options)

    # -- shape ---------------------------------------------------------

    @property
    @abstractmethod
    def param_shape(self) -> Tuple[int, ...]:
        """Shape of one node's parameter (raises until the shape is known)."""

    @property
    def size(self) -> int:
        """Length n of the flattened parameter vector."""
        return int(np.prod(self.param_shape))

    def configure(self, n_features: Optional[int], outcomes: np.ndarray) -> 'LossModel':
        """Copy of this model with any shape not yet fixed inferred from training data."""
        return type(self)(**self._with_defaults(n_features, outcomes))

    def _with_defaults(self, n_features: Optional[int], outcomes: np.ndarray) -> Dict[str, Any]:
        spec = self.to_dict()
        spec.pop('kind')
        if self.uses_features and spec.get('n_features') is None:
            spec['n_features'] = 1 if n_features is None else n_features
        return spec

    def to_dict(self) -> Dict[str, Any]:
        out = {'kind': self.kind, 'eps': self.eps}
        if self.uses_features:
            out['n_features'] = self.n_features
        out.update(self.options)
        return out

    def intercept_coords(self) -> Tuple[int, ...]:
        """Flattened parameter coordinates that multiply the last design column."""
        return (-1,)

    def _features(self) -> int:
        if self.n_features is None:
            raise DataError(f"{self.kind}: number of features is not set")
        return self.n_features

    # -- data ----------------------------------------------------------

    def design(self, data: NodeData) -> np.ndarray:
        """Feature matrix, a column of ones when the data has no features."""
        if data.features is None:
            return np.ones((data.count, 1))
        return data.features

    def check_data(self, data: NodeData) -> None:
        """Validate outcome domain and feature arity of a node's records."""
        if self.uses_features:
            X = self.design(data)
            if X.shape[1] != self._features():
                raise DataError(f"{self.kind}: expected {self._features()} features, got {X.shape[1]}")

    def summarize(self, data: NodeData) -> Any:
        """Sufficient statistics of a node's records for prox evaluation."""
        return data

    def prepare(self, stats: Sequence[Any]) -> Any:
        """Pack per-node statistics for ``prox_block``."""
        return list(stats)

    # -- domain --------------------------------------------------------

    def project(self, v: np.ndarray) -> np.ndarray:
        """Euclidean projection onto Theta (identity for unconstrained models)."""
        return np.array(v, dtype=float)

    def in_domain(self, theta: np.ndarray) -> bool:
        return bool(np.all(np.isfinite(theta)))

    # -- core ----------------------------------------------------------

    @abstractmethod
    def evaluate(self, theta: np.ndarray, data: NodeData) -> float:
        """Local loss l_k(theta); +inf outside Theta, 0 for no records."""

    @abstractmethod
    def prox_node(self, v: np.ndarray, t: float, stats: Any,
                  warm: Optional[np.ndarray] = None) -> np.ndarray:
        """prox_{t l_k}(v) over Theta from sufficient statistics."""

    def prox(self, v: np.ndarray, t: float, data: NodeData,
             warm: Optional[np.ndarray] = None) -> np.ndarray:
        """prox_{t l_k}(v) = argmin_{theta in Theta} t l_k(theta) + (1/2)||theta - v||^2."""
        if not t > 0:
            raise ValueError(f"prox step t must be positive, got {t}")
        v = np.asarray(v, dtype=float).ravel()
        if v.size != self.size:
            raise DataError(f"{self.kind}: parameter of length {v.size}, expected {self.size}")
        stats = self.summarize(data)
        return self.prox_block(v[None, :], t, self.prepare([stats]),
                               None if warm is None else np.asarray(warm, dtype=float).reshape(1, -1))[0]

    def prox_block(self, V: np.ndarray, t: float, prepared: Any,
                   warm: Optional[np.ndarray] = None,
                   executor: Optional[ThreadPoolExecutor] = None) -> np.ndarray:
        """Row-wise prox for all K nodes; rows are independent."""
        K = V.shape[0]

        def one(k: int) -> np.ndarray:
            start = None if warm is None else warm[k]
            try:
                out = self.prox_node(V[k], t, prepared[k], start)
            except ProxError as e:
                raise ProxError(str(e), node=k)
            except (ValueError, np.linalg.LinAlgError, FloatingPointError) as e:
                raise ProxError(f"{self.kind} prox failed: {e}", node=k)
            if not np.all(np.isfinite(out)):
                raise ProxError(f"{self.kind} prox returned non-finite values", node=k)
            return out

        if executor is not None and K > 1:
            rows = list(executor.map(one, range(K)))
        else:
            rows = [one(k) for k in range(K)]
        return np.vstack(rows) if rows else np.zeros_like(V)

    @abstractmethod
    def record_nll(self, theta: np.ndarray, data: NodeData) -> np.ndarray:
        """Per-record negative log-likelihood."""

    @abstractmethod
    def point_predict(self, theta: np.ndarray, data: NodeData) -> np.ndarray:
        """Per-record point prediction."""

    def predict(self, theta: np.ndarray, x: Optional[np.ndarray] = None) -> Any:
        """Prediction for one record (point value or distribution object)."""
        features = None if x is None else np.asarray(x, dtype=float).reshape(1, -1)
        if self.uses_features and features is not None and features.shape[1] != self._features():
            raise DataError(f"{self.kind}: expected {self._features()} features, got {features.shape[1]}")
        data = NodeData(features, np.zeros(1))
        return self.point_predict(np.asarray(theta, dtype=float), data)[0]

    @property
    def labels(self) -> Tuple[float, ...]:
        """Outcome values matching the columns of ``predict_proba``."""
        raise DataError(f"{self.kind} does not predict class probabilities")

    def predict_proba(self, theta: np.ndarray, data: NodeData) -> np.ndarray:
        """Per-record class probabilities, one column per entry of ``labels``."""
        raise DataError(f"{self.kind} does not predict class probabilities")

    def bind(self, datas: Sequence[NodeData]) -> 'LocalLosses':
        """Attach per-node records, validating them and caching their statistics."""
        for k, data in enumerate(datas):
            try:
                self.check_data(data)
            except DataError as e:
                raise DataError(f"node {k}: {e}")
        return LocalLosses(self, list(datas))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.to_dict()})"


class LocalLosses:
    """The K local losses l_1, ..., l_K of a fit: one model, per-node records."""

    def __init__(self, model: LossModel, datas: List[NodeData]):
        self.model = model
        self.datas = datas
        self.prepared = model.prepare([model.summarize(d) for d in datas])

    @property
    def K(self) -> int:
        return len(self.datas)

    @property
    def size(self) -> int:
        return self.model.size

    def prox(self, V: np.ndarray, t: float, warm: Optional[np.ndarray] = None,
             executor: Optional[ThreadPoolExecutor] = None) -> np.ndarray:
        return self.model.prox_block(V, t, self.prepared, warm, executor)

    def evaluate(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float).reshape(self.K, -1)
        return float(sum(self.model.evaluate(theta[k], d) for k, d in enumerate(self.datas)))

    def project(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(self.K, -1)
        return np.vstack([self.model.project(row) for row in theta]) if self.K else theta


def _minimize_smooth(fun_grad, v: np.ndarray, t: float, warm: Optional[np.ndarray],
                     kind: str) -> np.ndarray:
    """Quasi-Newton minimization of t f(theta) + (1/2)||theta - v||^2."""
    gtol = INNER_GTOL * max(1.0, float(np.linalg.norm(v)))

    def objective(theta):
        f, g = fun_grad(theta)
        d = theta - v
        return t * f + 0.5 * float(d @ d), t * g + d

    x0 = v.copy() if warm is None else np.asarray(warm, dtype=float).copy()
    result = scipy.optimize.minimize(objective, x0, jac=True, method='L-BFGS-B',
                                     options={'maxiter': INNER_MAX_ITER, 'gtol': gtol,
                                              'ftol': 1e-16, 'maxcor': 20})
    theta = result.x
    if not np.all(np.isfinite(theta)):
        raise ProxError(f"{kind} inner solver diverged")
    grad_norm = float(np.linalg.norm(objective(theta)[1]))
    if grad_norm > 10 * gtol:
        logger.debug(f"{kind} prox: inner solver stopped with gradient norm {grad_norm:.3e} "
                     f"after {result.nit} iterations")
    return theta


# -- regression and classification ------------------------------------


class SquareLoss(LossModel):
    """Least-squares regression, l = (1/2)(x^T theta - y)^2, predictor x^T theta."""

    kind = 'square-regression'
    uses_features = True
    metrics = ('rmse',)

    @property
    def param_shape(self) -> Tuple[int, ...]:
        return (self._features(),)

    def summarize(self, data: NodeData) -> '_QuadraticStats':
        X = self.design(data)
        return _QuadraticStats(X.T @ X, X.T @ data.outcomes)

    def evaluate(self, theta, data):
        if data.count == 0:
            return 0.0
        r = self.design(data) @ np.ravel(theta) - data.outcomes
        return 0.5 * float(r @ r)

    def prox_node(self, v, t, stats, warm=None):
        return stats.solve(v, t)

    def record_nll(self, theta, data):
        raise DataError("anll is not defined for square-regression; use rmse")

    def point_predict(self, theta, data):
        return self.design(data) @ np.ravel(theta)


class _QuadraticStats:
    """X^T X and X^T y of one node, with the factorization of I + t X^T X cached per t."""

    def __init__(self, gram: np.ndarray, moment: np.ndarray):
        self.gram = gram
        self.moment = moment
        self._t = None
        self._factor = None

    def solve(self, v: np.ndarray, t: float) -> np.ndarray:
        if not np.any(self.gram):
            return v.copy()
        if self._t != t:
            A = np.eye(self.gram.shape[0]) + t * self.gram
            self._factor = scipy.linalg.cho_factor(A)
            self._t = t
        return scipy.linalg.cho_solve(self._factor, v + t * self.moment)


class LogisticLoss(LossModel):
    """Boolean classification, l = log(1 + exp(-y x^T theta)) with y in {-1, +1}."""

    kind = 'logistic'
    uses_features = True
    metrics = ('anll', 'error')

    @property
    def param_shape(self):
        return (self._features(),)

    def check_data(self, data):
        super().check_data(data)
        if data.count and not np.all(np.isin(data.outcomes, (-1.0, 1.0))):
            raise DataError("logistic outcomes must be -1 or +1")

    def _fun_grad(self, X, y):
        def fun_grad(theta):
            margin = y * (X @ theta)
            f = float(np.sum(np.logaddexp(0.0, -margin)))
            g = -X.T @ (y * expit(-margin))
            return f, g
        return fun_grad

    def evaluate(self, theta, data):
        if data.count == 0:
            return 0.0
        return self._fun_grad(self.design(data), data.outcomes)(np.ravel(theta))[0]

    def prox_node(self, v, t, stats, warm=None):
        if stats.count == 0:
            return v.copy()
        return _minimize_smooth(self._fun_grad(self.design(stats), stats.outcomes), v, t, warm, self.kind)

    @property
    def labels(self):
        return (-1.0, 1.0)

    def predict_proba(self, theta, data):
        """Columns P(y = -1 | x), P(y = +1 | x)."""
        margin = self.design(data) @ np.ravel(theta)
        return np.column_stack([expit(-margin), expit(margin)])

    def record_nll(self, theta, data):
        return np.logaddexp(0.0, -data.outcomes * (self.design(data) @ np.ravel(theta)))

    def point_predict(self, theta, data):
        # sign with ties broken toward +1
        return np.where(self.design(data) @ np.ravel(theta) >= 0, 1.0, -1.0)


class MultinomialLoss(LossModel):
    """Multi-class logistic regression; theta is an n x M matrix, y in {1..M}."""

    kind = 'multinomial-logistic'
    uses_features = True
    metrics = ('anll', 'error')

    def __init__(self, eps=DEFAULT_EPS, n_features=None, classes=None, **options):
        super().__init__(eps, n_features, **options)
        self.classes = None if classes is None else int(classes)

    def to_dict(self):
        out = super().to_dict()
        out['classes'] = self.classes
        return out

    def _with_defaults(self, n_features, outcomes):
        spec = super()._with_defaults(n_features, outcomes)
        if spec.get('classes') is None:
            spec['classes'] = int(np.max(outcomes)) if outcomes.size else 2
        return spec

    @property
    def param_shape(self):
        if self.classes is None:
            raise DataError(f"{self.kind}: number of classes is not set")
        return (self._features(), self.classes)

    def intercept_coords(self):
        # row-major n x M: the constant feature's row is the last M entries
        return tuple(range(-self.param_shape[1], 0))

    @property
    def labels(self):
        return tuple(float(m) for m in range(1, self.param_shape[1] + 1))

    def check_data(self, data):
        super().check_data(data)
        y = data.outcomes
        if data.count and not (np.all(y == np.round(y)) and y.min() >= 1 and y.max() <= self.param_shape[1]):
            raise DataError(f"multinomial outcomes must be integers in 1..{self.param_shape[1]}")

    def _fun_grad(self, X, y):
        shape = self.param_shape
        labels = y.astype(int) - 1
        onehot = np.zeros((len(labels), shape[1]))
        onehot[np.arange(len(labels)), labels] = 1.0

        def fun_grad(theta):
            scores = X @ theta.reshape(shape)
            f = float(np.sum(logsumexp(scores, axis=1)) - np.sum(scores[np.arange(len(labels)), labels]))
            g = X.T @ (softmax(scores, axis=1) - onehot)
            return f, g.ravel()
        return fun_grad

    def evaluate(self, theta, data):
        if data.count == 0:
            return 0.0
        return self._fun_grad(self.design(data), data.outcomes)(np.ravel(theta))[0]

    def prox_node(self, v, t, stats, warm=None):
        if stats.count == 0:
            return v.copy()
        return _minimize_smooth(self._fun_grad(self.design(stats), stats.outcomes), v, t, warm, self.kind)

    def predict_proba(self, theta, data):
        """Class probabilities per record (columns are classes 1..M)."""
        return softmax(self.design(data) @ np.reshape(theta, self.param_shape), axis=1)

    def record_nll(self, theta, data):
        scores = self.design(data) @ np.reshape(theta, self.param_shape)
        labels = data.outcomes.astype(int) - 1
        return logsumexp(scores, axis=1) - scores[np.arange(len(labels)), labels]

    def point_predict(self, theta, data):
        scores = self.design(data) @ np.reshape(theta, self.param_shape)
        return np.argmax(scores, axis=1).astype(float) + 1.0


class ExponentialLoss(LossModel):
    """Exponential regression with rate exp(x^T theta), l = -x^T theta + exp(x^T theta) y."""

    kind = 'exponential-regression'
    uses_features = True
    metrics = ('anll', 'rmse')

    @property
    def param_shape(self):
        return (self._features(),)

    def check_data(self, data):
        super().check_data(data)
        if data.count and np.any(data.outcomes < 0):
            raise DataError("exponential-regression outcomes must be nonnegative")

    def _fun_grad(self, X, y):
        def fun_grad(theta):
            eta = X @ theta
            rate = np.exp(eta)
            f = float(np.sum(-eta + rate * y))
            g = X.T @ (rate * y - 1.0)
            return f, g
        return fun_grad

    def evaluate(self, theta, data):
        if data.count == 0:
            return 0.0
        return self._fun_grad(self.design(data), data.outcomes)(np.ravel(theta))[0]

    def prox_node(self, v, t, stats, warm=None):
        if stats.count == 0:
            return v.copy()
        return _minimize_smooth(self._fun_grad(self.design(stats), stats.outcomes), v, t, warm, self.kind)

    def rate(self, theta, data):
        """Per-record rate exp(x^T theta)."""
        return np.exp(self.design(data) @ np.ravel(theta))

    def record_nll(self, theta, data):
        eta = self.design(data) @ np.ravel(theta)
        return -eta + np.exp(eta) * data.outcomes

    def point_predict(self, theta, data):
        # mean of the exponential distribution
        return 1.0 / self.rate(theta, data)

    def predict(self, theta, x=None):
        features = None if x is None else np.asarray(x, dtype=float).reshape(1, -1)
        if features is not None and features.shape[1] != self._features():
            raise DataError(f"{self.kind}: expected {self._features()} features, got {features.shape[1]}")
        rate = self.rate(theta, NodeData(features, np.zeros(1)))[0]
        return scipy.stats.expon(scale=1.0 / rate)


# -- distribution estimates -------------------------------------------


class PoissonLoss(LossModel):
    """Poisson distribution, l(theta, y) = -y log theta + theta, Theta = [eps, inf)."""

    kind = 'poisson-dist'
    metrics = ('anll', 'rmse')

    @property
    def param_shape(self):
        return (1,)

    def check_data(self, data):
        y = data.outcomes
        if data.count and not (np.all(y >= 0) and np.all(y == np.round(y))):
            raise DataError("poisson outcomes must be nonnegative integers")

    def summarize(self, data):
        return float(data.count), float(np.sum(data.outcomes))

    def prepare(self, stats):
        arr = np.array(stats, dtype=float).reshape(-1, 2)
        return arr[:, 0], arr[:, 1]

    def project(self, v):
        return np.maximum(np.asarray(v, dtype=float), self.eps)

    def in_domain(self, theta):
        return bool(np.all(np.asarray(theta) >= self.eps * (1 - 1e-12)))

    def evaluate(self, theta, data):
        theta = float(np.ravel(theta)[0])
        if not self.in_domain(theta):
            return float('inf')
        if data.count == 0:
            return 0.0
        return float(-np.sum(data.outcomes) * math.log(theta) + data.count * theta)

    def prox_node(self, v, t, stats, warm=None):
        N, S = stats
        return self.prox_block(np.reshape(v, (1, 1)), t, (np.array([N]), np.array([S])))[0]

    def prox_block(self, V, t, prepared, warm=None, executor=None):
        N, S = prepared
        v = V[:, 0]
        theta = (v - t * N + np.sqrt((t * N - v) ** 2 + 4 * t * S)) / 2
        return np.maximum(theta, self.eps)[:, None]

    def record_nll(self, theta, data):
        lam = float(np.ravel(theta)[0])
        y = data.outcomes
        return lam - y * np.log(lam) + gammaln(y + 1)

    def point_predict(self, theta, data):
        return np.full(data.count, float(np.ravel(theta)[0]))

    def predict(self, theta, x=None):
        return scipy.stats.poisson(float(np.ravel(theta)[0]))


class BernoulliLoss(LossModel):
    """Bernoulli distribution over 0/1 outcomes, Theta = [eps, 1 - eps]."""

    kind = 'bernoulli-dist'
    metrics = ('anll', 'rmse', 'error')

    @property
    def param_shape(self):
        return (1,)

    def check_data(self, data):
        if data.count and not np.all(np.isin(data.outcomes, (0.0, 1.0))):
            raise DataError("bernoulli outcomes must be 0 or 1")

    def summarize(self, data):
        return float(data.count), float(np.sum(data.outcomes))

    def prepare(self, stats):
        arr = np.array(stats, dtype=float).reshape(-1, 2)
        return arr[:, 0], arr[:, 1]

    def project(self, v):
        return np.clip(np.asarray(v, dtype=float), self.eps, 1 - self.eps)

    def in_domain(self, theta):
        theta = np.asarray(theta)
        slack = 1e-12
        return bool(np.all((theta >= self.eps - slack) & (theta <= 1 - self.eps + slack)))

    def evaluate(self, theta, data):
        theta = float(np.ravel(theta)[0])
        if not self.in_domain(theta):
            return float('inf')
        if data.count == 0:
            return 0.0
        S = float(np.sum(data.outcomes))
        return float(-S * math.log(theta) - (data.count - S) * math.log(1 - theta))

    def prox_node(self, v, t, stats, warm=None):
        N, S = stats
        return self.prox_block(np.reshape(v, (1, 1)), t, (np.array([N]), np.array([S])))[0]

    def prox_block(self, V, t, prepared, warm=None, executor=None):
        N, S = prepared
        v = V[:, 0]
        theta = bernoulli_prox_root(v, t, N, S)
        return np.clip(theta, self.eps, 1 - self.eps)[:, None]

    def record_nll(self, theta, data):
        p = float(np.ravel(theta)[0])
        y = data.outcomes
        return -(y * np.log(p) + (1 - y) * np.log1p(-p))

    def point_predict(self, theta, data):
        return np.full(data.count, float(np.ravel(theta)[0]))

    def predict(self, theta, x=None):
        return scipy.stats.bernoulli(float(np.ravel(theta)[0]))


def bernoulli_prox_root(v: np.ndarray, t: float, N: np.ndarray, S: np.ndarray,
                        max_iter: int = 200) -> np.ndarray:
    """Minimizer over [0, 1] of -S log p - (N - S) log(1 - p) + (p - v)^2 / (2t).

    The stationarity condition g(p) = -S/p + (N-S)/(1-p) + (p-v)/t = 0 is
    increasing in p, equivalently p^3 - (1+v)p^2 - (Nt - v)p + tS = 0.
    Solved elementwise by Newton steps kept inside a shrinking bracket,
    falling back to bisection.
    """
    v = np.asarray(v, dtype=float)
    N = np.broadcast_to(np.asarray(N, dtype=float), v.shape)
    S = np.broadcast_to(np.asarray(S, dtype=float), v.shape)
    F = N - S
    out = np.clip(v, 0.0, 1.0)
    has_data = N > 0

    # Boundary minimizers: g(0+) >= 0 needs S = 0, g(1-) <= 0 needs F = 0
    at_zero = has_data & (S == 0) & (F - v / t >= 0)
    at_one = has_data & (F == 0) & (-S + (1 - v) / t <= 0)
    out[at_zero] = 0.0
    out[at_one] = 1.0
    active = has_data & ~at_zero & ~at_one
    if not np.any(active):
        return out

    va, Sa, Fa = v[active], S[active], F[active]
    lo = np.zeros_like(va)
    hi = np.ones_like(va)
    p = np.full_like(va, 0.5)
    with np.errstate(divide='ignore', invalid='ignore'):
        for _ in range(max_iter):
            g = np.where(Sa > 0, -Sa / p, 0.0) + np.where(Fa > 0, Fa / (1 - p), 0.0) + (p - va) / t
            dg = np.where(Sa > 0, Sa / p ** 2, 0.0) + np.where(Fa > 0, Fa / (1 - p) ** 2, 0.0) + 1.0 / t
            hi = np.where(g > 0, p, hi)
            lo = np.where(g <= 0, p, lo)
            step = p - g / dg
            inside = (step > lo) & (step < hi) & np.isfinite(step)
            new_p = np.where(inside, step, 0.5 * (lo + hi))
            done = (np.abs(new_p - p) <= 1e-15) | (hi - lo <= 1e-15)
            p = new_p
            if np.all(done):
                break
    out[active] = p
    return out


class DiscreteLoss(LossModel):
    """Non-parametric discrete distribution on {1..M}; Theta is the probability simplex."""

    kind = 'discrete-dist'
    metrics = ('anll', 'error')

    def __init__(self, eps=DEFAULT_EPS, n_features=None, classes=None, **options):
        super().__init__(eps, n_features, **options)
        self.classes = None if classes is None else int(classes)

    def to_dict(self):
        out = super().to_dict()
        out['classes'] = self.classes
        return out

    def _with_defaults(self, n_features, outcomes):
        spec = super()._with_defaults(n_features, outcomes)
        if spec.get('classes') is None:
            spec['classes'] = int(np.max(outcomes)) if outcomes.size else 2
        return spec

    @property
    def param_shape(self):
        if self.classes is None:
            raise DataError(f"{self.kind}: number of categories is not set")
        return (self.classes,)

    def check_data(self, data):
        y = data.outcomes
        if data.count and not (np.all(y == np.round(y)) and y.min() >= 1 and y.max() <= self.classes):
            raise DataError(f"discrete outcomes must be integers in 1..{self.classes}")

    def summarize(self, data):
        counts = np.zeros(self.param_shape[0])
        if data.count:
            np.add.at(counts, data.outcomes.astype(int) - 1, 1.0)
        return counts

    def project(self, v):
        from .regularizers import project_simplex
        return project_simplex(np.asarray(v, dtype=float))

    def in_domain(self, theta):
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= -1e-12) and abs(theta.sum() - 1.0) <= 1e-9)

    def evaluate(self, theta, data):
        theta = np.ravel(theta)
        if not self.in_domain(theta):
            return float('inf')
        counts = self.summarize(data)
        used = counts > 0
        if np.any(theta[used] <= 0):
            return float('inf')
        return float(-np.sum(counts[used] * np.log(theta[used])))

    def prox_node(self, v, t, stats, warm=None):
        return simplex_neglog_prox(np.ravel(v), t, stats)

    def record_nll(self, theta, data):
        theta = np.ravel(theta)
        with np.errstate(divide='ignore'):
            return -np.log(theta[data.outcomes.astype(int) - 1])

    def point_predict(self, theta, data):
        return np.full(data.count, float(np.argmax(np.ravel(theta)) + 1))

    def predict(self, theta, x=None):
        p = np.clip(np.ravel(theta), 0.0, None)
        return scipy.stats.rv_discrete(values=(np.arange(1, p.size + 1), p / p.sum()))


def simplex_neglog_prox(v: np.ndarray, t: float, counts: np.ndarray) -> np.ndarray:
    """argmin over the simplex of -sum c_m log p_m + (1/2t)||p - v||^2.

    With multiplier mu on 1^T p = 1 each coordinate is the negative-log prox
    of v_m - t mu: p_m = (a_m + sqrt(a_m^2 + 4 t c_m)) / 2, a_m = v_m - t mu
    (p_m = max(a_m, 0) where c_m = 0). The coordinate sum decreases in mu.
    """
    def coords(mu):
        a = v - t * mu
        return 0.5 * (a + np.sqrt(a * a + 4 * t * counts))

    def excess(mu):
        return float(np.sum(coords(mu)) - 1.0)

    lo = (np.max(v) - 1.0) / t
    step = 1.0 / t
    while excess(lo) < 0:
        lo -= step
        step *= 2
    hi = lo + 1.0 / t
    step = 1.0 / t
    while excess(hi) > 0:
        hi += step
        step *= 2
    mu = scipy.optimize.brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    p = coords(mu)
    return p / p.sum()


class GaussianLoss(LossModel):
    """Gaussian distribution estimate in the precision-matrix form.

    l_k(theta) = sum_i (y_i - mean)^T theta (y_i - mean) - N_k log det theta,
    Theta = {theta symmetric, lambda_min(theta) >= eps}. The parameter is
    the m x m precision matrix flattened row-major.
    """

    kind = 'gaussian-covariance'

    def __init__(self, eps=DEFAULT_EPS, n_features=None, dim=None, mean=None, **options):
        super().__init__(eps, n_features, **options)
        self.dim = None if dim is None else int(dim)
        self.mean = None if mean is None else np.asarray(mean, dtype=float).ravel()

    def to_dict(self):
        out = super().to_dict()
        out['dim'] = self.dim
        out['mean'] = None if self.mean is None else [float(m) for m in self.mean]
        return out

    def _with_defaults(self, n_features, outcomes):
        spec = super()._with_defaults(n_features, outcomes)
        Y = np.asarray(outcomes, dtype=float)
        Y = Y.reshape(len(Y), -1)
        if spec.get('dim') is None:
            spec['dim'] = Y.shape[1]
        if spec.get('mean') is None:
            spec['mean'] = list(Y.mean(axis=0)) if len(Y) else [0.0] * spec['dim']
        return spec

    @property
    def param_shape(self):
        if self.dim is None:
            raise DataError(f"{self.kind}: outcome dimension is not set")
        return (self.dim, self.dim)

    def _centered(self, data):
        Y = data.outcomes.reshape(data.count, -1)
        if Y.shape[1] != self.dim:
            raise DataError(f"gaussian outcomes have dimension {Y.shape[1]}, expected {self.dim}")
        mean = np.zeros(self.dim) if self.mean is None else self.mean
        return Y - mean

    def check_data(self, data):
        if data.count:
            self._centered(data)

    def summarize(self, data):
        Y = self._centered(data) if data.count else np.zeros((0, self.dim))
        return Y.T @ Y, float(data.count)

    def project(self, v):
        m = self.dim
        V = np.reshape(v, (m, m))
        V = 0.5 * (V + V.T)
        w, Q = scipy.linalg.eigh(V)
        return ((Q * np.maximum(w, self.eps)) @ Q.T).ravel()

    def in_domain(self, theta):
        T = np.reshape(theta, self.param_shape)
        if not np.allclose(T, T.T, atol=1e-10):
            return False
        return bool(np.linalg.eigvalsh(0.5 * (T + T.T)).min() >= self.eps * (1 - 1e-9))

    def evaluate(self, theta, data):
        if not self.in_domain(theta):
            return float('inf')
        if data.count == 0:
            return 0.0
        T = np.reshape(theta, self.param_shape)
        scatter, N = self.summarize(data)
        _, logdet = np.linalg.slogdet(T)
        return float(np.sum(scatter * T) - N * logdet)

    def prox_node(self, v, t, stats, warm=None):
        scatter, N = stats
        if N == 0:
            return self.project(v)
        m = self.dim
        V = np.reshape(v, (m, m))
        V = 0.5 * (V + V.T)
        tn = t * N
        # theta/tn - inv(theta) = V/tn - scatter/N: theta shares its eigenvectors
        s, Q = scipy.linalg.eigh(V / tn - scatter / N)
        w = (tn * s + np.sqrt((tn * s) ** 2 + 4 * tn)) / 2
        return ((Q * np.maximum(w, self.eps)) @ Q.T).ravel()

    def record_nll(self, theta, data):
        T = np.reshape(theta, self.param_shape)
        Y = self._centered(data)
        _, logdet = np.linalg.slogdet(T)
        quad = np.einsum('ij,jk,ik->i', Y, T, Y)
        return 0.5 * (self.dim * math.log(2 * math.pi) - logdet + quad)

    def point_predict(self, theta, data):
        # marginal variance of the first outcome coordinate
        cov = np.linalg.inv(np.reshape(theta, self.param_shape))
        return np.full(data.count, float(cov[0, 0]))

    def covariance(self, theta) -> np.ndarray:
        return np.linalg.inv(np.reshape(theta, self.param_shape))

    def predict(self, theta, x=None):
        mean = np.zeros(self.dim) if self.mean is None else self.mean
        return scipy.stats.multivariate_normal(mean=mean, cov=self.covariance(theta))


LOSSES: Dict[str, Type[LossModel]] = {
    cls.kind: cls for cls in (SquareLoss, LogisticLoss, MultinomialLoss, ExponentialLoss,
                              PoissonLoss, BernoulliLoss, GaussianLoss, DiscreteLoss)
}


def make_loss(kind: str, **options: Any) -> LossModel:
    """Create a loss model by kind name.

    Args:
        kind: One of the names in LOSSES
        **options: eps, n_features, classes, dim, mean as the kind accepts

    Returns:
        LossModel instance
    """
    try:
        cls = LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {sorted(LOSSES)}")
    return cls(**options)


def loss_from_dict(spec: Dict[str, Any]) -> LossModel:
    spec = dict(spec)
    kind = spec.pop('kind')
    return make_loss(kind, **spec)


# -- module-level operations -------------------------------------------


def loss_eval(model: LossModel, theta: np.ndarray, data: NodeData) -> float:
    """Local loss l_k(theta): sum of per-record losses, +inf outside Theta."""
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != model.size:
        raise DataError(f"{model.kind}: parameter of length {theta.size}, expected {model.size}")
    model.check_data(data)
    return model.evaluate(theta, data)


def loss_prox(model: LossModel, v: np.ndarray, t: float, data: NodeData,
              warm: Optional[np.ndarray] = None) -> np.ndarray:
    """prox_{t l_k}(v) restricted to Theta."""
    model.check_data(data)
    return model.prox(v, t, data, warm)


def predict(model: LossModel, theta: np.ndarray, x: Optional[np.ndarray] = None) -> Any:
    """Prediction of one record under parameter theta."""
    return model.predict(theta, x)


def _pooled(model: LossModel, params: np.ndarray, datas: Sequence[NodeData], fn) -> Tuple[float, int]:
    params = np.asarray(params, dtype=float).reshape(len(datas), -1)
    total = 0.0
    count = 0
    for k, data in enumerate(datas):
        if data.count == 0:
            continue
        model.check_data(data)
        total += float(np.sum(fn(params[k], data)))
        count += data.count
    if count == 0:
        raise DataError("no records to score")
    return total, count


def _check_metric(model: LossModel, metric: str) -> None:
    if metric not in model.metrics:
        raise DataError(f"metric {metric!r} is not defined for {model.kind} "
                        f"(available: {', '.join(model.metrics)})")


def score_anll(model: LossModel, params: np.ndarray, datas: Sequence[NodeData]) -> float:
    """Average negative log-likelihood over all records."""
    _check_metric(model, 'anll')
    total, count = _pooled(model, params, datas, model.record_nll)
    return total / count


def score_rmse(model: LossModel, params: np.ndarray, datas: Sequence[NodeData]) -> float:
    """Root-mean-square error of the point predictions."""
    _check_metric(model, 'rmse')
    total, count = _pooled(model, params, datas,
                           lambda theta, d: (model.point_predict(theta, d) - d.outcomes) ** 2)
    return math.sqrt(total / count)


def score_error_rate(model: LossModel, params: np.ndarray, datas: Sequence[NodeData]) -> float:
    """Fraction of misclassified records."""
    _check_metric(model, 'error')
    if isinstance(model, BernoulliLoss):
        def wrong(theta, d):
            return (np.where(model.point_predict(theta, d) >= 0.5, 1.0, 0.0) != d.outcomes)
    else:
        def wrong(theta, d):
            return model.point_predict(theta, d) != d.outcomes
    total, count = _pooled(model, params, datas, wrong)
    return total / count


SCORES = {'anll': score_anll, 'rmse': score_rmse, 'error': score_error_rate}
