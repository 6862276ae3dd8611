"""Distributed ADMM for Laplacian-regularized stratified model fitting.

Minimizes  sum_k l_k(theta_k) + sum_k r(theta_k) + (1/2) tr(theta^T L theta)
in the consensus form theta = theta_hat, theta_tilde = theta_hat. Each
iteration runs

  1. theta       = prox_{lambda l_k}(theta_hat - u)          per node
  2. theta_tilde = prox_{lambda r}(theta_hat - u_tilde)      per node
  3. (L + (2/lambda) I) theta_hat = (1/lambda)(theta + u + theta_tilde + u_tilde)  per column
  4. u += theta - theta_hat;  u_tilde += theta_tilde - theta_hat

with u, u_tilde the scaled duals, then checks the stopping criterion and
adapts the penalty lambda.
"""

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import StratFitError
from .graph import laplacian_quadratic
from .laplacian_solve import RegularizedSystem, solve_cd, solve_cg, solve_dense
from .logger import logger
from .losses import LocalLosses
from .regularizers import Regularizer, project, reg_eval, reg_prox

LAPLACIAN_SOLVERS = ('cg', 'cd', 'dense')


@dataclass(frozen=True)
class SolverConfig:
    """ADMM settings.

    Attributes:
        lambda0: Initial penalty
        mu: Residual ratio that triggers a penalty change
        tau_incr: Divisor applied to lambda when the primal residual dominates
        tau_decr: Factor applied to lambda when the dual residual dominates
        eps_abs: Absolute tolerance
        eps_rel: Relative tolerance
        max_iter: ADMM iteration cap
        cg_tol: Relative residual tolerance of the Laplacian solves
        cg_max_iter: CG iteration cap per column (default 10 K)
        threads: Worker threads for the per-node and per-column steps
            (default: number of cores)
        adapt_until: Last iteration at which the penalty may change
        lambda_min: Lower bound on lambda
        lambda_max: Upper bound on lambda
        laplacian_solver: cg, cd (randomized coordinate descent) or dense
        seed: Seed of the coordinate-descent permutations
        verbose: Log the progress line at INFO instead of DEBUG
        track_objective: Evaluate the objective every iteration for the log
    """

    lambda0: float = 1.0
    mu: float = 5.0
    tau_incr: float = 2.0
    tau_decr: float = 2.0
    eps_abs: float = 1e-5
    eps_rel: float = 1e-5
    max_iter: int = 500
    cg_tol: float = 1e-10
    cg_max_iter: Optional[int] = None
    threads: Optional[int] = None
    adapt_until: int = 1000
    lambda_min: float = 1e-8
    lambda_max: float = 1e8
    laplacian_solver: str = 'cg'
    seed: int = 0
    verbose: bool = False
    track_objective: bool = False

    def __post_init__(self):
        if not self.lambda0 > 0:
            raise ValueError(f"lambda0 must be positive, got {self.lambda0}")
        if not self.mu > 1:
            raise ValueError(f"mu must exceed 1, got {self.mu}")
        if not (self.tau_incr > 1 and self.tau_decr > 1):
            raise ValueError("tau_incr and tau_decr must exceed 1")
        if self.eps_abs < 0 or self.eps_rel < 0:
            raise ValueError("tolerances must be nonnegative")
        if int(self.max_iter) < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        if not self.cg_tol > 0:
            raise ValueError(f"cg_tol must be positive, got {self.cg_tol}")
        if self.threads is not None and int(self.threads) < 1:
            raise ValueError(f"threads must be at least 1, got {self.threads}")
        if not 0 < self.lambda_min <= self.lambda0 <= self.lambda_max:
            raise ValueError("need 0 < lambda_min <= lambda0 <= lambda_max")
        if self.laplacian_solver not in LAPLACIAN_SOLVERS:
            raise ValueError(f"unknown laplacian solver {self.laplacian_solver!r}; "
                             f"expected one of {LAPLACIAN_SOLVERS}")

    @classmethod
    def from_dict(cls, spec: Mapping[str, Any]) -> 'SolverConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(spec) - known
        if unknown:
            raise ValueError(f"unknown solver settings: {sorted(unknown)}")
        return cls(**dict(spec))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_params(self, **changes: Any) -> 'SolverConfig':
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    @property
    def workers(self) -> int:
        return int(self.threads) if self.threads else (os.cpu_count() or 1)


@dataclass
class SolverState:
    """Iterates of one ADMM run; every block is K x n."""

    theta: np.ndarray
    theta_tilde: np.ndarray
    theta_hat: np.ndarray
    u: np.ndarray
    u_tilde: np.ndarray
    lam: float
    iteration: int = 0
    theta_hat_prev: Optional[np.ndarray] = None
    history: List[Tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        shape = np.shape(self.theta_hat)
        for name in ('theta', 'theta_tilde', 'u', 'u_tilde'):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        if not self.lam > 0:
            raise ValueError(f"penalty must be positive, got {self.lam}")
        if self.theta_hat_prev is None:
            self.theta_hat_prev = np.array(self.theta_hat, dtype=float)

    @classmethod
    def zeros(cls, K: int, n: int, lam: float) -> 'SolverState':
        """All-zero initial point."""
        def z():
            return np.zeros((K, n))
        return cls(z(), z(), z(), z(), z(), float(lam))

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.theta_hat.shape)

    def copy(self) -> 'SolverState':
        return SolverState(self.theta.copy(), self.theta_tilde.copy(), self.theta_hat.copy(),
                           self.u.copy(), self.u_tilde.copy(), self.lam, self.iteration,
                           self.theta_hat_prev.copy(), list(self.history))


@dataclass
class FitResult:
    """Outcome of one ADMM run.

    ``params`` is the consensus iterate theta_hat projected onto the model
    domain; when the run hit max_iter it is the iterate with the smallest
    residual relative to its tolerance.
    """

    params: np.ndarray
    state: SolverState
    converged: bool
    iterations: int
    r_norm: float
    s_norm: float
    objective: float
    elapsed: float

    @property
    def history(self) -> List[Tuple[float, float]]:
        return self.state.history

    def report(self) -> Dict[str, Any]:
        return {
            'converged': self.converged,
            'iterations': self.iterations,
            'r_norm': self.r_norm,
            's_norm': self.s_norm,
            'objective': self.objective,
            'lambda': self.state.lam,
            'wall_time': self.elapsed,
        }


def residuals(state: SolverState) -> Tuple[float, float]:
    """Primal and dual residual norms of the latest iteration.

    r = (theta - theta_hat, theta_tilde - theta_hat) and
    s = -(1/lambda)(theta_hat+ - theta_hat, theta_hat+ - theta_hat),
    both stacked 2Kn-vectors.
    """
    r = math.sqrt(float(np.sum((state.theta - state.theta_hat) ** 2))
                  + float(np.sum((state.theta_tilde - state.theta_hat) ** 2)))
    delta = float(np.linalg.norm(state.theta_hat - state.theta_hat_prev))
    s = math.sqrt(2.0) * delta / state.lam
    return r, s


def tolerances(state: SolverState, cfg: SolverConfig, r: float, s: float) -> Tuple[float, float]:
    """(eps_pri, eps_dual) for the current iterate."""
    K, n = state.shape
    root = math.sqrt(2 * K * n)
    dual_norm = math.sqrt(float(np.sum(state.u ** 2)) + float(np.sum(state.u_tilde ** 2)))
    eps_pri = root * cfg.eps_abs + cfg.eps_rel * max(r, s)
    eps_dual = root * cfg.eps_abs + cfg.eps_rel / state.lam * dual_norm
    return eps_pri, eps_dual


def check_stop(state: SolverState, cfg: SolverConfig,
               r: Optional[float] = None, s: Optional[float] = None) -> bool:
    """True iff ||r|| <= eps_pri and ||s|| <= eps_dual."""
    if r is None or s is None:
        r, s = residuals(state)
    eps_pri, eps_dual = tolerances(state, cfg, r, s)
    return r <= eps_pri and s <= eps_dual


def adapt_penalty(state: SolverState, cfg: SolverConfig,
                  r: Optional[float] = None, s: Optional[float] = None) -> float:
    """Residual-balancing penalty update with dual rescaling, in place.

    lambda is divided by tau_incr when ||r|| > mu ||s|| and multiplied by
    tau_decr when ||s|| > mu ||r||, within [lambda_min, lambda_max]. The
    scaled duals are multiplied by lambda_new / lambda_old so u / lambda is
    unchanged.

    Returns:
        The rescale factor c (1.0 when lambda is unchanged)
    """
    if r is None or s is None:
        r, s = residuals(state)
    old = state.lam
    if r > cfg.mu * s:
        new = old / cfg.tau_incr
    elif s > cfg.mu * r:
        new = old * cfg.tau_decr
    else:
        return 1.0
    new = min(max(new, cfg.lambda_min), cfg.lambda_max)
    if new == old:
        return 1.0
    if new in (cfg.lambda_min, cfg.lambda_max):
        logger.warning(f"penalty reached its bound {new:.3e}")
    c = new / old
    state.u *= c
    state.u_tilde *= c
    state.lam = new
    return c


def objective(losses: LocalLosses, r: Regularizer, L: sp.spmatrix, theta: np.ndarray) -> float:
    """Fitting objective sum_k l_k + sum_k r + (1/2) tr(theta^T L theta)."""
    theta = np.asarray(theta, dtype=float).reshape(losses.K, -1)
    return losses.evaluate(theta) + reg_eval(r, theta) + laplacian_quadratic(L, theta)


def feasible(losses: LocalLosses, r: Regularizer, theta: np.ndarray) -> np.ndarray:
    """Project a parameter block onto the model domain and then the regularizer's set."""
    out = losses.project(theta)
    if r.domain != 'full':
        keep = ~r.free_mask(out.shape[1])
        out[:, keep] = project(out[:, keep], r.domain, r.lo, r.hi)
    return out


def _laplacian_step(L: sp.csr_matrix, lam: float, rhs: np.ndarray, start: np.ndarray,
                    cfg: SolverConfig, executor: Optional[ThreadPoolExecutor]) -> np.ndarray:
    c = 2.0 / lam
    if cfg.laplacian_solver == 'dense':
        return solve_dense(L, c, rhs)
    if cfg.laplacian_solver == 'cd':
        results = [solve_cd(L, c, rhs[:, j], seed=cfg.seed + j, tol=cfg.cg_tol, x0=start[:, j])
                   for j in range(rhs.shape[1])]
        missed = [res.residual for res in results if not res.converged]
        if missed:
            logger.warning(f"Laplacian solve missed cg_tol={cfg.cg_tol:.1e} in {len(missed)} "
                           f"column(s) (worst relative residual {max(missed):.3e})")
        return np.column_stack([res.x for res in results])
    result = solve_cg(RegularizedSystem(L, c, rhs, start), tol=cfg.cg_tol,
                      max_iter=cfg.cg_max_iter, executor=executor)
    if not result.converged:
        logger.warning(f"Laplacian solve missed cg_tol={cfg.cg_tol:.1e} "
                       f"(worst relative residual {result.residual:.3e})")
    return result.x


def fit(losses: LocalLosses, r: Regularizer, L: sp.spmatrix,
        cfg: Optional[SolverConfig] = None,
        warm: Optional[SolverState] = None) -> FitResult:
    """Fit all node parameters with distributed ADMM.

    Args:
        losses: Local losses bound to the per-node records
        r: Local regularizer shared by all nodes
        L: K x K graph Laplacian
        cfg: Solver settings
        warm: State to start from (zeros when None)

    Returns:
        FitResult; ``converged`` is False when max_iter was reached

    Raises:
        ProxError: If a local prox fails, with the node index
    """
    cfg = cfg or SolverConfig()
    L = sp.csr_matrix(L)
    K, n = losses.K, losses.size
    if L.shape != (K, K):
        raise StratFitError(f"Laplacian is {L.shape[0]} x {L.shape[1]} but there are {K} nodes")

    if warm is None:
        state = SolverState.zeros(K, n, cfg.lambda0)
    else:
        if warm.shape != (K, n):
            raise StratFitError(f"warm start has shape {warm.shape}, expected {(K, n)}")
        state = warm.copy()
        state.theta_hat_prev = state.theta_hat.copy()
        state.history = []
    first = state.iteration
    state.iteration = 0

    level = logging.INFO if cfg.verbose else logging.DEBUG
    start_time = time.perf_counter()
    best = (math.inf, state.theta_hat.copy(), math.inf, math.inf)
    converged = False
    r_norm = s_norm = math.inf

    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        pool = executor if cfg.workers > 1 else None
        for it in range(1, int(cfg.max_iter) + 1):
            lam = state.lam
            state.theta = losses.prox(state.theta_hat - state.u, lam, warm=state.theta, executor=pool)
            state.theta_tilde = reg_prox(r, state.theta_hat - state.u_tilde, lam)
            rhs = (state.theta + state.u + state.theta_tilde + state.u_tilde) / lam
            state.theta_hat_prev = state.theta_hat
            state.theta_hat = _laplacian_step(L, lam, rhs, state.theta_hat, cfg, pool)
            state.u = state.u + state.theta - state.theta_hat
            state.u_tilde = state.u_tilde + state.theta_tilde - state.theta_hat
            state.iteration = it

            r_norm, s_norm = residuals(state)
            state.history.append((r_norm, s_norm))
            eps_pri, eps_dual = tolerances(state, cfg, r_norm, s_norm)

            if logger.isEnabledFor(level):
                line = (f"iter={it} r={r_norm:.3e} s={s_norm:.3e} eps_pri={eps_pri:.3e} "
                        f"eps_dual={eps_dual:.3e} lambda={lam:.3e}")
                if cfg.track_objective:
                    value = objective(losses, r, L, feasible(losses, r, state.theta_hat))
                    line += f" objective={value:.6e}"
                logger.log(level, line)

            slack = max(r_norm / eps_pri if eps_pri > 0 else math.inf,
                        s_norm / eps_dual if eps_dual > 0 else math.inf)
            if slack < best[0] or not math.isfinite(best[0]):
                best = (slack, state.theta_hat.copy(), r_norm, s_norm)

            if r_norm <= eps_pri and s_norm <= eps_dual:
                converged = True
                break
            if first + it <= cfg.adapt_until:
                adapt_penalty(state, cfg, r_norm, s_norm)

    if converged:
        theta_hat = state.theta_hat
    else:
        _, theta_hat, r_norm, s_norm = best
        logger.warning(f"ADMM did not converge in {cfg.max_iter} iterations "
                       f"(best r={r_norm:.3e}, s={s_norm:.3e})")
    params = feasible(losses, r, theta_hat)
    value = objective(losses, r, L, params)
    elapsed = time.perf_counter() - start_time
    state.iteration = first + state.iteration
    logger.log(level, f"ADMM {'converged' if converged else 'stopped'} after "
                      f"{len(state.history)} iterations, objective={value:.6e}, {elapsed:.2f}s")
    return FitResult(params, state, converged, len(state.history), r_norm, s_norm, value, elapsed)


class PathProblem(NamedTuple):
    """One point of a regularization path."""

    losses: LocalLosses
    reg: Regularizer
    L: sp.spmatrix


def regularization_path(problems: Sequence[PathProblem], cfg: Optional[SolverConfig] = None,
                        warm: Optional[SolverState] = None) -> List[Optional[FitResult]]:
    """Fit a sequence of problems, each warm-started from the previous solution.

    A fit that raises is logged and recorded as None; the next fit starts
    from the last successful state.
    """
    results: List[Optional[FitResult]] = []
    shape = None
    for idx, problem in enumerate(problems):
        current = (problem.losses.K, problem.losses.size)
        if shape is not None and current != shape:
            raise StratFitError(f"path problem {idx} has shape {current}, expected {shape}")
        shape = current
        try:
            result = fit(problem.losses, problem.reg, problem.L, cfg, warm)
        except StratFitError as e:
            logger.error(f"path point {idx} failed: {e}")
            results.append(None)
            continue
        warm = result.state
        results.append(result)
    return results
