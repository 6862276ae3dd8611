"""Stratified models: a base model, a local regularizer and a regularization graph."""

import copy
import difflib
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from . import solver
from .data import Dataset, Standardization, holdout_indices, kfold_indices
from .errors import DataError, DisconnectedGraphWarning, NotFittedError, StratFitError, UnknownNodeError
from .graph import StratGraph, as_key, graph_from_spec, is_connected, laplacian, scale
from .logger import logger
from .losses import SCORES, GaussianLoss, LogisticLoss, LossModel, NodeData, loss_from_dict
from .regularizers import Regularizer


def bind_and_group(data: Dataset, g: StratGraph, outcome_dim: Optional[int] = None) -> List[NodeData]:
    """Split a dataset into the K per-node record sets of a graph.

    Args:
        data: Records to group (features already in design form)
        g: Regularization graph
        outcome_dim: Outcome width for empty vector-outcome slices

    Returns:
        One NodeData per graph node, in node order; data-free nodes get
        empty slices

    Raises:
        UnknownNodeError: If a record's key is not a node, with the
            nearest known keys
    """
    if len(data) and g.K and len(data.keys[0]) != g.key_width:
        raise DataError(f"records carry {len(data.keys[0])} stratification columns "
                        f"but graph keys have {g.key_width}")
    codes = _node_codes(data, g)
    counts = np.bincount(codes, minlength=g.K)
    order = np.argsort(codes, kind='stable')
    groups = np.split(order, np.cumsum(counts)[:-1])
    X = data.features
    Y = data.outcomes
    if outcome_dim is None and Y.ndim > 1:
        outcome_dim = Y.shape[1]
    out = []
    for members in groups:
        features = None if X is None else X[members]
        if len(members) == 0 and Y.ndim > 1:
            out.append(NodeData(features, np.zeros((0, outcome_dim))))
        else:
            out.append(NodeData(features, Y[members]))
    return out


def _node_codes(data: Dataset, g: StratGraph) -> np.ndarray:
    """Node index of every record; every unknown key is listed in the error."""
    index = g.node_index
    codes = np.empty(len(data), dtype=np.int64)
    unknown: List[Tuple[str, ...]] = []
    for i, key in enumerate(data.keys):
        if key in index:
            codes[i] = index[key]
        elif key not in unknown:
            unknown.append(key)
    if unknown:
        raise UnknownNodeError(unknown[0], _nearest_keys(unknown[0], g), unknown[1:])
    return codes


def _nearest_keys(key: Tuple[str, ...], g: StratGraph, n: int = 3) -> List[Tuple[str, ...]]:
    labels = {'|'.join(k): k for k in g.nodes}
    close = difflib.get_close_matches('|'.join(key), list(labels), n=n, cutoff=0.5)
    return [labels[c] for c in close]


def _set_path(spec: Any, path: Sequence[str], value: Any) -> None:
    target = spec
    for part in path[:-1]:
        target = target[int(part)] if isinstance(target, list) else target.setdefault(part, {})
    last = path[-1]
    if isinstance(target, list):
        target[int(last)] = value
    else:
        target[last] = value


@dataclass
class FitReport:
    """Summary of a model fit."""

    result: solver.FitResult
    keys_seen: int
    records: int

    @property
    def converged(self) -> bool:
        return self.result.converged

    def to_dict(self) -> Dict[str, Any]:
        out = self.result.report()
        out['nodes_with_data'] = self.keys_seen
        out['records'] = self.records
        return out


class StratifiedModel:
    """Laplacian-regularized stratified model.

    Fitted models are not modified in place: ``fit`` and ``with_params``
    return new instances.
    """

    def __init__(self, loss: LossModel, reg: Optional[Regularizer], graph: StratGraph,
                 standardize: bool = False, intercept: bool = False,
                 params: Optional[np.ndarray] = None,
                 standardization: Optional[Standardization] = None,
                 graph_spec: Optional[Mapping[str, Any]] = None):
        """Initialize a stratified model.

        Args:
            loss: Base data model
            reg: Local regularizer (zero when None)
            graph: Regularization graph over the stratification values
            standardize: Standardize features with training statistics
            intercept: Append a constant feature
            params: Fitted K x n parameter block
            standardization: Feature transform learned at fit time
            graph_spec: Description the graph was built from, used by
                ``graph.<path>`` hyper-parameters
        """
        self.loss = loss
        self.reg = reg or Regularizer()
        self.graph = graph
        self.standardize = bool(standardize)
        self.intercept = bool(intercept)
        self.standardization = standardization
        self.graph_spec = copy.deepcopy(dict(graph_spec)) if graph_spec is not None else None
        self.params = None if params is None else np.asarray(params, dtype=float).reshape(graph.K, -1)
        if not is_connected(graph):
            warnings.warn(f"regularization graph with {graph.K} nodes is disconnected",
                          DisconnectedGraphWarning, stacklevel=2)

    @property
    def K(self) -> int:
        return self.graph.K

    @property
    def is_fitted(self) -> bool:
        return self.params is not None

    @cached_property
    def L(self) -> sp.csr_matrix:
        return laplacian(self.graph)

    def __repr__(self) -> str:
        state = 'fitted' if self.is_fitted else 'unfitted'
        return f"StratifiedModel({self.loss.kind}, K={self.K}, reg={self.reg.kind}, {state})"

    # -- data ----------------------------------------------------------

    def _outcomes(self, data: Dataset) -> Dataset:
        y = data.outcomes
        # 0/1 labels are read as -1/+1 for the boolean classifier
        if isinstance(self.loss, LogisticLoss) and y.size and np.all(np.isin(y, (0.0, 1.0))) and np.any(y == 0):
            return Dataset(data.keys, data.features, 2 * y - 1, data.key_names,
                           data.feature_names, data.outcome_names)
        return data

    def design(self, data: Dataset) -> Dataset:
        """Records with the learned feature transform applied."""
        if not self.loss.uses_features:
            if data.features is not None:
                raise DataError(f"{self.loss.kind} takes no features, got {data.n_features}")
            return self._outcomes(data)
        if self.standardization is None:
            raise NotFittedError("model has no feature transform; fit it first")
        X = self.standardization.apply(data.features, len(data))
        return self._outcomes(data.with_features(X))

    def node_data(self, data: Dataset) -> List[NodeData]:
        dim = self.loss.dim if isinstance(self.loss, GaussianLoss) else None
        return bind_and_group(self.design(data), self.graph, dim)

    # -- fitting -------------------------------------------------------

    def fit(self, data: Dataset, cfg: Optional[solver.SolverConfig] = None,
            warm: Optional[solver.SolverState] = None) -> Tuple['StratifiedModel', FitReport]:
        """Fit the node parameters to a training set.

        Args:
            data: Training records
            cfg: Solver settings
            warm: Solver state to start from

        Returns:
            (fitted model, fit report)
        """
        std = None
        if self.loss.uses_features:
            std = Standardization.learn(data.features, self.standardize, self.intercept)
        trainer = self._replace(standardization=std, params=None)
        designed = trainer.design(data)
        loss = self.loss.configure(None if std is None else std.n_design, designed.outcomes)
        trainer = trainer._replace(loss=loss)
        datas = trainer.node_data(data)
        losses = loss.bind(datas)
        logger.info(f"fitting {loss.kind} on {len(data)} records over {self.K} nodes "
                    f"({sum(d.count > 0 for d in datas)} with data), n={loss.size}")
        reg = self.reg
        if reg.skip_intercept and self.intercept and loss.uses_features:
            reg = reg.with_params(intercept=loss.intercept_coords())
        result = solver.fit(losses, reg, trainer.L, cfg, warm)
        fitted = trainer._replace(params=result.params)
        return fitted, FitReport(result, sum(d.count > 0 for d in datas), len(data))

    def with_categories(self, data: Dataset) -> 'StratifiedModel':
        """Copy whose category count is fixed from ``data`` when still unset.

        Fits on subsets of ``data`` then share one parameter shape even if a
        subset misses the largest category.
        """
        if getattr(self.loss, 'classes', 0) is not None or not len(data):
            return self
        classes = int(np.max(data.outcomes))
        return self._replace(loss=loss_from_dict({**self.loss.to_dict(), 'classes': classes}))

    def _replace(self, **changes: Any) -> 'StratifiedModel':
        attrs = dict(loss=self.loss, reg=self.reg, graph=self.graph, standardize=self.standardize,
                     intercept=self.intercept, params=self.params,
                     standardization=self.standardization, graph_spec=self.graph_spec)
        attrs.update(changes)
        with warnings.catch_warnings():
            if attrs['graph'] is self.graph:
                warnings.simplefilter('ignore', DisconnectedGraphWarning)
            model = StratifiedModel(**attrs)
        if attrs['graph'] is self.graph and 'L' in self.__dict__:
            model.__dict__['L'] = self.L
        return model

    def with_params(self, overrides: Mapping[str, Any]) -> 'StratifiedModel':
        """Unfitted copy with hyper-parameters changed.

        Keys are ``reg.<field>`` (e.g. ``reg.l2``), ``loss.eps``,
        ``graph.scale`` (multiply every edge weight) or ``graph.<path>``
        into the graph description (e.g. ``graph.product.0.w``).
        """
        reg_changes: Dict[str, Any] = {}
        graph = self.graph
        spec = copy.deepcopy(self.graph_spec) if self.graph_spec is not None else None
        spec_changed = False
        factor = None
        loss = self.loss
        for key, value in overrides.items():
            section, _, rest = key.partition('.')
            if section == 'reg' and rest:
                reg_changes[rest] = value
            elif section == 'graph' and rest == 'scale':
                factor = float(value)
            elif section == 'graph' and rest:
                if spec is None:
                    raise StratFitError(f"hyper-parameter {key!r} needs the graph description")
                _set_path(spec, rest.split('.'), value)
                spec_changed = True
            elif section == 'loss' and rest == 'eps':
                loss = loss_from_dict({**loss.to_dict(), 'eps': float(value)})
            elif section != 'solver':
                raise StratFitError(f"unknown hyper-parameter {key!r}")
        if spec_changed:
            graph = graph_from_spec(spec)
            if graph.nodes != self.graph.nodes:
                raise StratFitError("graph hyper-parameters must keep the node set")
        if factor is not None:
            graph = scale(graph, factor)
        reg = self.reg
        if reg_changes:
            try:
                reg = Regularizer.from_dict({**reg.to_dict(), **reg_changes})
            except (TypeError, ValueError) as e:
                raise StratFitError(f"invalid regularizer hyper-parameters {reg_changes}: {e}")
        return self._replace(loss=loss, reg=reg, graph=graph, graph_spec=spec, params=None)

    # -- prediction ----------------------------------------------------

    def _require_fit(self) -> np.ndarray:
        if self.params is None:
            raise NotFittedError("model is not fitted")
        return self.params

    def node_params(self, z: Any) -> np.ndarray:
        """Parameter of one node, reshaped to the model's parameter shape."""
        params = self._require_fit()
        key = as_key(z)
        try:
            k = self.graph.node_index[key]
        except KeyError:
            raise UnknownNodeError(key, _nearest_keys(key, self.graph))
        return params[k].reshape(self.loss.param_shape)

    def predict(self, z: Any, x: Optional[Sequence[float]] = None) -> Any:
        """Prediction for one record: point value, or a distribution object."""
        theta = self.node_params(z)
        if not self.loss.uses_features:
            if x is not None and len(x):
                raise DataError(f"{self.loss.kind} takes no features")
            return self.loss.predict(theta)
        design = self.standardization.apply(None if x is None else np.reshape(x, (1, -1)), 1)
        return self.loss.predict(theta, design[0])

    def predict_dataset(self, data: Dataset) -> np.ndarray:
        """Point predictions of every record, in record order."""
        params = self._require_fit()
        designed = self.design(data)
        codes = self._codes(designed)
        out = np.empty(len(data))
        for k in np.unique(codes):
            members = np.flatnonzero(codes == k)
            features = None if designed.features is None else designed.features[members]
            node = NodeData(features, np.zeros(len(members)))
            out[members] = self.loss.point_predict(params[k], node)
        return out

    def predict_proba(self, data: Dataset) -> pd.DataFrame:
        """Class probabilities of every record, one column per outcome label."""
        params = self._require_fit()
        designed = self.design(data)
        codes = self._codes(designed)
        labels = self.loss.labels
        out = np.empty((len(data), len(labels)))
        for k in np.unique(codes):
            members = np.flatnonzero(codes == k)
            features = None if designed.features is None else designed.features[members]
            out[members] = self.loss.predict_proba(params[k], NodeData(features, np.zeros(len(members))))
        return pd.DataFrame(out, columns=[f"p({label:g})" for label in labels])

    def _codes(self, data: Dataset) -> np.ndarray:
        return _node_codes(data, self.graph)

    def score(self, data: Dataset, metric: Optional[str] = None) -> float:
        """Mean per-record metric (anll, rmse or error) over a dataset."""
        params = self._require_fit()
        metric = metric or self.loss.metrics[0]
        if metric not in SCORES:
            raise DataError(f"unknown metric {metric!r}; expected one of {sorted(SCORES)}")
        return SCORES[metric](self.loss, params, self.node_data(data))

    def validate(self, train: Dataset, test: Dataset, metric: Optional[str] = None,
                 cfg: Optional[solver.SolverConfig] = None,
                 warm: Optional[solver.SolverState] = None) -> Tuple['StratifiedModel', FitReport, float]:
        """Fit on one set, score on another.

        Returns:
            (fitted model, fit report, validation score)
        """
        fitted, report = self.fit(train, cfg, warm)
        return fitted, report, fitted.score(test, metric)


@dataclass
class CVRow:
    """Validation scores of one grid cell."""

    cell: Dict[str, Any]
    scores: List[float]
    flagged: bool = False
    converged: bool = True
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        finite = [s for s in self.scores if math.isfinite(s)]
        self.mean = float(np.mean(finite)) if finite else math.nan
        self.std = float(np.std(finite)) if finite else math.nan


@dataclass
class CVResult:
    """Cross-validation table; ``best`` is the row with the lowest mean."""

    rows: List[CVRow]
    metric: str
    folds: int
    seed: int

    @property
    def best(self) -> int:
        means = [r.mean if math.isfinite(r.mean) else math.inf for r in self.rows]
        return int(np.argmin(means))

    def to_frame(self) -> pd.DataFrame:
        best = self.best
        records = []
        for i, row in enumerate(self.rows):
            record: Dict[str, Any] = {'cell': json.dumps(row.cell, sort_keys=True)}
            record.update({k: row.cell[k] for k in sorted(row.cell)})
            record['mean'] = row.mean
            record['std'] = row.std
            for f, s in enumerate(row.scores):
                record[f"fold{f}"] = s
            record['flagged'] = row.flagged
            record['converged'] = row.converged
            record['best'] = i == best
            records.append(record)
        return pd.DataFrame.from_records(records)


def _cell_config(cfg: Optional[solver.SolverConfig], cell: Mapping[str, Any]) -> Optional[solver.SolverConfig]:
    changes = {k.partition('.')[2]: v for k, v in cell.items() if k.startswith('solver.')}
    if not changes:
        return cfg
    return (cfg or solver.SolverConfig()).with_params(**changes)


def _cell_key(cell: Mapping[str, Any]) -> str:
    return json.dumps(dict(cell), sort_keys=True, default=str)


def _score_cells(candidates: Sequence[StratifiedModel], grid: Sequence[Mapping[str, Any]],
                 train: Dataset, test: Dataset, metric: str,
                 cfg: Optional[solver.SolverConfig], label: str) -> List[Tuple[float, bool]]:
    """(score, converged) of every cell on one split.

    Distinct cells are fitted in order, each warm-started from the previous
    fit; a repeated cell reuses the result of its first occurrence.
    """
    seen: Dict[str, Tuple[float, bool]] = {}
    out = []
    warm = None
    for cell, candidate in zip(grid, candidates):
        key = _cell_key(cell)
        if key not in seen:
            _, report, value = candidate.validate(train, test, metric, _cell_config(cfg, cell), warm)
            warm = report.result.state
            seen[key] = (value, report.converged)
            logger.info(f"{label} cell {dict(cell)}: {metric}={value:.6g}")
        out.append(seen[key])
    return out


def cross_validate(model: StratifiedModel, data: Dataset, grid: Sequence[Mapping[str, Any]],
                   folds: int = 5, seed: int = 0, metric: Optional[str] = None,
                   cfg: Optional[solver.SolverConfig] = None,
                   stratify: bool = False) -> CVResult:
    """k-fold cross-validation over a hyper-parameter grid.

    Fold assignment depends only on ``seed`` (and the node keys when
    ``stratify`` is set). Within a fold the grid cells are fitted in order,
    each warm-started from the previous cell's solution; a repeated cell
    reuses the score of its first occurrence. Categorical outcomes get their
    category count from the full dataset before splitting.

    Args:
        model: Template model; its hyper-parameters are overridden per cell
        data: All records
        grid: Hyper-parameter cells, see ``StratifiedModel.with_params``
        folds: Number of folds (at least 2)
        seed: Seed of the fold assignment
        metric: Validation metric (default: the loss's first metric)
        cfg: Solver settings
        stratify: Deal each node's records evenly over the folds

    Returns:
        CVResult with one row per grid cell
    """
    if not grid:
        raise StratFitError("cross-validation grid is empty")
    metric = metric or model.loss.metrics[0]
    splits = kfold_indices(len(data), folds, seed, data.keys if stratify else None)
    template = model.with_categories(data)
    candidates = [template.with_params(cell) for cell in grid]
    scores = [[math.nan] * folds for _ in grid]
    flagged = [False] * len(grid)
    converged = [True] * len(grid)

    for f, (train_idx, test_idx) in enumerate(splits):
        if len(test_idx) == 0:
            logger.warning(f"fold {f} has no validation records")
            for i in range(len(grid)):
                flagged[i] = True
            continue
        train, test = data.subset(train_idx), data.subset(test_idx)
        outcomes = _score_cells(candidates, grid, train, test, metric, cfg, f"fold {f}")
        for i, (value, conv) in enumerate(outcomes):
            scores[i][f] = value
            converged[i] = converged[i] and conv

    rows = [CVRow(dict(cell), s, flag, conv) for cell, s, flag, conv in zip(grid, scores, flagged, converged)]
    return CVResult(rows, metric, folds, seed)


def holdout_validate(model: StratifiedModel, data: Dataset, grid: Sequence[Mapping[str, Any]],
                     fraction: float = 0.2, seed: int = 0, metric: Optional[str] = None,
                     cfg: Optional[solver.SolverConfig] = None) -> CVResult:
    """Score every grid cell on one held-out validation set."""
    if not grid:
        raise StratFitError("validation grid is empty")
    metric = metric or model.loss.metrics[0]
    train_idx, test_idx = holdout_indices(len(data), fraction, seed)
    train, test = data.subset(train_idx), data.subset(test_idx)
    template = model.with_categories(data)
    candidates = [template.with_params(cell) for cell in grid]
    outcomes = _score_cells(candidates, grid, train, test, metric, cfg, "holdout")
    rows = [CVRow(dict(cell), [value], False, conv) for cell, (value, conv) in zip(grid, outcomes)]
    return CVResult(rows, metric, 1, seed)


def build_model(loss_spec: Mapping[str, Any], reg_spec: Optional[Mapping[str, Any]],
                graph_spec: Any, options: Optional[Mapping[str, Any]] = None) -> StratifiedModel:
    """Assemble an unfitted model from JSON-compatible descriptions."""
    options = dict(options or {})
    unknown = set(options) - {'standardize', 'intercept'}
    if unknown:
        raise StratFitError(f"unknown model options: {sorted(unknown)}")
    try:
        loss = loss_from_dict(loss_spec)
        reg = Regularizer.from_dict(reg_spec or {'kind': 'zero'})
    except (TypeError, ValueError) as e:
        if isinstance(e, StratFitError):
            raise
        raise StratFitError(str(e))
    graph = graph_from_spec(graph_spec)
    return StratifiedModel(loss, reg, graph, graph_spec=graph_spec, **options)
