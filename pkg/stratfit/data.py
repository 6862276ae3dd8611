"""Datasets of (z, x, y) records, feature standardization and fold splitting."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DataError
from .graph import NodeKey, as_key

KEY_PREFIX = 'z:'
FEATURE_PREFIX = 'x:'
OUTCOME = 'y'


@dataclass
class Dataset:
    """Records of the form (z, x, y).

    Attributes:
        keys: Node key tuple of every record
        features: N x p feature matrix, or None for the no-feature formulation
        outcomes: Length-N outcomes (N x m for vector outcomes)
        key_names: Names of the stratification columns
        feature_names: Names of the feature columns
        outcome_names: Names of the outcome columns
    """

    keys: List[NodeKey]
    features: Optional[np.ndarray]
    outcomes: np.ndarray
    key_names: List[str] = field(default_factory=list)
    feature_names: List[str] = field(default_factory=list)
    outcome_names: List[str] = field(default_factory=lambda: [OUTCOME])

    def __post_init__(self):
        self.keys = [as_key(k) for k in self.keys]
        self.outcomes = np.asarray(self.outcomes, dtype=float)
        N = len(self.keys)
        if self.outcomes.shape[0] != N:
            raise DataError(f"{N} keys but {self.outcomes.shape[0]} outcomes")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=float).reshape(N, -1)
            if not self.feature_names:
                self.feature_names = [f"x{i}" for i in range(self.features.shape[1])]
        if not self.key_names and N:
            self.key_names = [f"z{i}" for i in range(len(self.keys[0]))]
        widths = {len(k) for k in self.keys}
        if len(widths) > 1:
            raise DataError(f"records have node keys of different lengths {sorted(widths)}")

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def n_features(self) -> Optional[int]:
        return None if self.features is None else self.features.shape[1]

    def subset(self, index: Sequence[int]) -> 'Dataset':
        """Records at the given positions, in that order."""
        index = np.asarray(index, dtype=int)
        return Dataset([self.keys[i] for i in index],
                       None if self.features is None else self.features[index],
                       self.outcomes[index], list(self.key_names),
                       list(self.feature_names), list(self.outcome_names))

    def with_features(self, features: Optional[np.ndarray]) -> 'Dataset':
        """Same records with a replaced feature matrix."""
        names = [] if features is None else [f"x{i}" for i in range(np.shape(features)[1])]
        return Dataset(self.keys, features, self.outcomes, list(self.key_names),
                       names, list(self.outcome_names))

    def to_frame(self) -> pd.DataFrame:
        columns: Dict[str, Any] = {}
        for i, name in enumerate(self.key_names):
            columns[KEY_PREFIX + name] = [k[i] for k in self.keys]
        if self.features is not None:
            for i, name in enumerate(self.feature_names):
                columns[FEATURE_PREFIX + name] = self.features[:, i]
        Y = self.outcomes.reshape(len(self), -1)
        if Y.shape[1] == 1 and self.outcome_names == [OUTCOME]:
            columns[OUTCOME] = Y[:, 0]
        else:
            for i, name in enumerate(self.outcome_names):
                columns[name] = Y[:, i]
        return pd.DataFrame(columns)


def _separator(path: Path) -> str:
    return '\t' if path.suffix.lower() in ('.tsv', '.tab') else ','


def read_dataset(path: Union[str, Path], require_outcome: bool = True) -> Dataset:
    """Read a delimited-text dataset with a header row.

    Columns named ``z:<name>`` form the node key tuple (read as strings),
    ``x:<name>`` the features and ``y`` (or ``y:<name>`` for vector
    outcomes) the outcome. Files without ``x:`` columns select the
    no-feature formulation.

    Args:
        path: .csv (comma) or .tsv (tab) file
        require_outcome: Whether outcome columns must be present

    Returns:
        Dataset

    Raises:
        DataError: If the file is missing, lacks key columns or has
            non-numeric or missing values
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    sep = _separator(path)
    try:
        header = pd.read_csv(path, sep=sep, nrows=0)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"cannot parse {path}: {e}")
    names = list(header.columns)
    key_cols = [c for c in names if c.startswith(KEY_PREFIX)]
    feature_cols = [c for c in names if c.startswith(FEATURE_PREFIX)]
    outcome_cols = [c for c in names if c == OUTCOME or c.startswith(OUTCOME + ':')]
    if not key_cols:
        raise DataError(f"{path}: no stratification columns (expected headers starting with {KEY_PREFIX!r})")
    if require_outcome and not outcome_cols:
        raise DataError(f"{path}: no outcome column (expected {OUTCOME!r} or '{OUTCOME}:<name>')")

    try:
        frame = pd.read_csv(path, sep=sep, dtype={c: str for c in key_cols}, keep_default_na=False,
                            na_values={c: [''] for c in feature_cols + outcome_cols})
    except (pd.errors.ParserError, ValueError) as e:
        raise DataError(f"cannot parse {path}: {e}")

    numeric = feature_cols + outcome_cols
    try:
        values = frame[numeric].apply(pd.to_numeric) if numeric else frame[numeric]
    except (ValueError, TypeError) as e:
        raise DataError(f"{path}: non-numeric value in feature or outcome columns: {e}")
    if numeric and values.isna().to_numpy().any():
        bad = values.columns[values.isna().any()].tolist()
        raise DataError(f"{path}: missing values in columns {bad}")

    keys = [tuple(row) for row in frame[key_cols].astype(str).itertuples(index=False, name=None)]
    features = values[feature_cols].to_numpy(dtype=float) if feature_cols else None
    if outcome_cols:
        outcomes = values[outcome_cols].to_numpy(dtype=float)
        if len(outcome_cols) == 1:
            outcomes = outcomes[:, 0]
    else:
        outcomes = np.zeros(len(frame))
    return Dataset(keys, features, outcomes,
                   key_names=[c[len(KEY_PREFIX):] for c in key_cols],
                   feature_names=[c[len(FEATURE_PREFIX):] for c in feature_cols],
                   outcome_names=outcome_cols or [OUTCOME])


def write_table(frame: pd.DataFrame, path: Union[str, Path]) -> None:
    """Write a delimited-text table; floats keep their shortest round-trip form."""
    path = Path(path)
    frame.to_csv(path, sep=_separator(path), index=False, float_format=None)


@dataclass
class Standardization:
    """Feature transform learned on training data.

    Features are shifted by ``means`` and divided by ``scales`` when
    ``standardize`` is set; a trailing column of ones is appended when
    ``intercept`` is set. Without features the design is a single column
    of ones.
    """

    n_raw: int = 0
    standardize: bool = False
    intercept: bool = False
    means: Optional[np.ndarray] = None
    scales: Optional[np.ndarray] = None

    @classmethod
    def learn(cls, features: Optional[np.ndarray], standardize: bool = False,
              intercept: bool = False) -> 'Standardization':
        if features is None:
            return cls(0, False, False)
        X = np.asarray(features, dtype=float)
        means = scales = None
        if standardize:
            means = X.mean(axis=0) if len(X) else np.zeros(X.shape[1])
            scales = X.std(axis=0) if len(X) else np.ones(X.shape[1])
            # constant columns are centred only
            scales = np.where(scales > 0, scales, 1.0)
        return cls(X.shape[1], bool(standardize), bool(intercept), means, scales)

    @property
    def n_design(self) -> int:
        """Number of design columns produced by ``apply``."""
        if self.n_raw == 0:
            return 1
        return self.n_raw + (1 if self.intercept else 0)

    def apply(self, features: Optional[np.ndarray], count: Optional[int] = None) -> np.ndarray:
        """Design matrix of raw features (N x n_design)."""
        if self.n_raw == 0:
            if features is not None and np.shape(features)[1] > 0:
                raise DataError(f"model was fitted without features, got {np.shape(features)[1]}")
            n = count if count is not None else (0 if features is None else len(features))
            return np.ones((n, 1))
        if features is None:
            raise DataError(f"model expects {self.n_raw} features, none given")
        X = np.atleast_2d(np.asarray(features, dtype=float))
        if X.shape[1] != self.n_raw:
            raise DataError(f"model expects {self.n_raw} features, got {X.shape[1]}")
        if self.standardize:
            X = (X - self.means) / self.scales
        if self.intercept:
            X = np.hstack([X, np.ones((X.shape[0], 1))])
        return X

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_raw': self.n_raw,
            'standardize': self.standardize,
            'intercept': self.intercept,
            'means': None if self.means is None else [float(v) for v in self.means],
            'scales': None if self.scales is None else [float(v) for v in self.scales],
        }

    @classmethod
    def from_dict(cls, spec: Dict[str, Any]) -> 'Standardization':
        means = spec.get('means')
        scales = spec.get('scales')
        return cls(int(spec.get('n_raw', 0)), bool(spec.get('standardize', False)),
                   bool(spec.get('intercept', False)),
                   None if means is None else np.asarray(means, dtype=float),
                   None if scales is None else np.asarray(scales, dtype=float))


def kfold_indices(n: int, folds: int, seed: int = 0,
                  groups: Optional[Sequence[Any]] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Deterministic k-fold split of n records.

    Records are shuffled with ``numpy.random.default_rng(seed)`` and dealt
    into folds. With ``groups`` every group is shuffled and dealt
    separately, so each node's records spread evenly over the folds.

    Returns:
        List of (train_index, validation_index) pairs, one per fold
    """
    if folds < 2:
        raise DataError(f"need at least 2 folds, got {folds}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=int)
    if groups is None:
        order = rng.permutation(n)
        assignment[order] = np.arange(n) % folds
    else:
        codes, _ = pd.factorize(pd.Series([str(g) for g in groups]), sort=True)
        offset = 0
        for code in range(codes.max() + 1 if n else 0):
            members = np.flatnonzero(codes == code)
            members = members[rng.permutation(len(members))]
            assignment[members] = (offset + np.arange(len(members))) % folds
            offset += len(members)
    everything = np.arange(n)
    return [(everything[assignment != f], everything[assignment == f]) for f in range(folds)]


def holdout_indices(n: int, fraction: float = 0.2, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic (train, validation) split holding out a fraction of the records."""
    if not 0 < fraction < 1:
        raise DataError(f"holdout fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * fraction))
    return np.sort(order[cut:]), np.sort(order[:cut])
