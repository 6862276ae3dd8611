"""Model files: JSON with meta, graph, regularizer, standardization and params sections."""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
from filelock import FileLock

from .data import Standardization
from .errors import DataError, GraphError, ModelFileError
from .graph import from_edges, graph_to_dict
from .logger import logger
from .losses import loss_from_dict
from .model import StratifiedModel
from .regularizers import Regularizer

FORMAT_VERSION = 1
LOCK_TIMEOUT = 30


def compute_params_hash(params: np.ndarray) -> str:
    """SHA256 of the shape and little-endian float64 bytes of a parameter block."""
    block = np.ascontiguousarray(params, dtype='<f8')
    sha256 = hashlib.sha256()
    sha256.update(repr(block.shape).encode('ascii'))
    sha256.update(block.tobytes())
    return sha256.hexdigest()


def compute_file_hash(path: Union[str, Path]) -> str:
    """SHA256 of a file's bytes, empty when it cannot be read."""
    sha256 = hashlib.sha256()
    try:
        with open(path, 'rb') as f:
            for chunk in iter(lambda: f.read(65536), b""):
                sha256.update(chunk)
    except IOError:
        return ""
    return sha256.hexdigest()


def model_to_dict(model: StratifiedModel) -> Dict[str, Any]:
    """JSON-compatible form of a model."""
    try:
        shape = list(model.loss.param_shape)
    except DataError:
        shape = None
    meta: Dict[str, Any] = {
        'version': FORMAT_VERSION,
        'loss': model.loss.to_dict(),
        'param_shape': shape,
        'K': model.K,
        'standardize': model.standardize,
        'intercept': model.intercept,
    }
    out: Dict[str, Any] = {
        'meta': meta,
        'graph': graph_to_dict(model.graph),
        'graph_spec': model.graph_spec,
        'regularizer': model.reg.to_dict(),
        'standardization': None if model.standardization is None else model.standardization.to_dict(),
    }
    if model.params is not None:
        meta['params_sha256'] = compute_params_hash(model.params)
        out['params'] = model.params.tolist()
    return out


def model_from_dict(spec: Dict[str, Any]) -> StratifiedModel:
    """Rebuild a model from its JSON form.

    Raises:
        ModelFileError: On a version, shape or checksum mismatch
    """
    try:
        meta = spec['meta']
        version = meta.get('version')
        if version != FORMAT_VERSION:
            raise ModelFileError(f"unsupported model file version {version!r} (expected {FORMAT_VERSION})")
        graph_section = spec['graph']
        graph = from_edges(graph_section['nodes'], graph_section.get('edges', []))
        if int(meta['K']) != graph.K:
            raise ModelFileError(f"model declares K={meta['K']} but its graph has {graph.K} nodes")
        loss = loss_from_dict(meta['loss'])
        reg = Regularizer.from_dict(spec.get('regularizer') or {'kind': 'zero'})
        std_section = spec.get('standardization')
        std = None if std_section is None else Standardization.from_dict(std_section)
        params = None
        if spec.get('params') is not None:
            params = np.asarray(spec['params'], dtype=float)
            if params.ndim != 2 or params.shape[0] != graph.K:
                raise ModelFileError(f"params have shape {params.shape}, expected {graph.K} rows")
            if params.shape[1] != loss.size:
                raise ModelFileError(f"params have {params.shape[1]} columns, the loss needs {loss.size}")
            expected = meta.get('params_sha256')
            if expected is not None and compute_params_hash(params) != expected:
                raise ModelFileError("params checksum mismatch")
        return StratifiedModel(loss, reg, graph, bool(meta.get('standardize', False)),
                               bool(meta.get('intercept', False)), params, std, spec.get('graph_spec'))
    except ModelFileError:
        raise
    except (KeyError, TypeError) as e:
        raise ModelFileError(f"malformed model file: missing or invalid field {e}")
    except (GraphError, DataError, ValueError) as e:
        raise ModelFileError(f"malformed model file: {e}")


def save_model(model: StratifiedModel, path: Union[str, Path]) -> None:
    """Write a model file under an exclusive lock."""
    path = Path(path)
    with FileLock(str(path) + '.lock', timeout=LOCK_TIMEOUT):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(model_to_dict(model), f, indent=2, ensure_ascii=False)
            f.write('\n')
    logger.debug(f"saved model to {path}")


def load_model(path: Union[str, Path]) -> StratifiedModel:
    """Read a model file.

    A file without a params section loads as an unfitted model.

    Raises:
        ModelFileError: If the file is missing, malformed or inconsistent
    """
    path = Path(path)
    if not path.is_file():
        raise ModelFileError(f"model file not found: {path}")
    with FileLock(str(path) + '.lock', timeout=LOCK_TIMEOUT):
        try:
            with open(path, 'r', encoding='utf-8') as f:
                spec = json.load(f)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ModelFileError(f"model file {path} is not valid JSON: {e}")
    if not isinstance(spec, dict):
        raise ModelFileError(f"model file {path} must hold a JSON object")
    return model_from_dict(spec)


def write_json(data: Any, path: Union[str, Path]) -> None:
    """Write a JSON report under an exclusive lock."""
    path = Path(path)
    with FileLock(str(path) + '.lock', timeout=LOCK_TIMEOUT):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
            f.write('\n')

