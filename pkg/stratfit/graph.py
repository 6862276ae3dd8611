"""Regularization graphs over stratification-feature values."""

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import GraphError

NodeKey = Tuple[str, ...]
Edge = Tuple[int, int, float]

FACTORY_TYPES = ('path', 'cycle', 'star', 'complete', 'grid', 'tree')


def as_key(value: Any) -> NodeKey:
    """Normalize a node key to a tuple of strings."""
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value)
    return (str(value),)


@dataclass(frozen=True)
class StratGraph:
    """Weighted undirected graph over stratification values.

    Nodes are ordered tuples of strings; their position is the row of the
    node's parameters. Edges are stored once per unordered pair as
    ``(i, j, w)`` with ``i < j`` and ``w > 0``.
    """

    nodes: Tuple[NodeKey, ...]
    edges: Tuple[Edge, ...] = ()

    def __post_init__(self):
        nodes = tuple(as_key(k) for k in self.nodes)
        if len(set(nodes)) != len(nodes):
            seen = set()
            dup = next(k for k in nodes if k in seen or seen.add(k))
            raise GraphError(f"duplicate node key {dup!r}")
        K = len(nodes)
        normalized = []
        pairs = set()
        for edge in self.edges:
            try:
                i, j, w = edge
                i, j, w = int(i), int(j), float(w)
            except (TypeError, ValueError):
                raise GraphError(f"malformed edge {edge!r}; expected (i, j, w)")
            if not (0 <= i < K and 0 <= j < K):
                raise GraphError(f"edge ({i}, {j}) has an index outside [0, {K})")
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            if not (w > 0 and np.isfinite(w)):
                raise GraphError(f"edge ({i}, {j}) has non-positive weight {w}")
            pair = (min(i, j), max(i, j))
            if pair in pairs:
                raise GraphError(f"duplicate edge {pair}")
            pairs.add(pair)
            normalized.append((pair[0], pair[1], w))
        object.__setattr__(self, 'nodes', nodes)
        object.__setattr__(self, 'edges', tuple(normalized))

    @property
    def K(self) -> int:
        """Number of nodes."""
        return len(self.nodes)

    @cached_property
    def node_index(self) -> Dict[NodeKey, int]:
        """Map from node key to row index."""
        return {key: idx for idx, key in enumerate(self.nodes)}

    @property
    def key_width(self) -> int:
        """Length of the node key tuples (0 for an empty graph)."""
        return len(self.nodes[0]) if self.nodes else 0

    def index(self, key: Any) -> int:
        """Get the row index of a node key.

        Raises:
            KeyError: If the key is not a node
        """
        return self.node_index[as_key(key)]

    def weight_matrix(self) -> sp.csr_matrix:
        """Symmetric sparse weight matrix W."""
        K = self.K
        if not self.edges:
            return sp.csr_matrix((K, K))
        i, j, w = (np.array(col) for col in zip(*self.edges))
        rows = np.concatenate([i, j]).astype(np.int64)
        cols = np.concatenate([j, i]).astype(np.int64)
        data = np.concatenate([w, w]).astype(float)
        return sp.coo_matrix((data, (rows, cols)), shape=(K, K)).tocsr()

    def to_dict(self) -> Dict[str, Any]:
        return graph_to_dict(self)


def _check_size(K: Any, name: str = 'K') -> int:
    if isinstance(K, bool) or int(K) != K or K < 1:
        raise GraphError(f"{name} must be a positive integer, got {K!r}")
    return int(K)


def _check_weight(w: Any) -> float:
    w = float(w)
    if not (w > 0 and np.isfinite(w)):
        raise GraphError(f"edge weight must be positive, got {w}")
    return w


def _default_keys(K: int, keys: Optional[Sequence[Any]]) -> List[NodeKey]:
    if keys is None:
        return [(str(i),) for i in range(K)]
    if len(keys) != K:
        raise GraphError(f"expected {K} node keys, got {len(keys)}")
    return [as_key(k) for k in keys]


def make_path(K: int, w: float = 1.0, keys: Optional[Sequence[Any]] = None) -> StratGraph:
    """Path graph: vertices listed in order, consecutive ones joined.

    Args:
        K: Number of vertices
        w: Weight of every edge
        keys: Optional node labels (default "0", "1", ...)

    Returns:
        Graph with K nodes and K-1 edges
    """
    K = _check_size(K)
    w = _check_weight(w)
    return StratGraph(tuple(_default_keys(K, keys)), tuple((i, i + 1, w) for i in range(K - 1)))


def make_cycle(K: int, w: float = 1.0, keys: Optional[Sequence[Any]] = None) -> StratGraph:
    """Cycle graph: a path closed into a chain (e.g. weekdays, hours)."""
    K = _check_size(K)
    w = _check_weight(w)
    edges = [(i, i + 1, w) for i in range(K - 1)]
    if K > 2:
        edges.append((0, K - 1, w))
    return StratGraph(tuple(_default_keys(K, keys)), tuple(edges))


def make_star(K: int, w: float = 1.0, keys: Optional[Sequence[Any]] = None) -> StratGraph:
    """Star graph; node 0 is the internal vertex joined to every other vertex."""
    K = _check_size(K)
    w = _check_weight(w)
    return StratGraph(tuple(_default_keys(K, keys)), tuple((0, i, w) for i in range(1, K)))


def make_complete(K: int, w: float = 1.0, keys: Optional[Sequence[Any]] = None) -> StratGraph:
    """Complete graph: every pair of vertices is joined."""
    K = _check_size(K)
    w = _check_weight(w)
    edges = tuple((i, j, w) for i in range(K) for j in range(i + 1, K))
    return StratGraph(tuple(_default_keys(K, keys)), edges)


def make_grid(dims: Union[int, Sequence[int]],
              w: Union[float, Sequence[float]] = 1.0) -> StratGraph:
    """Grid graph over points with integer coordinates.

    Vertices whose coordinates differ by one in exactly one coordinate are
    joined. The grid is the Cartesian product of one path per axis, so the
    node key is the tuple of coordinates.

    Args:
        dims: Size along each axis
        w: One weight for every edge, or one weight per axis

    Returns:
        Grid graph with prod(dims) nodes
    """
    if isinstance(dims, (int, np.integer)):
        dims = (int(dims),)
    dims = [_check_size(d, 'grid dimension') for d in dims]
    if not dims:
        raise GraphError("grid needs at least one dimension")
    if isinstance(w, (list, tuple, np.ndarray)):
        weights = [_check_weight(x) for x in w]
        if len(weights) != len(dims):
            raise GraphError(f"grid has {len(dims)} axes but {len(weights)} weights")
    else:
        weights = [_check_weight(w)] * len(dims)
    graph = make_path(dims[0], weights[0])
    for d, axis_w in zip(dims[1:], weights[1:]):
        graph = cartesian_product(graph, make_path(d, axis_w))
    return graph


def make_tree(parents: Sequence[int], w: float = 1.0,
              keys: Optional[Sequence[Any]] = None) -> StratGraph:
    """Rooted tree from a parent array (root marked by a negative parent).

    Args:
        parents: parents[i] is the parent index of node i, or -1 for the root
        w: Weight of every edge
        keys: Optional node labels

    Returns:
        Tree graph with len(parents) - 1 edges
    """
    K = _check_size(len(parents), 'number of tree nodes')
    w = _check_weight(w)
    roots = [i for i, p in enumerate(parents) if p < 0]
    if len(roots) != 1:
        raise GraphError(f"tree needs exactly one root, found {len(roots)}")
    edges = tuple((int(p), i, w) for i, p in enumerate(parents) if p >= 0)
    graph = StratGraph(tuple(_default_keys(K, keys)), edges)
    if not is_connected(graph):
        raise GraphError("parent array contains a cycle")
    return graph


def from_edges(keys: Sequence[Any], edges: Iterable[Sequence[Any]]) -> StratGraph:
    """Graph from explicit node keys and edges (e.g. an entity similarity graph).

    Edge endpoints may be node indices or node keys; weights are taken
    verbatim.
    """
    nodes = [as_key(k) for k in keys]
    index = {k: i for i, k in enumerate(nodes)}
    resolved = []
    for edge in edges:
        if len(edge) != 3:
            raise GraphError(f"malformed edge {edge!r}; expected [i, j, w]")
        a, b, w = edge
        ends = []
        for end in (a, b):
            if isinstance(end, (int, np.integer)) and not isinstance(end, bool):
                ends.append(int(end))
            else:
                try:
                    ends.append(index[as_key(end)])
                except KeyError:
                    raise GraphError(f"edge endpoint {end!r} is not a node")
        resolved.append((ends[0], ends[1], w))
    return StratGraph(tuple(nodes), tuple(resolved))


def cartesian_product(g1: StratGraph, g2: StratGraph) -> StratGraph:
    """Weighted Cartesian product of two graphs.

    Node (a, u) has index a * K2 + u and key key1(a) + key2(u). Each g1
    edge (a, b) is copied for every u, and each g2 edge (u, v) for every a.
    """
    if g1.K == 0 or g2.K == 0:
        raise GraphError("cartesian product needs nonempty graphs")
    K2 = g2.K
    nodes = tuple(k1 + k2 for k1 in g1.nodes for k2 in g2.nodes)
    edges = [(a * K2 + u, b * K2 + u, w) for a, b, w in g1.edges for u in range(K2)]
    edges += [(a * K2 + u, a * K2 + v, w) for a in range(g1.K) for u, v, w in g2.edges]
    return StratGraph(nodes, tuple(edges))


def scale(g: StratGraph, factor: float) -> StratGraph:
    """Multiply every edge weight by a factor; factor 0 drops all edges."""
    factor = float(factor)
    if factor < 0 or not np.isfinite(factor):
        raise GraphError(f"scale factor must be nonnegative, got {factor}")
    if factor == 0:
        return StratGraph(g.nodes, ())
    return StratGraph(g.nodes, tuple((i, j, w * factor) for i, j, w in g.edges))


def laplacian(g: StratGraph) -> sp.csr_matrix:
    """Weighted Laplacian L = diag(W 1) - W in CSR layout.

    (1/2) theta^T (I kron L) theta equals (1/2) sum over edges of
    W_ij ||theta_i - theta_j||^2.
    """
    W = g.weight_matrix()
    degree = np.asarray(W.sum(axis=1)).ravel()
    L = (sp.diags(degree) - W).tocsr()
    L.sum_duplicates()
    L.sort_indices()
    return L


def laplacian_quadratic(L: sp.spmatrix, theta: np.ndarray) -> float:
    """(1/2) trace(theta^T L theta) for a K x n parameter block."""
    theta = np.asarray(theta, dtype=float).reshape(L.shape[0], -1)
    return 0.5 * float(np.sum(theta * (L @ theta)))


def is_connected(g: StratGraph) -> bool:
    """True iff the graph has exactly one connected component."""
    if g.K <= 1:
        return True
    n_components, _ = connected_components(g.weight_matrix(), directed=False)
    return n_components == 1


def graph_from_spec(spec: Any) -> StratGraph:
    """Build a graph from a JSON-compatible description.

    Accepted forms:
      - ``{"type": "path"|"cycle"|"star"|"complete", "K": 7, "w": 1.0, "keys": [...]}``
      - ``{"type": "grid", "dims": [10, 10], "w": 1.0}``
      - ``{"type": "tree", "parents": [-1, 0, 0], "w": 1.0}``
      - ``{"nodes": [...], "edges": [[i, j, w], ...]}``
      - ``{"product": [spec, spec, ...]}``
    Any form may carry ``"scale": factor``.
    """
    if not isinstance(spec, Mapping):
        raise GraphError(f"graph spec must be an object, got {type(spec).__name__}")
    try:
        if 'product' in spec:
            factors = spec['product']
            if not isinstance(factors, list) or not factors:
                raise GraphError("'product' must be a nonempty list of graph specs")
            graph = graph_from_spec(factors[0])
            for factor in factors[1:]:
                graph = cartesian_product(graph, graph_from_spec(factor))
        elif 'type' in spec:
            kind = spec['type']
            w = spec.get('w', 1.0)
            if kind == 'grid':
                graph = make_grid(spec['dims'], w)
            elif kind == 'tree':
                graph = make_tree(spec['parents'], w, spec.get('keys'))
            elif kind in ('path', 'cycle', 'star', 'complete'):
                factory = {'path': make_path, 'cycle': make_cycle,
                           'star': make_star, 'complete': make_complete}[kind]
                K = spec.get('K', len(spec['keys']) if 'keys' in spec else None)
                if K is None:
                    raise GraphError(f"{kind} spec needs 'K' or 'keys'")
                graph = factory(K, w, spec.get('keys'))
            else:
                raise GraphError(f"unknown graph type {kind!r}; expected one of {FACTORY_TYPES}")
        elif 'nodes' in spec:
            graph = from_edges(spec['nodes'], spec.get('edges', []))
        else:
            raise GraphError("graph spec needs 'type', 'nodes' or 'product'")
    except KeyError as e:
        raise GraphError(f"graph spec is missing field {e}")
    if 'scale' in spec:
        graph = scale(graph, spec['scale'])
    return graph


def graph_to_dict(g: StratGraph) -> Dict[str, Any]:
    """Materialized JSON-compatible form of a graph."""
    return {
        'nodes': [list(k) for k in g.nodes],
        'edges': [[i, j, w] for i, j, w in g.edges],
    }


def load_graph(path: Union[str, Path]) -> StratGraph:
    """Load a graph description file."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            spec = json.load(f)
    except json.JSONDecodeError as e:
        raise GraphError(f"graph file {path} is not valid JSON: {e}")
    return graph_from_spec(spec)


def save_graph(g: StratGraph, path: Union[str, Path]) -> None:
    """Write a materialized graph file."""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(graph_to_dict(g), f, indent=2, ensure_ascii=False)
