"""Hierarchical proximity graphs over exemplar embeddings, one per level.

A small-world graph in the classic layered form: every node lives in layer 0,
each higher layer keeps a geometrically thinning subset, and queries descend
greedily from the top before a beam search over layer 0. Navigation distance
is ``1 - sigmoid(dot)`` — strictly decreasing in the dot product, so the
visit order equals plain maximum-dot-product search while the distances land
in (0, 1) and double as the collaborative-confidence terms: the champion
distance ``d_c`` of the nearest exemplar, and the average distance ``d_a``
over the sparse top-layer sample.
"""

from __future__ import annotations

import heapq
import math
import os
from dataclasses import dataclass

import numpy as np

from . import _binio
from .contrastive import Embedding
from .errors import DataContractError
from .exemplars import ExemplarDictionary
from .geometry import Box
from .levels import LEVELS, route_level

INDEX_MAGIC = b"EGNX"
INDEX_VERSION = 1


def sigmoid(x: float) -> float:
    """Numerically stable logistic function."""
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _sigmoid_distance(query: np.ndarray, vec: np.ndarray) -> float:
    return 1.0 - sigmoid(float(query @ vec))


def _negdot_distance(query: np.ndarray, vec: np.ndarray) -> float:
    return -float(query @ vec)


_METRICS = {"sigmoid": _sigmoid_distance, "negdot": _negdot_distance}


@dataclass
class HnswParams:
    """Graph degree, construction/search beam widths, layer decay, and seed.

    ``level_lambda`` scales the geometric layer assignment: a node's top
    layer is ``floor(-ln(u) * level_lambda)``. The default ``1/ln(M)`` keeps
    the expected fraction surviving to each next layer at ``1/M``.
    """

    M: int = 8
    ef_construction: int = 32
    ef_search: int = 64
    level_lambda: float = 1.0 / math.log(8)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.M < 2:
            raise DataContractError(f"M must be >= 2, got {self.M}")
        if self.ef_construction < self.M:
            raise DataContractError(
                f"ef_construction must be >= M ({self.M}), got {self.ef_construction}")
        if self.ef_search < 1:
            raise DataContractError(f"ef_search must be >= 1, got {self.ef_search}")
        if not 0.0 <= self.level_lambda < float("inf"):
            raise DataContractError(
                f"level_lambda must be finite and >= 0, got {self.level_lambda}")
        if self.seed < 0:
            raise DataContractError(f"seed must be >= 0, got {self.seed}")


@dataclass
class HnswIndex:
    """An immutable layered graph: node vectors plus per-layer adjacency."""

    level: int
    nodes: dict[int, np.ndarray]
    layers: list[dict[int, list[int]]]
    entry_point: int
    params: HnswParams

    def __len__(self) -> int:
        return len(self.nodes)

    def top_layer_ids(self) -> list[int]:
        return sorted(self.layers[-1])

    def max_layer_of(self, node_id: int) -> int:
        top = -1
        for i, layer in enumerate(self.layers):
            if node_id in layer:
                top = i
        return top


@dataclass
class NearestResult:
    """The navigation winner: its id, raw dot, and sigmoid distance."""

    exemplar_id: int
    dot: float
    d_c: float

    def __post_init__(self) -> None:
        expected = 1.0 - sigmoid(self.dot)
        if self.d_c != expected:
            raise DataContractError(
                f"d_c must equal 1 - sigmoid(dot) = {expected}, got {self.d_c}")


# -- construction ------------------------------------------------------------

def _draw_layer(rng: np.random.Generator, level_lambda: float) -> int:
    u = 1.0 - rng.random()  # in (0, 1], so the log is finite
    return int(-math.log(u) * level_lambda)


def _greedy_step(nodes, adjacency, query, start, start_d, distance):
    """Follow strictly improving edges until a local minimum."""
    cur, cur_d = start, start_d
    improved = True
    while improved:
        improved = False
        for nb in adjacency[cur]:
            nd = distance(query, nodes[nb])
            if (nd, nb) < (cur_d, cur):
                cur, cur_d = nb, nd
                improved = True
    return cur, cur_d


def _search_layer(nodes, adjacency, query, entries, ef, distance, trace=None):
    """Beam search over one layer; returns (distance, id) pairs ascending."""
    visited = set()
    candidates: list[tuple[float, int]] = []
    best: list[tuple[float, int]] = []  # max-heap via (-d, -id)
    for e in sorted(entries):
        if e in visited:
            continue
        visited.add(e)
        d = distance(query, nodes[e])
        heapq.heappush(candidates, (d, e))
        heapq.heappush(best, (-d, -e))
        if len(best) > ef:
            heapq.heappop(best)
    while candidates:
        d, c = heapq.heappop(candidates)
        if len(best) >= ef and d > -best[0][0]:
            break
        if trace is not None:
            trace.append(c)
        for nb in adjacency[c]:
            if nb in visited:
                continue
            visited.add(nb)
            nd = distance(query, nodes[nb])
            if len(best) < ef or (nd, nb) < (-best[0][0], -best[0][1]):
                heapq.heappush(candidates, (nd, nb))
                heapq.heappush(best, (-nd, -nb))
                if len(best) > ef:
                    heapq.heappop(best)
    return sorted((-d, -i) for d, i in best)


def _prune_to(nodes, adjacency, node_id, cap):
    """Keep the node's ``cap`` closest neighbors; drop edges symmetrically."""
    here = nodes[node_id]
    ranked = sorted(adjacency[node_id],
                    key=lambda nb: (_sigmoid_distance(here, nodes[nb]), nb))
    kept, dropped = ranked[:cap], ranked[cap:]
    adjacency[node_id] = kept
    for nb in dropped:
        adjacency[nb].remove(node_id)


def _insert(index: HnswIndex, node_id: int, vec: np.ndarray, node_layer: int) -> None:
    nodes, layers, params = index.nodes, index.layers, index.params
    nodes[node_id] = vec
    if len(nodes) == 1:
        for _ in range(node_layer + 1):
            layers.append({})
        for layer in layers:
            layer[node_id] = []
        index.entry_point = node_id
        return
    top = len(layers) - 1
    ep = index.entry_point
    ep_d = _sigmoid_distance(vec, nodes[ep])
    for lv in range(top, node_layer, -1):
        ep, ep_d = _greedy_step(nodes, layers[lv], vec, ep, ep_d, _sigmoid_distance)
    entries = [ep]
    for lv in range(min(node_layer, top), -1, -1):
        found = _search_layer(nodes, layers[lv], vec, entries,
                              params.ef_construction, _sigmoid_distance)
        neighbors = [i for _, i in found[:params.M]]
        layers[lv][node_id] = list(neighbors)
        cap = 2 * params.M if lv == 0 else params.M
        for nb in neighbors:
            layers[lv][nb].append(node_id)
            if len(layers[lv][nb]) > cap:
                _prune_to(nodes, layers[lv], nb, cap)
        entries = [i for _, i in found]
    for _ in range(top + 1, node_layer + 1):
        layers.append({node_id: []})
        index.entry_point = node_id


def build_index(dictionary: ExemplarDictionary, level: int,
                params: HnswParams | None = None) -> HnswIndex:
    """Index the dictionary's embeddings at one level, inserting in id order.

    Each node's top layer comes from a seeded geometric draw; neighbors are
    the closest candidates found by the construction beam, pruned to ``M``
    per layer (``2M`` at layer 0) with symmetric edge removal.
    """
    params = params or HnswParams()
    if level not in LEVELS:
        raise DataContractError(f"level must be one of {LEVELS}, got {level}")
    if len(dictionary) == 0:
        raise DataContractError("cannot index an empty dictionary")
    missing = [ex.id for ex in dictionary.exemplars if level not in ex.embeddings]
    if missing:
        raise DataContractError(
            f"exemplars {missing} have no level-{level} embedding; "
            f"compute embeddings before indexing")
    rng = np.random.Generator(np.random.PCG64(params.seed))
    index = HnswIndex(level=level, nodes={}, layers=[], entry_point=-1,
                      params=params)
    for ex in sorted(dictionary.exemplars, key=lambda e: e.id):
        vec = np.asarray(ex.embeddings[level], dtype=np.float64)
        _insert(index, ex.id, vec, _draw_layer(rng, params.level_lambda))
    return index


def validate_index(index: HnswIndex) -> None:
    """Check the structural graph invariants; raises on violation."""
    if not index.layers or not index.nodes:
        raise DataContractError("index has no layers or no nodes")
    if set(index.layers[0]) != set(index.nodes):
        raise DataContractError("layer 0 must contain every node")
    if not index.layers[-1]:
        raise DataContractError("top layer must be non-empty")
    if index.entry_point not in index.layers[-1]:
        raise DataContractError("entry point must live in the top layer")
    for i in range(1, len(index.layers)):
        upper, lower = index.layers[i], index.layers[i - 1]
        stray = set(upper) - set(lower)
        if stray:
            raise DataContractError(
                f"nodes {sorted(stray)} in layer {i} missing from layer {i - 1}")
    for i, layer in enumerate(index.layers):
        for a, neighbors in layer.items():
            if len(set(neighbors)) != len(neighbors) or a in neighbors:
                raise DataContractError(f"bad adjacency list at node {a}, layer {i}")
            for b in neighbors:
                if a not in layer.get(b, ()):
                    raise DataContractError(
                        f"edge ({a}, {b}) in layer {i} is not symmetric")


# -- queries -----------------------------------------------------------------

def _check_query(index: HnswIndex, query: Embedding) -> np.ndarray:
    if len(index) == 0:
        raise DataContractError("cannot query an empty index")
    if query.level != index.level:
        raise DataContractError(
            f"query level {query.level} does not match index level {index.level}")
    return np.asarray(query.vector, dtype=np.float64)


def _descend(index: HnswIndex, q: np.ndarray, distance, trace=None):
    ep = index.entry_point
    ep_d = distance(q, index.nodes[ep])
    if trace is not None:
        trace.append(ep)
    for lv in range(len(index.layers) - 1, 0, -1):
        prev = ep
        ep, ep_d = _greedy_step(index.nodes, index.layers[lv], q, ep, ep_d, distance)
        if trace is not None and ep != prev:
            trace.append(ep)
    return ep


def nearest(index: HnswIndex, query: Embedding) -> NearestResult:
    """Champion exemplar by graph navigation: greedy descent, then a beam."""
    q = _check_query(index, query)
    ep = _descend(index, q, _sigmoid_distance)
    found = _search_layer(index.nodes, index.layers[0], q, [ep],
                          index.params.ef_search, _sigmoid_distance)
    _, winner = found[0]
    dot = float(q @ index.nodes[winner])
    return NearestResult(exemplar_id=winner, dot=dot, d_c=1.0 - sigmoid(dot))


def navigation_sequence(index: HnswIndex, query: Embedding,
                        metric: str = "sigmoid") -> list[int]:
    """Node visit order of a full query, for navigation diagnostics.

    The sequence covers the greedy descent plus every beam expansion at
    layer 0. Any strictly increasing transform of the dot product yields the
    same sequence, which is what makes the sigmoid distance interchangeable
    with plain negative-dot ordering.
    """
    if metric not in _METRICS:
        raise DataContractError(f"metric must be one of {sorted(_METRICS)}")
    distance = _METRICS[metric]
    q = _check_query(index, query)
    trace: list[int] = []
    ep = _descend(index, q, distance, trace=trace)
    beam_trace: list[int] = []
    _search_layer(index.nodes, index.layers[0], q, [ep],
                  index.params.ef_search, distance, trace=beam_trace)
    return trace + beam_trace


def average_distance(index: HnswIndex, query: Embedding) -> float:
    """Mean sigmoid distance between the query and the top-layer sample."""
    q = _check_query(index, query)
    top = index.top_layer_ids()
    return float(np.mean([_sigmoid_distance(q, index.nodes[i]) for i in top]))


def select_index(indices: dict[int, HnswIndex], proposal_box: Box) -> HnswIndex:
    """Pick the per-level index by the shared box-height routing."""
    missing = [lv for lv in LEVELS if lv not in indices]
    if missing:
        raise DataContractError(f"missing indices for levels {missing}")
    return indices[route_level(proposal_box)]


# -- serialization -----------------------------------------------------------

def save_index(index: HnswIndex, path: str | os.PathLike) -> None:
    """Binary index file: params, vectors, and per-layer adjacency."""
    node_ids = sorted(index.nodes)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(INDEX_MAGIC)
        _binio.write_u32(fh, INDEX_VERSION)
        _binio.write_u32(fh, index.level)
        _binio.write_u32(fh, index.params.M)
        _binio.write_u32(fh, index.params.ef_construction)
        _binio.write_u32(fh, index.params.ef_search)
        _binio.write_f64(fh, index.params.level_lambda)
        _binio.write_u64(fh, index.params.seed)
        _binio.write_u32(fh, len(node_ids))
        _binio.write_u32(fh, index.entry_point)
        _binio.write_u32(fh, len(index.layers))
        for node_id in node_ids:
            vec = index.nodes[node_id]
            _binio.write_u32(fh, node_id)
            _binio.write_u32(fh, index.max_layer_of(node_id))
            _binio.write_u32(fh, vec.shape[0])
            _binio.write_f64_array(fh, vec)
        for layer in index.layers:
            _binio.write_u32(fh, len(layer))
            for node_id in sorted(layer):
                neighbors = layer[node_id]
                _binio.write_u32(fh, node_id)
                _binio.write_u32(fh, len(neighbors))
                for nb in neighbors:
                    _binio.write_u32(fh, nb)
    os.replace(tmp, path)


def load_index(path: str | os.PathLike) -> HnswIndex:
    with open(path, "rb") as fh:
        _binio.expect_magic(fh, INDEX_MAGIC, "index")
        version = _binio.read_u32(fh)
        if version != INDEX_VERSION:
            raise DataContractError(f"unsupported index version {version}")
        level = _binio.read_u32(fh)
        params = HnswParams(M=_binio.read_u32(fh),
                            ef_construction=_binio.read_u32(fh),
                            ef_search=_binio.read_u32(fh),
                            level_lambda=_binio.read_f64(fh),
                            seed=_binio.read_u64(fh))
        num_nodes = _binio.read_u32(fh)
        entry_point = _binio.read_u32(fh)
        num_layers = _binio.read_u32(fh)
        nodes: dict[int, np.ndarray] = {}
        declared_layers: dict[int, int] = {}
        for _ in range(num_nodes):
            node_id = _binio.read_u32(fh)
            declared_layers[node_id] = _binio.read_u32(fh)
            dim = _binio.read_u32(fh)
            nodes[node_id] = _binio.read_f64_array(fh, (dim,))
        layers: list[dict[int, list[int]]] = []
        for _ in range(num_layers):
            layer: dict[int, list[int]] = {}
            for _ in range(_binio.read_u32(fh)):
                node_id = _binio.read_u32(fh)
                count = _binio.read_u32(fh)
                layer[node_id] = [_binio.read_u32(fh) for _ in range(count)]
            layers.append(layer)
        if fh.read(1):
            raise DataContractError("trailing bytes after index payload")
    index = HnswIndex(level=level, nodes=nodes, layers=layers,
                      entry_point=entry_point, params=params)
    for node_id, declared in declared_layers.items():
        if index.max_layer_of(node_id) != declared:
            raise DataContractError(
                f"node {node_id} layer membership does not match its record")
    validate_index(index)
    return index
