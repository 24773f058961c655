"""Network-wide equilibrium function from per-subgraph ICNNs, stability constants and the incremental update"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

import config
from errors import CheckpointError, ControlPreconditionError, DimensionError, TopologyError
from icnn import (
    IcnnModel,
    cap_lipschitz,
    icnn_input_gradient,
    init_model,
    lipschitz_bound,
    load_model,
    save_model,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
BUNDLE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class CommGraph:
    nodes: Tuple[int, ...]
    edges: FrozenSet[Tuple[int, int]] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, 'nodes', tuple(sorted({int(n) for n in self.nodes})))
        normalised = set()
        node_set = set(self.nodes)
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise TopologyError(f"self-loop at bus {a} in communication graph", (a, b))
            if a not in node_set or b not in node_set:
                raise TopologyError(f"communication edge {a}-{b} touches a non-controllable bus", (a, b))
            normalised.add((min(a, b), max(a, b)))
        object.__setattr__(self, 'edges', frozenset(normalised))

    @classmethod
    def complete(cls, nodes: Iterable[int]) -> 'CommGraph':
        nodes = sorted(set(nodes))
        return cls(tuple(nodes), frozenset((a, b) for i, a in enumerate(nodes) for b in nodes[i + 1:]))

    @classmethod
    def edgeless(cls, nodes: Iterable[int]) -> 'CommGraph':
        return cls(tuple(nodes))

    @classmethod
    def from_cliques(cls, nodes: Iterable[int], cliques: Iterable[Iterable[int]]) -> 'CommGraph':
        edges = set()
        for clique in cliques:
            members = sorted(set(clique))
            edges.update((a, b) for i, a in enumerate(members) for b in members[i + 1:])
        return cls(tuple(nodes), frozenset(edges))

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(self.nodes)
        graph.add_edges_from(sorted(self.edges))
        return graph


@dataclass(frozen=True)
class Partition:
    subgraphs: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, 'subgraphs', tuple(tuple(sorted(set(int(b) for b in s))) for s in self.subgraphs))
        if any(len(s) == 0 for s in self.subgraphs):
            raise TopologyError("partition contains an empty subgraph")

    @property
    def covered(self) -> set:
        return {b for s in self.subgraphs for b in s}

    def to_lists(self) -> List[List[int]]:
        return [list(s) for s in self.subgraphs]


def validate_partition(partition: Partition, graph: CommGraph) -> None:
    """Every subgraph must be a clique of `graph` and the union must be all of its nodes"""
    g = graph.to_networkx()
    for sub in partition.subgraphs:
        unknown = [b for b in sub if b not in g]
        if unknown:
            raise TopologyError(f"subgraph {list(sub)} names buses outside the graph: {unknown}")
        missing = sorted(tuple(sorted(e)) for e in nx.non_edges(g.subgraph(sub)))
        if missing:
            a, b = missing[0]
            raise TopologyError(f"subgraph {list(sub)} is not a clique: missing link {a}-{b}", (a, b))
    if partition.covered != set(graph.nodes):
        missing = sorted(set(graph.nodes) - partition.covered)
        extra = sorted(partition.covered - set(graph.nodes))
        raise TopologyError(f"partition does not cover the controllable set (missing {missing}, extra {extra})")


def cover_cliques(graph: CommGraph) -> Partition:
    """Greedy clique cover: take a maximal clique through the highest-degree uncovered node.

    Among the maximal cliques through that node the one covering the most
    uncovered buses wins, then the larger one, then the smallest bus ids.
    Cliques may overlap when that makes them larger.
    """
    g = graph.to_networkx()
    uncovered = set(graph.nodes)
    cliques: List[Tuple[int, ...]] = []
    while uncovered:
        seed = min(uncovered, key=lambda n: (-g.degree[n], n))
        options = [tuple(sorted(c)) for c in nx.find_cliques(g, nodes=[seed])]
        best = min(options, key=lambda c: (-len(uncovered.intersection(c)), -len(c), c))
        cliques.append(best)
        uncovered -= set(best)
    return Partition(tuple(cliques))


@dataclass(frozen=True, eq=False)
class ReactiveBox:
    """Per-bus reactive capability over the controllable buses (p.u.)"""
    q_min: np.ndarray
    q_max: np.ndarray
    base_mva: float = config.BASE_MVA

    def __post_init__(self):
        q_min = np.asarray(self.q_min, dtype=float)
        q_max = np.asarray(self.q_max, dtype=float)
        if q_min.shape != q_max.shape or q_min.ndim != 1:
            raise DimensionError(f"box bounds have shapes {q_min.shape} and {q_max.shape}")
        if np.any(q_min > q_max):
            raise ControlPreconditionError("box has q_min > q_max")
        object.__setattr__(self, 'q_min', q_min)
        object.__setattr__(self, 'q_max', q_max)

    @classmethod
    def from_mvar(cls, q_lim_mvar: Sequence[float], base_mva: float = config.BASE_MVA) -> 'ReactiveBox':
        """Symmetric box -q_lim <= q <= q_lim, limits in MVar"""
        lim = np.asarray(q_lim_mvar, dtype=float) / base_mva
        return cls(-lim, lim, base_mva)

    @property
    def size(self) -> int:
        return self.q_min.shape[0]

    def contains(self, q: np.ndarray, tol: float = 0.0) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.q_min - tol) and np.all(q <= self.q_max + tol))

    def clip(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.q_min, self.q_max)

    def sample(self, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
        shape = (self.size,) if n is None else (n, self.size)
        return rng.uniform(self.q_min, self.q_max, size=shape)

    def to_dict(self) -> dict:
        return {
            'q_min_mvar': (self.q_min * self.base_mva).tolist(),
            'q_max_mvar': (self.q_max * self.base_mva).tolist(),
            'base_mva': self.base_mva,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> 'ReactiveBox':
        base = float(payload['base_mva'])
        return cls(np.asarray(payload['q_min_mvar'], dtype=float) / base,
                   np.asarray(payload['q_max_mvar'], dtype=float) / base, base)


@dataclass
class ControllerBundle:
    """phi = Proj_box(-sum_l grad g_l) over a clique partition of the controllable buses"""
    partition: Partition
    models: List[IcnnModel]
    box: ReactiveBox
    epsilon: float
    controllable: Tuple[int, ...]
    lipschitz: Optional[float] = None
    certification: Optional[dict] = None
    comm_setup: str = ''
    config_hash: str = ''
    _index: List[np.ndarray] = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        self.controllable = tuple(int(c) for c in self.controllable)
        if len(self.models) != len(self.partition.subgraphs):
            raise DimensionError(f"{len(self.models)} models for {len(self.partition.subgraphs)} subgraphs")
        if self.partition.covered != set(self.controllable):
            raise TopologyError("partition does not cover the controllable set")
        if self.box.size != len(self.controllable):
            raise DimensionError(f"box has {self.box.size} entries for {len(self.controllable)} controllable buses")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ControlPreconditionError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        position = {bus: i for i, bus in enumerate(self.controllable)}
        self._index = []
        for sub, model in zip(self.partition.subgraphs, self.models):
            if model.input_dim != len(sub):
                raise DimensionError(f"model input_dim {model.input_dim} does not match subgraph {list(sub)}")
            self._index.append(np.array([position[b] for b in sub], dtype=int))

    @property
    def size(self) -> int:
        return len(self.controllable)

    @property
    def certified(self) -> bool:
        return bool(self.certification and self.certification.get('ok'))

    @property
    def subgraph_index(self) -> List[np.ndarray]:
        return self._index

    def with_models(self, models: List[IcnnModel]) -> 'ControllerBundle':
        """Same partition and box, new parameters; cached constants are dropped"""
        return ControllerBundle(self.partition, models, self.box, self.epsilon, self.controllable,
                                comm_setup=self.comm_setup, config_hash=self.config_hash)

    def with_epsilon(self, epsilon: float) -> 'ControllerBundle':
        return ControllerBundle(self.partition, self.models, self.box, epsilon, self.controllable,
                                lipschitz=self.lipschitz, comm_setup=self.comm_setup,
                                config_hash=self.config_hash)


def _as_batch(bundle: ControllerBundle, v_c: np.ndarray) -> Tuple[np.ndarray, bool]:
    v = np.asarray(v_c, dtype=float)
    single = v.ndim == 1
    batch = v[None, :] if single else v
    if batch.ndim != 2 or batch.shape[1] != bundle.size:
        raise DimensionError(f"v_c has shape {v.shape}, expected ({bundle.size},)")
    return batch, single


def phi_raw(bundle: ControllerBundle, v_c: np.ndarray) -> np.ndarray:
    batch, single = _as_batch(bundle, v_c)
    out = np.zeros_like(batch)
    for idx, model in zip(bundle.subgraph_index, bundle.models):
        out[:, idx] -= icnn_input_gradient(model, batch[:, idx])
    return out[0] if single else out


def phi(bundle: ControllerBundle, v_c: np.ndarray) -> np.ndarray:
    return np.clip(phi_raw(bundle, v_c), bundle.box.q_min, bundle.box.q_max)


def budget_terms(bundle: ControllerBundle, v: np.ndarray, v2: np.ndarray) -> np.ndarray:
    """Per-bus b_i = (phi_i(v) - phi_i(v')) (v_i - v'_i); their sum is the monotonicity slack"""
    return (phi_raw(bundle, v) - phi_raw(bundle, v2)) * (np.asarray(v) - np.asarray(v2))


def subgraph_multiplicity(partition: Partition) -> int:
    """Largest number of subgraphs sharing one bus (1 for a true partition)"""
    counts: Dict[int, int] = {}
    for sub in partition.subgraphs:
        for b in sub:
            counts[b] = counts.get(b, 0) + 1
    return max(counts.values(), default=1)


def analytic_lipschitz(bundle: ControllerBundle) -> float:
    """multiplicity * max_l L_l; also bounds the clamped phi.

    Coordinate i of phi_raw sums at most m subgraph gradients, so
    |sum_l P_l' a_l|^2 <= m sum_l |a_l|^2 <= m^2 max_l L_l^2 |v - w|^2.
    """
    if not bundle.models:
        return 0.0
    return float(subgraph_multiplicity(bundle.partition) * max(lipschitz_bound(m) for m in bundle.models))


def stable_lipschitz_cap(epsilon: float, x_norm: float, safety: float = config.SAFETY_FACTOR) -> float:
    """Largest L with epsilon <= safety * max_stable_stepsize(L, x_norm)"""
    if x_norm <= 0:
        raise ControlPreconditionError(f"|X_cc| must be positive, got {x_norm}")
    if epsilon <= 0:
        return float('inf')
    if epsilon > safety:
        raise ControlPreconditionError(f"epsilon {epsilon:g} exceeds the safety factor {safety:g}; no L certifies it")
    return float(np.sqrt(2.0 * safety / epsilon - 1.0) / x_norm)


def cap_bundle_lipschitz(bundle: ControllerBundle, limit: float) -> ControllerBundle:
    """Cap every subgraph model so that analytic_lipschitz(bundle) <= limit"""
    per_model = limit / subgraph_multiplicity(bundle.partition)
    return bundle.with_models([cap_lipschitz(m, per_model) for m in bundle.models])


class LipschitzEstimate(NamedTuple):
    sampled: float
    analytic: float


def estimate_lipschitz(bundle: ControllerBundle, region: Tuple[float, float] = config.VOLTAGE_REGION,
                       n_samples: int = config.LIPSCHITZ_SAMPLES, seed: int = 0,
                       chunk: int = 4096) -> LipschitzEstimate:
    """Largest sampled difference quotient of phi_raw over pairs drawn from the voltage box,
    reported with the analytic bound that certification uses"""
    rng = np.random.default_rng(seed)
    lo, hi = region
    best = 0.0
    remaining = n_samples
    while remaining > 0:
        n = min(chunk, remaining)
        v = rng.uniform(lo, hi, size=(n, bundle.size))
        w = rng.uniform(lo, hi, size=(n, bundle.size))
        num = np.linalg.norm(phi_raw(bundle, v) - phi_raw(bundle, w), axis=1)
        den = np.linalg.norm(v - w, axis=1)
        mask = den > 0
        if np.any(mask):
            best = max(best, float(np.max(num[mask] / den[mask])))
        remaining -= n
    return LipschitzEstimate(best, analytic_lipschitz(bundle))


def max_stable_stepsize(L: float, x_norm: float) -> float:
    """min(1, 2 / (1 + L^2 |X_cc|^2))"""
    if L < 0:
        raise ControlPreconditionError(f"Lipschitz constant must be nonnegative, got {L}")
    if x_norm <= 0:
        raise ControlPreconditionError(f"|X_cc| must be positive, got {x_norm}")
    return min(1.0, 2.0 / (1.0 + L * L * x_norm * x_norm))


def control_step(bundle: ControllerBundle, q_c: np.ndarray, v_c: np.ndarray,
                 epsilon: Optional[float] = None) -> np.ndarray:
    """q + eps (phi(v) - q); stays in the box for eps in [0, 1]"""
    eps = bundle.epsilon if epsilon is None else float(epsilon)
    if not 0.0 <= eps <= 1.0:
        raise ControlPreconditionError(f"epsilon must lie in [0, 1], got {eps}")
    q = np.asarray(q_c, dtype=float)
    if q.shape != (bundle.size,):
        raise DimensionError(f"q_c has shape {q.shape}, expected ({bundle.size},)")
    if not bundle.box.contains(q):
        raise ControlPreconditionError("q_c lies outside the reactive capability box")
    target = phi(bundle, v_c)
    if eps == 1.0:
        return target
    return bundle.box.clip(q + eps * (target - q))


def build_bundle(partition: Partition, box: ReactiveBox, controllable: Sequence[int],
                 epsilon: float = config.EPSILON, hidden: Sequence[int] = config.HIDDEN_LAYERS,
                 beta: float = config.SOFTPLUS_BETA, seed: int = 0,
                 skip_connections: bool = True, comm_setup: str = '') -> ControllerBundle:
    """Fresh randomly initialised ICNN per subgraph"""
    models = [
        init_model(len(sub), hidden=hidden, beta=beta, seed=seed + k, skip_connections=skip_connections)
        for k, sub in enumerate(partition.subgraphs)
    ]
    return ControllerBundle(partition, models, box, epsilon, tuple(controllable), comm_setup=comm_setup)


def bundle_manifest(bundle: ControllerBundle) -> dict:
    return {
        'format_version': BUNDLE_FORMAT_VERSION,
        'comm_setup': bundle.comm_setup,
        'controllable': list(bundle.controllable),
        'partition': bundle.partition.to_lists(),
        'box': bundle.box.to_dict(),
        'epsilon': bundle.epsilon,
        'lipschitz': bundle.lipschitz,
        'certification': bundle.certification,
        'config_hash': bundle.config_hash,
        'models': [f'icnn_{k}.json' for k in range(len(bundle.models))],
    }


def save_bundle(bundle: ControllerBundle, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    manifest = bundle_manifest(bundle)
    for name, model in zip(manifest['models'], bundle.models):
        save_model(model, os.path.join(directory, name))
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2)
    logger.info("Saved bundle %s (%d subgraphs) to %s", bundle.comm_setup or '-', len(bundle.models), directory)
    return path


def load_bundle(directory: str) -> ControllerBundle:
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, 'r') as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read bundle manifest {path}: {e}") from e
    if manifest.get('format_version') != BUNDLE_FORMAT_VERSION:
        raise CheckpointError(f"unsupported bundle format_version {manifest.get('format_version')!r}")
    try:
        models = [load_model(os.path.join(directory, name)) for name in manifest['models']]
        return ControllerBundle(
            partition=Partition(tuple(tuple(s) for s in manifest['partition'])),
            models=models,
            box=ReactiveBox.from_dict(manifest['box']),
            epsilon=float(manifest['epsilon']),
            controllable=tuple(manifest['controllable']),
            lipschitz=manifest.get('lipschitz'),
            certification=manifest.get('certification'),
            comm_setup=manifest.get('comm_setup', ''),
            config_hash=manifest.get('config_hash', ''),
        )
    except KeyError as e:
        raise CheckpointError(f"bundle manifest missing field {e}") from e
