"""Radial network model, per-unit conversion and power-flow solvers"""
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

import config
from errors import (
    DimensionError,
    DivergenceError,
    ImpedanceError,
    NetworkFileError,
    NumericalError,
    TopologyError,
    VoltageCollapseError,
)

logger = logging.getLogger(__name__)

PF_MODELS = ('linear', 'nonlinear')


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r_ohm: float
    x_ohm: float

    @property
    def edge(self) -> Tuple[int, int]:
        return (self.from_bus, self.to_bus)


@dataclass(frozen=True)
class _Tree:
    parent: Tuple[int, ...]     # parent[0] == -1
    line_of: Tuple[int, ...]    # index into lines of the branch feeding each bus
    order: Tuple[int, ...]      # BFS order from the substation, excluding bus 0


@dataclass(frozen=True)
class GridNetwork:
    """Radial grid rooted at the substation (bus 0, fixed at 1 p.u.)"""
    bus_count: int
    lines: Tuple[Line, ...]
    base_kv: float = config.BASE_KV
    base_mva: float = config.BASE_MVA
    controllable: Tuple[int, ...] = ()
    name: str = ''
    _tree: Optional[_Tree] = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, 'lines', tuple(
            l if isinstance(l, Line) else Line(int(l[0]), int(l[1]), float(l[2]), float(l[3]))
            for l in self.lines
        ))
        object.__setattr__(self, 'controllable', tuple(sorted({int(c) for c in self.controllable})))
        object.__setattr__(self, '_tree', _validate(self))

    @property
    def n(self) -> int:
        """Number of non-substation buses"""
        return self.bus_count - 1

    @property
    def z_base(self) -> float:
        return self.base_kv ** 2 / self.base_mva

    @property
    def uncontrollable(self) -> Tuple[int, ...]:
        ctrl = set(self.controllable)
        return tuple(b for b in range(1, self.bus_count) if b not in ctrl)

    def branch_pu(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-unit (r, x) of the branch feeding each bus, indexed by bus id (entry 0 unused)"""
        r = np.zeros(self.bus_count)
        x = np.zeros(self.bus_count)
        for bus in range(1, self.bus_count):
            line = self.lines[self._tree.line_of[bus]]
            r[bus] = line.r_ohm / self.z_base
            x[bus] = line.x_ohm / self.z_base
        return r, x


def _validate(net: GridNetwork) -> _Tree:
    if net.bus_count < 2:
        raise TopologyError(f"network needs at least 2 buses, got {net.bus_count}")
    if net.base_kv <= 0 or net.base_mva <= 0:
        raise ImpedanceError(f"bases must be positive (base_kv={net.base_kv}, base_mva={net.base_mva})")

    graph = nx.Graph()
    graph.add_nodes_from(range(net.bus_count))
    for idx, line in enumerate(net.lines):
        a, b = line.edge
        if not (0 <= a < net.bus_count and 0 <= b < net.bus_count):
            raise TopologyError(f"line {a}-{b} references a bus outside 0..{net.n}", line.edge)
        if a == b:
            raise TopologyError(f"self-loop at bus {a}", line.edge)
        if line.r_ohm < 0:
            raise ImpedanceError(f"negative resistance on line {a}-{b}", line.edge)
        if line.x_ohm <= 0:
            raise ImpedanceError(f"non-positive reactance on line {a}-{b}", line.edge)
        if nx.has_path(graph, a, b):
            raise TopologyError(f"line {a}-{b} closes a cycle", line.edge)
        graph.add_edge(a, b, index=idx)

    if len(net.lines) != net.n:
        raise TopologyError(f"a radial network with {net.bus_count} buses needs {net.n} lines, got {len(net.lines)}")

    bad = [c for c in net.controllable if not 1 <= c <= net.n]
    if bad:
        raise TopologyError(f"controllable buses outside 1..{net.n}: {bad}")

    if not nx.is_tree(graph):
        missing = sorted(set(graph) - nx.node_connected_component(graph, 0))
        raise TopologyError(f"buses unreachable from the substation: {missing}")

    parent = [-1] * net.bus_count
    line_of = [-1] * net.bus_count
    order: List[int] = []
    for m, nb in nx.bfs_edges(graph, 0, sort_neighbors=sorted):
        parent[nb] = m
        line_of[nb] = graph.edges[m, nb]['index']
        order.append(nb)
    return _Tree(tuple(parent), tuple(line_of), tuple(order))


@dataclass(frozen=True, eq=False)
class SensitivityMatrices:
    """LinDistFlow sensitivities; rows are buses 1..N in id order"""
    R: np.ndarray
    X: np.ndarray
    X_cc: np.ndarray
    X_norm: float
    index_map: Dict[int, int]
    controllable: Tuple[int, ...]
    uncontrollable: Tuple[int, ...]

    @property
    def n(self) -> int:
        return self.R.shape[0]

    @property
    def c_rows(self) -> np.ndarray:
        return np.array([self.index_map[b] for b in self.controllable], dtype=int)

    @property
    def u_rows(self) -> np.ndarray:
        return np.array([self.index_map[b] for b in self.uncontrollable], dtype=int)


@dataclass(frozen=True, eq=False)
class PowerScenario:
    """One operating point; p over buses 1..N, q over the uncontrollable buses (p.u.)"""
    p: np.ndarray
    q_uncontrolled: np.ndarray
    label: str = ''

    def scaled(self, alpha: float) -> 'PowerScenario':
        return PowerScenario(alpha * np.asarray(self.p), alpha * np.asarray(self.q_uncontrolled), self.label)


def spectral_norm(a: np.ndarray, tol: float = config.NORM_TOL, max_iter: int = 100_000) -> float:
    """Largest singular value of a symmetric PSD matrix by power iteration from the ones vector"""
    n = a.shape[0]
    if n == 0:
        return 0.0
    x = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(max_iter):
        y = a @ x
        lam_new = float(np.linalg.norm(y))
        if lam_new == 0.0:
            return 0.0
        x = y / lam_new
        if abs(lam_new - lam) <= tol * lam_new:
            return lam_new
        lam = lam_new
    raise NumericalError(f"power iteration did not reach relative tolerance {tol}")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


def build_matrices(net: GridNetwork) -> SensitivityMatrices:
    n = net.n
    r, x = net.branch_pu()
    incidence = np.zeros((n, n))
    for bus in range(1, net.bus_count):
        col = bus - 1
        incidence[col, col] = -1.0
        parent = net._tree.parent[bus]
        if parent != 0:
            incidence[parent - 1, col] = 1.0
    try:
        m_inv = np.linalg.inv(incidence)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"incidence matrix of {net.name or 'network'} is singular") from e

    R = m_inv.T @ np.diag(r[1:]) @ m_inv
    X = m_inv.T @ np.diag(x[1:]) @ m_inv
    R = 0.5 * (R + R.T)
    X = 0.5 * (X + X.T)

    index_map = {bus: bus - 1 for bus in range(1, net.bus_count)}
    c_rows = [index_map[b] for b in net.controllable]
    X_cc = X[np.ix_(c_rows, c_rows)]
    x_norm = spectral_norm(X_cc) if c_rows else 0.0

    return SensitivityMatrices(
        R=_readonly(R),
        X=_readonly(X),
        X_cc=_readonly(X_cc),
        X_norm=x_norm,
        index_map=index_map,
        controllable=net.controllable,
        uncontrollable=net.uncontrollable,
    )


@lru_cache(maxsize=32)
def sensitivity(net: GridNetwork) -> SensitivityMatrices:
    """Memoised build_matrices"""
    return build_matrices(net)


def _check_dims(mat: SensitivityMatrices, scen: PowerScenario, q_c: Optional[np.ndarray]) -> None:
    if np.shape(scen.p) != (mat.n,):
        raise DimensionError(f"p has shape {np.shape(scen.p)}, expected ({mat.n},)")
    n_u = len(mat.uncontrollable)
    if np.shape(scen.q_uncontrolled) != (n_u,):
        raise DimensionError(f"q_uncontrolled has shape {np.shape(scen.q_uncontrolled)}, expected ({n_u},)")
    if q_c is not None and np.shape(q_c) != (len(mat.controllable),):
        raise DimensionError(f"q_c has shape {np.shape(q_c)}, expected ({len(mat.controllable)},)")


def assemble_q(mat: SensitivityMatrices, scen: PowerScenario, q_c: np.ndarray) -> np.ndarray:
    """Full reactive injection vector over buses 1..N"""
    _check_dims(mat, scen, q_c)
    q = np.zeros(mat.n)
    if len(mat.uncontrollable):
        q[mat.u_rows] = scen.q_uncontrolled
    if len(mat.controllable):
        q[mat.c_rows] = q_c
    return q


def solve_lindistflow(mat: SensitivityMatrices, scen: PowerScenario, q_c: np.ndarray) -> np.ndarray:
    q = assemble_q(mat, scen, q_c)
    return mat.R @ np.asarray(scen.p, dtype=float) + mat.X @ q + 1.0


def solve_distflow(net: GridNetwork, scen: PowerScenario, q_c: np.ndarray,
                   tol: float = config.SWEEP_TOL,
                   max_iter: int = config.SWEEP_MAX_ITER) -> np.ndarray:
    """Backward-forward sweep on the nonlinear branch-flow equations from a flat start"""
    mat = sensitivity(net)
    tree = net._tree
    r, x = net.branch_pu()

    p_inj = np.zeros(net.bus_count)
    q_inj = np.zeros(net.bus_count)
    p_inj[1:] = scen.p
    q_inj[1:] = assemble_q(mat, scen, q_c)

    v = np.ones(net.bus_count)
    P = np.zeros(net.bus_count)     # flow on the branch into each bus
    Q = np.zeros(net.bus_count)
    reverse = tree.order[::-1]

    for sweep in range(1, max_iter + 1):
        P_new = np.zeros(net.bus_count)
        Q_new = np.zeros(net.bus_count)
        for bus in reverse:
            m = tree.parent[bus]
            s2 = (P[bus] ** 2 + Q[bus] ** 2) / v[m] ** 2
            P_new[bus] += -p_inj[bus] + r[bus] * s2
            Q_new[bus] += -q_inj[bus] + x[bus] * s2
            if m != 0:
                P_new[m] += P_new[bus]
                Q_new[m] += Q_new[bus]
        P, Q = P_new, Q_new

        v_new = np.empty(net.bus_count)
        v_new[0] = 1.0
        for bus in tree.order:
            m = tree.parent[bus]
            vm2 = v_new[m] ** 2
            v2 = (vm2 - 2.0 * (r[bus] * P[bus] + x[bus] * Q[bus])
                  + (r[bus] ** 2 + x[bus] ** 2) * (P[bus] ** 2 + Q[bus] ** 2) / vm2)
            if not np.isfinite(v2) or v2 < config.COLLAPSE_VOLTAGE ** 2:
                raise VoltageCollapseError(
                    f"voltage at bus {bus} fell below {config.COLLAPSE_VOLTAGE} p.u. in sweep {sweep}",
                    {'bus': bus, 'sweep': sweep},
                )
            v_new[bus] = np.sqrt(v2)

        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta < tol:
            return v[1:]

    raise DivergenceError(
        f"backward-forward sweep did not converge in {max_iter} sweeps (last |dv|={delta:.3e})",
        {'sweeps': max_iter, 'last_delta': delta},
    )


def voltages(net: GridNetwork, mat: SensitivityMatrices, scen: PowerScenario,
             q_c: np.ndarray, pf_model: str = 'linear') -> np.ndarray:
    if pf_model == 'linear':
        return solve_lindistflow(mat, scen, q_c)
    if pf_model == 'nonlinear':
        return solve_distflow(net, scen, q_c)
    raise ValueError(f"unknown power-flow model {pf_model!r}; expected one of {PF_MODELS}")


def partition_controllable(mat: SensitivityMatrices, scen: PowerScenario) -> Tuple[np.ndarray, np.ndarray]:
    """(X_cc, v_tilde) such that v_C = X_cc q_C + v_tilde"""
    if not mat.controllable:
        raise DimensionError("controllable set is empty")
    _check_dims(mat, scen, None)
    c, u = mat.c_rows, mat.u_rows
    v_hat = mat.R @ np.asarray(scen.p, dtype=float) + 1.0
    v_tilde = v_hat[c].copy()
    if len(u):
        v_tilde += mat.X[np.ix_(c, u)] @ np.asarray(scen.q_uncontrolled, dtype=float)
    return mat.X_cc, v_tilde


def path_reactance(net: GridNetwork, i: int, j: int) -> float:
    """Sum of per-unit reactances shared by the root paths of buses i and j"""
    _, x = net.branch_pu()

    def root_path(b: int) -> set:
        path = set()
        while b != 0:
            path.add(b)
            b = net._tree.parent[b]
        return path

    return float(sum(x[b] for b in root_path(i) & root_path(j)))


_KEY_RE = re.compile(r'^(\w+)\s*=\s*(.+)$')


def load_network(path: str) -> GridNetwork:
    """Parse a network file: `key = value` lines, `from to r_ohm x_ohm` rows, `#` comments"""
    try:
        with open(path, 'r') as f:
            raw_lines = f.readlines()
    except OSError as e:
        raise NetworkFileError(path, 0, f"cannot read network file: {e}") from e

    settings: Dict[str, str] = {}
    rows: List[Line] = []
    row_line_no: Dict[Tuple[int, int], int] = {}

    for line_no, raw in enumerate(raw_lines, start=1):
        text = raw.split('#', 1)[0].strip()
        if not text:
            continue
        match = _KEY_RE.match(text)
        if match:
            key, value = match.group(1).lower(), match.group(2).strip()
            if key not in ('base_kv', 'base_mva', 'controllable', 'name'):
                raise NetworkFileError(path, line_no, f"unknown key {key!r}")
            settings[key] = value
            settings[f'_{key}_line'] = str(line_no)
            continue
        parts = text.split()
        if len(parts) != 4:
            raise NetworkFileError(path, line_no, f"expected 'from to r_ohm x_ohm', got {text!r}")
        try:
            line = Line(int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]))
        except ValueError as e:
            raise NetworkFileError(path, line_no, f"malformed line row: {e}") from e
        rows.append(line)
        row_line_no[line.edge] = line_no

    if not rows:
        raise NetworkFileError(path, len(raw_lines), "no line rows found")

    def _float(key: str, default: float) -> float:
        if key not in settings:
            return default
        try:
            return float(settings[key])
        except ValueError as e:
            raise NetworkFileError(path, int(settings[f'_{key}_line']), f"{key} must be a number") from e

    controllable: Sequence[int] = ()
    if 'controllable' in settings:
        body = settings['controllable'].strip()
        if not (body.startswith('[') and body.endswith(']')):
            raise NetworkFileError(path, int(settings['_controllable_line']), "controllable must be a [..] list")
        try:
            controllable = [int(tok) for tok in body[1:-1].replace(',', ' ').split()]
        except ValueError as e:
            raise NetworkFileError(path, int(settings['_controllable_line']), "controllable ids must be integers") from e

    bus_count = max(max(l.from_bus, l.to_bus) for l in rows) + 1
    try:
        net = GridNetwork(
            bus_count=bus_count,
            lines=tuple(rows),
            base_kv=_float('base_kv', config.BASE_KV),
            base_mva=_float('base_mva', config.BASE_MVA),
            controllable=tuple(controllable),
            name=settings.get('name', ''),
        )
    except (TopologyError, ImpedanceError) as e:
        edge = tuple(e.edge) if e.edge is not None else None
        if edge in row_line_no:
            line_no = row_line_no[edge]
        elif 'controllable' in str(e):
            line_no = int(settings.get('_controllable_line', 0))
        else:
            line_no = 0
        raise NetworkFileError(path, line_no, str(e)) from e

    logger.debug("Loaded network %s: %d buses, %d controllable", net.name or path, net.bus_count, len(net.controllable))
    return net


def scenario_from_full(net: GridNetwork, p: np.ndarray, q: np.ndarray, label: str = '') -> PowerScenario:
    """Build a scenario from full p, q vectors over buses 1..N (q on controllable buses dropped)"""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (net.n,) or q.shape != (net.n,):
        raise DimensionError(f"expected vectors of length {net.n}, got {p.shape} and {q.shape}")
    u_rows = [b - 1 for b in net.uncontrollable]
    return PowerScenario(p=p, q_uncontrolled=q[u_rows], label=label)
