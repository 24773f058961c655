"""OPF oracle (training labels) and the experiment cost function"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import config
from controller import ReactiveBox
from errors import DimensionError, OpfNotConvergedError, ScenarioFileError
from grid import (
    GridNetwork,
    PowerScenario,
    SensitivityMatrices,
    assemble_q,
    solve_distflow,
    voltages,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CostWeights:
    voltage_weight: float = config.VOLTAGE_WEIGHT
    loss_matrix: Optional[np.ndarray] = None    # None -> mat.R

    def __post_init__(self):
        if self.voltage_weight <= 0:
            raise ValueError(f"voltage_weight must be positive, got {self.voltage_weight}")
        if self.loss_matrix is not None:
            m = np.asarray(self.loss_matrix, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.allclose(m, m.T, atol=1e-12):
                raise ValueError("loss_matrix must be a symmetric square matrix")
            object.__setattr__(self, 'loss_matrix', m)

    def loss(self, mat: SensitivityMatrices) -> np.ndarray:
        return mat.R if self.loss_matrix is None else self.loss_matrix


def evaluate_cost(v: np.ndarray, q_full: np.ndarray, loss_matrix: np.ndarray,
                  voltage_weight: float = config.VOLTAGE_WEIGHT) -> Tuple[float, float]:
    """(voltage_weight |v - 1|^2, q^T L q) for given voltages and full reactive vector"""
    dev = np.asarray(v, dtype=float) - 1.0
    q_full = np.asarray(q_full, dtype=float)
    return float(voltage_weight * dev @ dev), float(q_full @ loss_matrix @ q_full)


def cost(mat: SensitivityMatrices, scen: PowerScenario, q_c: np.ndarray,
         w: CostWeights = CostWeights(), net: Optional[GridNetwork] = None,
         pf_model: str = 'linear') -> Tuple[float, float]:
    """(volt_cost, loss_cost) with v from the configured power-flow model"""
    if pf_model == 'nonlinear' and net is None:
        raise ValueError("the nonlinear cost needs the network")
    q_full = assemble_q(mat, scen, q_c)
    v = voltages(net, mat, scen, q_c, pf_model)
    return evaluate_cost(v, q_full, w.loss(mat), w.voltage_weight)


@dataclass
class OpfResult:
    q_star: np.ndarray          # over controllable buses, p.u.
    v_star: np.ndarray          # all buses 1..N
    kkt_residual: float
    iterations: int
    objective: float
    model: str = 'lindistflow'
    objective_history: List[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.q_star, self.v_star, self.kkt_residual))


@dataclass
class _Qp:
    """0.5 q^T H q + lin^T q + const over the controllable block"""
    H: np.ndarray
    lin: np.ndarray
    const: float

    def value(self, q: np.ndarray) -> float:
        return float(0.5 * q @ self.H @ q + self.lin @ q + self.const)

    def grad(self, q: np.ndarray) -> np.ndarray:
        return self.H @ q + self.lin


def _build_qp(mat: SensitivityMatrices, scen: PowerScenario, w: CostWeights,
              bias: Optional[np.ndarray] = None) -> _Qp:
    c, u = mat.c_rows, mat.u_rows
    q_u = np.asarray(scen.q_uncontrolled, dtype=float)
    loss = w.loss(mat)
    offset = mat.R @ np.asarray(scen.p, dtype=float)     # v - 1 at q_C = 0
    if len(u):
        offset = offset + mat.X[:, u] @ q_u
    if bias is not None:
        offset = offset + bias
    X_c = mat.X[:, c]
    wv = w.voltage_weight
    H = 2.0 * wv * X_c.T @ X_c + 2.0 * loss[np.ix_(c, c)]
    lin = 2.0 * wv * X_c.T @ offset
    const = wv * float(offset @ offset)
    if len(u):
        lin = lin + 2.0 * loss[np.ix_(c, u)] @ q_u
        const += float(q_u @ loss[np.ix_(u, u)] @ q_u)
    return _Qp(0.5 * (H + H.T), lin, const)


def kkt_residual(qp: _Qp, q: np.ndarray, box: ReactiveBox) -> float:
    """|q - Proj(q - grad f(q))|_inf"""
    return float(np.max(np.abs(q - box.clip(q - qp.grad(q))))) if q.size else 0.0


def _projected_newton(qp: _Qp, box: ReactiveBox, q0: np.ndarray, tol: float, max_iter: int,
                      track: bool) -> Tuple[np.ndarray, float, int, List[float]]:
    """Fixed-step 1/Lambda projected gradient, each step followed by a Newton step on the free set"""
    lam = float(np.max(np.linalg.eigvalsh(qp.H))) if qp.H.size else 0.0
    q = box.clip(q0)
    history = [qp.value(q)] if track else []
    if lam <= 0.0:
        return q, kkt_residual(qp, q, box), 0, history

    residual = kkt_residual(qp, q, box)
    it = 0
    while residual >= tol and it < max_iter:
        it += 1
        q_pg = box.clip(q - qp.grad(q) / lam)
        f_pg = qp.value(q_pg)
        free = (q_pg > box.q_min) & (q_pg < box.q_max)
        if np.any(free):
            g = qp.grad(q_pg)
            d = np.zeros_like(q_pg)
            try:
                d[free] = -np.linalg.solve(qp.H[np.ix_(free, free)], g[free])
            except np.linalg.LinAlgError:
                d[:] = 0.0
            alpha = 1.0
            for _ in range(30):
                q_try = box.clip(q_pg + alpha * d)
                if qp.value(q_try) <= f_pg:
                    q_pg, f_pg = q_try, qp.value(q_try)
                    break
                alpha *= 0.5
        q = q_pg
        if track:
            history.append(f_pg)
        residual = kkt_residual(qp, q, box)
    return q, residual, it, history


def solve_opf(mat: SensitivityMatrices, scen: PowerScenario, box: ReactiveBox,
              w: CostWeights = CostWeights(), tol: float = config.OPF_TOL,
              max_iter: int = config.OPF_MAX_ITER, q0: Optional[np.ndarray] = None,
              net: Optional[GridNetwork] = None, nonlinear_passes: int = 0,
              track_objective: bool = False) -> OpfResult:
    """Box-constrained convex QP in q_C against LinDistFlow.

    With nonlinear_passes > 0 the linear model is corrected by the DistFlow
    voltage offset at the current optimum and re-solved, once per pass.
    """
    n_c = len(mat.controllable)
    if box.size != n_c:
        raise DimensionError(f"box has {box.size} entries for {n_c} controllable buses")
    if nonlinear_passes and net is None:
        raise ValueError("nonlinear refinement needs the network")

    start = np.zeros(n_c) if q0 is None else np.asarray(q0, dtype=float)
    qp = _build_qp(mat, scen, w)
    q, residual, iters, history = _projected_newton(qp, box, start, tol, max_iter, track_objective)
    if residual >= tol:
        raise OpfNotConvergedError(
            f"OPF residual {residual:.3e} above {tol:g} after {iters} iterations",
            {'residual': residual, 'iterations': iters, 'label': scen.label},
        )

    for _ in range(nonlinear_passes):
        v_lin = voltages(net, mat, scen, q, 'linear')
        bias = solve_distflow(net, scen, q) - v_lin
        qp = _build_qp(mat, scen, w, bias)
        q, residual, more, tail = _projected_newton(qp, box, q, tol, max_iter, track_objective)
        iters += more
        history.extend(tail)
        if residual >= tol:
            raise OpfNotConvergedError(
                f"refined OPF residual {residual:.3e} above {tol:g}",
                {'residual': residual, 'iterations': iters, 'label': scen.label},
            )

    if nonlinear_passes:
        v_star = solve_distflow(net, scen, q)
        model = f'lindistflow+distflow{nonlinear_passes}'
    else:
        v_star = voltages(net, mat, scen, q, 'linear')
        model = 'lindistflow'
    return OpfResult(q, v_star, residual, iters, qp.value(q), model, history)


def write_labels(path: str, v_c: np.ndarray, q_star: np.ndarray, controllable: Sequence[int],
                 base_mva: float, meta: Optional[Dict[str, object]] = None) -> str:
    """Label CSV: `# key = value` header lines, then v_bus<k> (p.u.) and q_bus<k> (MVar) columns"""
    v_c = np.atleast_2d(np.asarray(v_c, dtype=float))
    q_star = np.atleast_2d(np.asarray(q_star, dtype=float))
    header = {'base_mva': base_mva}
    header.update(meta or {})
    df = pd.DataFrame(
        np.hstack([v_c, q_star * base_mva]),
        columns=[f'v_bus{b}' for b in controllable] + [f'q_bus{b}' for b in controllable],
    )
    with open(path, 'w') as f:
        for key, value in header.items():
            f.write(f"# {key} = {value}\n")
        df.to_csv(f, index=False, float_format='%.17g')
    return path


def read_labels(path: str) -> Tuple[Dict[str, str], List[int], np.ndarray, np.ndarray]:
    """(header, controllable ids, v_c p.u., q_star p.u.)"""
    header: Dict[str, str] = {}
    with open(path, 'r') as f:
        for raw in f:
            if not raw.startswith('#'):
                break
            key, _, value = raw[1:].partition('=')
            header[key.strip()] = value.strip()
    df = pd.read_csv(path, comment='#')
    v_cols = [c for c in df.columns if c.startswith('v_bus')]
    q_cols = [c for c in df.columns if c.startswith('q_bus')]
    controllable = [int(c[len('v_bus'):]) for c in v_cols]
    if [int(c[len('q_bus'):]) for c in q_cols] != controllable:
        raise ScenarioFileError(path, 0, "v and q label columns do not match")
    for column in v_cols + q_cols:
        values = pd.to_numeric(df[column], errors='coerce')
        bad = values.isna()
        if bad.any():
            raise ScenarioFileError(path, int(bad.idxmax()) + 1, f"non-numeric value in column {column}")
    base = float(header.get('base_mva', config.BASE_MVA))
    return header, controllable, df[v_cols].to_numpy(float), df[q_cols].to_numpy(float) / base
