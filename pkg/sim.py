"""Closed-loop episodes, equilibria and day-long experiment runs"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

import config
from controller import ControllerBundle, analytic_lipschitz, control_step, max_stable_stepsize, phi
from errors import ControlPreconditionError, EquilibriumError, NumericalError
from grid import (
    PF_MODELS,
    GridNetwork,
    PowerScenario,
    SensitivityMatrices,
    assemble_q,
    partition_controllable,
    sensitivity,
    voltages,
)
from opf import CostWeights, evaluate_cost, solve_opf
from pool import run_ordered

logger = logging.getLogger(__name__)

COST_MODES = ('terminal', 'per_step')


@dataclass
class NoiseConfig:
    d_q: float = 0.0    # additive setpoint disturbance bound (p.u.)
    d_v: float = 0.0    # multiplicative measurement noise bound (fraction)
    distribution: str = 'uniform'

    def __post_init__(self):
        if self.d_q < 0 or self.d_v < 0:
            raise ValueError("noise magnitudes must be nonnegative")
        if self.distribution != 'uniform':
            raise ValueError(f"unsupported noise distribution {self.distribution!r}")


@dataclass
class SimConfig:
    steps_T: int = config.STEPS_T
    epsilon: Optional[float] = None     # None -> the bundle's epsilon
    pf_model: str = 'linear'
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    track_lyapunov: bool = False
    carry_over: bool = True
    cost_mode: str = 'terminal'
    include_opf: bool = True
    workers: int = 1
    show_progress: bool = False

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        if self.steps_T < 1:
            raise ValueError(f"steps_T must be >= 1, got {self.steps_T}")
        if self.epsilon is not None and not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.pf_model not in PF_MODELS:
            raise ValueError(f"pf_model must be one of {PF_MODELS}")
        if self.cost_mode not in COST_MODES:
            raise ValueError(f"cost_mode must be one of {COST_MODES}")


@dataclass
class Equilibrium:
    v_star: np.ndarray      # all buses
    q_star: np.ndarray
    residual: float
    steps: int
    epsilon: float

    def __iter__(self):
        return iter((self.v_star, self.q_star, self.residual))


@dataclass
class SimTrace:
    v: np.ndarray                   # (steps + 1, N) true voltages
    q_c: np.ndarray                 # (steps + 1, |C|)
    volt_cost: np.ndarray
    loss_cost: np.ndarray
    lyapunov_D: Optional[np.ndarray] = None
    residual: float = float('nan')
    error: Optional[str] = None
    label: str = ''

    @property
    def steps(self) -> int:
        return self.q_c.shape[0] - 1

    @property
    def truncated(self) -> bool:
        return self.error is not None

    def to_frame(self, controllable: Optional[List[int]] = None) -> pd.DataFrame:
        n_c = self.q_c.shape[1]
        controllable = controllable or list(range(n_c))
        df = pd.DataFrame({'step': np.arange(self.q_c.shape[0])})
        for k in range(self.v.shape[1]):
            df[f'v_bus{k + 1}'] = self.v[:, k]
        for j, bus in enumerate(controllable):
            df[f'q_bus{bus}'] = self.q_c[:, j]
        df['volt_cost'] = self.volt_cost
        df['loss_cost'] = self.loss_cost
        df['lyapunov_D'] = self.lyapunov_D if self.lyapunov_D is not None else np.nan
        return df


def lyapunov_value(mat: SensitivityMatrices, v: np.ndarray, v_star: np.ndarray) -> np.ndarray:
    """(v_C - v*_C)^T X_cc^-1 (v_C - v*_C), rows of `v` over all buses"""
    c = mat.c_rows
    diff = np.atleast_2d(v)[:, c] - np.asarray(v_star)[c]
    sol = np.linalg.solve(mat.X_cc, diff.T)
    return np.sum(diff.T * sol, axis=0)


def run_episode(net: GridNetwork, bundle: ControllerBundle, scen: PowerScenario, q0: np.ndarray,
                cfg: SimConfig = SimConfig(), v_star: Optional[np.ndarray] = None,
                rng: Optional[np.random.Generator] = None,
                weights: CostWeights = CostWeights()) -> SimTrace:
    """q(t+1) = q(t) + eps (phi(v_C(t)) - q(t)) [+ d_q], v(t+1) from the power-flow model.

    Measurement noise only touches what the controller sees; the trace keeps true
    voltages. Setpoint disturbances saturate at the box.
    """
    mat = sensitivity(net)
    q = np.asarray(q0, dtype=float)
    if not bundle.box.contains(q):
        raise ControlPreconditionError("initial setpoint lies outside the reactive capability box")
    eps = bundle.epsilon if cfg.epsilon is None else cfg.epsilon
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    c = mat.c_rows
    loss = weights.loss(mat)

    vs, qs, volt, lcost = [], [], [], []
    error = None

    def record(v_now, q_now):
        vc, lc = evaluate_cost(v_now, assemble_q(mat, scen, q_now), loss, weights.voltage_weight)
        vs.append(v_now)
        qs.append(q_now.copy())
        volt.append(vc)
        lcost.append(lc)

    try:
        v = voltages(net, mat, scen, q, cfg.pf_model)
    except NumericalError as e:
        raise NumericalError(f"power flow failed at episode start ({scen.label}): {e}") from e
    record(v, q)

    for t in range(1, cfg.steps_T + 1):
        u_v = rng.uniform(-1.0, 1.0, size=c.size)
        u_q = rng.uniform(-1.0, 1.0, size=c.size)
        observed = v[c] * (1.0 + cfg.noise.d_v * u_v)
        q = control_step(bundle, q, observed, eps)
        if cfg.noise.d_q:
            q = bundle.box.clip(q + cfg.noise.d_q * u_q)
        try:
            v = voltages(net, mat, scen, q, cfg.pf_model)
        except NumericalError as e:
            error = f"step {t}: {e}"
            logger.warning("Episode %r truncated: %s", scen.label, error)
            break
        record(v, q)

    v_arr = np.array(vs)
    q_arr = np.array(qs)
    residual = float(np.max(np.abs(phi(bundle, v_arr[-1][c]) - q_arr[-1]))) if c.size else 0.0
    lyap = lyapunov_value(mat, v_arr, v_star) if v_star is not None else None
    return SimTrace(v_arr, q_arr, np.array(volt), np.array(lcost), lyap, residual, error, scen.label)


def find_equilibrium(net: GridNetwork, bundle: ControllerBundle, scen: PowerScenario,
                     tol: float = config.EQUILIBRIUM_TOL,
                     max_steps: int = config.EQUILIBRIUM_MAX_STEPS,
                     q0: Optional[np.ndarray] = None, lipschitz: Optional[float] = None) -> Equilibrium:
    """Damped fixed-point iteration q <- q + eps (phi(X_cc q + v~) - q) on the linear model.

    eps is the certified step safety * max_stable_stepsize(L) with the analytic
    L of the bundle (or `lipschitz` when given), halved on each stalled attempt.
    """
    mat = sensitivity(net)
    X_cc, v_tilde = partition_controllable(mat, scen)
    if lipschitz is None:
        lipschitz = analytic_lipschitz(bundle)
    eps = config.SAFETY_FACTOR * max_stable_stepsize(lipschitz, mat.X_norm)
    start = np.zeros(bundle.size) if q0 is None else np.asarray(q0, dtype=float)
    start = bundle.box.clip(start)

    residual = float('inf')
    for attempt in range(4):
        q = start.copy()
        for step in range(1, max_steps + 1):
            target = phi(bundle, X_cc @ q + v_tilde)
            residual = float(np.max(np.abs(target - q)))
            if residual < tol:
                v_star = voltages(net, mat, scen, q, 'linear')
                return Equilibrium(v_star, q, residual, step, eps)
            if not np.isfinite(residual):
                break
            q = bundle.box.clip(q + eps * (target - q))
        logger.debug("Equilibrium search with eps=%.3g stalled at residual %.3e", eps, residual)
        eps *= 0.5
    raise EquilibriumError(
        f"no equilibrium within {max_steps} steps (residual {residual:.3e}) for {scen.label or 'scenario'}",
        {'residual': residual, 'label': scen.label},
    )


@dataclass
class DayReport:
    controller: str
    pf_model: str
    noise: dict
    points: pd.DataFrame            # per-point costs for every compared controller
    totals: pd.DataFrame            # index: controller; Cost-Volt, Cost-Loss, Total Cost, Improvement %
    terminal_v: Dict[str, np.ndarray]
    audits: List[dict] = field(default_factory=list)
    config_hash: str = ''
    errors: int = 0

    def total(self, name: str) -> float:
        return float(self.totals.loc[name, 'Total Cost'])

    def to_dict(self) -> dict:
        return {
            'controller': self.controller,
            'pf_model': self.pf_model,
            'noise': self.noise,
            'config_hash': self.config_hash,
            'errors': self.errors,
            'totals': self.totals.reset_index().to_dict(orient='records'),
            'points': self.points.to_dict(orient='records'),
            'audits': self.audits,
            'terminal_v': {label: np.asarray(v).tolist() for label, v in self.terminal_v.items()},
        }


def _totals_table(sums: Dict[str, Dict[str, float]]) -> pd.DataFrame:
    rows = []
    base = sums['NoCtrl']['volt'] + sums['NoCtrl']['loss']
    for name, s in sums.items():
        total = s['volt'] + s['loss']
        improvement = 100.0 * (base - total) / base if base > 0 else 0.0
        rows.append({'controller': name, 'Cost-Volt': s['volt'], 'Cost-Loss': s['loss'],
                     'Total Cost': total, 'Improvement %': improvement})
    return pd.DataFrame(rows).set_index('controller')


def run_day(net: GridNetwork, bundle: ControllerBundle, day_profiles: List[PowerScenario],
            cfg: SimConfig = SimConfig(), weights: CostWeights = CostWeights(),
            name: Optional[str] = None) -> DayReport:
    """Chain episodes over a day's points and compare with no control and the OPF reference"""
    from verify import lyapunov_audit

    if not day_profiles:
        raise ValueError("day has no scenario points")
    mat = sensitivity(net)
    name = name or bundle.comm_setup or 'Ctrl'
    rng = np.random.default_rng(cfg.seed)
    loss = weights.loss(mat)
    zero = np.zeros(bundle.size)
    q = bundle.box.clip(zero)
    lipschitz = analytic_lipschitz(bundle) if cfg.track_lyapunov else None

    rows = []
    sums = {'NoCtrl': {'volt': 0.0, 'loss': 0.0}, name: {'volt': 0.0, 'loss': 0.0}}
    if cfg.include_opf:
        sums['OPF'] = {'volt': 0.0, 'loss': 0.0}
    terminal = {key: [] for key in sums}
    audits = []
    errors = 0
    # the decrease guarantee only covers the undisturbed linear loop
    noise_free = cfg.noise.d_q == 0 and cfg.noise.d_v == 0 and cfg.pf_model == 'linear'

    for k, scen in enumerate(day_profiles):
        v_star = None
        if cfg.track_lyapunov:
            try:
                v_star = find_equilibrium(net, bundle, scen, lipschitz=lipschitz).v_star
            except EquilibriumError as e:
                logger.warning("No equilibrium for %r: %s", scen.label, e)

        start = q if cfg.carry_over else bundle.box.clip(zero)
        trace = run_episode(net, bundle, scen, start, cfg, v_star=v_star, rng=rng, weights=weights)
        if trace.truncated:
            errors += 1
        if cfg.cost_mode == 'terminal':
            ctrl_volt, ctrl_loss = float(trace.volt_cost[-1]), float(trace.loss_cost[-1])
        else:
            ctrl_volt, ctrl_loss = float(trace.volt_cost[1:].sum()), float(trace.loss_cost[1:].sum())
        q = trace.q_c[-1]
        if trace.lyapunov_D is not None and noise_free:
            audits.append({'point': k, **asdict(lyapunov_audit(trace))})

        v_none = voltages(net, mat, scen, zero, cfg.pf_model)
        none_volt, none_loss = evaluate_cost(v_none, assemble_q(mat, scen, zero), loss, weights.voltage_weight)
        if cfg.cost_mode == 'per_step':
            none_volt, none_loss = none_volt * trace.steps, none_loss * trace.steps

        row = {'point': k, 'label': scen.label,
               f'{name}_volt': ctrl_volt, f'{name}_loss': ctrl_loss,
               'NoCtrl_volt': none_volt, 'NoCtrl_loss': none_loss,
               'residual': trace.residual, 'error': trace.error or ''}
        sums[name]['volt'] += ctrl_volt
        sums[name]['loss'] += ctrl_loss
        sums['NoCtrl']['volt'] += none_volt
        sums['NoCtrl']['loss'] += none_loss
        terminal[name].append(trace.v[-1])
        terminal['NoCtrl'].append(v_none)

        if cfg.include_opf:
            opt = solve_opf(mat, scen, bundle.box, weights)
            v_opf = voltages(net, mat, scen, opt.q_star, cfg.pf_model)
            opf_volt, opf_loss = evaluate_cost(v_opf, assemble_q(mat, scen, opt.q_star), loss,
                                               weights.voltage_weight)
            if cfg.cost_mode == 'per_step':
                opf_volt, opf_loss = opf_volt * trace.steps, opf_loss * trace.steps
            row.update({'OPF_volt': opf_volt, 'OPF_loss': opf_loss})
            sums['OPF']['volt'] += opf_volt
            sums['OPF']['loss'] += opf_loss
            terminal['OPF'].append(v_opf)
        rows.append(row)

    return DayReport(
        controller=name,
        pf_model=cfg.pf_model,
        noise=asdict(cfg.noise),
        points=pd.DataFrame(rows),
        totals=_totals_table(sums),
        terminal_v={key: np.array(vals) for key, vals in terminal.items()},
        audits=audits,
        config_hash=bundle.config_hash,
        errors=errors,
    )


def run_days(net: GridNetwork, bundle: ControllerBundle, days: List[List[PowerScenario]],
             cfg: SimConfig = SimConfig(), weights: CostWeights = CostWeights()) -> List[DayReport]:
    """Independent days fan out over cfg.workers; day d uses seed cfg.seed + d"""
    jobs = [(d, day) for d, day in enumerate(days)]

    def one(job):
        d, day = job
        day_cfg = SimConfig(**{**cfg.__dict__, 'seed': cfg.seed + d, 'show_progress': False})
        return run_day(net, bundle, day, day_cfg, weights)

    return run_ordered(one, jobs, cfg.workers, desc=f"Simulating {bundle.comm_setup or 'bundle'}",
                       show_progress=cfg.show_progress)
