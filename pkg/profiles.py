"""Synthetic load/PV days and scenario CSV I/O"""
import logging
import os
from typing import List, Tuple

import numpy as np
import pandas as pd

import config
from errors import ScenarioFileError
from grid import GridNetwork, PowerScenario, scenario_from_full, sensitivity

logger = logging.getLogger(__name__)

POWER_FACTOR = 0.95
LOW_VOLTAGE_TARGET = 0.94    # uncontrolled minimum at peak load
HIGH_VOLTAGE_TARGET = 1.06   # uncontrolled maximum at peak PV
PV_PEAK_HOUR = 12.5


def _raw_load(hours: np.ndarray) -> np.ndarray:
    return 0.55 + 0.25 * np.exp(-((hours - 8.5) / 2.0) ** 2) + 0.45 * np.exp(-((hours - 19.0) / 2.5) ** 2)


def load_shape(hours: np.ndarray) -> np.ndarray:
    """Two-peak daily load curve, peak value 1"""
    peak = _raw_load(np.linspace(0.0, 24.0, 2401)).max()
    return _raw_load(np.asarray(hours, dtype=float)) / peak


def pv_shape(hours: np.ndarray) -> np.ndarray:
    """Bell-shaped irradiance between 6:00 and 19:00, peak value 1 at PV_PEAK_HOUR"""
    shape = np.exp(-((hours - PV_PEAK_HOUR) / 2.8) ** 2)
    shape[(hours < 6.0) | (hours > 19.0)] = 0.0
    return shape


def _calibrate(net: GridNetwork, load_w: np.ndarray, pv_w: np.ndarray) -> Tuple[float, float]:
    """Load and PV scales (p.u.) hitting the voltage targets on LinDistFlow with q_C = 0"""
    mat = sensitivity(net)
    tan_phi = np.tan(np.arccos(POWER_FACTOR))
    q_load = -load_w * tan_phi
    if len(mat.controllable):
        q_load[mat.c_rows] = 0.0
    dv_load = mat.R @ (-load_w) + mat.X @ q_load
    dv_pv = mat.R @ pv_w
    load_scale = (LOW_VOLTAGE_TARGET - 1.0) / float(dv_load.min())

    base = load_scale * float(load_shape(np.array([PV_PEAK_HOUR]))[0]) * dv_load
    lo, hi = 0.0, 1.0
    while np.max(base + hi * dv_pv) < HIGH_VOLTAGE_TARGET - 1.0:
        hi *= 2.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.max(base + mid * dv_pv) < HIGH_VOLTAGE_TARGET - 1.0:
            lo = mid
        else:
            hi = mid
    return load_scale, 0.5 * (lo + hi)


def synthesize_days(net: GridNetwork, n_days: int, seed: int = 0,
                    points_per_day: int = config.POINTS_PER_DAY,
                    jitter: float = 0.03) -> pd.DataFrame:
    """Scenario frame (MW / MVar) for `n_days` synthetic days.

    Every bus carries load; PV sits on the controllable buses. Each day draws a
    load factor and a cloudiness level, each point a small multiplicative jitter.
    """
    if n_days < 1:
        raise ValueError(f"n_days must be positive, got {n_days}")
    rng = np.random.default_rng(seed)
    n = net.n
    load_w = rng.uniform(0.5, 1.5, size=n)
    pv_w = np.zeros(n)
    ctrl_rows = [b - 1 for b in net.controllable]
    pv_w[ctrl_rows] = rng.uniform(0.5, 1.5, size=len(ctrl_rows))
    load_scale, pv_scale = _calibrate(net, load_w, pv_w)
    tan_phi = np.tan(np.arccos(POWER_FACTOR))

    hours = np.arange(points_per_day) * 24.0 / points_per_day
    shape_load = load_shape(hours)
    shape_pv = pv_shape(hours)
    rows = []
    for day in range(n_days):
        load_factor = rng.uniform(0.9, 1.1)
        cloudiness = rng.uniform(0.6, 1.0)
        for k, hour in enumerate(hours):
            noise_l = 1.0 + rng.uniform(-jitter, jitter, size=n)
            noise_pv = 1.0 + rng.uniform(-jitter, jitter, size=n)
            load = load_scale * load_factor * shape_load[k] * load_w * noise_l
            pv = pv_scale * cloudiness * shape_pv[k] * pv_w * noise_pv
            p = (pv - load) * net.base_mva
            q = -load * tan_phi * net.base_mva
            row = {'day': day, 'timestamp': f"{int(hour):02d}:{int(round((hour % 1) * 60)):02d}"}
            row.update({f'p_bus{b}': p[b - 1] for b in range(1, net.bus_count)})
            row.update({f'q_bus{b}': q[b - 1] for b in range(1, net.bus_count)})
            rows.append(row)
    logger.info("Synthesised %d days x %d points (load scale %.4f p.u., PV scale %.4f p.u.)",
                n_days, points_per_day, load_scale, pv_scale)
    return pd.DataFrame(rows)


def frame_to_days(net: GridNetwork, df: pd.DataFrame, path: str = '<frame>') -> List[List[PowerScenario]]:
    """Group a scenario frame by day and convert MW/MVar to p.u.; controllable q columns are ignored"""
    p_cols = [f'p_bus{b}' for b in range(1, net.bus_count)]
    q_cols = [f'q_bus{b}' for b in range(1, net.bus_count)]
    missing = [c for c in p_cols + q_cols if c not in df.columns]
    if missing:
        raise ScenarioFileError(path, 0, f"missing columns: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    numeric = df[p_cols + q_cols].apply(pd.to_numeric, errors='coerce')
    bad_rows = numeric.isna().any(axis=1)
    if bad_rows.any():
        pos = int(np.argmax(bad_rows.to_numpy()))
        bad_cols = [c for c in numeric.columns if pd.isna(numeric.iloc[pos][c])]
        raise ScenarioFileError(path, pos + 1, f"non-numeric value in {bad_cols[0]}")

    days = df['day'].to_numpy() if 'day' in df.columns else np.zeros(len(df), dtype=int)
    stamps = df['timestamp'].astype(str).to_numpy() if 'timestamp' in df.columns else np.arange(len(df)).astype(str)
    p_all = numeric[p_cols].to_numpy(float) / net.base_mva
    q_all = numeric[q_cols].to_numpy(float) / net.base_mva

    result: List[List[PowerScenario]] = []
    for day in pd.unique(days):
        idx = np.flatnonzero(days == day)
        result.append([
            scenario_from_full(net, p_all[i], q_all[i], label=f"day{day} {stamps[i]}") for i in idx
        ])
    return result


def save_scenarios(df: pd.DataFrame, path: str) -> str:
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    df.to_csv(path, index=False, float_format='%.17g')
    return path


def load_scenarios(path: str, net: GridNetwork) -> List[List[PowerScenario]]:
    """Scenario CSV -> days of scenarios (p.u.)"""
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ScenarioFileError(path, 0, f"cannot read scenario file: {e}") from e
    return frame_to_days(net, df, path)


def split_days(days: List[List[PowerScenario]], holdout_days: int = 1) -> Tuple[List[List[PowerScenario]], List[List[PowerScenario]]]:
    """(training days, held-out days); the held-out days are the last ones"""
    if holdout_days <= 0 or len(days) <= holdout_days:
        return days, []
    return days[:-holdout_days], days[-holdout_days:]


def perturb_day(day: List[PowerScenario], noise: float, seed: int = 0) -> List[PowerScenario]:
    """Multiplicative uniform noise on every injection of a day"""
    rng = np.random.default_rng(seed)
    out = []
    for scen in day:
        fp = 1.0 + rng.uniform(-noise, noise, size=np.shape(scen.p))
        fq = 1.0 + rng.uniform(-noise, noise, size=np.shape(scen.q_uncontrolled))
        out.append(PowerScenario(scen.p * fp, scen.q_uncontrolled * fq, scen.label))
    return out
