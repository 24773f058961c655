"""Configuration for stability-constrained Volt/Var control experiments"""
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

from dotenv import load_dotenv

load_dotenv()

# Per-unit bases (substation voltage is the 1 p.u. reference)
BASE_KV = float(os.getenv('VVC_BASE_KV', '12.47'))
BASE_MVA = float(os.getenv('VVC_BASE_MVA', '10'))

# Shipped network
NETWORK_DIR = os.getenv('VVC_NETWORK_DIR', 'networks')
DEFAULT_NETWORK = os.path.join(NETWORK_DIR, 'ucsd49.net')

# Power flow
SWEEP_TOL = 1e-8            # p.u., max |dv| between sweeps
SWEEP_MAX_ITER = 200
COLLAPSE_VOLTAGE = 0.5      # p.u.
NORM_TOL = 1e-10            # power iteration, relative

# ICNN architecture
HIDDEN_LAYERS = (64, 64)
SOFTPLUS_BETA = 10.0

# Controller / stability
EPSILON = float(os.getenv('VVC_EPSILON', '0.1'))
SAFETY_FACTOR = 0.9
VOLTAGE_REGION = (0.9, 1.1)
MONOTONICITY_TOL = 1e-9
MONOTONICITY_PAIRS = 100_000
LIPSCHITZ_SAMPLES = 20_000
LYAPUNOV_TOL = 1e-12
LIPSCHITZ_CAP_MARGIN = 0.99     # training keeps L below this share of the certifiable L

# Training
SCALE_FLOOR = 1e-3              # p.u., smallest input / output scale set from data

# OPF oracle
VOLTAGE_WEIGHT = 100.0
OPF_TOL = 1e-8
OPF_MAX_ITER = 50_000

# Closed loop
STEPS_T = 30
POINTS_PER_DAY = 96
EQUILIBRIUM_TOL = 1e-10
EQUILIBRIUM_MAX_STEPS = 100_000

# Workers (label generation and day simulation; training stays sequential)
DEFAULT_WORKERS = int(os.getenv('VVC_WORKERS', str(os.cpu_count() or 1)))

# Output locations
DATA_DIR = os.getenv('VVC_DATA_DIR', 'data')
BUNDLE_DIR = os.getenv('VVC_BUNDLE_DIR', 'bundles')
EXPORT_DIR = os.getenv('VVC_EXPORT_DIR', 'exports')

# Run registry
DB_PATH = os.getenv('VVC_DB_PATH', 'vvc_runs.db')


@dataclass
class ExperimentConfig:
    """One self-describing experiment: everything needed to rebuild its artifacts."""
    network: str = DEFAULT_NETWORK
    comm_setup: str = 'FC'
    partition: Optional[List[List[int]]] = None
    q_lim_mvar: Optional[List[float]] = None
    epsilon: float = EPSILON
    seed: int = 0
    n_days: int = 4
    training: Dict = field(default_factory=dict)
    dataset: Dict = field(default_factory=dict)
    simulation: Dict = field(default_factory=dict)
    noise_levels: Tuple[float, ...] = (0.0, 0.005, 0.01)

    @property
    def config_hash(self) -> str:
        return config_hash(asdict(self))


def config_hash(payload: Dict) -> str:
    """SHA-256 of the canonical JSON form of a config mapping"""
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'), default=list)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def load_experiment(path: str) -> ExperimentConfig:
    """Read an experiment JSON file; unknown keys are rejected"""
    with open(path, 'r') as f:
        raw = json.load(f)
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"Unknown experiment keys in {path}: {sorted(unknown)}")
    if 'noise_levels' in raw:
        raw['noise_levels'] = tuple(raw['noise_levels'])
    return ExperimentConfig(**raw)


def save_experiment(cfg: ExperimentConfig, path: str) -> str:
    with open(path, 'w') as f:
        json.dump(asdict(cfg), f, indent=2, sort_keys=True, default=list)
    return path
