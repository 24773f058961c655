"""Labeled dataset synthesis against the OPF oracle and supervised training of controller bundles"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from controller import ControllerBundle, ReactiveBox, cap_bundle_lipschitz, phi, phi_raw, stable_lipschitz_cap
from errors import NumericalError, OpfNotConvergedError, TrainingError, VoltVarError
from grid import GridNetwork, PowerScenario, sensitivity
from icnn import IcnnGrads, IcnnLayer, IcnnModel, icnn_param_gradient, project_params_nonneg
from opf import CostWeights, read_labels, solve_opf, write_labels
from pool import run_ordered

logger = logging.getLogger(__name__)


@dataclass
class DatasetConfig:
    augmentation_noise: float = 0.10
    augmentation_factor: int = 3
    seed: int = 0
    workers: int = config.DEFAULT_WORKERS
    nonlinear_passes: int = 0
    holdout_days: int = 1
    show_progress: bool = True

    def __post_init__(self):
        if not 0.0 <= self.augmentation_noise <= 0.5:
            raise ValueError(f"augmentation_noise must lie in [0, 0.5], got {self.augmentation_noise}")
        if self.augmentation_factor < 0:
            raise ValueError(f"augmentation_factor must be nonnegative, got {self.augmentation_factor}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0
    augmentation_noise: float = 0.10
    augmentation_factor: int = 3
    standardize: bool = True
    lipschitz_cap: Optional[float] = None   # bound on analytic_lipschitz(bundle), kept after every step
    show_progress: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.lipschitz_cap is not None and self.lipschitz_cap < 0:
            raise ValueError(f"lipschitz_cap must be nonnegative, got {self.lipschitz_cap}")
        if not 0.0 <= self.augmentation_noise <= 0.5:
            raise ValueError(f"augmentation_noise must lie in [0, 0.5], got {self.augmentation_noise}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def dataset_config(self, **overrides) -> DatasetConfig:
        params = {'augmentation_noise': self.augmentation_noise,
                  'augmentation_factor': self.augmentation_factor,
                  'seed': self.seed}
        params.update(overrides)
        return DatasetConfig(**params)


def certifiable_train_config(params: dict, epsilon: float, x_norm: float) -> TrainConfig:
    """TrainConfig whose Lipschitz cap lets `epsilon` certify on a net with |X_cc| = x_norm.

    An explicit 'lipschitz_cap' in `params` (None disables it) wins.
    """
    params = dict(params)
    if 'lipschitz_cap' not in params:
        params['lipschitz_cap'] = config.LIPSCHITZ_CAP_MARGIN * stable_lipschitz_cap(epsilon, x_norm)
    return TrainConfig(**params)


@dataclass
class LabeledDataset:
    v_c: np.ndarray             # (K, |C|) p.u.
    q_star: np.ndarray          # (K, |C|) p.u.
    controllable: Tuple[int, ...]
    day: np.ndarray             # (K,) day index of each sample
    train_idx: np.ndarray
    val_idx: np.ndarray
    provenance: str = ''
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.v_c.shape[0]

    @property
    def samples(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.v_c, self.q_star))

    def subset(self, which: str) -> Tuple[np.ndarray, np.ndarray]:
        if which == 'all':
            return self.v_c, self.q_star
        idx = {'train': self.train_idx, 'val': self.val_idx}[which]
        return self.v_c[idx], self.q_star[idx]


def split_indices(day: np.ndarray, holdout_days: int) -> Tuple[np.ndarray, np.ndarray]:
    """Hold out samples of the last `holdout_days` distinct days when more days exist"""
    days = list(dict.fromkeys(day.tolist()))
    everything = np.arange(day.shape[0])
    if holdout_days <= 0 or len(days) <= holdout_days:
        return everything, np.array([], dtype=int)
    held = set(days[-holdout_days:])
    mask = np.array([d in held for d in day.tolist()], dtype=bool)
    return everything[~mask], everything[mask]


def _normalise_profiles(profiles) -> List[List[PowerScenario]]:
    if isinstance(profiles, PowerScenario):
        return [[profiles]]
    profiles = list(profiles)
    if profiles and isinstance(profiles[0], PowerScenario):
        return [profiles]
    return [list(day) for day in profiles]


def generate_dataset(net: GridNetwork, profiles, box: ReactiveBox,
                     weights: CostWeights = CostWeights(),
                     cfg: Union[DatasetConfig, TrainConfig] = DatasetConfig()) -> LabeledDataset:
    """OPF labels for every profile point plus `augmentation_factor` noisy copies of it"""
    if isinstance(cfg, TrainConfig):
        cfg = cfg.dataset_config()
    days = _normalise_profiles(profiles)
    if not any(days):
        raise ValueError("profiles are empty")
    mat = sensitivity(net)
    rng = np.random.default_rng(cfg.seed)

    points: List[Tuple[int, PowerScenario]] = []
    for d, day in enumerate(days):
        for scen in day:
            points.append((d, scen))
            for _ in range(cfg.augmentation_factor):
                fp = 1.0 + rng.uniform(-cfg.augmentation_noise, cfg.augmentation_noise, size=np.shape(scen.p))
                fq = 1.0 + rng.uniform(-cfg.augmentation_noise, cfg.augmentation_noise,
                                       size=np.shape(scen.q_uncontrolled))
                points.append((d, PowerScenario(np.asarray(scen.p) * fp, np.asarray(scen.q_uncontrolled) * fq,
                                                f"{scen.label} aug")))

    def label(point):
        _, scen = point
        try:
            return solve_opf(mat, scen, box, weights, net=net, nonlinear_passes=cfg.nonlinear_passes)
        except VoltVarError as e:
            logger.warning("Skipping point %r: %s", scen.label, e)
            return None

    results = run_ordered(label, points, cfg.workers, desc='Solving OPF', show_progress=cfg.show_progress)

    c_rows = mat.c_rows
    keep = [i for i, r in enumerate(results) if r is not None]
    skipped = len(points) - len(keep)
    if skipped:
        logger.warning("%d of %d OPF points skipped", skipped, len(points))
    if not keep:
        raise OpfNotConvergedError("every OPF point failed", {'points': len(points)})

    v_c = np.array([results[i].v_star[c_rows] for i in keep])
    q_star = np.array([results[i].q_star for i in keep])
    day = np.array([points[i][0] for i in keep], dtype=int)
    if not box.contains(q_star):
        raise OpfNotConvergedError("OPF labels left the reactive box")
    train_idx, val_idx = split_indices(day, cfg.holdout_days)

    meta = {
        'network': net.name,
        'dataset': asdict(cfg),
        'voltage_weight': weights.voltage_weight,
        'box': box.to_dict(),
        'tol': config.OPF_TOL,
        'model': results[keep[0]].model,
    }
    meta['dataset'].pop('workers')
    meta['dataset'].pop('show_progress')
    provenance = config.config_hash(meta)
    return LabeledDataset(v_c, q_star, tuple(mat.controllable), day, train_idx, val_idx,
                          provenance, skipped, meta)


def save_dataset(data: LabeledDataset, path: str, base_mva: float = config.BASE_MVA) -> str:
    """Label CSV plus a JSON sidecar (<path>.json) with generator config, days and split"""
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    header = {
        'tol': data.meta.get('tol', config.OPF_TOL),
        'model': data.meta.get('model', 'lindistflow'),
        'config_hash': data.provenance,
    }
    write_labels(path, data.v_c, data.q_star, data.controllable, base_mva, header)
    sidecar = {
        'config_hash': data.provenance,
        'generator': data.meta,
        'skipped': data.skipped,
        'n_samples': len(data),
        'day': data.day.tolist(),
        'val_idx': data.val_idx.tolist(),
    }
    with open(path + '.json', 'w') as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return path


def load_dataset(path: str) -> LabeledDataset:
    header, controllable, v_c, q_star = read_labels(path)
    sidecar_path = path + '.json'
    sidecar = {}
    if os.path.exists(sidecar_path):
        with open(sidecar_path, 'r') as f:
            sidecar = json.load(f)
    day = np.asarray(sidecar.get('day', [0] * v_c.shape[0]), dtype=int)
    val_idx = np.asarray(sidecar.get('val_idx', []), dtype=int)
    train_idx = np.setdiff1d(np.arange(v_c.shape[0]), val_idx)
    return LabeledDataset(
        v_c, q_star, tuple(controllable), day, train_idx, val_idx,
        provenance=header.get('config_hash', sidecar.get('config_hash', '')),
        skipped=int(sidecar.get('skipped', 0)),
        meta=sidecar.get('generator', {}),
    )


def prediction_mse(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """(mean over samples of |pred - target|^2, per-bus mean squared error); per-bus sums to the total"""
    if pred.shape[0] == 0:
        return float('nan'), np.full(pred.shape[1], np.nan)
    per_bus = np.mean((pred - target) ** 2, axis=0)
    return float(per_bus.sum()), per_bus


def evaluate(bundle: ControllerBundle, data: LabeledDataset, which: str = 'all') -> Tuple[float, np.ndarray]:
    """Prediction error of the deployed (clamped) phi"""
    v, q = data.subset(which)
    if v.shape[0] == 0:
        return prediction_mse(np.zeros((0, bundle.size)), q)
    return prediction_mse(phi(bundle, v), q)


def _raw_loss(bundle: ControllerBundle, v: np.ndarray, q: np.ndarray) -> float:
    if v.shape[0] == 0:
        return float('nan')
    return prediction_mse(phi_raw(bundle, v), q)[0]


def loss_gradients(bundle: ControllerBundle, v: np.ndarray, q: np.ndarray) -> Tuple[float, List[IcnnGrads]]:
    """Mean |q* - phi_raw(v)|^2 over the batch and its gradient for every subgraph model"""
    pred = phi_raw(bundle, v)
    resid = q - pred
    loss = float(np.mean(np.sum(resid ** 2, axis=1)))
    # d loss / d grad g_l = 2 (q* - phi_raw)[M_l] / B, since phi_raw = -sum grad g_l
    upstream = 2.0 * resid / v.shape[0]
    grads = [
        icnn_param_gradient(model, v[:, idx], upstream[:, idx])
        for idx, model in zip(bundle.subgraph_index, bundle.models)
    ]
    return loss, grads


def standardize_models(bundle: ControllerBundle, v: np.ndarray, q: np.ndarray) -> List[IcnnModel]:
    """Per-subgraph scales from the data: in_scale = rms(v - 1), out_scale = in_scale * rms(q*).

    Labels span a few hundredths of a p.u. in voltage; without these scales
    the network sits in its flat region and fits a constant.
    """
    models = []
    for idx, model in zip(bundle.subgraph_index, bundle.models):
        in_scale = max(float(np.sqrt(np.mean((v[:, idx] - 1.0) ** 2))), config.SCALE_FLOOR)
        q_scale = max(float(np.sqrt(np.mean(q[:, idx] ** 2))), config.SCALE_FLOOR)
        models.append(model.rescaled(in_scale, in_scale * q_scale))
    return models


def _zeros_like(model: IcnnModel) -> IcnnGrads:
    return IcnnGrads([IcnnLayer(np.zeros_like(l.W_z), np.zeros_like(l.W_x), np.zeros_like(l.b))
                      for l in model.layers], 0.0)


def _momentum_step(model: IcnnModel, grad: IcnnGrads, velocity: IcnnGrads,
                   lr: float, momentum: float, weight_decay: float) -> IcnnModel:
    updated = model.copy()
    for layer, g, vel in zip(updated.layers, grad.layers, velocity.layers):
        for name in ('W_z', 'W_x', 'b'):
            param = getattr(layer, name)
            step = getattr(g, name) + weight_decay * param
            buf = getattr(vel, name)
            buf *= momentum
            buf += step
            param -= lr * buf
    velocity.quad = momentum * velocity.quad + grad.quad + weight_decay * updated.quad
    updated.quad -= lr * velocity.quad
    return project_params_nonneg(updated)


def _constrained(bundle: ControllerBundle, cfg: TrainConfig) -> ControllerBundle:
    if cfg.lipschitz_cap is None:
        return bundle
    return cap_bundle_lipschitz(bundle, cfg.lipschitz_cap)


def train(bundle: ControllerBundle, data: LabeledDataset, cfg: TrainConfig = TrainConfig(),
          callback: Optional[Callable[[int, ControllerBundle], None]] = None) -> Tuple[ControllerBundle, pd.DataFrame]:
    """Mini-batch momentum SGD on mean |q* - phi_raw(v)|^2.

    With `standardize` the models are rescaled to the training split first and
    each subgraph's step is taken in its own output units. W_z >= 0 is restored
    after every step, and so is analytic_lipschitz <= lipschitz_cap when set.
    """
    if tuple(data.controllable) != tuple(bundle.controllable):
        raise ValueError("dataset and bundle disagree on the controllable buses")
    v_train, q_train = data.subset('train')
    if v_train.shape[0] == 0:
        raise ValueError("training split is empty")
    v_val, q_val = data.subset('val')

    rng = np.random.default_rng(cfg.seed)
    models = standardize_models(bundle, v_train, q_train) if cfg.standardize else list(bundle.models)
    current = _constrained(bundle.with_models([project_params_nonneg(m) for m in models]), cfg)
    models = list(current.models)
    velocity = [_zeros_like(m) for m in models]
    history = []

    epochs = tqdm(range(1, cfg.epochs + 1), desc=f"Training {bundle.comm_setup or 'bundle'}",
                  disable=not cfg.show_progress)
    for epoch in epochs:
        order = rng.permutation(v_train.shape[0])
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, grads = loss_gradients(current, v_train[idx], q_train[idx])
            except NumericalError as e:
                raise TrainingError(epoch, cfg.learning_rate, f"non-finite ICNN evaluation ({e})") from e
            if not np.isfinite(loss) or not all(np.isfinite(g.sq_norm()) for g in grads):
                raise TrainingError(epoch, cfg.learning_rate)
            models = [
                _momentum_step(m, g.scaled(m.gradient_gain ** -2), vel, cfg.learning_rate, cfg.momentum,
                               cfg.weight_decay)
                for m, g, vel in zip(models, grads, velocity)
            ]
            current = _constrained(bundle.with_models(models), cfg)
            models = list(current.models)

        try:
            train_loss = _raw_loss(current, v_train, q_train)
            val_loss = _raw_loss(current, v_val, q_val)
        except NumericalError as e:
            raise TrainingError(epoch, cfg.learning_rate, f"non-finite ICNN evaluation ({e})") from e
        if not np.isfinite(train_loss):
            raise TrainingError(epoch, cfg.learning_rate)
        history.append({'epoch': epoch, 'train_loss': train_loss, 'val_loss': val_loss})
        epochs.set_postfix(train=f"{train_loss:.3e}")
        if callback is not None:
            callback(epoch, current)

    columns = ['epoch', 'train_loss', 'val_loss']
    return current, pd.DataFrame(history, columns=columns)
