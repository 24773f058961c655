"""Sampled monotonicity check, step-size certification and Lyapunov audits"""
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

import config
from controller import (
    ControllerBundle,
    budget_terms,
    estimate_lipschitz,
    max_stable_stepsize,
)
from grid import SensitivityMatrices
from icnn import negative_weights

logger = logging.getLogger(__name__)


@dataclass
class MonotonicityReport:
    n_pairs: int
    violations: int
    worst_value: float              # max over pairs of (phi(v) - phi(v'))^T (v - v')
    per_coordinate: bool
    positive_budget_buses: List[int]      # per controllable bus, pairs where b_i > tol
    max_budget: List[float]               # per controllable bus, max b_i
    region: Tuple[float, float] = config.VOLTAGE_REGION

    @property
    def passed(self) -> bool:
        return self.violations == 0

    @property
    def buses_with_positive_budget(self) -> int:
        return int(sum(1 for c in self.positive_budget_buses if c > 0))


def check_monotonicity(bundle: ControllerBundle, n_pairs: int = config.MONOTONICITY_PAIRS,
                       region: Tuple[float, float] = config.VOLTAGE_REGION, seed: int = 0,
                       per_coordinate: bool = False, tol: float = config.MONOTONICITY_TOL,
                       chunk: int = 10_000) -> MonotonicityReport:
    """Count sampled pairs where phi_raw fails to be monotonically decreasing.

    In per-coordinate mode each pair differs in a single random bus, which is
    the check that applies to controllers without communication.
    """
    rng = np.random.default_rng(seed)
    lo, hi = region
    n = bundle.size
    violations = 0
    worst = -np.inf
    positive = np.zeros(n, dtype=int)
    max_b = np.full(n, -np.inf)

    remaining = n_pairs
    while remaining > 0:
        m = min(chunk, remaining)
        v = rng.uniform(lo, hi, size=(m, n))
        if per_coordinate:
            w = v.copy()
            cols = rng.integers(0, n, size=m)
            w[np.arange(m), cols] = rng.uniform(lo, hi, size=m)
        else:
            w = rng.uniform(lo, hi, size=(m, n))
        b = budget_terms(bundle, v, w)
        s = b.sum(axis=1)
        violations += int(np.count_nonzero(s > tol))
        worst = max(worst, float(s.max()))
        positive += np.count_nonzero(b > tol, axis=0)
        max_b = np.maximum(max_b, b.max(axis=0))
        remaining -= m

    if violations:
        logger.warning("Monotonicity violated on %d of %d pairs (worst %.3e)", violations, n_pairs, worst)
    return MonotonicityReport(n_pairs, violations, worst, per_coordinate,
                              positive.tolist(), max_b.tolist(), tuple(region))


@dataclass
class Certification:
    ok: bool
    epsilon: float
    epsilon_bound: float
    lipschitz_analytic: float
    lipschitz_sampled: float
    x_norm: float
    violations: int
    reasons: List[str] = field(default_factory=list)
    non_convex: List[str] = field(default_factory=list)     # 'subgraph k: W_z[..]' entries

    def to_dict(self) -> dict:
        return asdict(self)


def certify_bundle(bundle: ControllerBundle, mat: SensitivityMatrices,
                   n_pairs: int = config.MONOTONICITY_PAIRS,
                   n_lipschitz: int = config.LIPSCHITZ_SAMPLES,
                   safety: float = config.SAFETY_FACTOR,
                   region: Tuple[float, float] = config.VOLTAGE_REGION,
                   seed: int = 0, write: bool = True) -> Certification:
    """Certify eps <= safety * min(1, 2 / (1 + L^2 |X_cc|^2)) with the analytic L.

    Every subgraph model must have nonnegative W_z and quad; the sampled
    monotonicity check comes on top of that. The sampled L is a sanity check on
    the analytic bound, never a replacement. Writes the outcome into the bundle
    unless `write` is False.
    """
    non_convex = [f"subgraph {k}: {name}" for k, model in enumerate(bundle.models)
                  for name in negative_weights(model)]
    L_hat, L = estimate_lipschitz(bundle, region=region, n_samples=n_lipschitz, seed=seed)
    mono = check_monotonicity(bundle, n_pairs=n_pairs, region=region, seed=seed + 1,
                              per_coordinate=len(bundle.partition.subgraphs) == bundle.size)
    bound = safety * max_stable_stepsize(L, mat.X_norm)

    reasons = []
    if non_convex:
        reasons.append(f"{len(non_convex)} negative convexity weights ({non_convex[0]})")
    if mono.violations:
        reasons.append(f"monotonicity violated on {mono.violations} sampled pairs")
    if L_hat > L * (1.0 + 1e-9) + 1e-12:
        reasons.append(f"sampled Lipschitz {L_hat:.4g} exceeds analytic bound {L:.4g}")
    if bundle.epsilon > bound:
        reasons.append(f"epsilon {bundle.epsilon:g} exceeds certified bound {bound:.4g}")

    cert = Certification(not reasons, bundle.epsilon, bound, L, L_hat, mat.X_norm, mono.violations,
                         reasons, non_convex)
    if write:
        bundle.lipschitz = L
        bundle.certification = cert.to_dict()
    if cert.ok:
        logger.info("Certified %s: eps=%g <= %.4g (L=%.4g, |X_cc|=%.4g)",
                    bundle.comm_setup or 'bundle', bundle.epsilon, bound, L, mat.X_norm)
    else:
        logger.warning("Certification refused for %s: %s", bundle.comm_setup or 'bundle', '; '.join(reasons))
    return cert


@dataclass
class LyapunovAudit:
    applicable: bool
    decreasing: bool
    first_increase: Optional[int]
    initial: float
    final: float


def lyapunov_audit(trace, tol: float = config.LYAPUNOV_TOL) -> LyapunovAudit:
    """D must drop strictly at every step until it falls below `tol`"""
    d = trace.lyapunov_D
    if d is None or len(d) == 0:
        return LyapunovAudit(False, True, None, float('nan'), float('nan'))
    d = np.asarray(d, dtype=float)
    for t in range(1, len(d)):
        if d[t - 1] <= tol:
            break
        if d[t] >= d[t - 1]:
            return LyapunovAudit(True, False, t, float(d[0]), float(d[-1]))
    return LyapunovAudit(True, True, None, float(d[0]), float(d[-1]))
