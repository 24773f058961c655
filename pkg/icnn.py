"""Input convex neural network with exact input and parameter gradients.

g(x) = out_scale * h(x~) with x~ = (x - 1) / in_scale and
h = W_z[K] z[K-1] + W_x[K] x~ + b[K] + (quad/2) |x~|^2,
z[k] = softplus_beta(W_z[k] z[k-1] + W_x[k] x~ + b[k]).

Convexity in x holds as long as every W_z entry and `quad` are nonnegative
and both scales are positive. The scales are fixed per model (set from the
training data), never trained. The first hidden layer carries an empty (h, 0)
W_z so all layers share one recurrence. Everything is batched: inputs are
(batch, input_dim).
"""
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

import config
from errors import CheckpointError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class IcnnLayer:
    W_z: np.ndarray
    W_x: np.ndarray
    b: np.ndarray

    def copy(self) -> 'IcnnLayer':
        return IcnnLayer(self.W_z.copy(), self.W_x.copy(), self.b.copy())


@dataclass
class IcnnModel:
    input_dim: int
    layers: List[IcnnLayer]     # hidden layers, then the scalar output layer
    beta: float = config.SOFTPLUS_BETA
    quad: float = 0.0
    skip_connections: bool = True
    in_scale: float = 1.0
    out_scale: float = 1.0

    @property
    def hidden_sizes(self) -> Tuple[int, ...]:
        return tuple(layer.b.shape[0] for layer in self.layers[:-1])

    @property
    def gradient_gain(self) -> float:
        """d g / d x = gradient_gain * d h / d x~"""
        return self.out_scale / self.in_scale

    def copy(self) -> 'IcnnModel':
        return IcnnModel(self.input_dim, [l.copy() for l in self.layers], self.beta, self.quad,
                         self.skip_connections, self.in_scale, self.out_scale)

    def rescaled(self, in_scale: float, out_scale: float) -> 'IcnnModel':
        if in_scale <= 0 or out_scale <= 0:
            raise ValueError(f"scales must be positive, got in={in_scale}, out={out_scale}")
        model = self.copy()
        model.in_scale = float(in_scale)
        model.out_scale = float(out_scale)
        return model

    def parameter_count(self) -> int:
        return sum(l.W_z.size + l.W_x.size + l.b.size for l in self.layers) + 1


@dataclass
class IcnnGrads:
    """Parameter-shaped gradients (same layout as IcnnModel.layers)"""
    layers: List[IcnnLayer]
    quad: float = 0.0

    def scaled(self, factor: float) -> 'IcnnGrads':
        return IcnnGrads(
            [IcnnLayer(factor * l.W_z, factor * l.W_x, factor * l.b) for l in self.layers],
            factor * self.quad,
        )

    def sq_norm(self) -> float:
        total = self.quad ** 2
        for l in self.layers:
            total += float(np.sum(l.W_z ** 2) + np.sum(l.W_x ** 2) + np.sum(l.b ** 2))
        return total


@dataclass
class _Cache:
    xt: np.ndarray
    a: List[np.ndarray] = field(default_factory=list)
    z: List[np.ndarray] = field(default_factory=list)
    s: List[np.ndarray] = field(default_factory=list)


def softplus(a: np.ndarray, beta: float) -> np.ndarray:
    return np.logaddexp(0.0, beta * a) / beta


def softplus_slope(a: np.ndarray, beta: float) -> np.ndarray:
    # sigmoid(beta a) without overflow
    return 0.5 * (1.0 + np.tanh(0.5 * beta * a))


def init_model(input_dim: int, hidden: Sequence[int] = config.HIDDEN_LAYERS,
               beta: float = config.SOFTPLUS_BETA, seed: int = 0,
               skip_connections: bool = True, quad: float = 0.0) -> IcnnModel:
    """Random convex model; W_x, b ~ U(-s, s) with s = 1/sqrt(fan_in), W_z = |U(0, 1)| / fan_in"""
    if input_dim < 1:
        raise DimensionError(f"input_dim must be positive, got {input_dim}")
    rng = np.random.default_rng(seed)
    layers: List[IcnnLayer] = []
    prev = 0
    for k, width in enumerate(list(hidden) + [1]):
        fan_in = prev + input_dim
        s = 1.0 / np.sqrt(fan_in)
        W_z = rng.uniform(0.0, 1.0, size=(width, prev)) / max(prev, 1)
        W_x = rng.uniform(-s, s, size=(width, input_dim))
        b = rng.uniform(-s, s, size=width)
        if k > 0 and not skip_connections:
            W_x = np.zeros_like(W_x)
        layers.append(IcnnLayer(W_z, W_x, b))
        prev = width
    return IcnnModel(input_dim, layers, float(beta), float(quad), skip_connections)


def zero_model(input_dim: int, hidden: Sequence[int] = config.HIDDEN_LAYERS,
               beta: float = config.SOFTPLUS_BETA, quad: float = 0.0,
               skip_connections: bool = True) -> IcnnModel:
    """All weights and biases zero; g = (quad/2)|x - 1|^2"""
    layers: List[IcnnLayer] = []
    prev = 0
    for width in list(hidden) + [1]:
        layers.append(IcnnLayer(np.zeros((width, prev)), np.zeros((width, input_dim)), np.zeros(width)))
        prev = width
    return IcnnModel(input_dim, layers, float(beta), float(quad), skip_connections)


def quadratic_model(input_dim: int, weight: float = 1.0, linear: Optional[np.ndarray] = None,
                    beta: float = config.SOFTPLUS_BETA) -> IcnnModel:
    """No hidden layers: g(x) = (weight/2)|x - 1|^2 - linear . (x - 1), so -grad g = -weight (x - 1) + linear"""
    model = zero_model(input_dim, hidden=(), beta=beta, quad=weight)
    if linear is not None:
        model.layers[-1].W_x[0, :] = -np.asarray(linear, dtype=float)
    return model


def _as_batch(model: IcnnModel, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise DimensionError(f"input has shape {x.shape}, model expects input_dim={model.input_dim}")
    return batch, single


def _forward(model: IcnnModel, batch: np.ndarray) -> Tuple[np.ndarray, _Cache]:
    cache = _Cache(xt=(batch - 1.0) / model.in_scale)
    z = np.zeros((batch.shape[0], 0))
    for layer in model.layers[:-1]:
        a = z @ layer.W_z.T + cache.xt @ layer.W_x.T + layer.b
        z = softplus(a, model.beta)
        cache.a.append(a)
        cache.z.append(z)
        cache.s.append(softplus_slope(a, model.beta))
    out = model.layers[-1]
    g = (z @ out.W_z.T + cache.xt @ out.W_x.T + out.b)[:, 0]
    g = g + 0.5 * model.quad * np.sum(cache.xt ** 2, axis=1)
    return model.out_scale * g, cache


def _reverse(model: IcnnModel, cache: _Cache) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
    """dh/dx~ plus the per-layer adjoints e[k] = dh/dz[k] and gamma[k] = dh/da[k]"""
    n_hidden = len(model.layers) - 1
    batch = cache.xt.shape[0]
    out = model.layers[-1]
    grad = np.repeat(out.W_x, batch, axis=0) + model.quad * cache.xt
    e: List[Optional[np.ndarray]] = [None] * n_hidden
    gamma: List[Optional[np.ndarray]] = [None] * n_hidden
    if n_hidden:
        e[-1] = np.repeat(out.W_z, batch, axis=0)
    for k in range(n_hidden - 1, -1, -1):
        gamma[k] = e[k] * cache.s[k]
        grad = grad + gamma[k] @ model.layers[k].W_x
        if k > 0:
            e[k - 1] = gamma[k] @ model.layers[k].W_z
    return grad, e, gamma


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite {what} in ICNN evaluation")


def icnn_forward(model: IcnnModel, x: np.ndarray):
    """g(x); scalar for a single input, (batch,) for a batch"""
    batch, single = _as_batch(model, x)
    g, _ = _forward(model, batch)
    _check_finite(g, 'output')
    return float(g[0]) if single else g


def icnn_input_gradient(model: IcnnModel, x: np.ndarray) -> np.ndarray:
    batch, single = _as_batch(model, x)
    _, cache = _forward(model, batch)
    grad, _, _ = _reverse(model, cache)
    grad = model.gradient_gain * grad
    _check_finite(grad, 'gradient')
    return grad[0] if single else grad


def icnn_param_gradient(model: IcnnModel, x: np.ndarray, loss_grad: np.ndarray,
                        value_grad=None) -> IcnnGrads:
    """Gradient w.r.t. parameters of sum_b loss_grad[b] . grad g(x_b) + value_grad[b] g(x_b).

    loss_grad is the upstream sensitivity on the input gradient (what training
    needs), value_grad the optional one on g itself. Forward-over-reverse: the
    reverse recurrence of `_reverse` is differentiated back through the forward
    pass. The scales are constants, so the upstream terms are carried onto h.
    """
    batch, single = _as_batch(model, x)
    ybar = model.gradient_gain * np.asarray(loss_grad, dtype=float).reshape(batch.shape)
    n_b = batch.shape[0]
    cbar = np.zeros(n_b) if value_grad is None else np.broadcast_to(np.asarray(value_grad, dtype=float), (n_b,))
    cbar = model.out_scale * cbar

    _, cache = _forward(model, batch)
    _, e, gamma = _reverse(model, cache)
    xt = cache.xt
    n_hidden = len(model.layers) - 1
    beta = model.beta

    grads = [IcnnLayer(np.zeros_like(l.W_z), np.zeros_like(l.W_x), np.zeros_like(l.b)) for l in model.layers]
    out_g = grads[-1]

    # direct terms of grad g = W_x[K] + sum gamma[k] W_x[k] + quad x~
    out_g.W_x += ybar.sum(axis=0)[None, :]
    quad_bar = float(np.sum(ybar * xt))
    gamma_bar = []
    for k in range(n_hidden):
        gamma_bar.append(ybar @ model.layers[k].W_x.T)
        grads[k].W_x += gamma[k].T @ ybar

    # back through the reverse recurrence: gamma[k] = e[k] s[k], e[k-1] = gamma[k] W_z[k]
    s_bar: List[np.ndarray] = [None] * n_hidden
    e_bar_prev = None
    for k in range(n_hidden):
        if k > 0:
            gamma_bar[k] = gamma_bar[k] + e_bar_prev @ model.layers[k].W_z.T
            grads[k].W_z += gamma[k].T @ e_bar_prev
        e_bar = gamma_bar[k] * cache.s[k]
        s_bar[k] = gamma_bar[k] * e[k]
        e_bar_prev = e_bar
    if n_hidden:
        out_g.W_z += e_bar_prev.sum(axis=0)[None, :]

    # value terms
    if np.any(cbar):
        z_last = cache.z[-1] if n_hidden else np.zeros((n_b, 0))
        out_g.W_z += (cbar @ z_last)[None, :]
        out_g.W_x += (cbar @ xt)[None, :]
        out_g.b += cbar.sum()
        quad_bar += 0.5 * float(cbar @ np.sum(xt ** 2, axis=1))

    # back through the forward pass: s[k] = sigmoid(beta a[k]), z[k] = softplus(a[k])
    a_bar_next = None
    for k in range(n_hidden - 1, -1, -1):
        s = cache.s[k]
        a_bar = s_bar[k] * beta * s * (1.0 - s)
        if k == n_hidden - 1:
            a_bar = a_bar + cbar[:, None] * gamma[k]
        else:
            a_bar = a_bar + (a_bar_next @ model.layers[k + 1].W_z) * s
        if k > 0:
            grads[k].W_z += a_bar.T @ cache.z[k - 1]
        grads[k].W_x += a_bar.T @ xt
        grads[k].b += a_bar.sum(axis=0)
        a_bar_next = a_bar

    if not model.skip_connections:
        for g in grads[1:]:
            g.W_x[...] = 0.0

    result = IcnnGrads(grads, quad_bar)
    for g in grads:
        _check_finite(g.W_z, 'parameter gradient')
        _check_finite(g.W_x, 'parameter gradient')
        _check_finite(g.b, 'parameter gradient')
    return result


def project_params_nonneg(model: IcnnModel) -> IcnnModel:
    """Clamp every W_z entry (and the quadratic weight) at zero; returns a new model"""
    projected = model.copy()
    for layer in projected.layers:
        np.maximum(layer.W_z, 0.0, out=layer.W_z)
    projected.quad = max(projected.quad, 0.0)
    return projected


def is_convex_structure(model: IcnnModel) -> bool:
    if model.in_scale <= 0.0 or model.out_scale <= 0.0:
        return False
    return model.quad >= 0.0 and all(np.all(l.W_z >= 0.0) for l in model.layers)


def negative_weights(model: IcnnModel) -> List[str]:
    """Names of parameters that break convexity, e.g. 'W_z[1][0, 3]'"""
    found = [f"W_z[{k}][{i}, {j}]" for k, l in enumerate(model.layers) for i, j in np.argwhere(l.W_z < 0.0)]
    if model.quad < 0.0:
        found.append('quad')
    return found


def _op_norm(w: np.ndarray) -> float:
    if w.size == 0:
        return 0.0
    return float(np.linalg.norm(w, 2))


def lipschitz_bound(model: IcnnModel) -> float:
    """Upper bound on the Lipschitz constant of x -> grad g(x) from layer operator norms and beta"""
    n_hidden = len(model.layers) - 1
    wz = [_op_norm(l.W_z) for l in model.layers]
    wx = [_op_norm(l.W_x) for l in model.layers]

    # Lipschitz bound of each pre-activation a[k] in x (softplus is 1-Lipschitz)
    a_lip = []
    prev = 0.0
    for k in range(n_hidden):
        prev = wz[k] * prev + wx[k]
        a_lip.append(prev)

    total = 0.0
    e_lip = 0.0
    e_mag = wz[-1]
    for k in range(n_hidden - 1, -1, -1):
        gamma_lip = e_lip + e_mag * (model.beta / 4.0) * a_lip[k]
        total += wx[k] * gamma_lip
        e_lip = wz[k] * gamma_lip
        e_mag = wz[k] * e_mag
    return (total + abs(model.quad)) * model.out_scale / model.in_scale ** 2


def cap_lipschitz(model: IcnnModel, limit: float) -> IcnnModel:
    """Shrink the curvature terms until lipschitz_bound(model) <= limit.

    The bound is linear in the output-layer W_z and in quad, so scaling those
    hits the limit exactly. The hidden path is shrunk first; quad only when it
    alone exceeds the limit. The output-layer W_x (a constant gradient) is kept.
    """
    if limit < 0:
        raise ValueError(f"Lipschitz limit must be nonnegative, got {limit}")
    total = lipschitz_bound(model)
    if total <= limit:
        return model
    capped = model.copy()
    quad_part = abs(capped.quad) * capped.out_scale / capped.in_scale ** 2
    if quad_part >= limit:
        factor = limit / total
        capped.layers[-1].W_z *= factor
        capped.quad *= factor
    else:
        capped.layers[-1].W_z *= (limit - quad_part) / (total - quad_part)
    return capped


def _encode(a: np.ndarray) -> dict:
    return {'shape': list(a.shape), 'data': a.ravel().tolist()}


def _decode(blob: dict, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in blob['shape'])
        data = np.asarray(blob['data'], dtype=float)
        return data.reshape(shape)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"malformed array {name!r} in checkpoint: {e}") from e


def model_to_dict(model: IcnnModel) -> dict:
    return {
        'format_version': FORMAT_VERSION,
        'input_dim': model.input_dim,
        'activation': 'softplus',
        'beta': model.beta,
        'quad': model.quad,
        'skip_connections': model.skip_connections,
        'in_scale': model.in_scale,
        'out_scale': model.out_scale,
        'hidden': list(model.hidden_sizes),
        'layers': [{'W_z': _encode(l.W_z), 'W_x': _encode(l.W_x), 'b': _encode(l.b)} for l in model.layers],
    }


def model_from_dict(payload: dict) -> IcnnModel:
    version = payload.get('format_version')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported ICNN checkpoint format_version {version!r}")
    try:
        layers = [
            IcnnLayer(_decode(l['W_z'], f'layers[{i}].W_z'), _decode(l['W_x'], f'layers[{i}].W_x'),
                      _decode(l['b'], f'layers[{i}].b'))
            for i, l in enumerate(payload['layers'])
        ]
        model = IcnnModel(
            input_dim=int(payload['input_dim']),
            layers=layers,
            beta=float(payload['beta']),
            quad=float(payload['quad']),
            skip_connections=bool(payload['skip_connections']),
            in_scale=float(payload.get('in_scale', 1.0)),
            out_scale=float(payload.get('out_scale', 1.0)),
        )
    except KeyError as e:
        raise CheckpointError(f"checkpoint missing field {e}") from e

    prev = 0
    for i, l in enumerate(model.layers):
        width = l.b.shape[0]
        if l.W_z.shape != (width, prev) or l.W_x.shape != (width, model.input_dim):
            raise CheckpointError(f"layer {i} shapes are inconsistent")
        prev = width
    if prev != 1:
        raise CheckpointError("output layer must be scalar")
    if not is_convex_structure(model):
        raise CheckpointError("checkpoint has negative W_z entries or non-positive scales")
    return model


def save_model(model: IcnnModel, path: str) -> str:
    with open(path, 'w') as f:
        json.dump(model_to_dict(model), f, indent=1)
    return path


def load_model(path: str) -> IcnnModel:
    try:
        with open(path, 'r') as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read ICNN checkpoint {path}: {e}") from e
    return model_from_dict(payload)
