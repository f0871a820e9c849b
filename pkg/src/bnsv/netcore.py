"""Small numpy neural-network engine with hand-written gradients.

Dense feed-forward networks (row-major batches, ``h = f(x @ W + b)``), a
stacked GRU encoder with backpropagation through time, SGD/Adam updates and
a central-difference gradient checker. Everything runs in float64.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

from .errors import ConfigError, NumericalError

ACTIVATIONS = ("sigmoid", "relu", "gelu", "linear", "tanh")
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def apply_activation(tag, v):
    """Activation value and its derivative at ``v`` (elementwise).

    GELU uses the exact Gaussian CDF, ``v * Phi(v)``. The ReLU derivative at
    exactly 0 is taken as 0.
    """
    v = np.asarray(v, dtype=np.float64)
    if tag == "sigmoid":
        f = expit(v)
        return f, f * (1.0 - f)
    if tag == "relu":
        return np.maximum(v, 0.0), (v > 0).astype(np.float64)
    if tag == "gelu":
        cdf = ndtr(v)
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return v * cdf, cdf + v * pdf
    if tag == "tanh":
        f = np.tanh(v)
        return f, 1.0 - f * f
    if tag == "linear":
        return v.copy(), np.ones_like(v)
    raise ConfigError(f"unknown activation {tag!r}")


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    activation: str

    @property
    def shape(self):
        return self.W.shape


@dataclass
class DenseNetwork:
    layers: list

    @classmethod
    def build(cls, input_dim, widths, activations, seed=0):
        """Glorot-initialised network. ``activations`` is one tag per layer
        or a single tag applied to every layer."""
        if isinstance(activations, str):
            activations = [activations] * len(widths)
        if len(activations) != len(widths):
            raise ConfigError("one activation per layer required")
        rng = np.random.default_rng(seed)
        layers, fan_in = [], input_dim
        for width, act in zip(widths, activations):
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")
            layers.append(DenseLayer(glorot_uniform(rng, fan_in, width), np.zeros(width), act))
            fan_in = width
        return cls(layers)

    @property
    def input_dim(self):
        return self.layers[0].W.shape[0]

    @property
    def output_dim(self):
        return self.layers[-1].W.shape[1]

    @property
    def widths(self):
        return [layer.W.shape[1] for layer in self.layers]

    def params(self):
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def weight_mask(self):
        """True for parameters that carry the L2 penalty (weights, not biases)."""
        return [flag for _ in self.layers for flag in (True, False)]

    def __call__(self, x):
        return forward(self, x).output


@dataclass
class ForwardState:
    inputs: np.ndarray
    pre: list
    post: list
    derivs: list

    @property
    def output(self):
        return self.post[-1]


def forward(net, x):
    """Forward pass keeping every layer's pre-activation and activation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"input shape {x.shape} does not match network input dim {net.input_dim}")
    pre, post, derivs = [], [], []
    h = x
    for layer in net.layers:
        v = h @ layer.W + layer.b
        h, d = apply_activation(layer.activation, v)
        pre.append(v)
        post.append(h)
        derivs.append(d)
    return ForwardState(x, pre, post, derivs)


def backward(net, state, grad_out, l2=0.0):
    """Parameter gradients (ordered like ``net.params()``) given dLoss/dOutput.

    Weight gradients include the L2 term ``l2 * W``.
    """
    grads = [None] * (2 * len(net.layers))
    delta = np.asarray(grad_out, dtype=np.float64)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dv = delta * state.derivs[i]
        below = state.inputs if i == 0 else state.post[i - 1]
        grads[2 * i] = below.T @ dv + l2 * layer.W
        grads[2 * i + 1] = dv.sum(axis=0)
        if i > 0:
            delta = dv @ layer.W.T
    return grads


def backward_input(net, state, grad_out):
    """dLoss/dInput, used by tests and by stacked models."""
    delta = np.asarray(grad_out, dtype=np.float64)
    for i in range(len(net.layers) - 1, -1, -1):
        delta = (delta * state.derivs[i]) @ net.layers[i].W.T
    return delta


def l2_penalty(params, mask, l2):
    return 0.5 * l2 * sum(float(np.sum(p * p)) for p, m in zip(params, mask) if m)


# ---------------------------------------------------------------------------
# GRU encoder
# ---------------------------------------------------------------------------

@dataclass
class GruLayer:
    """Gate order in the stacked matrices is reset, update, candidate."""
    Wx: np.ndarray  # (in, 3H)
    Wh: np.ndarray  # (H, 3H)
    bx: np.ndarray  # (3H,)
    bh: np.ndarray  # (3H,)

    @property
    def hidden(self):
        return self.Wh.shape[0]


@dataclass
class GruEncoder:
    layers: list
    V: np.ndarray  # output projection (H, D_out)
    c: np.ndarray
    activation: str = "tanh"

    @classmethod
    def build(cls, input_dim, hidden, n_layers=3, output_dim=None, activation="tanh", seed=0):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(seed)
        output_dim = input_dim if output_dim is None else output_dim
        layers, fan_in = [], input_dim
        for _ in range(n_layers):
            layers.append(GruLayer(
                glorot_uniform(rng, fan_in, 3 * hidden),
                glorot_uniform(rng, hidden, 3 * hidden),
                np.zeros(3 * hidden), np.zeros(3 * hidden),
            ))
            fan_in = hidden
        return cls(layers, glorot_uniform(rng, hidden, output_dim), np.zeros(output_dim), activation)

    @property
    def input_dim(self):
        return self.layers[0].Wx.shape[0]

    @property
    def output_dim(self):
        return self.V.shape[1]

    @property
    def widths(self):
        return [layer.hidden for layer in self.layers]

    def params(self):
        out = []
        for layer in self.layers:
            out.extend((layer.Wx, layer.Wh, layer.bx, layer.bh))
        out.extend((self.V, self.c))
        return out

    def weight_mask(self):
        return [flag for _ in self.layers for flag in (True, True, False, False)] + [True, False]


@dataclass
class _GruLayerCache:
    inputs: np.ndarray   # (B, T, in)
    h: np.ndarray        # (B, T+1, H), h[:, 0] is the zero initial state
    r: np.ndarray
    z: np.ndarray
    n: np.ndarray
    dn: np.ndarray       # candidate activation derivative
    gn: np.ndarray       # recurrent candidate term Wh_n h + bh_n


@dataclass
class GruState:
    caches: list = field(default_factory=list)
    outputs: np.ndarray | None = None

    def hidden(self, layer_index):
        """Hidden-state sequence (B, T, H) of a 1-based layer."""
        return self.caches[layer_index - 1].h[:, 1:]


def _gru_layer_forward(layer, x, activation):
    B, T, _ = x.shape
    H = layer.hidden
    a = x @ layer.Wx + layer.bx
    h = np.zeros((B, T + 1, H))
    r = np.empty((B, T, H))
    z = np.empty((B, T, H))
    n = np.empty((B, T, H))
    dn = np.empty((B, T, H))
    gn = np.empty((B, T, H))
    for t in range(T):
        g = h[:, t] @ layer.Wh + layer.bh
        r[:, t] = expit(a[:, t, :H] + g[:, :H])
        z[:, t] = expit(a[:, t, H:2 * H] + g[:, H:2 * H])
        gn[:, t] = g[:, 2 * H:]
        n[:, t], dn[:, t] = apply_activation(activation, a[:, t, 2 * H:] + r[:, t] * gn[:, t])
        h[:, t + 1] = (1.0 - z[:, t]) * n[:, t] + z[:, t] * h[:, t]
    return _GruLayerCache(x, h, r, z, n, dn, gn)


def _gru_layer_backward(layer, cache, dH):
    """BPTT through one layer. ``dH`` is dLoss/dh_t for t=1..T from above."""
    B, T, H = dH.shape
    dWx = np.zeros_like(layer.Wx)
    dWh = np.zeros_like(layer.Wh)
    dbx = np.zeros_like(layer.bx)
    dbh = np.zeros_like(layer.bh)
    da = np.empty((B, T, 3 * H))
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dH[:, t] + dh_next
        h_prev = cache.h[:, t]
        r, z, n = cache.r[:, t], cache.z[:, t], cache.n[:, t]
        dn_pre = dh * (1.0 - z) * cache.dn[:, t]
        dz_pre = dh * (h_prev - n) * z * (1.0 - z)
        dr_pre = dn_pre * cache.gn[:, t] * r * (1.0 - r)
        da_t = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dg_t = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        da[:, t] = da_t
        dWh += h_prev.T @ dg_t
        dbh += dg_t.sum(axis=0)
        dh_next = dh * z + dg_t @ layer.Wh.T
    x = cache.inputs
    dWx += x.reshape(-1, x.shape[2]).T @ da.reshape(-1, 3 * H)
    dbx += da.sum(axis=(0, 1))
    dx = da @ layer.Wx.T
    return dx, [dWx, dWh, dbx, dbh]


def gru_forward(enc, x):
    """Run the encoder on a (B, T, D) batch (or a single (T, D) sequence).

    The hidden state starts at zero for every sequence.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[2] != enc.input_dim:
        raise ValueError(f"input dim {x.shape[2]} != encoder input dim {enc.input_dim}")
    state = GruState()
    h = x
    for layer in enc.layers:
        cache = _gru_layer_forward(layer, h, enc.activation)
        state.caches.append(cache)
        h = cache.h[:, 1:]
    state.outputs = h @ enc.V + enc.c
    return state


def gru_forward_backward(enc, x, grad_fn, l2=0.0):
    """Forward pass, then BPTT over the whole sequence.

    Args:
        enc: GruEncoder.
        x: (B, T, D) inputs.
        grad_fn: either an array of dLoss/dOutputs with the output shape, or a
            callable ``outputs -> (loss, dLoss/dOutputs)``.
        l2: L2 penalty added to weight gradients.

    Returns:
        (outputs, grads, loss) with ``grads`` ordered like ``enc.params()``;
        ``loss`` is None when an explicit gradient array was given.
    """
    state = gru_forward(enc, x)
    loss = None
    if callable(grad_fn):
        loss, d_out = grad_fn(state.outputs)
    else:
        d_out = np.asarray(grad_fn, dtype=np.float64).reshape(state.outputs.shape)
    top = state.caches[-1].h[:, 1:]
    dV = top.reshape(-1, top.shape[2]).T @ d_out.reshape(-1, d_out.shape[2]) + l2 * enc.V
    dc = d_out.sum(axis=(0, 1))
    dH = d_out @ enc.V.T
    layer_grads = []
    for layer, cache in zip(reversed(enc.layers), reversed(state.caches)):
        dH, g = _gru_layer_backward(layer, cache, dH)
        g[0] = g[0] + l2 * layer.Wx
        g[1] = g[1] + l2 * layer.Wh
        layer_grads.append(g)
    grads = [g for lg in reversed(layer_grads) for g in lg] + [dV, dc]
    return state.outputs, grads, loss


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 0.001
    epochs: int = 5
    l2_penalty: float = 0.0001
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size <= 0 or self.learning_rate <= 0 or self.epochs <= 0:
            raise ConfigError("batch_size, learning_rate and epochs must be positive")
        if self.l2_penalty < 0:
            raise ConfigError("l2_penalty must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def check_finite(grads, names=None):
    for i, g in enumerate(grads):
        bad = ~np.isfinite(g)
        if bad.any():
            where = tuple(int(k) for k in np.argwhere(bad)[0])
            label = names[i] if names else f"parameter {i}"
            raise NumericalError(f"non-finite gradient in {label} at index {where}")


def optimizer_step(params, grads, cfg, state=None, names=None):
    """Update ``params`` in place. Returns (params, state)."""
    check_finite(grads, names)
    state = {} if state is None else state
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        for p, g in zip(params, grads):
            p -= lr * g
        return params, state
    if "t" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: int
    worst_index: tuple
    n_checked: int
    tolerance: float
    n_null: int = 0

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)


def grad_check(params, loss_fn, epsilon=1e-5, tolerance=1e-4, max_params=10_000):
    """Compare analytic gradients with central differences, entry by entry.

    The difference quotient carries round-off of about
    ``delta = eps * max(|f|, 1) / epsilon``, so an entry smaller than
    ``delta / tolerance`` cannot be judged at ``tolerance`` even when it is
    exact (structural zeros such as dead units, translation-invariant biases
    or balanced subgradient signs land here). Entries where both the analytic
    and numeric values fall below that resolution are counted in ``n_null``
    and left out of the maximum.

    Args:
        params: list of arrays, perturbed in place (and restored).
        loss_fn: zero-argument callable returning ``(loss, grads)`` for the
            current parameter values, ``grads`` aligned with ``params``.
    """
    total = sum(p.size for p in params)
    if total > max_params:
        raise ConfigError(f"{total} parameters is too many for an exhaustive check")
    f0, analytic = loss_fn()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst = (0.0, 0, ())
    n_null = 0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        numeric = np.empty(p.size)
        scale = np.empty(p.size)
        for j in range(p.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = loss_fn()[0]
            flat[j] = orig - epsilon
            down = loss_fn()[0]
            flat[j] = orig
            numeric[j] = (up - down) / (2.0 * epsilon)
            scale[j] = max(abs(up), abs(down), abs(f0), 1.0)
        if p.size == 0:
            continue
        a = analytic[k].reshape(-1)
        floor = np.finfo(np.float64).eps * scale / (epsilon * tolerance)
        null = (np.abs(a) < floor) & (np.abs(numeric) < floor)
        n_null += int(null.sum())
        err = np.where(null, 0.0, relative_error(a, numeric))
        j = int(np.argmax(err))
        if err[j] > worst[0]:
            worst = (float(err[j]), k, np.unravel_index(j, p.shape))
    return GradCheckReport(worst[0], worst[1], tuple(int(i) for i in worst[2]), total, tolerance,
                           n_null)
