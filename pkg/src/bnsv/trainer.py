"""Network training loops: dense classifiers/embedders and the APC GRU."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, EmptyInputError, NumericalError
from .losses import LossHead, _pairwise_distance, loss_l1_apc
from .modelio import NetworkModel
from .netcore import (DenseLayer, DenseNetwork, GruEncoder, backward, forward, glorot_uniform,
                      grad_check, gru_forward, gru_forward_backward, l2_penalty, optimizer_step)
from .targets import context_index, make_apc_pairs

log = logging.getLogger(__name__)


@dataclass
class FramePool:
    """All training frames in one matrix plus per-frame context indices.

    Splicing happens per minibatch: row ``i`` of a batch is
    ``frames[ctx[i]].reshape(-1)``, which never materialises the full
    ``N x (C*D)`` spliced matrix.
    """
    frames: np.ndarray   # (N, D)
    ctx: np.ndarray      # (N, C) global row indices
    offsets: np.ndarray  # (U+1,) utterance boundaries

    @classmethod
    def from_utterances(cls, utterances, context=11):
        if not utterances:
            raise EmptyInputError("no training utterances")
        lengths = np.array([len(u) for u in utterances])
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        ctx = np.concatenate([context_index(T, context) + off
                              for T, off in zip(lengths, offsets[:-1]) if T > 0])
        frames = np.concatenate([np.asarray(u, dtype=np.float64) for u in utterances])
        return cls(frames, ctx, offsets)

    def utterance_rows(self, u):
        return np.arange(self.offsets[u], self.offsets[u + 1])

    def spliced(self, rows):
        return self.frames[self.ctx[rows]].reshape(len(rows), -1)


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)


def build_dense_model(input_dim, hidden, activation, head, seed=0, scheme="speaker", context=11):
    """Hidden layers with ``activation`` followed by a linear output layer
    sized for the loss head (logits for ce/focal, embedding otherwise)."""
    body = DenseNetwork.build(input_dim, list(hidden), activation, seed=seed)
    rng = np.random.default_rng(seed + 7919)
    out_dim = head.body_output_dim()
    body.layers.append(DenseLayer(glorot_uniform(rng, body.output_dim, out_dim),
                                  np.zeros(out_dim), "linear"))
    return NetworkModel(body, head, scheme, context)


def train_dense(model, pool, rows, labels, cfg, history=None):
    """Minibatch training on spliced frames.

    Args:
        model: NetworkModel with a DenseNetwork body.
        pool: FramePool holding the frames.
        rows: (N,) pool rows used as training samples.
        labels: (N,) class index per sample.
        cfg: TrainConfig.
    """
    rows = np.asarray(rows)
    labels = np.asarray(labels, dtype=np.int64)
    if rows.size == 0:
        raise EmptyInputError("no training samples")
    if rows.shape != labels.shape:
        raise ValueError("rows and labels must align")
    net, head = model.net, model.head
    params = net.params() + head.params()
    mask = net.weight_mask() + [p.ndim == 2 for p in head.params()]
    names = [f"layer{i // 2 + 1}.{'W' if i % 2 == 0 else 'b'}" for i in range(len(net.params()))]
    names += [f"head.{k}" for k in ("W", "b")[:len(head.params())]]
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory() if history is None else history
    opt_state = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(rows.size)
        total, correct = 0.0, 0
        for start in range(0, rows.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = pool.spliced(rows[idx])
            y = labels[idx]
            state = forward(net, x)
            loss, d_out, head_grads = head.loss(state.output, y)
            grads = backward(net, state, d_out, cfg.l2_penalty)
            grads += [g + cfg.l2_penalty * p if p.ndim == 2 else g
                      for g, p in zip(head_grads, head.params())]
            loss += l2_penalty(params, mask, cfg.l2_penalty)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss in epoch {epoch + 1}")
            _, opt_state = optimizer_step(params, grads, cfg, opt_state, names)
            head.after_step(state.output, y)
            total += loss * idx.size
            scores = head.scores(state.output)
            if scores is not None:
                correct += int(np.sum(np.argmax(scores, axis=1) == y))
        history.epoch_loss.append(total / rows.size)
        history.epoch_accuracy.append(correct / rows.size)
        log.info("epoch %d: loss %.5f acc %.4f", epoch + 1, history.epoch_loss[-1],
                 history.epoch_accuracy[-1])
    return model, history


def build_apc_model(input_dim, hidden, n_layers=3, activation="tanh", seed=0):
    enc = GruEncoder.build(input_dim, hidden, n_layers, input_dim, activation, seed=seed)
    return NetworkModel(enc, LossHead("l1_apc"), "apc", 1)


def _pad_batch(pairs):
    """Stack variable-length (input, target) pairs, zero-padded at the end.

    Padding sits after the real frames, so a causal encoder's outputs at
    real positions are unaffected; the mask removes padded positions from
    the loss.
    """
    T = max(len(x) for x, _ in pairs)
    D = pairs[0][0].shape[1]
    x = np.zeros((len(pairs), T, D))
    t = np.zeros_like(x)
    mask = np.zeros((len(pairs), T, 1))
    for i, (xi, ti) in enumerate(pairs):
        x[i, :len(xi)] = xi
        t[i, :len(ti)] = ti
        mask[i, :len(xi)] = 1.0
    return x, t, mask


def train_apc(model, utterances, cfg, t_n=5, history=None):
    """Autoregressive predictive coding: predict ``x_{i+t_n}`` from
    ``x_0..x_i`` under an L1 loss.

    The reported epoch loss is the L1 sum over all predicted frames divided
    by their count. Minibatches hold ``cfg.batch_size`` utterances and the
    gradient is normalised by the number of predicted frames in the batch.
    """
    if not isinstance(model.net, GruEncoder):
        raise ConfigError("APC training needs a GRU encoder")
    pairs = [p for p in (make_apc_pairs(u, t_n) for u in utterances) if p is not None]
    if not pairs:
        raise EmptyInputError(f"no utterance longer than t_n={t_n} frames")
    enc = model.net
    params = enc.params()
    mask_l2 = enc.weight_mask()
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory() if history is None else history
    opt_state = None
    n_frames = sum(len(x) for x, _ in pairs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(pairs), cfg.batch_size):
            x, t, m = _pad_batch([pairs[i] for i in order[start:start + cfg.batch_size]])
            count = m.sum()

            def grad_fn(outputs, t=t, m=m, count=count):
                loss, g = loss_l1_apc(outputs * m, t * m)
                return loss, g * m / count

            _, grads, loss = gru_forward_backward(enc, x, grad_fn, cfg.l2_penalty)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite APC loss in epoch {epoch + 1}")
            _, opt_state = optimizer_step(params, grads, cfg, opt_state)
            total += loss
        history.epoch_loss.append(total / n_frames + l2_penalty(params, mask_l2, cfg.l2_penalty))
        log.info("APC epoch %d: L1 per frame %.5f", epoch + 1, history.epoch_loss[-1])
    return model, history


KINK_MARGIN = 1e-3
NORM_MARGIN = 0.1   # unit normalisation is singular at the origin
_NORMALISING = ("msoftmax", "arcface", "triplet_cos", "ntxent")


def _relu_gaps(state_pre, activations):
    return [np.abs(v).min() for v, act in zip(state_pre, activations) if act == "relu"]


def _gru_kink_gap(enc, state):
    """Distance of relu candidate pre-activations from 0 (inf for smooth candidates)."""
    if enc.activation != "relu":
        return np.inf
    gaps = []
    for layer, cache in zip(enc.layers, state.caches):
        H = layer.hidden
        a = cache.inputs @ layer.Wx[:, 2 * H:] + layer.bx[2 * H:]
        gaps.append(np.abs(a + cache.r * cache.gn).min())
    return min(gaps)


def _triplet_kink_gap(z, labels, metric, margin):
    """Smallest distance to a hinge boundary or to a hardest-pair tie."""
    dist, _ = _pairwise_distance(z, metric)
    same = labels[:, None] == labels[None, :]
    gaps = [np.inf]
    for a in range(len(labels)):
        pos = np.sort(dist[a][same[a] & (np.arange(len(labels)) != a)])[::-1]
        neg = np.sort(dist[a][~same[a]])
        if pos.size == 0 or neg.size == 0:
            continue
        gaps.append(abs(pos[0] - neg[0] + margin))
        if pos.size > 1:
            gaps.append(pos[0] - pos[1])
        if neg.size > 1:
            gaps.append(neg[1] - neg[0])
    return min(gaps)


def _apc_instance(kind_seed, activation, in_dim, hidden, l2):
    rng = np.random.default_rng(kind_seed)
    model = build_apc_model(in_dim, hidden, 3, activation, kind_seed)
    seq = rng.standard_normal((2, 7 + 2, in_dim))
    x, t = seq[:, :-2], seq[:, 2:]
    state = gru_forward(model.net, x)
    gap = min(_gru_kink_gap(model.net, state), np.abs(state.outputs - t).min())
    params = model.net.params()
    mask = model.net.weight_mask()

    def loss_fn():
        _, grads, loss = gru_forward_backward(model.net, x, lambda o: loss_l1_apc(o, t), l2)
        return loss + l2_penalty(params, mask, l2), grads

    return gap, params, loss_fn


def _dense_instance(kind, kind_seed, activation, batch, in_dim, hidden, n_classes, embed_dim,
                    l2, hyper):
    rng = np.random.default_rng(kind_seed)
    head = LossHead.create(kind, n_classes, embed_dim, seed=kind_seed, **hyper)
    if head.centers is not None:
        head.centers = rng.standard_normal(head.centers.shape)
    model = build_dense_model(in_dim, hidden, activation, head, kind_seed)
    x = rng.standard_normal((batch, in_dim))
    y = np.arange(batch) % n_classes
    net = model.net
    state = forward(net, x)
    gap = min(_relu_gaps(state.pre, [layer.activation for layer in net.layers]), default=np.inf)
    if kind.startswith("triplet"):
        metric = "cosine" if kind == "triplet_cos" else "euclidean"
        gap = min(gap, _triplet_kink_gap(state.output, y, metric, head.margin))
    if kind in _NORMALISING and np.linalg.norm(state.output, axis=1).min() < NORM_MARGIN:
        gap = 0.0
    params = net.params() + head.gradient_params()
    mask = net.weight_mask() + [p.ndim == 2 and p is not head.centers
                                for p in head.gradient_params()]

    def loss_fn():
        st = forward(net, x)
        loss, d_out, head_grads = head.loss(st.output, y, with_centers=True)
        grads = backward(net, st, d_out, l2)
        grads += [g + l2 * p if m else g
                  for g, p, m in zip(head_grads, head.gradient_params(), mask[len(grads):])]
        return loss + l2_penalty(params, mask, l2), grads

    loss_fn()   # raises DegenerateInputError for a dead (all-zero) embedding
    return gap, params, loss_fn


def network_grad_check(kind, activation, seed=0, batch=8, in_dim=6, hidden=(5, 5),
                       n_classes=4, embed_dim=6, epsilon=1e-5, tolerance=1e-4, l2=1e-4,
                       max_draws=100, **hyper):
    """Central-difference check of a small network plus loss head.

    Every parameter (body, head and, for joint_center, the centers) is
    perturbed. ``l1_apc`` checks a 3-layer GRU encoder on a T=7 sequence.
    Instances closer than ``KINK_MARGIN`` to a kink (relu at 0, an l1 tie,
    a triplet hinge or hardest-pair switch) are redrawn, since a central
    difference straddling a kink measures neither one-sided derivative.
    So are embeddings shorter than ``NORM_MARGIN`` for heads that normalise
    them, where curvature explodes and truncation error swamps the check.
    """
    for draw in range(max_draws):
        kind_seed = seed * max_draws + draw
        try:
            if kind == "l1_apc":
                gap, params, loss_fn = _apc_instance(kind_seed, activation, in_dim, hidden[0], l2)
            else:
                gap, params, loss_fn = _dense_instance(kind, kind_seed, activation, batch, in_dim,
                                                       hidden, n_classes, embed_dim, l2, hyper)
        except DegenerateInputError:
            continue
        if gap > KINK_MARGIN:
            return grad_check(params, loss_fn, epsilon, tolerance)
    raise NumericalError(f"no kink-free {kind}/{activation} instance in {max_draws} draws")
