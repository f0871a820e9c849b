"""Training objectives with analytic gradients.

Every loss returns ``(value, grads)``. Classification losses take logits or
embeddings of shape (B, ...) and integer labels. Gradients are with respect
to the loss inputs and any head parameters (class weight matrix ``W`` of
shape (d, n), bias, centers).
"""

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DegenerateInputError

log = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "focal", "joint_center", "msoftmax", "arcface", "osl",
              "triplet_cos", "triplet_euc", "ntxent", "l1_apc")
EMBEDDING_LOSSES = ("joint_center", "msoftmax", "arcface", "osl",
                    "triplet_cos", "triplet_euc", "ntxent")

ARC_COS_CLAMP = 1e-7
ARC_THETA_GAP = 1e-6


def _onehot(labels, n):
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_labels(labels, n):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    return labels


def log_softmax(logits):
    return logits - logsumexp(logits, axis=1, keepdims=True)


def loss_ce(logits, labels):
    """Mean cross-entropy; gradient is (softmax - onehot) / B."""
    logits = np.asarray(logits, dtype=np.float64)
    B, n = logits.shape
    labels = _check_labels(labels, n)
    logp = log_softmax(logits)
    loss = -logp[np.arange(B), labels].mean()
    grad = (np.exp(logp) - _onehot(labels, n)) / B
    return float(loss), grad


def loss_focal(logits, labels, gamma=2.0):
    """Mean of ``-(1 - p_t)**gamma * log p_t``."""
    if not 0.0 <= gamma <= 5.0:
        raise ConfigError("focal gamma must lie in [0, 5]")
    logits = np.asarray(logits, dtype=np.float64)
    B, n = logits.shape
    labels = _check_labels(labels, n)
    logp = log_softmax(logits)
    probs = np.exp(logp)
    lp_t = logp[np.arange(B), labels]
    p_t = probs[np.arange(B), labels]
    q = -np.expm1(lp_t)  # 1 - p_t without cancellation
    mod = q ** gamma
    loss = -(mod * lp_t).mean()
    # dL/dlog(p_t) per sample
    if gamma == 0.0:
        dl = -np.ones(B)
    else:
        dl = gamma * q ** (gamma - 1.0) * p_t * lp_t - mod
    grad = (dl[:, None] * (_onehot(labels, n) - probs)) / B
    return float(loss), grad


def loss_joint_center(embeddings, logits, labels, centers, lam=0.003):
    """Softmax cross-entropy plus the center term, both averaged over the batch.

    ``L = mean_i[-log softmax(logits_i)[y_i] + lam/2 * ||z_i - c_{y_i}||^2]``

    Returns:
        (loss, {"embeddings", "logits", "centers"}) gradients.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    B = z.shape[0]
    ce, d_logits = loss_ce(logits, labels)
    labels = np.asarray(labels, dtype=np.int64)
    if centers.shape[1] != z.shape[1]:
        raise ValueError("centers must be n x d")
    diff = z - centers[labels]
    loss = ce + 0.5 * lam * float(np.sum(diff * diff)) / B
    d_z = lam * diff / B
    d_c = np.zeros_like(centers)
    np.add.at(d_c, labels, -d_z)
    return loss, {"embeddings": d_z, "logits": d_logits, "centers": d_c}


def update_centers(centers, embeddings, labels, alpha=0.5):
    """Mini-batch center update ``c_j -= alpha * mean_{i: y_i=j}(c_j - z_i)``.

    Classes absent from the batch keep their center.
    """
    centers = np.array(centers, dtype=np.float64, copy=True)
    labels = np.asarray(labels, dtype=np.int64)
    for j in np.unique(labels):
        members = embeddings[labels == j]
        centers[j] -= alpha * np.mean(centers[j] - members, axis=0)
    return centers


def _normalize_rows(x, what):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"zero-norm {what}")
    return x / norms, norms


def _normalize_backward(grad_unit, unit, norms):
    """Backprop through ``u = v / ||v||`` row-wise."""
    return (grad_unit - np.sum(grad_unit * unit, axis=1, keepdims=True) * unit) / norms


def _cosines(z, W):
    zn, z_norm = _normalize_rows(np.asarray(z, dtype=np.float64), "embedding")
    wn_t, w_norm = _normalize_rows(np.asarray(W, dtype=np.float64).T, "weight column")
    return zn, z_norm, wn_t, w_norm, zn @ wn_t.T


def msoftmax_logits(z, W):
    """``||z_i|| cos(theta_ij)`` = ``z_i . W_j / ||W_j||``."""
    _, z_norm, _, _, cos = _cosines(z, W)
    return z_norm * cos


def loss_msoftmax(embeddings, labels, W):
    """Cross-entropy over logits ``||z|| cos(theta_j)``."""
    z = np.asarray(embeddings, dtype=np.float64)
    _normalize_rows(z, "embedding")
    wn_t, w_norm = _normalize_rows(np.asarray(W, dtype=np.float64).T, "weight column")
    logits = z @ wn_t.T
    loss, d_logits = loss_ce(logits, labels)
    d_z = d_logits @ wn_t
    d_wn_t = d_logits.T @ z
    d_W = _normalize_backward(d_wn_t, wn_t, w_norm).T
    return loss, {"embeddings": d_z, "W": d_W}


def _arcface_target(c, m):
    """``cos(theta + m)`` for ``c = cos(theta)`` and its derivative in ``c``.

    Beyond ``theta + m > pi - gap`` the angle is clamped, so the value is
    constant and the derivative 0.
    """
    c = np.clip(c, -1.0, 1.0)
    sin_t = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    value = c * np.cos(m) - sin_t * np.sin(m)
    safe_sin = np.maximum(sin_t, np.sqrt(1.0 - (1.0 - ARC_COS_CLAMP) ** 2))
    deriv = np.cos(m) + c * np.sin(m) / safe_sin
    clamped = c < np.cos(np.pi - m - ARC_THETA_GAP)
    value = np.where(clamped, np.cos(np.pi - ARC_THETA_GAP), value)
    deriv = np.where(clamped, 0.0, deriv)
    return value, deriv


def arcface_logits(z, labels, W, s=64.0, m=0.5):
    _, _, _, _, cos = _cosines(z, W)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(cos.shape[0])
    logits = cos.copy()
    logits[rows, labels] = _arcface_target(cos[rows, labels], m)[0]
    return s * logits


def loss_arcface(embeddings, labels, W, s=64.0, m=0.5):
    """Additive angular margin: target logit ``s cos(theta_y + m)``,
    others ``s cos(theta_j)``, on unit-normalised embeddings and weights."""
    if s <= 0 or not 0.0 <= m < np.pi:
        raise ConfigError("arcface needs s > 0 and m in [0, pi)")
    zn, z_norm, wn_t, w_norm, cos = _cosines(embeddings, W)
    B, n = cos.shape
    labels = _check_labels(labels, n)
    rows = np.arange(B)
    target, dtarget = _arcface_target(cos[rows, labels], m)
    logits = cos.copy()
    logits[rows, labels] = target
    loss, d_logits = loss_ce(s * logits, labels)
    d_cos = s * d_logits
    d_cos[rows, labels] *= dtarget
    d_zn = d_cos @ wn_t
    d_wn_t = d_cos.T @ zn
    return loss, {
        "embeddings": _normalize_backward(d_zn, zn, z_norm),
        "W": _normalize_backward(d_wn_t, wn_t, w_norm).T,
    }


def osl_mask(d, n):
    """Block-diagonal 0/1 mask (d x n): class j owns a contiguous row block.

    Blocks have ``d // n`` rows; the last class takes the remainder.
    """
    if d < n:
        raise ConfigError(f"embedding dim {d} cannot hold {n} disjoint class blocks")
    size = d // n
    mask = np.zeros((d, n))
    for j in range(n):
        stop = d if j == n - 1 else (j + 1) * size
        mask[j * size:stop, j] = 1.0
    return mask


def loss_osl(embeddings, labels, W, mask):
    """Cross-entropy over ``(mask * W)^T psi``; masked entries get zero gradient."""
    psi = np.asarray(embeddings, dtype=np.float64)
    Wm = np.asarray(mask) * np.asarray(W, dtype=np.float64)
    loss, d_logits = loss_ce(psi @ Wm, labels)
    return loss, {"embeddings": d_logits @ Wm.T, "W": mask * (psi.T @ d_logits)}


def _pairwise_distance(z, metric):
    """Distance matrix and a function giving d(D[i,j])/d(z_i)."""
    if metric == "euclidean":
        diff = z[:, None, :] - z[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=2))

        def grad_first(i, j):
            return (z[i] - z[j]) / max(dist[i, j], 1e-12)
        return dist, grad_first
    if metric == "cosine":
        zn, norms = _normalize_rows(z, "embedding")
        sim = zn @ zn.T
        dist = 1.0 - sim

        def grad_first(i, j):
            return -(zn[j] - sim[i, j] * zn[i]) / norms[i, 0]
        return dist, grad_first
    raise ConfigError(f"unknown triplet metric {metric!r}")


def loss_triplet(embeddings, labels, metric="cosine", margin=0.2, stats=None):
    """Batch-hard online triplet loss, averaged over anchors that have both
    a positive and a negative in the batch.

    ``stats`` (a Counter) receives ``triplet_no_valid_anchor`` when the batch
    has no usable anchor; the loss is then 0.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    B = z.shape[0]
    dist, grad_first = _pairwise_distance(z, metric)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(B, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    grad = np.zeros_like(z)
    n_valid = int(valid.sum())
    if n_valid == 0:
        if stats is not None:
            stats["triplet_no_valid_anchor"] += 1
        log.debug("triplet batch without a valid anchor")
        return 0.0, {"embeddings": grad}
    total = 0.0
    for a in np.flatnonzero(valid):
        p = int(np.argmax(np.where(pos_mask[a], dist[a], -np.inf)))
        q = int(np.argmin(np.where(neg_mask[a], dist[a], np.inf)))
        hinge = dist[a, p] - dist[a, q] + margin
        if hinge <= 0.0:
            continue
        total += hinge
        grad[a] += grad_first(a, p) - grad_first(a, q)
        grad[p] += grad_first(p, a)
        grad[q] -= grad_first(q, a)
    return total / n_valid, {"embeddings": grad / n_valid}


def pair_by_label(labels):
    """Designate one positive per sample: consecutive same-class samples are
    paired. An unpaired sample gets partner -1."""
    labels = np.asarray(labels)
    partner = np.full(labels.size, -1, dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        for a, b in zip(idx[0::2], idx[1::2]):
            partner[a], partner[b] = b, a
    return partner


def loss_ntxent(embeddings, partner, tau=0.5, stats=None):
    """Normalised-temperature cross-entropy over designated positive pairs.

    ``L(i, j) = -sim(i, j)/tau + log sum_{k != i} exp(sim(i, k)/tau)``
    averaged over every sample ``i`` with a partner ``j`` (so both (i, j) and
    (j, i) contribute). Samples with partner -1 are excluded and counted in
    ``stats["ntxent_unpaired"]``.
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    z = np.asarray(embeddings, dtype=np.float64)
    partner = np.asarray(partner, dtype=np.int64)
    B = z.shape[0]
    anchors = np.flatnonzero(partner >= 0)
    if stats is not None and anchors.size < B:
        stats["ntxent_unpaired"] += B - anchors.size
    if anchors.size == 0:
        return 0.0, {"embeddings": np.zeros_like(z)}
    zn, norms = _normalize_rows(z, "embedding")
    S = (zn @ zn.T) / tau
    np.fill_diagonal(S, -np.inf)
    rows = S[anchors]
    lse = logsumexp(rows, axis=1)
    loss = np.mean(lse - rows[np.arange(anchors.size), partner[anchors]])
    G = np.zeros((B, B))
    soft = np.exp(rows - lse[:, None])
    soft[np.arange(anchors.size), partner[anchors]] -= 1.0
    G[anchors] = soft / anchors.size
    d_zn = (G + G.T) @ zn / tau
    return float(loss), {"embeddings": _normalize_backward(d_zn, zn, norms)}


def loss_l1_apc(predictions, targets):
    """Summed absolute error; subgradient sign(o - t), 0 at ties."""
    o = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if o.shape != t.shape:
        raise ValueError(f"shape mismatch {o.shape} vs {t.shape}")
    return float(np.sum(np.abs(t - o))), np.sign(o - t)


# ---------------------------------------------------------------------------
# Loss heads: the trainable layer (if any) sitting on top of a network body
# ---------------------------------------------------------------------------

@dataclass
class LossHead:
    """Loss kind plus the parameters it owns.

    For ``ce``/``focal`` the body emits logits directly and the head has no
    parameters. Embedding losses receive the d-dimensional body output.
    """
    kind: str
    n_classes: int = 0
    embed_dim: int = 0
    W: np.ndarray | None = None
    b: np.ndarray | None = None
    centers: np.ndarray | None = None
    mask: np.ndarray | None = None
    lam: float = 0.003
    gamma: float = 2.0
    s: float = 64.0
    m: float = 0.5
    tau: float = 0.5
    margin: float = 0.2
    center_alpha: float = 0.5
    stats: Counter = field(default_factory=Counter, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.gamma <= 5.0:
            raise ConfigError("gamma must lie in [0, 5]")
        if not 0.0 <= self.m < np.pi:
            raise ConfigError("m must lie in [0, pi)")
        if self.tau <= 0 or self.s <= 0:
            raise ConfigError("tau and s must be positive")

    @classmethod
    def create(cls, kind, n_classes, embed_dim=128, seed=0, **hyper):
        head = cls(kind, n_classes, embed_dim, **hyper)
        rng = np.random.default_rng(seed)
        limit = np.sqrt(6.0 / (embed_dim + n_classes)) if n_classes else 0.0
        if kind in ("joint_center", "msoftmax", "arcface", "osl"):
            head.W = rng.uniform(-limit, limit, size=(embed_dim, n_classes))
        if kind == "joint_center":
            head.b = np.zeros(n_classes)
            head.centers = np.zeros((n_classes, embed_dim))
        if kind == "osl":
            head.mask = osl_mask(embed_dim, n_classes)
            head.W *= head.mask
        return head

    def body_output_dim(self):
        if self.kind in ("ce", "focal"):
            return self.n_classes
        return self.embed_dim

    def params(self):
        """Trainable head parameters, in a fixed order."""
        if self.kind == "joint_center":
            return [self.W, self.b]
        if self.kind in ("msoftmax", "arcface", "osl"):
            return [self.W]
        return []

    def gradient_params(self):
        """Parameters that have a loss gradient (centers included)."""
        if self.kind == "joint_center":
            return [self.W, self.b, self.centers]
        return self.params()

    def _partner(self, labels):
        return pair_by_label(labels)

    def loss(self, outputs, labels, with_centers=False):
        """Returns (loss, dLoss/dOutputs, head parameter grads).

        Head grads align with ``params()``, or with ``gradient_params()``
        when ``with_centers`` is set.
        """
        k = self.kind
        if k == "ce":
            loss, g = loss_ce(outputs, labels)
            return loss, g, []
        if k == "focal":
            loss, g = loss_focal(outputs, labels, self.gamma)
            return loss, g, []
        if k == "joint_center":
            logits = outputs @ self.W + self.b
            loss, g = loss_joint_center(outputs, logits, labels, self.centers, self.lam)
            d_out = g["embeddings"] + g["logits"] @ self.W.T
            grads = [outputs.T @ g["logits"], g["logits"].sum(axis=0)]
            if with_centers:
                grads.append(g["centers"])
            return loss, d_out, grads
        if k == "msoftmax":
            loss, g = loss_msoftmax(outputs, labels, self.W)
            return loss, g["embeddings"], [g["W"]]
        if k == "arcface":
            loss, g = loss_arcface(outputs, labels, self.W, self.s, self.m)
            return loss, g["embeddings"], [g["W"]]
        if k == "osl":
            loss, g = loss_osl(outputs, labels, self.W, self.mask)
            return loss, g["embeddings"], [g["W"]]
        if k in ("triplet_cos", "triplet_euc"):
            metric = "cosine" if k == "triplet_cos" else "euclidean"
            loss, g = loss_triplet(outputs, labels, metric, self.margin, self.stats)
            return loss, g["embeddings"], []
        if k == "ntxent":
            loss, g = loss_ntxent(outputs, self._partner(labels), self.tau, self.stats)
            return loss, g["embeddings"], []
        if k == "l1_apc":
            raise ConfigError("l1_apc is a sequence loss; use the APC trainer")
        raise ConfigError(f"unknown loss kind {k!r}")

    def after_step(self, outputs, labels):
        if self.kind == "joint_center":
            self.centers = update_centers(self.centers, outputs, labels, self.center_alpha)

    def scores(self, outputs):
        """Class scores used for accuracy monitoring (None for metric losses)."""
        k = self.kind
        if k in ("ce", "focal"):
            return outputs
        if k == "joint_center":
            return outputs @ self.W + self.b
        if k == "msoftmax":
            return msoftmax_logits(outputs, self.W)
        if k == "arcface":
            return _cosines(outputs, self.W)[4]
        if k == "osl":
            return outputs @ (self.mask * self.W)
        return None
