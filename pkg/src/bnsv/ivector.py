"""Total-variability (i-vector) extraction and two-covariance PLDA scoring.

Supervector model: ``S = M + T w`` with ``w ~ N(0, I)``. Baum-Welch
statistics are collected against a diagonal UBM, which also supplies ``M``
and the covariances. PLDA is the two-covariance model
``x = mu + y + e``, ``y ~ N(0, B)``, ``e ~ N(0, W)``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .binio import Reader, Writer
from .errors import ConfigError, DegenerateInputError, EmptyInputError, ParseError
from .gmm import DiagGmm

log = logging.getLogger(__name__)

TV_MAGIC = b"BNT1"
PLDA_MAGIC = b"BNPL"
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class BwStats:
    N: np.ndarray  # (K,) zeroth order
    F: np.ndarray  # (K, D) first order, centred on the UBM means

    @property
    def n_frames(self):
        return float(self.N.sum())


def bw_stats(ubm, X):
    """Zeroth- and centred first-order statistics under UBM posteriors."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyInputError("Baum-Welch statistics need at least one frame")
    post, _ = ubm.posteriors(X)
    N = post.sum(axis=0)
    F = post.T @ X - N[:, None] * ubm.means
    return BwStats(N, F)


@dataclass
class TvModel:
    T: np.ndarray  # (K*D, R), component-major rows
    ubm: DiagGmm

    @property
    def rank(self):
        return self.T.shape[1]

    def blocks(self):
        K, D = self.ubm.means.shape
        return self.T.reshape(K, D, self.rank)

    def precompute(self):
        """Per-component ``T_k^T Sigma_k^-1`` (K, D, R) and ``T_k^T Sigma_k^-1 T_k`` (K, R, R)."""
        Tk = self.blocks()
        TtSinv = Tk / self.ubm.variances[:, :, None]
        return TtSinv, np.einsum("kdr,kds->krs", TtSinv, Tk)


def _posterior(N, F, TtSinv, TtSiT, jitter=1e-8):
    """Posterior precision, mean and covariance of w for stacked stats.

    N: (U, K), F: (U, K, D).
    """
    R = TtSiT.shape[1]
    L = np.eye(R) + np.einsum("uk,krs->urs", N, TtSiT)
    b = np.einsum("kdr,ukd->ur", TtSinv, F)
    try:
        chol = np.linalg.cholesky(L)
    except np.linalg.LinAlgError:
        log.warning("singular posterior precision; adding jitter %g", jitter)
        L = L + jitter * np.eye(R)
        chol = np.linalg.cholesky(L)
    cov = np.linalg.inv(L)
    w = np.einsum("urs,us->ur", cov, b)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return L, w, cov, b, logdet


def _stack(stats):
    return np.stack([s.N for s in stats]), np.stack([s.F for s in stats])


def extract_ivector(tv, stats, cache=None):
    """Posterior mean ``(I + T' S^-1 N T)^-1 T' S^-1 F``.

    ``stats`` may be a single BwStats (returns (R,)) or a list (returns (U, R)).
    """
    single = isinstance(stats, BwStats)
    N, F = _stack([stats] if single else stats)
    TtSinv, TtSiT = cache if cache is not None else tv.precompute()
    w = _posterior(N, F, TtSinv, TtSiT)[1]
    return w[0] if single else w


def train_tmatrix(stats, ubm, R=100, iters=10, seed=0, init_scale=0.1, history=None):
    """EM estimation of the total-variability matrix.

    ``history`` receives the marginal log-likelihood of the statistics
    (up to a T-independent constant) before every update and after the last.
    """
    stats = list(stats)
    K, D = ubm.means.shape
    if R >= K * D:
        raise ConfigError(f"i-vector rank {R} must be below supervector size {K * D}")
    if len(stats) < R:
        log.warning("training T with %d utterances for rank %d", len(stats), R)
    rng = np.random.default_rng(seed)
    T = init_scale * rng.standard_normal((K, D, R)) * np.sqrt(ubm.variances)[:, :, None]
    tv = TvModel(T.reshape(K * D, R), ubm)
    N, F = _stack(stats)
    for it in range(iters + 1):
        TtSinv, TtSiT = tv.precompute()
        _, w, cov, b, logdet = _posterior(N, F, TtSinv, TtSiT)
        if history is not None:
            history.append(float(np.sum(-0.5 * logdet + 0.5 * np.sum(b * w, axis=1))))
        if it == iters:
            break
        second = cov + w[:, :, None] * w[:, None, :]
        A = np.einsum("uk,urs->krs", N, second)
        C = np.einsum("ukd,ur->kdr", F, w)
        Tk = np.linalg.solve(A, np.transpose(C, (0, 2, 1)))  # (K, R, D)
        tv = TvModel(np.transpose(Tk, (0, 2, 1)).reshape(K * D, R), ubm)
    return tv


def length_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("cannot length-normalise a zero vector")
    return x / norms


def enroll_speaker(ivectors):
    """Average of session i-vectors, then unit length."""
    ivectors = np.atleast_2d(np.asarray(ivectors, dtype=np.float64))
    if ivectors.shape[0] == 0:
        raise EmptyInputError("enrollment needs at least one session")
    mean = ivectors.mean(axis=0)
    if np.linalg.norm(mean) <= 1e-12 * max(1.0, np.abs(ivectors).max()):
        raise DegenerateInputError("enrollment i-vectors average to zero")
    return length_normalize(mean)


# ---------------------------------------------------------------------------
# PLDA
# ---------------------------------------------------------------------------

@dataclass
class PldaModel:
    mu: np.ndarray
    B: np.ndarray  # between-class covariance
    W: np.ndarray  # within-class covariance
    center: np.ndarray | None = None  # i-vector mean removed before length norm

    @property
    def dim(self):
        return self.mu.size

    def check(self):
        for name, M in (("between", self.B), ("within", self.W)):
            if np.max(np.abs(M - M.T)) > 1e-9 * max(1.0, np.abs(M).max()):
                raise DegenerateInputError(f"{name}-class covariance is not symmetric")
            if np.linalg.eigvalsh(M).min() < -1e-9:
                raise DegenerateInputError(f"{name}-class covariance is not PSD")
        return self

    def preprocess(self, ivectors):
        """Centre on the training mean and length-normalise."""
        x = np.asarray(ivectors, dtype=np.float64)
        if self.center is not None:
            x = x - self.center
        return length_normalize(x)


def _class_groups(X, labels):
    labels = np.asarray(labels)
    classes, inverse = np.unique(labels, return_inverse=True)
    counts = np.bincount(inverse)
    sums = np.zeros((classes.size, X.shape[1]))
    np.add.at(sums, inverse, X)
    return inverse, counts, sums


def _floor_psd(M, floor):
    M = 0.5 * (M + M.T)
    evals, evecs = np.linalg.eigh(M)
    return (evecs * np.maximum(evals, floor)) @ evecs.T


def plda_loglik(X, labels, mu, B, W):
    """Marginal log-likelihood of labelled data under the two-covariance model."""
    Xc = np.asarray(X, dtype=np.float64) - mu
    inverse, counts, sums = _class_groups(Xc, labels)
    R = Xc.shape[1]
    Winv = np.linalg.inv(W)
    _, logdet_w = np.linalg.slogdet(W)
    means = sums / counts[:, None]
    dev = Xc - means[inverse]
    within_quad = np.einsum("nr,rs,ns->", dev, Winv, dev)
    total = -0.5 * (np.sum(counts - 1) * (R * LOG_2PI + logdet_w) + within_quad)
    for n in np.unique(counts):
        idx = counts == n
        cov = n * B + W
        _, logdet = np.linalg.slogdet(cov)
        u = np.sqrt(n) * means[idx]
        quad = np.einsum("cr,rs,cs->c", u, np.linalg.inv(cov), u)
        total += -0.5 * np.sum(R * LOG_2PI + logdet + quad)
    return float(total)


def plda_train(X, labels, iters=20, w_floor=1e-6, history=None, center=None):
    """EM for the two-covariance PLDA model.

    Args:
        X: (N, R) preprocessed i-vectors.
        labels: class id per row (speaker + pass-phrase).
        w_floor: eigenvalue floor for both covariances, relative to the mean
            total variance.
        history: receives the data log-likelihood before each update and
            after the last.
    """
    X = np.asarray(X, dtype=np.float64)
    N, R = X.shape
    inverse, counts, sums = _class_groups(X, labels)
    if counts.size < 2 or np.sum(counts >= 2) < 2:
        raise ConfigError("PLDA needs at least two classes with two or more samples")
    if np.any(counts == 1):
        log.info("%d single-sample PLDA classes", int(np.sum(counts == 1)))
    mu = X.mean(axis=0)
    Xc = X - mu
    sums = sums - counts[:, None] * mu
    floor = w_floor * np.trace(Xc.T @ Xc / N) / R
    class_means = sums / counts[:, None]
    dev = Xc - class_means[inverse]
    W = _floor_psd(dev.T @ dev / N, floor)
    B = _floor_psd(np.cov(class_means.T, bias=True).reshape(R, R), floor)
    scatter = Xc.T @ Xc
    for it in range(iters + 1):
        if history is not None:
            history.append(plda_loglik(X, labels, mu, B, W))
        if it == iters:
            break
        B_acc = np.zeros((R, R))
        W_acc = scatter.copy()
        for n in np.unique(counts):
            idx = counts == n
            s = sums[idx]
            gain = B @ np.linalg.inv(n * B + W)        # B (nB + W)^-1
            y = s @ gain.T                              # posterior means
            cov_y = B - n * gain @ B
            B_acc += y.T @ y + idx.sum() * cov_y
            W_acc += -s.T @ y - y.T @ s + n * (y.T @ y) + idx.sum() * n * cov_y
        B = _floor_psd(B_acc / counts.size, floor)
        W = _floor_psd(W_acc / N, floor)
    return PldaModel(mu, B, W, center).check()


class PldaScorer:
    """Closed-form verification LLR for one enrollment vector vs one test vector.

    ``log N([e; t]; same-class joint) - log N([e; t]; independent)``.
    """

    def __init__(self, model):
        model.check()
        R = model.dim
        self.mu = model.mu
        tot = model.B + model.W
        same = np.block([[tot, model.B], [model.B, tot]])
        diff = np.block([[tot, np.zeros((R, R))], [np.zeros((R, R)), tot]])
        q = np.linalg.inv(same) - np.linalg.inv(diff)
        self.A = -0.5 * q[:R, :R]
        self.Cm = -0.5 * q[:R, R:]
        self.A2 = -0.5 * q[R:, R:]
        self.const = -0.5 * (np.linalg.slogdet(same)[1] - np.linalg.slogdet(diff)[1])

    def score(self, enroll, test):
        """Scores for matching rows of ``enroll`` and ``test`` (or single vectors)."""
        e = np.atleast_2d(np.asarray(enroll, dtype=np.float64)) - self.mu
        t = np.atleast_2d(np.asarray(test, dtype=np.float64)) - self.mu
        out = (np.einsum("nr,rs,ns->n", e, self.A, e)
               + np.einsum("nr,rs,ns->n", t, self.A2, t)
               + 2.0 * np.einsum("nr,rs,ns->n", e, self.Cm, t) + self.const)
        return float(out[0]) if np.ndim(enroll) == 1 and np.ndim(test) == 1 else out


def plda_score(model, enroll, test):
    if np.shape(enroll)[-1] != model.dim or np.shape(test)[-1] != model.dim:
        raise ValueError("i-vector dimension does not match the PLDA model")
    return PldaScorer(model).score(enroll, test)


def save_tv(path, tv):
    K, D = tv.ubm.means.shape
    w = Writer(TV_MAGIC)
    w.u32(K)
    w.u32(D)
    w.u32(tv.rank)
    w.f64(tv.ubm.weights)
    w.f64(tv.ubm.means)
    w.f64(tv.ubm.variances)
    w.f64(tv.T)
    w.save(path)


def load_tv(path):
    r = Reader.from_file(path, TV_MAGIC, "TV model")
    K, D, R = r.u32("K"), r.u32("D"), r.u32("R")
    ubm = DiagGmm(r.f64((K,), "weights"), r.f64((K, D), "means"), r.f64((K, D), "variances"))
    T = r.f64((K * D, R), "T")
    r.finish()
    return TvModel(T, ubm)


def save_plda(path, model):
    R = model.dim
    w = Writer(PLDA_MAGIC)
    w.u32(R)
    w.u8(0 if model.center is None else 1)
    if model.center is not None:
        w.f64(model.center)
    w.f64(model.mu)
    w.f64(model.B)
    w.f64(model.W)
    w.save(path)


def load_plda(path):
    r = Reader.from_file(path, PLDA_MAGIC, "PLDA model")
    R = r.u32("R")
    flag_at = r.offset
    has_center = r.u8("center flag")
    if has_center not in (0, 1):
        raise ParseError(f"bad center flag {has_center}", flag_at)
    center = r.f64((R,), "center") if has_center else None
    start = r.offset
    model = PldaModel(r.f64((R,), "mu"), r.f64((R, R), "B"), r.f64((R, R), "W"), center)
    r.finish()
    try:
        model.check()
    except DegenerateInputError as exc:
        raise ParseError(f"invalid PLDA model: {exc}", start) from exc
    return model
