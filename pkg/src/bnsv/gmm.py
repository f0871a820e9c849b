"""Diagonal-covariance GMM-UBM backend: EM training, MAP adaptation, LLR scoring."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .binio import Reader, Writer
from .errors import ConfigError, EmptyInputError

log = logging.getLogger(__name__)

GMM_MAGIC = b"BNG1"
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class DiagGmm:
    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, D)
    variances: np.ndarray  # (K, D)

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def copy(self):
        return DiagGmm(self.weights.copy(), self.means.copy(), self.variances.copy())

    def check(self):
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise ValueError("GMM weights must be positive and sum to 1")
        if np.any(self.variances <= 0) or not np.all(np.isfinite(self.means)):
            raise ValueError("GMM variances must be positive and means finite")
        return self

    def component_loglik(self, X):
        """(N, K) matrix of ``log w_k + log N(x_n | mu_k, diag var_k)``."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.dim:
            raise ValueError(f"frame dim {X.shape[1]} != GMM dim {self.dim}")
        prec = 1.0 / self.variances
        const = (np.log(self.weights)
                 - 0.5 * (self.dim * LOG_2PI + np.sum(np.log(self.variances), axis=1)
                          + np.sum(self.means ** 2 * prec, axis=1)))
        return const + X @ (self.means * prec).T - 0.5 * (X * X) @ prec.T

    def frame_loglik(self, X):
        return logsumexp(self.component_loglik(X), axis=1)

    def posteriors(self, X):
        """Responsibilities (N, K) and per-frame log-likelihoods (N,)."""
        comp = self.component_loglik(X)
        ll = logsumexp(comp, axis=1)
        return np.exp(comp - ll[:, None]), ll


def kmeans_pp(X, K, rng):
    """k-means++ seeding: first center uniform, then D^2 sampling."""
    N = X.shape[0]
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(N)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for k in range(1, K):
        total = d2.sum()
        idx = rng.integers(N) if total <= 0 else rng.choice(N, p=d2 / total)
        centers[k] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[k]) ** 2, axis=1))
    return centers


def _assign(X, centers):
    d2 = (np.sum(X * X, axis=1)[:, None] - 2.0 * X @ centers.T
          + np.sum(centers * centers, axis=1)[None, :])
    return np.argmin(d2, axis=1)


def variance_floor(X, ratio=1e-4):
    return ratio * np.maximum(X.var(axis=0), 1e-12)


def _reseed_empty(weights, means, variances, empty, rng):
    for k in empty:
        h = int(np.argmax(weights))
        log.info("re-seeding empty GMM component %d from component %d", k, h)
        means[k] = means[h] + 0.1 * np.sqrt(variances[h]) * rng.standard_normal(means.shape[1])
        variances[k] = variances[h]
        weights[h] *= 0.5
        weights[k] = weights[h]


def ubm_train_em(X, K=512, iters=20, seed=0, subsample=20000, var_floor_ratio=1e-4,
                 history=None):
    """Train a diagonal GMM by EM after k-means++ initialisation.

    Args:
        X: (N, D) training frames.
        history: optional list that receives the total log-likelihood of the
            data under the model at the start of every EM iteration, plus the
            final model's.
    """
    X = np.asarray(X, dtype=np.float64)
    N, D = X.shape
    if N < K:
        raise ConfigError(f"{N} frames cannot train {K} components")
    rng = np.random.default_rng(seed)
    floor = variance_floor(X, var_floor_ratio)
    sub = X if N <= subsample else X[rng.choice(N, subsample, replace=False)]
    centers = kmeans_pp(sub, K, rng)
    assign = _assign(sub, centers)
    counts = np.bincount(assign, minlength=K).astype(np.float64)
    weights = np.maximum(counts, 1.0)
    weights /= weights.sum()
    means = centers.copy()
    variances = np.tile(np.maximum(sub.var(axis=0), floor), (K, 1))
    for k in np.flatnonzero(counts > 1):
        variances[k] = np.maximum(sub[assign == k].var(axis=0), floor)
    gmm = DiagGmm(weights, means, variances)
    for _ in range(iters):
        post, ll = gmm.posteriors(X)
        if history is not None:
            history.append(float(ll.sum()))
        nk = post.sum(axis=0)
        empty = np.flatnonzero(nk < 1e-6 * N / K)
        safe = np.maximum(nk, 1e-300)[:, None]
        means = (post.T @ X) / safe
        variances = np.maximum((post.T @ (X * X)) / safe - means ** 2, floor)
        weights = nk / N
        if empty.size:
            _reseed_empty(weights, means, variances, empty, rng)
        weights = weights / weights.sum()
        gmm = DiagGmm(weights, means, variances)
    if history is not None:
        history.append(float(gmm.frame_loglik(X).sum()))
    return gmm.check()


def map_adapt(ubm, X, relevance=10.0, iterations=3, posteriors_from="adapted"):
    """Mean-only MAP adaptation.

    Each pass computes ``alpha_k = n_k / (n_k + r)`` and sets
    ``mu_k = alpha_k * E_k[x] + (1 - alpha_k) * mu_k^ubm``. With
    ``posteriors_from="adapted"`` later passes align frames against the model
    adapted so far; ``"ubm"`` always uses the UBM.
    """
    if relevance <= 0:
        raise ConfigError("relevance factor must be positive")
    if posteriors_from not in ("adapted", "ubm"):
        raise ConfigError("posteriors_from must be 'adapted' or 'ubm'")
    X = np.asarray(X, dtype=np.float64).reshape(-1, ubm.dim)
    model = ubm.copy()
    if X.shape[0] == 0:
        log.warning("empty enrollment; returning a copy of the UBM")
        return model
    for _ in range(iterations):
        aligner = model if posteriors_from == "adapted" else ubm
        post, _ = aligner.posteriors(X)
        nk = post.sum(axis=0)
        fk = post.T @ X
        alpha = (nk / (nk + relevance))[:, None]
        ex = fk / np.maximum(nk, 1e-300)[:, None]
        model = DiagGmm(ubm.weights.copy(), alpha * ex + (1.0 - alpha) * ubm.means,
                        ubm.variances.copy())
    return model.check()


def llr_score(target, ubm, X):
    """Average per-frame log-likelihood ratio between target model and UBM."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyInputError("cannot score an empty utterance")
    return float(np.mean(target.frame_loglik(X) - ubm.frame_loglik(X)))


def save_gmm(path, gmm):
    w = Writer(GMM_MAGIC)
    w.u32(gmm.n_components)
    w.u32(gmm.dim)
    w.f64(gmm.weights)
    w.f64(gmm.means)
    w.f64(gmm.variances)
    w.save(path)


def load_gmm(path):
    r = Reader.from_file(path, GMM_MAGIC, "GMM")
    K = r.u32("K")
    D = r.u32("D")
    gmm = DiagGmm(r.f64((K,), "weights"), r.f64((K, D), "means"), r.f64((K, D), "variances"))
    r.finish()
    return gmm
