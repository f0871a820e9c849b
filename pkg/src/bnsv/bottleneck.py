"""Bottleneck features: hidden-layer taps, PCA projection, layer concatenation."""

from dataclasses import dataclass

import numpy as np

from .binio import Reader, Writer
from .errors import ConfigError, ParseError
from .frontend import FeatureSequence
from .netcore import GruEncoder, apply_activation, gru_forward

PCA_MAGIC = b"BNP1"
ORTHO_TOL = 1e-9


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray          # (D_in, k), orthonormal columns
    explained_variance: np.ndarray  # (k,), non-increasing

    @property
    def input_dim(self):
        return self.components.shape[0]

    @property
    def k(self):
        return self.components.shape[1]

    def check(self):
        gram = self.components.T @ self.components
        if np.max(np.abs(gram - np.eye(self.k))) > ORTHO_TOL:
            raise ValueError("PCA components are not orthonormal")
        if np.any(np.diff(self.explained_variance) > ORTHO_TOL * max(1.0, self.explained_variance[0])):
            raise ValueError("explained variances must be non-increasing")
        return self


def tap_hidden(net, layer_index, inputs):
    """Layer output before its activation (1-based ``layer_index``).

    For a DenseNetwork this is ``h_{l-1} @ W_l + b_l``. For a GruEncoder the
    hidden-state sequence of layer ``l`` is returned, for a single (T, D)
    sequence or a (B, T, D) batch.
    """
    n_layers = len(net.layers)
    if not 1 <= layer_index <= n_layers:
        raise ConfigError(f"layer index {layer_index} outside 1..{n_layers}")
    if isinstance(net, GruEncoder):
        x = np.asarray(inputs, dtype=np.float64)
        single = x.ndim == 2
        enc = GruEncoder(net.layers[:layer_index], net.V, net.c, net.activation) \
            if layer_index < n_layers else net
        h = gru_forward(enc, x).hidden(layer_index)
        return h[0] if single else h
    h = np.asarray(inputs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ValueError(f"input shape {h.shape} does not match network input dim {net.input_dim}")
    for layer in net.layers[:layer_index - 1]:
        h = apply_activation(layer.activation, h @ layer.W + layer.b)[0]
    layer = net.layers[layer_index - 1]
    return h @ layer.W + layer.b


def tap_layers(net, layers, inputs):
    """Concatenated taps for a layer selection such as ``[1, 3]``."""
    return concat_layers([tap_hidden(net, ly, inputs) for ly in layers])


def concat_layers(taps):
    taps = [np.asarray(t, dtype=np.float64) for t in taps]
    if not taps:
        raise ValueError("nothing to concatenate")
    counts = {t.shape[0] for t in taps}
    if len(counts) != 1:
        raise ValueError(f"frame-count mismatch between taps: {sorted(counts)}")
    return taps[0].copy() if len(taps) == 1 else np.hstack(taps)


def pca_fit(data, k=57):
    """Top-k eigenvectors of the mean-centred sample covariance.

    Each eigenvector's sign is fixed so its largest-magnitude entry is
    positive.
    """
    x = np.asarray(data, dtype=np.float64)
    N, D = x.shape
    if k > D:
        raise ConfigError(f"k={k} exceeds input dimension {D}")
    if N <= k:
        raise ConfigError(f"PCA needs more than k={k} samples, got {N}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (N - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]
    pivot = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivot, np.arange(k)])
    signs[signs == 0] = 1.0
    return PcaModel(mean, evecs * signs, evals).check()


def pca_project(model, frames):
    """``(x - mean) @ P``. Accepts an array or a FeatureSequence (returned as
    a ``bottleneck`` sequence)."""
    if isinstance(frames, FeatureSequence):
        return frames.replace(pca_project(model, frames.frames), kind="bottleneck")
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} != PCA input dim {model.input_dim}")
    return (x - model.mean) @ model.components


def pca_reconstruct(model, projected):
    return projected @ model.components.T + model.mean


def save_pca(path, model):
    w = Writer(PCA_MAGIC)
    w.u32(model.input_dim)
    w.u32(model.k)
    w.f64(model.mean)
    w.f64(model.components)
    w.f64(model.explained_variance)
    w.save(path)


def load_pca(path):
    r = Reader.from_file(path, PCA_MAGIC, "PCA model")
    d_in = r.u32("D_in")
    k = r.u32("k")
    if k > d_in:
        raise ParseError(f"k={k} > D_in={d_in}", 8)
    mean = r.f64((d_in,), "mean")
    comps = r.f64((d_in, k), "projection")
    ev = r.f64((k,), "explained variance")
    r.finish()
    return PcaModel(mean, comps, ev)

