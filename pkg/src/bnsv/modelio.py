"""Trained network models and the BNM1 model file.

Layout (little-endian): magic ``BNM1``, u32 version, u8 body kind (0 dense,
1 GRU), u8 training scheme, u32 context width, then the body:

* dense: u32 layer count, per layer u32 in, u32 out, u8 activation tag;
  then every layer's W (in x out) and b as f64.
* GRU: u32 layer count, u32 input dim, u32 hidden, u32 output dim,
  u8 candidate activation; then the parameters in ``GruEncoder.params()``
  order.

The loss head follows: u8 loss kind, u32 n_classes, u32 embed dim, seven f64
hyperparameters (lam, gamma, s, m, tau, margin, center_alpha), u8 presence
bits (W, b, centers, mask) and the present arrays.
"""

from dataclasses import dataclass

import numpy as np

from .binio import FORMAT_VERSION, Reader, Writer, write_atomic
from .errors import ParseError
from .losses import LOSS_KINDS, LossHead
from .netcore import ACTIVATIONS, DenseLayer, DenseNetwork, GruEncoder, GruLayer
from .targets import SCHEMES

MODEL_MAGIC = b"BNM1"
_BODY_DENSE, _BODY_GRU = 0, 1
_HYPER = ("lam", "gamma", "s", "m", "tau", "margin", "center_alpha")


@dataclass
class NetworkModel:
    """A trained body (DenseNetwork or GruEncoder) plus its loss head."""
    net: object
    head: LossHead
    scheme: str = "speaker"
    context: int = 11

    @property
    def is_recurrent(self):
        return isinstance(self.net, GruEncoder)

    @property
    def hidden_layers(self):
        """Number of tappable layers (the dense output layer is excluded)."""
        n = len(self.net.layers)
        return n if self.is_recurrent else n - 1

    def params(self):
        return self.net.params() + self.head.params()


def _tag(value, table, what, offset):
    if value >= len(table):
        raise ParseError(f"unknown {what} tag {value}", offset)
    return table[value]


def model_bytes(model):
    w = Writer(MODEL_MAGIC)
    w.u32(FORMAT_VERSION)
    net = model.net
    w.u8(_BODY_GRU if model.is_recurrent else _BODY_DENSE)
    w.u8(SCHEMES.index(model.scheme))
    w.u32(model.context)
    if model.is_recurrent:
        w.u32(len(net.layers))
        w.u32(net.input_dim)
        w.u32(net.layers[0].hidden)
        w.u32(net.output_dim)
        w.u8(ACTIVATIONS.index(net.activation))
    else:
        w.u32(len(net.layers))
        for layer in net.layers:
            w.u32(layer.W.shape[0])
            w.u32(layer.W.shape[1])
            w.u8(ACTIVATIONS.index(layer.activation))
    for p in net.params():
        w.f64(p)
    head = model.head
    w.u8(LOSS_KINDS.index(head.kind))
    w.u32(head.n_classes)
    w.u32(head.embed_dim)
    w.f64(np.array([getattr(head, h) for h in _HYPER], dtype=np.float64))
    arrays = (head.W, head.b, head.centers, head.mask)
    w.u8(sum(1 << i for i, a in enumerate(arrays) if a is not None))
    for a in arrays:
        if a is not None:
            w.u32(a.ndim)
            for n in a.shape:
                w.u32(n)
            w.f64(a)
    return w.getvalue()


def save_model(path, model):
    write_atomic(path, model_bytes(model))


def _read_dense(r):
    n_layers = r.u32("layer count")
    specs = []
    for i in range(n_layers):
        d_in, d_out = r.u32(f"layer {i} input dim"), r.u32(f"layer {i} output dim")
        at = r.offset
        specs.append((d_in, d_out, _tag(r.u8("activation"), ACTIVATIONS, "activation", at)))
    for i in range(1, n_layers):
        if specs[i][0] != specs[i - 1][1]:
            raise ParseError(f"layer {i} input dim does not match layer {i - 1} output", r.offset)
    layers = []
    for i, (d_in, d_out, act) in enumerate(specs):
        W = r.f64((d_in, d_out), f"layer {i} W")
        b = r.f64((d_out,), f"layer {i} b")
        layers.append(DenseLayer(W, b, act))
    return DenseNetwork(layers)


def _read_gru(r):
    n_layers = r.u32("layer count")
    d_in, hidden, d_out = r.u32("input dim"), r.u32("hidden"), r.u32("output dim")
    at = r.offset
    act = _tag(r.u8("activation"), ACTIVATIONS, "activation", at)
    layers, fan_in = [], d_in
    for i in range(n_layers):
        layers.append(GruLayer(
            r.f64((fan_in, 3 * hidden), f"GRU layer {i} Wx"),
            r.f64((hidden, 3 * hidden), f"GRU layer {i} Wh"),
            r.f64((3 * hidden,), f"GRU layer {i} bx"),
            r.f64((3 * hidden,), f"GRU layer {i} bh"),
        ))
        fan_in = hidden
    return GruEncoder(layers, r.f64((hidden, d_out), "V"), r.f64((d_out,), "c"), act)


def model_from_bytes(data):
    r = Reader(data, MODEL_MAGIC, "network model")
    r.version()
    at = r.offset
    body = r.u8("body kind")
    if body not in (_BODY_DENSE, _BODY_GRU):
        raise ParseError(f"unknown body kind {body}", at)
    at = r.offset
    scheme = _tag(r.u8("scheme"), SCHEMES, "scheme", at)
    context = r.u32("context")
    net = _read_gru(r) if body == _BODY_GRU else _read_dense(r)
    at = r.offset
    kind = _tag(r.u8("loss kind"), LOSS_KINDS, "loss kind", at)
    n_classes, embed_dim = r.u32("n_classes"), r.u32("embed dim")
    hyper = dict(zip(_HYPER, (float(v) for v in r.f64((len(_HYPER),), "hyperparameters"))))
    at = r.offset
    present = r.u8("head flags")
    if present >= 16:
        raise ParseError(f"bad head flags {present}", at)
    arrays = []
    for i, name in enumerate(("W", "b", "centers", "mask")):
        if present & (1 << i):
            ndim = r.u32(f"{name} ndim")
            shape = tuple(r.u32(f"{name} shape") for _ in range(ndim))
            arrays.append(r.f64(shape, name))
        else:
            arrays.append(None)
    r.finish()
    head = LossHead(kind, n_classes, embed_dim, *arrays, **hyper)
    return NetworkModel(net, head, scheme, context)


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
