"""Primitive operation vocabulary recorded on the autodiff tape.

Every primitive validates shapes, computes forward (convolution/pooling via
the selected kernel backend), rejects non-finite outputs, and registers a
vector-Jacobian product when the tape is recording.

``retained_elements`` tabulates what each primitive keeps alive for its
backward pass. The table is the single source of truth: ops declare their
actual saved counts through it, and the analytic memory model composes the
same formulas symbolically.
"""

import numpy as np

from . import kernels as K
from .autodiff import Tensor, as_array
from .errors import NumericOverflowError, ShapeMismatchError


def retained_elements(kind, in_elements=0, out_elements=0, channels=0, batch=0):
    """Elements a primitive keeps for backward (activations only; parameters
    live in the weight store and are counted separately).

    - conv2d / linear: input (needed for the weight gradient)
    - relu: sign mask, one element per input
    - channel_norm: normalized input plus two per-channel statistics
    - softmax: output
    - cross_entropy: probabilities plus one label per sample
    - scale_tensor: scaled operand plus the scalar
    - max_pool_3x3: one argmax index per output
    - zero, identity, add, concat, scale_const, channel_slice,
      channel_shuffle, global_avg_pool, avg_pool_3x3, sum: nothing
      (avg-pool needs only the shape-derived window counts)
    """
    if kind in ("conv2d", "linear", "relu"):
        return in_elements
    if kind == "channel_norm":
        return in_elements + 2 * channels
    if kind == "softmax":
        return out_elements
    if kind == "cross_entropy":
        return in_elements + batch
    if kind == "scale_tensor":
        return in_elements + 1
    if kind == "max_pool_3x3":
        return out_elements
    if kind in ("zero", "identity", "add", "concat", "scale_const",
                "channel_slice", "channel_shuffle", "global_avg_pool",
                "avg_pool_3x3", "sum"):
        return 0
    raise KeyError(f"no retention rule for op kind {kind!r}")


def _tape_of(op, tensors):
    tapes = {id(t.tape) for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise ShapeMismatchError(op, "inputs recorded on different tapes")
    for t in tensors:
        if t.tape is not None:
            return t.tape
    raise ShapeMismatchError(op, "no input carries a tape")


def _finish(tape, op, inputs, out, vjp, saved):
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(f"{op}: non-finite output")
    return tape.record(op, inputs, out, vjp if tape.grad_enabled else None, saved)


def _require(cond, op, detail):
    if not cond:
        raise ShapeMismatchError(op, detail)


# ---------------------------------------------------------------------------
# search-space operation primitives

def zero(x, stride=1):
    """All-zeros output with stride-adjusted spatial dims; no gradient flow."""
    tape = _tape_of("zero", [x])
    _require(x.data.ndim == 4, "zero", f"expected NCHW, got {x.shape}")
    n, c, h, w = x.data.shape
    out = np.zeros((n, c, (h + stride - 1) // stride, (w + stride - 1) // stride))

    def vjp(g):
        return (None,)  # no gradient path

    return _finish(tape, "zero", [x], out, vjp, 0)


def identity(x):
    tape = _tape_of("identity", [x])

    def vjp(g):
        return (g,)

    return _finish(tape, "identity", [x], x.data, vjp, 0)


def conv2d(x, w, stride=1, pad=None, dilation=1, groups=1):
    tape = _tape_of("conv2d", [x, w])
    _require(x.data.ndim == 4, "conv2d", f"input must be NCHW, got {x.shape}")
    _require(w.data.ndim == 4, "conv2d", f"weight must be OIHW, got {w.shape}")
    n, cin, h, wid = x.data.shape
    cout, cg, kh, kw = w.data.shape
    _require(cin == cg * groups, "conv2d",
             f"input channels {cin} != weight channels {cg} x groups {groups}")
    _require(cout % groups == 0, "conv2d",
             f"output channels {cout} not divisible by groups {groups}")
    _require(stride in (1, 2), "conv2d", f"stride must be 1 or 2, got {stride}")
    if pad is None:
        pad = dilation * (kh - 1) // 2
    out = K.conv2d_forward(x.data, w.data, stride, pad, dilation, groups)
    x_data, w_data = x.data, w.data

    def vjp(g):
        dx = K.conv2d_backward_input(g, w_data, x_data.shape, stride, pad,
                                     dilation, groups)
        dw = K.conv2d_backward_weight(g, x_data, w_data.shape, stride, pad,
                                      dilation, groups)
        return dx, dw

    saved = retained_elements("conv2d", in_elements=x.size)
    return _finish(tape, "conv2d", [x, w], out, vjp, saved)


def avg_pool3(x, stride=1):
    tape = _tape_of("avg_pool_3x3", [x])
    _require(x.data.ndim == 4, "avg_pool_3x3", f"expected NCHW, got {x.shape}")
    out = K.avgpool3_forward(x.data, stride)
    shape = x.data.shape

    def vjp(g):
        return (K.avgpool3_backward(g, shape, stride),)

    return _finish(tape, "avg_pool_3x3", [x], out, vjp, 0)


def max_pool3(x, stride=1):
    tape = _tape_of("max_pool_3x3", [x])
    _require(x.data.ndim == 4, "max_pool_3x3", f"expected NCHW, got {x.shape}")
    out, arg = K.maxpool3_forward(x.data, stride)
    shape = x.data.shape

    def vjp(g):
        return (K.maxpool3_backward(g, arg, shape, stride),)

    saved = retained_elements("max_pool_3x3", out_elements=out.size)
    return _finish(tape, "max_pool_3x3", [x], out, vjp, saved)


# ---------------------------------------------------------------------------
# plumbing primitives

def relu(x):
    tape = _tape_of("relu", [x])
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _finish(tape, "relu", [x], out, vjp,
                   retained_elements("relu", in_elements=x.size))


def linear(x, w, b):
    tape = _tape_of("linear", [x, w, b])
    _require(x.data.ndim == 2, "linear", f"input must be 2-D, got {x.shape}")
    _require(w.data.ndim == 2 and x.data.shape[1] == w.data.shape[0], "linear",
             f"input {x.shape} incompatible with weight {w.shape}")
    _require(b.data.shape == (w.data.shape[1],), "linear",
             f"bias {b.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data + b.data
    x_data, w_data = x.data, w.data

    def vjp(g):
        return g @ w_data.T, x_data.T @ g, g.sum(axis=0)

    return _finish(tape, "linear", [x, w, b], out, vjp,
                   retained_elements("linear", in_elements=x.size))


def channel_norm(x, gamma, beta, eps=1e-5, stats=None):
    """Per-channel affine normalization.

    Batch statistics over (N, H, W) are computed in forward and treated as
    constants in backward; pass ``stats=(mean, var)`` to normalize with fixed
    constants instead (inference, or stats-frozen gradient checks).
    """
    tape = _tape_of("channel_norm", [x, gamma, beta])
    _require(x.data.ndim == 4, "channel_norm", f"expected NCHW, got {x.shape}")
    c = x.data.shape[1]
    _require(gamma.data.shape == (c,) and beta.data.shape == (c,), "channel_norm",
             f"scale/shift must be ({c},), got {gamma.shape}/{beta.shape}")
    if stats is None:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
    else:
        mean, var = (as_array(s) for s in stats)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]
    g_data = gamma.data

    def vjp(g):
        dx = g * (g_data * inv_std)[:, None, None]
        dgamma = np.einsum('nchw,nchw->c', g, xhat)
        dbeta = g.sum(axis=(0, 2, 3))
        return dx, dgamma, dbeta

    saved = retained_elements("channel_norm", in_elements=x.size, channels=c)
    return _finish(tape, "channel_norm", [x, gamma, beta], out, vjp, saved)


def softmax(x, axis=-1):
    tape = _tape_of("softmax", [x])
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    s = out

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _finish(tape, "softmax", [x], out, vjp,
                   retained_elements("softmax", out_elements=out.size))


def cross_entropy(probs, labels):
    """Mean negative log-probability of the integer labels."""
    tape = _tape_of("cross_entropy", [probs])
    _require(probs.data.ndim == 2, "cross_entropy",
             f"probabilities must be 2-D, got {probs.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.data.shape[0]
    _require(labels.shape == (n,), "cross_entropy",
             f"labels {labels.shape} incompatible with batch {n}")
    picked = probs.data[np.arange(n), labels]
    if np.any(picked <= 0):
        raise NumericOverflowError("cross_entropy: zero probability at a label")
    out = np.asarray(-np.mean(np.log(picked)))

    def vjp(g):
        dp = np.zeros_like(probs.data)
        dp[np.arange(n), labels] = -float(g) / (picked * n)
        return (dp,)

    saved = retained_elements("cross_entropy", in_elements=probs.size, batch=n)
    return _finish(tape, "cross_entropy", [probs], out, vjp, saved)


def add_n(tensors):
    tape = _tape_of("add", tensors)
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        _require(t.data.shape == shape, "add",
                 f"operand shapes differ: {shape} vs {t.data.shape}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    k = len(tensors)

    def vjp(g):
        return (g,) * k

    return _finish(tape, "add", tensors, out, vjp, 0)


def add(a, b):
    return add_n([a, b])


def concat(tensors, axis=1):
    tape = _tape_of("concat", tensors)
    base = list(tensors[0].data.shape)
    for t in tensors[1:]:
        other = list(t.data.shape)
        ok = len(other) == len(base) and all(
            o == b for i, (o, b) in enumerate(zip(other, base)) if i != axis)
        _require(ok, "concat", f"shapes {base} vs {other} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _finish(tape, "concat", tensors, out, vjp, 0)


def scale(x, s):
    """Multiply by a scalar: a python float (constant) or a 1-element Tensor
    (differentiable mixing weight)."""
    if isinstance(s, Tensor):
        tape = _tape_of("scale", [x, s])
        _require(s.data.size == 1, "scale", f"scale must be scalar, got {s.shape}")
        sval = float(s.data)
        out = x.data * sval
        x_data, s_shape = x.data, s.data.shape

        def vjp(g):
            return g * sval, np.sum(g * x_data).reshape(s_shape)

        saved = retained_elements("scale_tensor", in_elements=x.size)
        return _finish(tape, "scale", [x, s], out, vjp, saved)

    tape = _tape_of("scale", [x])
    c = float(s)
    out = x.data * c

    def vjp(g):
        return (g * c,)

    return _finish(tape, "scale", [x], out, vjp, 0)


def slice_channels(x, idx):
    """Select channels (axis 1 for NCHW, axis 0 for vectors) by unique index."""
    tape = _tape_of("channel_slice", [x])
    idx = np.asarray(idx, dtype=np.int64)
    _require(idx.size == np.unique(idx).size, "channel_slice",
             "indices must be unique")
    if x.data.ndim == 1:
        out = x.data[idx]

        def vjp(g):
            dx = np.zeros_like(x.data)
            dx[idx] = g
            return (dx,)
    else:
        _require(x.data.ndim == 4, "channel_slice",
                 f"expected vector or NCHW, got {x.shape}")
        out = np.ascontiguousarray(x.data[:, idx])
        shape = x.data.shape

        def vjp(g):
            dx = np.zeros(shape)
            dx[:, idx] = g
            return (dx,)

    return _finish(tape, "channel_slice", [x], out, vjp, 0)


def shuffle_perm(channels, groups):
    """Channel permutation of the group interleave: reshape (g, c/g),
    transpose, flatten."""
    k = np.arange(channels)
    return (k % groups) * (channels // groups) + k // groups


def channel_shuffle(x, groups):
    tape = _tape_of("channel_shuffle", [x])
    _require(x.data.ndim == 4, "channel_shuffle", f"expected NCHW, got {x.shape}")
    c = x.data.shape[1]
    _require(c % groups == 0, "channel_shuffle",
             f"channels {c} not divisible by groups {groups}")
    perm = shuffle_perm(c, groups)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(c)
    out = np.ascontiguousarray(x.data[:, perm])

    def vjp(g):
        return (np.ascontiguousarray(g[:, inv]),)

    return _finish(tape, "channel_shuffle", [x], out, vjp, 0)


def global_avg_pool(x):
    tape = _tape_of("global_avg_pool", [x])
    _require(x.data.ndim == 4, "global_avg_pool", f"expected NCHW, got {x.shape}")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _finish(tape, "global_avg_pool", [x], out, vjp, 0)


def sum_all(x):
    tape = _tape_of("sum", [x])
    out = np.asarray(np.sum(x.data))
    shape = x.data.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _finish(tape, "sum", [x], out, vjp, 0)


# ---------------------------------------------------------------------------
# string dispatch

_DISPATCH = {
    "zero": lambda inputs, a: zero(inputs[0], a.get("stride", 1)),
    "identity": lambda inputs, a: identity(inputs[0]),
    "conv2d": lambda inputs, a: conv2d(inputs[0], inputs[1],
                                       a.get("stride", 1), a.get("pad"),
                                       a.get("dilation", 1), a.get("groups", 1)),
    "linear": lambda inputs, a: linear(inputs[0], inputs[1], inputs[2]),
    "relu": lambda inputs, a: relu(inputs[0]),
    "channel_norm": lambda inputs, a: channel_norm(inputs[0], inputs[1], inputs[2],
                                                   a.get("eps", 1e-5),
                                                   a.get("stats")),
    "softmax": lambda inputs, a: softmax(inputs[0], a.get("axis", -1)),
    "cross_entropy": lambda inputs, a: cross_entropy(inputs[0], a["labels"]),
    "add": lambda inputs, a: add_n(list(inputs)),
    "concat": lambda inputs, a: concat(list(inputs), a.get("axis", 1)),
    "scale": lambda inputs, a: scale(inputs[0],
                                     inputs[1] if len(inputs) > 1 else a["value"]),
    "channel_slice": lambda inputs, a: slice_channels(inputs[0], a["idx"]),
    "channel_shuffle": lambda inputs, a: channel_shuffle(inputs[0], a["groups"]),
    "global_avg_pool": lambda inputs, a: global_avg_pool(inputs[0]),
    "avg_pool_3x3": lambda inputs, a: avg_pool3(inputs[0], a.get("stride", 1)),
    "max_pool_3x3": lambda inputs, a: max_pool3(inputs[0], a.get("stride", 1)),
    "sum": lambda inputs, a: sum_all(inputs[0]),
}


def forward_primitive(kind, inputs, attrs=None):
    """Dispatch a primitive by kind string; see module docstring for the
    vocabulary."""
    if kind not in _DISPATCH:
        raise KeyError(f"unknown primitive kind {kind!r}")
    return _DISPATCH[kind](list(inputs), attrs or {})
