"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations in execution order, which is
already a topological order. :func:`backward` sweeps the node list once in
reverse, accumulating vector-Jacobian products. Gradients are returned for
every leaf on the tape; parameters that never reached the tape (masked
branches) simply have no entry.

The tape also keeps element counters (saved activations, live gradient
buffers) so a real forward+backward can be compared against the analytic
memory model.
"""

import numpy as np

from .errors import ContractViolationError


class Node:
    __slots__ = ("op", "inputs", "data", "vjp", "saved_elements", "is_leaf")

    def __init__(self, op, inputs, data, vjp, saved_elements, is_leaf):
        self.op = op
        self.inputs = inputs
        self.data = data
        self.vjp = vjp
        self.saved_elements = saved_elements
        self.is_leaf = is_leaf


class Tensor:
    """Handle to an array plus its tape position (nid < 0 when not recorded)."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape=None, nid=-1):
        self.data = data
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, nid={self.nid})"


def as_array(x):
    a = np.ascontiguousarray(x, dtype=np.float64)
    return a


class Tape:
    """Append-only record of primitive operations.

    With ``grad_enabled=False`` the tape records nothing and ops run
    forward-only (used by training-free ranking).
    """

    def __init__(self, grad_enabled=True):
        self.grad_enabled = grad_enabled
        self.nodes = []
        self.saved_elements = 0
        self.grad_peak_elements = 0

    def leaf(self, data, copy=False):
        a = as_array(data)
        if copy:
            a = a.copy()
        if not self.grad_enabled:
            return Tensor(a, self, -1)
        node = Node("leaf", (), a, None, 0, True)
        self.nodes.append(node)
        return Tensor(a, self, len(self.nodes) - 1)

    def record(self, op, inputs, data, vjp, saved_elements):
        if not self.grad_enabled:
            return Tensor(data, self, -1)
        ids = tuple(t.nid for t in inputs)
        node = Node(op, ids, data, vjp, saved_elements, False)
        self.nodes.append(node)
        self.saved_elements += saved_elements
        return Tensor(data, self, len(self.nodes) - 1)

    @property
    def num_nodes(self):
        return len(self.nodes)

    def leaf_ids(self):
        return [i for i, n in enumerate(self.nodes) if n.is_leaf]

    def peak_elements(self):
        """Retained activations plus the gradient-buffer high-water mark of
        the last backward pass."""
        return self.saved_elements + self.grad_peak_elements


def backward(tape, loss):
    """Gradient of a scalar loss with respect to every leaf on the tape.

    Returns a dict node-id -> gradient array; disconnected leaves get zeros.
    """
    if loss.tape is not tape or loss.nid < 0:
        raise ContractViolationError("loss tensor is not recorded on this tape")
    if loss.data.size != 1:
        raise ContractViolationError(
            f"loss must be scalar, got shape {loss.data.shape}")
    n = len(tape.nodes)
    grads = [None] * n
    grads[loss.nid] = np.ones_like(tape.nodes[loss.nid].data)

    live = grads[loss.nid].size
    peak = live

    for nid in range(loss.nid, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.is_leaf:
            continue
        for inp, gin in zip(node.inputs, node.vjp(g)):
            if gin is None:
                continue
            if grads[inp] is None:
                grads[inp] = gin
                live += gin.size
                if live > peak:
                    peak = live
            else:
                grads[inp] = grads[inp] + gin
        grads[nid] = None
        live -= g.size

    tape.grad_peak_elements = peak
    out = {}
    for nid in tape.leaf_ids():
        g = grads[nid]
        if g is None:
            g = np.zeros_like(tape.nodes[nid].data)
        out[nid] = g
    return out


def finite_difference_check(f, x, step=1e-5):
    """Worst relative error between the tape gradient of ``f`` and central
    finite differences, elementwise over ``x``.

    ``f`` takes a Tensor and returns a scalar Tensor. Denominator per
    element is max(|analytic|, |numeric|, 1e-8).
    """
    x = as_array(x)
    tape = Tape()
    xt = tape.leaf(x, copy=True)
    loss = f(xt)
    analytic = backward(tape, loss)[xt.nid]

    def value(arr):
        t = Tape(grad_enabled=False)
        return float(f(t.leaf(arr)).data)

    flat = x.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        vp = value(xp.reshape(x.shape))
        xp[i] -= 2 * step
        vm = value(xp.reshape(x.shape))
        numeric[i] = (vp - vm) / (2 * step)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
