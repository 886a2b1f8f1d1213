"""Differentiable realization of a masked search space.

The mixing operation softmax-weights the outputs of the *unmasked*
candidate operations only; masked branches are never executed, so they put
no nodes on the tape and receive no gradient. The partial-channel variant
routes a seeded 1/K subset of channels through the mixing operation and
bypasses the rest (bypass max-pooled at stride-2 sites), then
channel-shuffles the concatenation.

Masked operations keep their (inert) parameter and alpha storage so
checkpoints from masked and unmasked runs align index-for-index.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tape
from .errors import ConfigurationError, InvariantViolationError


@dataclass
class SupernetConfig:
    init_channels: int = 16
    classes: int = 10
    in_channels: int = 3
    partial_channel_divisor: int = 1  # K; 1 = full channels
    partial_resample: bool = True  # new channel subsets every batch
    norm_eps: float = 1e-5

    def to_dict(self):
        return dict(init_channels=self.init_channels, classes=self.classes,
                    in_channels=self.in_channels,
                    partial_channel_divisor=self.partial_channel_divisor,
                    partial_resample=self.partial_resample,
                    norm_eps=self.norm_eps)


@dataclass
class ForwardResult:
    logits: object
    param_leaves: dict = field(default_factory=dict)
    alpha_leaves: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# candidate operations

def op_param_shapes(kind, c, stride):
    """Parameter shapes of one candidate-op instance on c channels."""
    if kind in ("none", "avg_pool_3x3", "max_pool_3x3"):
        return {}
    if kind == "skip_connect":
        if stride == 1:
            return {}
        return {"w": (c, c, 1, 1), "g": (c,), "b": (c,)}
    if kind in ("sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5"):
        k = 3 if kind.endswith("3x3") else 5
        return {"dw": (c, 1, k, k), "pw": (c, c, 1, 1), "g": (c,), "b": (c,)}
    raise KeyError(f"unknown candidate op {kind!r}")


def _norm(x, g, b, eps, mode):
    stats = None if mode == "train" else (np.zeros(x.shape[1]), np.ones(x.shape[1]))
    return ops.channel_norm(x, g, b, eps, stats)


def apply_candidate_op(x, kind, params, stride, mode, eps=1e-5):
    """Run one candidate op; ``params`` maps shape-table names to leaf
    Tensors."""
    if kind == "none":
        return ops.zero(x, stride)
    if kind == "avg_pool_3x3":
        return ops.avg_pool3(x, stride)
    if kind == "max_pool_3x3":
        return ops.max_pool3(x, stride)
    if kind == "skip_connect":
        if stride == 1:
            return ops.identity(x)
        h = ops.relu(x)
        h = ops.conv2d(h, params["w"], stride=2, pad=0)
        return _norm(h, params["g"], params["b"], eps, mode)
    k = 3 if kind.endswith("3x3") else 5
    dilation = 2 if kind.startswith("dil_conv") else 1
    c = x.shape[1]
    h = ops.relu(x)
    h = ops.conv2d(h, params["dw"], stride=stride, pad=dilation * (k - 1) // 2,
                   dilation=dilation, groups=c)
    h = ops.conv2d(h, params["pw"], stride=1, pad=0)
    return _norm(h, params["g"], params["b"], eps, mode)


# ---------------------------------------------------------------------------
# mixing

def mix_weights(alpha_leaf, mixing_set):
    """Softmax weights over the unmasked alphas: (active indices, list of
    scalar weight Tensors)."""
    active = mixing_set.unmasked_indices()
    if not active:
        raise InvariantViolationError(
            f"edge {mixing_set.edge_id}: every operation is masked")
    gathered = ops.slice_channels(alpha_leaf, active)
    w = ops.softmax(gathered, axis=-1)
    return active, [ops.slice_channels(w, [j]) for j in range(len(active))]


def masked_mix(x, mixing_set, alpha_leaf, params_by_op, stride=1, mode="train",
               eps=1e-5, weights=None):
    """Masked mixing: softmax over unmasked alphas weighting unmasked branch
    outputs. Masked operations are never executed."""
    active, ws = weights if weights is not None else mix_weights(alpha_leaf,
                                                                 mixing_set)
    branches = []
    for j, i in enumerate(active):
        o = apply_candidate_op(x, mixing_set.candidate_ops[i],
                               params_by_op.get(i, {}), stride, mode, eps)
        branches.append(ops.scale(o, ws[j]))
    return branches[0] if len(branches) == 1 else ops.add_n(branches)


def masked_mix_partial(x, mixing_set, alpha_leaf, params_by_op, divisor,
                       rng, stride=1, mode="train", eps=1e-5, weights=None):
    """Partial-channel masked mixing: a seeded channels/K subset goes through
    the mix, the rest bypasses (max-pooled at stride 2), concatenated and
    channel-shuffled."""
    if divisor == 1:
        return masked_mix(x, mixing_set, alpha_leaf, params_by_op, stride,
                          mode, eps, weights)
    c = x.shape[1]
    if c % divisor != 0:
        raise ConfigurationError(
            f"partial-channel divisor {divisor} does not divide {c} channels")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    perm = rng.permutation(c)
    k = c // divisor
    sel = np.sort(perm[:k])
    byp = np.sort(perm[k:])
    xs = ops.slice_channels(x, sel)
    mixed = masked_mix(xs, mixing_set, alpha_leaf, params_by_op, stride, mode,
                       eps, weights)
    xb = ops.slice_channels(x, byp)
    if stride == 2:
        xb = ops.max_pool3(xb, 2)
    out = ops.concat([mixed, xb], axis=1)
    return ops.channel_shuffle(out, divisor)


# ---------------------------------------------------------------------------
# the network

def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Supernet:
    """Stacked realization of a SearchSpace under a SupernetConfig.

    All candidate parameters exist from construction (masked ones stay
    inert); the forward pass instantiates tape leaves only for branches the
    mask allows.
    """

    def __init__(self, space, cfg, seed=0):
        self.space = space
        self.cfg = cfg
        self.seed = seed
        self.params = {}
        self._plan = []
        self._rng_init = np.random.default_rng([seed, 0x5EED])
        self._build()
        self.alphas = [1e-3 * self._rng_init.standard_normal(len(s.candidate_ops))
                       for s in space.edge_sets]

    # -- construction -------------------------------------------------------

    def _add_conv(self, name, shape):
        fan_in = shape[1] * shape[2] * shape[3]
        self.params[name] = kaiming_uniform(self._rng_init, shape, fan_in)

    def _add_norm(self, gname, bname, c):
        self.params[gname] = np.ones(c)
        self.params[bname] = np.zeros(c)

    def _add_op_instance(self, prefix, kind, c, stride):
        for pname, shape in op_param_shapes(kind, c, stride).items():
            name = f"{prefix}.{pname}"
            if len(shape) == 4:
                self._add_conv(name, shape)
            else:
                self.params[name] = (np.ones(shape) if pname == "g"
                                     else np.zeros(shape))

    def _mix_site(self, prefix, edge_id, stride, channels):
        cfg = self.cfg
        c_op = channels // cfg.partial_channel_divisor
        if channels % cfg.partial_channel_divisor:
            raise ConfigurationError(
                f"{prefix}: divisor {cfg.partial_channel_divisor} does not "
                f"divide {channels} channels")
        mset = self.space.edge_sets[edge_id]
        for i, kind in enumerate(mset.candidate_ops):
            self._add_op_instance(f"{prefix}.op{i}", kind, c_op, stride)
        return {"prefix": prefix, "edge_id": edge_id, "stride": stride,
                "channels": channels, "c_op": c_op}

    def _build(self):
        cfg = self.cfg
        c = cfg.init_channels
        self._add_conv("stem.w", (c, cfg.in_channels, 3, 3))
        self._add_norm("stem.g", "stem.b", c)

        if self.space.topology == "chain":
            tmpl = self.space.templates[0]
            sites = [self._mix_site(f"edge{e}", eid, 1, c)
                     for e, eid in enumerate(tmpl.edge_ids)]
            self._plan.append({"kind": "chain", "sites": sites, "channels": c})
            feat = c
        else:
            c_pp = c_p = c
            c_curr = cfg.init_channels
            reduction_prev = False
            for idx, kind in enumerate(self.space.stacking):
                if kind == "reduction":
                    c_curr *= 2
                tmpl = self.space.template(kind)
                pre = f"cell{idx}.pre"
                self._add_conv(f"{pre}0.w", (c_curr, c_pp, 1, 1))
                self._add_norm(f"{pre}0.g", f"{pre}0.b", c_curr)
                self._add_conv(f"{pre}1.w", (c_curr, c_p, 1, 1))
                self._add_norm(f"{pre}1.g", f"{pre}1.b", c_curr)
                sites = []
                for le, ((src, dst), eid) in enumerate(zip(tmpl.edges,
                                                           tmpl.edge_ids)):
                    stride = 2 if (kind == "reduction" and src < 2) else 1
                    sites.append(self._mix_site(f"cell{idx}.edge{le}", eid,
                                                stride, c_curr))
                self._plan.append({"kind": kind, "cell": idx, "tmpl": tmpl,
                                   "sites": sites, "channels": c_curr,
                                   "reduction_prev": reduction_prev})
                reduction_prev = kind == "reduction"
                c_pp, c_p = c_p, tmpl.num_nodes * c_curr
            feat = c_p

        self.params["classifier.w"] = kaiming_uniform(
            self._rng_init, (feat, cfg.classes), feat)
        self.params["classifier.b"] = np.zeros(cfg.classes)
        self.feature_channels = feat

    # -- parameter bookkeeping ----------------------------------------------

    def masked_param_names(self):
        """Names of parameters belonging to masked candidate ops."""
        out = set()
        for entry in self._plan:
            for site in entry["sites"]:
                mset = self.space.edge_sets[site["edge_id"]]
                for i, kept in enumerate(mset.mask):
                    if kept:
                        continue
                    prefix = f"{site['prefix']}.op{i}."
                    out.update(n for n in self.params if n.startswith(prefix))
        return out

    def set_space(self, space):
        """Swap the mask (structure must be identical)."""
        if space.digest() != self.space.digest():
            raise ConfigurationError("space structure differs from the "
                                     "network's")
        self.space = space

    # -- forward ------------------------------------------------------------

    def _leaf(self, tape, result, name):
        t = result.param_leaves.get(name)
        if t is None:
            t = tape.leaf(self.params[name])
            result.param_leaves[name] = t
        return t

    def _op_leaves(self, tape, result, site, op_index, kind):
        shapes = op_param_shapes(kind, site["c_op"], site["stride"])
        return {pname: self._leaf(tape, result, f"{site['prefix']}.op{op_index}.{pname}")
                for pname in shapes}

    def _run_site(self, tape, result, site, x, weights_by_edge, mode, rng):
        mset = self.space.edge_sets[site["edge_id"]]
        weights = weights_by_edge[site["edge_id"]]
        params_by_op = {
            i: self._op_leaves(tape, result, site, i, mset.candidate_ops[i])
            for i in mset.unmasked_indices()}
        return masked_mix_partial(
            x, mset, None, params_by_op, self.cfg.partial_channel_divisor,
            rng, site["stride"], mode, self.cfg.norm_eps, weights)

    def forward(self, batch, tape=None, mode="train", batch_index=0):
        """Run the stacked network; returns a ForwardResult whose
        ``param_leaves``/``alpha_leaves`` map gradients back to storage."""
        cfg = self.cfg
        if tape is None:
            tape = Tape(grad_enabled=False)
        result = ForwardResult(None)
        x = tape.leaf(np.ascontiguousarray(batch, dtype=np.float64))

        sub = batch_index if cfg.partial_resample else 0
        rng = np.random.default_rng([self.seed, 0xC4A7, sub])

        # shared per-edge softmax weights over unmasked alphas
        weights_by_edge = {}
        for eid, mset in enumerate(self.space.edge_sets):
            leaf = tape.leaf(self.alphas[eid])
            result.alpha_leaves.append(leaf)
            weights_by_edge[eid] = mix_weights(leaf, mset)

        h = ops.conv2d(x, self._leaf(tape, result, "stem.w"), stride=1, pad=1)
        h = _norm(h, self._leaf(tape, result, "stem.g"),
                  self._leaf(tape, result, "stem.b"), cfg.norm_eps, mode)

        if self.space.topology == "chain":
            for site in self._plan[0]["sites"]:
                h = self._run_site(tape, result, site, h, weights_by_edge,
                                   mode, rng)
        else:
            s0 = s1 = h
            for entry in self._plan:
                idx = entry["cell"]
                pre = f"cell{idx}.pre"
                p0 = ops.relu(s0)
                p0 = ops.conv2d(p0, self._leaf(tape, result, f"{pre}0.w"),
                                stride=2 if entry["reduction_prev"] else 1,
                                pad=0)
                p0 = _norm(p0, self._leaf(tape, result, f"{pre}0.g"),
                           self._leaf(tape, result, f"{pre}0.b"),
                           cfg.norm_eps, mode)
                p1 = ops.relu(s1)
                p1 = ops.conv2d(p1, self._leaf(tape, result, f"{pre}1.w"),
                                stride=1, pad=0)
                p1 = _norm(p1, self._leaf(tape, result, f"{pre}1.g"),
                           self._leaf(tape, result, f"{pre}1.b"),
                           cfg.norm_eps, mode)
                states = [p0, p1]
                tmpl = entry["tmpl"]
                site_by_le = entry["sites"]
                for node in range(tmpl.num_nodes):
                    contribs = []
                    for le, (src, dst) in enumerate(tmpl.edges):
                        if dst != node:
                            continue
                        contribs.append(self._run_site(
                            tape, result, site_by_le[le], states[src],
                            weights_by_edge, mode, rng))
                    states.append(ops.add_n(contribs))
                s0, s1 = s1, ops.concat(states[2:], axis=1)
            h = s1

        h = ops.global_avg_pool(h)
        logits = ops.linear(h, self._leaf(tape, result, "classifier.w"),
                            self._leaf(tape, result, "classifier.b"))
        result.logits = logits
        return result

    # -- metrics / persistence ----------------------------------------------

    def alpha_entropy(self):
        """Softmax entropy of the unmasked alphas, per edge (nats)."""
        out = []
        for alpha, mset in zip(self.alphas, self.space.edge_sets):
            a = alpha[mset.unmasked_indices()]
            z = a - a.max()
            p = np.exp(z) / np.exp(z).sum()
            out.append(float(-(p * np.log(np.maximum(p, 1e-300))).sum()))
        return out

    def state_arrays(self):
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        for i, a in enumerate(self.alphas):
            arrays[f"alpha/{i}"] = a
        return arrays

    def load_state_arrays(self, arrays):
        for k in self.params:
            self.params[k] = np.ascontiguousarray(arrays[f"param/{k}"],
                                                  dtype=np.float64)
        for i in range(len(self.alphas)):
            self.alphas[i] = np.ascontiguousarray(arrays[f"alpha/{i}"],
                                                  dtype=np.float64)
