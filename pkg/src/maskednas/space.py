"""Structural model of the search hypergraph.

A :class:`SearchSpace` is a set of cell templates (each a small DAG whose
edges carry candidate-operation sets), a stacking order, and one boolean
mask entry per candidate. Masks never drop an edge's last operation.
Spaces are immutable; masking returns a new space.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import InvariantViolationError, ShapeMismatchError

FORMAT_VERSION = 1

DARTS_OPS = (
    "none",
    "skip_connect",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "avg_pool_3x3",
    "max_pool_3x3",
)


@dataclass(frozen=True)
class MixingSet:
    edge_id: int
    candidate_ops: tuple
    mask: tuple

    def __post_init__(self):
        if len(self.candidate_ops) < 1:
            raise InvariantViolationError(
                f"edge {self.edge_id}: needs at least one candidate op")
        if len(self.mask) != len(self.candidate_ops):
            raise InvariantViolationError(
                f"edge {self.edge_id}: mask length {len(self.mask)} != "
                f"candidate count {len(self.candidate_ops)}")
        if not any(self.mask):
            raise InvariantViolationError(
                f"edge {self.edge_id}: all operations masked")

    def unmasked_indices(self):
        return [i for i, m in enumerate(self.mask) if m]

    @property
    def num_unmasked(self):
        return sum(self.mask)


@dataclass(frozen=True)
class CellTemplate:
    kind: str
    num_inputs: int
    num_nodes: int
    edges: tuple  # (src_state, dst_node) pairs; states 0..num_inputs-1 are cell inputs
    edge_ids: tuple


@dataclass(frozen=True)
class SearchSpace:
    topology: str  # "chain" | "darts_cells"
    templates: tuple  # CellTemplate, in template order
    stacking: tuple  # cell kinds in network order
    edge_sets: tuple  # MixingSet, indexed by edge_id

    # -- constructors -------------------------------------------------------

    @staticmethod
    def chain(ops_per_edge):
        """Linear chain: one mixing edge after another, no cell structure.

        ``ops_per_edge`` is a list of candidate-op name lists, one per edge.
        """
        sets = tuple(
            MixingSet(i, tuple(ops), (True,) * len(ops))
            for i, ops in enumerate(ops_per_edge))
        n = len(sets)
        tmpl = CellTemplate("chain", 1, n,
                            tuple((i, i) for i in range(n)),
                            tuple(range(n)))
        return SearchSpace("chain", (tmpl,), ("chain",), sets)

    @staticmethod
    def darts(candidate_ops=DARTS_OPS, cells=8, nodes=4):
        """Two-template cell space: normal + reduction, 2+3+...+(nodes+1)
        edges each, reductions at 1/3 and 2/3 depth."""
        edges = tuple((src, dst) for dst in range(nodes) for src in range(dst + 2))
        per_tmpl = len(edges)
        templates = []
        sets = []
        for t, kind in enumerate(("normal", "reduction")):
            ids = tuple(range(t * per_tmpl, (t + 1) * per_tmpl))
            templates.append(CellTemplate(kind, 2, nodes, edges, ids))
            for eid in ids:
                sets.append(MixingSet(eid, tuple(candidate_ops),
                                      (True,) * len(candidate_ops)))
        reduce_at = {cells // 3, 2 * cells // 3}
        stacking = tuple("reduction" if i in reduce_at else "normal"
                         for i in range(cells))
        return SearchSpace("darts_cells", tuple(templates), stacking, tuple(sets))

    # -- accessors ----------------------------------------------------------

    def template(self, kind):
        for t in self.templates:
            if t.kind == kind:
                return t
        raise KeyError(kind)

    @property
    def total_candidates(self):
        return sum(len(s.candidate_ops) for s in self.edge_sets)

    def mask_vector(self):
        """Flat boolean mask over all (edge, op) slots in edge order."""
        return np.concatenate([np.asarray(s.mask, dtype=bool)
                               for s in self.edge_sets])

    def with_mask_vector(self, flat):
        flat = np.asarray(flat, dtype=bool)
        if flat.size != self.total_candidates:
            raise ShapeMismatchError(
                "apply_mask", f"mask length {flat.size} != candidate "
                f"count {self.total_candidates}")
        sets = []
        off = 0
        for s in self.edge_sets:
            k = len(s.candidate_ops)
            new = tuple(bool(a and b) for a, b in zip(s.mask, flat[off:off + k]))
            if not any(new):
                raise InvariantViolationError(
                    f"edge {s.edge_id}: mask would remove every operation")
            sets.append(MixingSet(s.edge_id, s.candidate_ops, new))
            off += k
        return SearchSpace(self.topology, self.templates, self.stacking,
                           tuple(sets))

    def without_op(self, edge_id, op_index):
        """Space with one additional operation masked."""
        sets = list(self.edge_sets)
        s = sets[edge_id]
        if not s.mask[op_index]:
            raise InvariantViolationError(
                f"edge {edge_id}: op {op_index} already masked")
        new = list(s.mask)
        new[op_index] = False
        if not any(new):
            raise InvariantViolationError(
                f"edge {edge_id}: cannot mask the last operation")
        sets[edge_id] = MixingSet(s.edge_id, s.candidate_ops, tuple(new))
        return SearchSpace(self.topology, self.templates, self.stacking,
                           tuple(sets))

    # -- serialization ------------------------------------------------------

    def to_dict(self, include_mask=True):
        d = {
            "format_version": FORMAT_VERSION,
            "topology": self.topology,
            "templates": [
                {"kind": t.kind, "num_inputs": t.num_inputs,
                 "num_nodes": t.num_nodes,
                 "edges": [list(e) for e in t.edges],
                 "edge_ids": list(t.edge_ids)}
                for t in self.templates],
            "stacking": list(self.stacking),
            "edge_sets": [
                {"edge_id": s.edge_id, "candidate_ops": list(s.candidate_ops)}
                for s in self.edge_sets],
        }
        if include_mask:
            for entry, s in zip(d["edge_sets"], self.edge_sets):
                entry["mask"] = [bool(m) for m in s.mask]
        return d

    @staticmethod
    def from_dict(d):
        templates = tuple(
            CellTemplate(t["kind"], t["num_inputs"], t["num_nodes"],
                         tuple(tuple(e) for e in t["edges"]),
                         tuple(t["edge_ids"]))
            for t in d["templates"])
        sets = tuple(
            MixingSet(s["edge_id"], tuple(s["candidate_ops"]),
                      tuple(s.get("mask", [True] * len(s["candidate_ops"]))))
            for s in d["edge_sets"])
        return SearchSpace(d["topology"], templates, tuple(d["stacking"]), sets)

    def digest(self):
        """Identifies the space structure and candidate sets (mask excluded),
        so masks and genotypes can assert provenance."""
        blob = json.dumps(self.to_dict(include_mask=False), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# counting

def count_architectures(space):
    """Exact number of unmasked architectures (big-integer product)."""
    total = 1
    for s in space.edge_sets:
        total *= int(s.num_unmasked)
    return total


def architecture_fraction(space, baseline):
    """Product over edges of unmasked-count ratios, in log-space."""
    if len(space.edge_sets) != len(baseline.edge_sets):
        raise ShapeMismatchError(
            "architecture_fraction",
            f"edge counts differ: {len(space.edge_sets)} vs "
            f"{len(baseline.edge_sets)}")
    log_frac = 0.0
    for s, b in zip(space.edge_sets, baseline.edge_sets):
        if s.num_unmasked == 0 or b.num_unmasked == 0:
            raise InvariantViolationError(
                f"edge {s.edge_id}: zero unmasked operations")
        log_frac += np.log(s.num_unmasked) - np.log(b.num_unmasked)
    return float(np.exp(log_frac))


# ---------------------------------------------------------------------------
# genotypes

@dataclass(frozen=True)
class Genotype:
    """One chosen operation per retained edge, grouped by cell kind."""
    choices: tuple  # ((kind, ((edge_id, op_index), ...)), ...)

    def for_kind(self, kind):
        for k, pairs in self.choices:
            if k == kind:
                return pairs
        raise KeyError(kind)

    def edge_ops(self):
        """Flat dict edge_id -> op_index over all retained edges."""
        out = {}
        for _, pairs in self.choices:
            for eid, op in pairs:
                out[eid] = op
        return out

    def canonical_key(self):
        parts = []
        for kind, pairs in self.choices:
            inner = ",".join(f"e{eid}:{op}" for eid, op in sorted(pairs))
            parts.append(f"{kind}[{inner}]")
        return "|".join(parts)

    def to_dict(self, space=None):
        d = {"format_version": FORMAT_VERSION,
             "choices": [{"kind": kind,
                          "edges": [{"edge_id": e, "op_index": o,
                                     **({"op": space.edge_sets[e].candidate_ops[o]}
                                        if space else {})}
                                    for e, o in pairs]}
                         for kind, pairs in self.choices]}
        return d

    @staticmethod
    def from_dict(d):
        return Genotype(tuple(
            (c["kind"], tuple((e["edge_id"], e["op_index"]) for e in c["edges"]))
            for c in d["choices"]))


def masked_argmax(alpha, mask):
    """Index of the largest alpha among unmasked slots; ties take the lowest
    index."""
    best = None
    for i, m in enumerate(mask):
        if m and (best is None or alpha[i] > alpha[best]):
            best = i
    if best is None:
        raise InvariantViolationError("argmax over fully masked set")
    return best


def derive_genotype(space, alphas, edges_per_node=2):
    """Discretize: per edge take the top unmasked alpha; in cell templates
    each node keeps its ``edges_per_node`` strongest incoming edges (ranked
    by max unmasked alpha, ties to the lower edge id)."""
    if len(alphas) != len(space.edge_sets):
        raise ShapeMismatchError(
            "derive_genotype", f"{len(alphas)} alpha vectors for "
            f"{len(space.edge_sets)} edges")
    choices = []
    for tmpl in space.templates:
        kept = []
        if space.topology == "chain":
            kept = list(tmpl.edge_ids)
        else:
            for node in range(tmpl.num_nodes):
                incoming = [eid for (src, dst), eid in zip(tmpl.edges, tmpl.edge_ids)
                            if dst == node]
                strength = {
                    eid: max(alphas[eid][i]
                             for i in space.edge_sets[eid].unmasked_indices())
                    for eid in incoming}
                ranked = sorted(incoming, key=lambda e: (-strength[e], e))
                kept.extend(sorted(ranked[:edges_per_node]))
        pairs = tuple(
            (eid, masked_argmax(alphas[eid], space.edge_sets[eid].mask))
            for eid in kept)
        choices.append((tmpl.kind, pairs))
    return Genotype(tuple(choices))
