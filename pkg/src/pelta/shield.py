"""Enclave shielding of the input-adjacent part of a computational graph.

``select`` picks the deepest masked nodes (the frontier), ``pelta_shield`` walks
back from the frontier masking every value it meets and every local jacobian
whose source depends on the input, and hands out an ``AttackerView`` that
answers queries about everything else.  Only the adjoint at the frontier
crosses the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Graph, backprop, forward
from .autograd.ops import OPS

FLOAT_BYTES = 4  # enclave accounting is single precision regardless of compute width
MB = 1_000_000

WORST_CASE = "worst_case_retain"
FLUSH = "flush_after_use"
FLUSH_MODES = (WORST_CASE, FLUSH)


class MaskedAccess(PermissionError):
    """A query named a quantity held inside the enclave."""


class SelectionError(ValueError):
    pass


# ---------------------------------------------------------------- selection


@dataclass(frozen=True)
class FirstKTransforms:
    """Mask the first ``k`` input-dependent transforms in vertex order."""

    k: int


@dataclass(frozen=True)
class NamedPrefix:
    """Mask the transforms carrying these labels (and everything before them)."""

    labels: tuple

    def __init__(self, labels):
        object.__setattr__(self, "labels", tuple(labels))


def first_k_transforms(k):
    return FirstKTransforms(int(k))


def named_prefix(labels):
    return NamedPrefix(labels)


@dataclass(frozen=True)
class ShieldSelection:
    frontier: frozenset


def input_dependent(g: Graph):
    """Ids of nodes whose value depends on the model input (the input included)."""
    x = g.input
    return {x} | g.descendants(x)


def _dominates(g: Graph, frontier):
    """True if every path from the input to any sink crosses the frontier."""
    seen, stack = set(), [g.input]
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        if i in frontier:
            continue
        kids = g.children(i)
        if not kids:
            return False
        stack.extend(kids)
    return True


def select(g: Graph, policy) -> ShieldSelection:
    live = input_dependent(g)
    if isinstance(policy, FirstKTransforms):
        if policy.k < 1:
            raise SelectionError("k must be at least 1")
        ordered = [i for i in g.topo_order if i > g.l and i in live]
        chosen = set(ordered[: policy.k])
        frontier = {i for i in chosen if any(c not in chosen for c in g.children(i))}
    elif isinstance(policy, NamedPrefix):
        if not policy.labels:
            raise SelectionError("named prefix is empty")
        chosen = {g.id_of(lbl) for lbl in policy.labels}
        frontier = {i for i in chosen if not (g.descendants(i) & chosen)}
    else:
        raise SelectionError(f"unknown selection policy {policy!r}")
    for i in frontier:
        if i <= g.l:
            raise SelectionError(f"frontier node {i} is a leaf (needs i > l={g.l})")
        if i not in live:
            raise SelectionError(f"frontier node {i} does not depend on the input")
    if not frontier:
        raise SelectionError("selection produced an empty frontier")
    if not _dominates(g, frontier):
        raise SelectionError(f"frontier {sorted(frontier)} does not dominate the input: a clear path leaks")
    return ShieldSelection(frozenset(frontier))


# ---------------------------------------------------------------- shielding


@dataclass(frozen=True)
class Enclave:
    masked_values: frozenset
    masked_jacobians: frozenset  # edges (j, i) for the local jacobian J^{j->i}
    flush_mode: str = WORST_CASE
    byte_count: int = 0


def shield_sets(g: Graph, frontier):
    """The recursive masking walk; returns (masked values, masked jacobians).

    The walk moves from each frontier node to its parents.  Input-dependent
    parents are masked together with the jacobian into the child, and the walk
    continues from them.  Parameter parents are masked as leaves.  Transforms
    computed from parameters alone carry nothing about the input and stay clear.
    """
    live = input_dependent(g)
    values, jacobians = set(), set()

    def shield(i):
        if i in values:
            return
        values.add(i)
        for j in g.node(i).parents:
            if j in live:
                jacobians.add((j, i))
                shield(j)
            elif g.node(j).kind == "Parameter":
                values.add(j)

    for u in sorted(frontier):
        shield(u)
    return frozenset(values), frozenset(jacobians)


def pelta_shield(g: Graph, sel: ShieldSelection, flush_mode=WORST_CASE):
    if not sel.frontier:
        raise SelectionError("cannot shield with an empty frontier")
    values, jacobians = shield_sets(g, sel.frontier)
    draft = Enclave(values, jacobians, flush_mode)
    report = estimate_enclave_memory(g, draft, flush_mode)
    enclave = Enclave(values, jacobians, flush_mode, report.total_bytes)
    return enclave, AttackerView(g, enclave, sel.frontier)


class AttackerView:
    """Restricted white-box access to a shielded graph.

    The device evaluates the full graph honestly; the view only refuses to
    reveal what lives in the enclave.  Every denied query is logged in
    ``denied`` so that attack code can be audited for masked reads.
    """

    def __init__(self, g: Graph, enclave: Enclave, frontier):
        self._g = g
        self.enclave = enclave
        self.frontier = frozenset(frontier)
        self.masked = enclave.masked_values
        self.denied = []
        self.reads = 0

    # -- access control ----------------------------------------------------

    def _deny(self, what, key):
        self.denied.append((what, key))
        raise MaskedAccess(f"{what} {key} is held in the enclave")

    def _check_value(self, i):
        if i in self.masked:
            self._deny("value", i)
        self.reads += 1

    @property
    def topology(self):
        """Architecture description (kinds, parents, shapes); no parameter values."""
        return self._g.to_description()

    @property
    def meta(self):
        return dict(self._g.meta)

    def id_of(self, label):
        return self._g.id_of(label)

    @property
    def frontier_boundary(self):
        return sorted(self.frontier)

    def is_masked(self, i):
        return i in self.masked

    @property
    def clear_params(self):
        return {i: self._g.params[i].copy() for i in self._g.parameter_ids if i not in self.masked}

    def param(self, i):
        self._check_value(i)
        return self._g.params[i].copy()

    def value(self, i):
        self._check_value(i)
        if self._g.values is None:
            raise RuntimeError("no pass has been run through the view")
        return self._g.values[i]

    @property
    def clear_values(self):
        if self._g.values is None:
            return {}
        return {i: v for i, v in self._g.values.items() if i not in self.masked}

    def node_cache(self, i, key):
        self._check_value(i)
        return self._g.cache[i][key]

    def adjoint(self, i):
        """dL/du at a clear node, or the boundary adjoint at a frontier node."""
        if i in self.masked and i not in self.frontier:
            self._deny("adjoint", i)
        if self._g.adjoints is None:
            raise RuntimeError("no backward pass has been run through the view")
        self.reads += 1
        return self._g.adjoints[i]

    def grad_wrt_input(self):
        self._deny("adjoint", self._g.input)

    def jacobian(self, j, i):
        """Dense local jacobian d f^i / d u^j on batch element 0 (small nodes only)."""
        if (j, i) in self.enclave.masked_jacobians or i in self.masked or j in self.masked:
            self._deny("jacobian", (j, i))
        g = self._g
        if g.values is None:
            raise RuntimeError("no pass has been run through the view")
        nd = g.node(i)
        xs = [g.values[p] for p in nd.parents]
        batched = [g.node(p).batched for p in nd.parents]
        out = g.values[i]
        pos = nd.parents.index(j)
        rows = []
        for k in range(nd.size):
            seed = np.zeros_like(out)
            if nd.batched:
                seed[0].reshape(-1)[k] = 1.0
            else:
                seed.reshape(-1)[k] = 1.0
            grads = OPS[nd.kind].vjp(seed, xs, out, nd.attrs, batched, g.cache[i])
            gj = grads[pos]
            rows.append((gj[0] if g.node(j).batched else gj).reshape(-1))
        self.reads += 1
        return np.array(rows)

    # -- device passes -----------------------------------------------------

    def run(self, x, y=None, backward=True):
        """Forward (and, given labels, backward) on the device for the model's own loss."""
        g = self._g
        x = np.asarray(x, dtype=np.float64)
        forward(g, x, None, np.zeros(len(x), dtype=np.int64) if y is None else y)
        if backward and g.loss is not None and y is not None:
            g.adjoints = backprop(g, {g.loss: 1.0})
        return self

    def pullback(self, node, cotangent):
        """Back-propagate a cotangent placed on a clear node (e.g. a logit margin)."""
        if node in self.masked:
            self._deny("value", node)
        self._g.adjoints = backprop(self._g, {node: cotangent})
        return {f: self.adjoint(f) for f in sorted(self.frontier)}


def attacker_gradient(view: AttackerView, g: Graph, x, y):
    """The boundary adjoint dL/du for each frontier node: all the attacker gets."""
    if g is not view._g:
        raise ValueError("view belongs to a different graph")
    view.run(x, y)
    return {f: view.adjoint(f) for f in sorted(view.frontier)}


# ---------------------------------------------------------------- memory


COUNTING_RULES = (
    "4 bytes per scalar (single precision)",
    "weights/biases: masked parameter values; worst case adds one gradient per parameter",
    "activations: masked input and transform outputs, plus the patch matrix a patch embedding holds",
    "gradients: one adjoint per masked activation (worst case only)",
    "jacobians: compact local jacobians not implied by held weights, e.g. ReLU masks and "
    "standardised kernels (worst case only)",
    "flush_after_use keeps weights and biases only",
    "shielded fraction = enclave floats / (enclave floats + clear parameter floats)",
)


@dataclass
class MemoryReport:
    per_category: dict
    total_bytes: int
    shielded_fraction: float
    mode: str = WORST_CASE
    batch_size: int = 1
    rules: tuple = field(default=COUNTING_RULES)

    def to_text(self, title="Estimated enclave memory"):
        lines = [f"{title} ({self.mode}, batch {self.batch_size})", f"{'category':<12}{'bytes':>14}{'MB':>12}"]
        for cat, nbytes in self.per_category.items():
            lines.append(f"{cat:<12}{nbytes:>14d}{nbytes / MB:>12.2f}")
        lines.append(f"{'total':<12}{self.total_bytes:>14d}{self.total_bytes / MB:>12.2f}")
        lines.append(f"shielded fraction: {100 * self.shielded_fraction:.2f}%")
        lines.append("counting rules:")
        lines.extend(f"  - {r}" for r in self.rules)
        return "\n".join(lines) + "\n"


def _activation_floats(g: Graph, i, batch):
    nd = g.node(i)
    n = nd.size * (batch if nd.batched else 1)
    if nd.kind == "PatchEmbed":
        c = g.node(nd.parents[0]).shape[0]
        n += batch * nd.shape[0] * c * nd.attrs["patch"] ** 2
    return n


def _jacobian_floats(g: Graph, j, i, batch):
    nd = g.node(i)
    per = batch if nd.batched else 1
    if nd.kind in ("ReLU", "MaxPool", "Softmax", "LayerNorm"):
        return nd.size * per
    if nd.kind == "AttentionHead":
        return per * nd.shape[0] ** 2
    if nd.kind == "WeightStandardizedConv2d" and j == nd.parents[0]:
        return g.node(nd.parents[1]).size
    return 0


def estimate_enclave_memory(g: Graph, enclave: Enclave, mode=None, batch_size=1) -> MemoryReport:
    mode = enclave.flush_mode if mode is None else mode
    if mode not in FLUSH_MODES:
        raise ValueError(f"unknown flush mode {mode!r}")
    worst = mode == WORST_CASE
    floats = {"weights": 0, "biases": 0, "activations": 0, "gradients": 0, "jacobians": 0}
    for i in sorted(enclave.masked_values):
        nd = g.node(i)
        if nd.kind == "Parameter":
            cat = "biases" if nd.attrs.get("role") == "bias" else "weights"
            floats[cat] += nd.size * (2 if worst else 1)
        elif worst:
            a = _activation_floats(g, i, batch_size)
            floats["activations"] += a
            floats["gradients"] += a
    if worst:
        for j, i in sorted(enclave.masked_jacobians):
            floats["jacobians"] += _jacobian_floats(g, j, i, batch_size)
    held = sum(floats.values())
    clear = sum(g.node(i).size for i in g.parameter_ids if i not in enclave.masked_values)
    per_bytes = {k: FLOAT_BYTES * v for k, v in floats.items()}
    fraction = held / (held + clear) if held + clear else 0.0
    return MemoryReport(per_bytes, FLOAT_BYTES * held, fraction, mode, batch_size)
