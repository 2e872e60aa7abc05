"""Computational graph with leaves numbered 1..l and transforms l+1..n.

A graph is built from a *model description*: a JSON document listing every
node with its kind, parents and (optionally) shape::

    {
      "format": "pelta-graph", "version": 1,
      "meta": {...},
      "loss": 5,
      "nodes": [
        {"id": 1, "kind": "Input", "label": "x", "shape": [4]},
        {"id": 2, "kind": "Parameter", "label": "W", "shape": [4, 2],
         "attrs": {"init": "uniform", "fan_in": 4}},
        {"id": 3, "kind": "MatMul", "parents": [1, 2], "shape": [2]},
        ...
      ]
    }

Leaf shapes are mandatory.  For transforms the shape is inferred and, when
given, checked.  Shapes of batched nodes (anything downstream of an Input)
exclude the leading batch axis.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CycleError, EdgeOrderError, GraphError, ShapeError
from .ops import ALL_KINDS, LEAF_KINDS, OPS

FORMAT = "pelta-graph"
VERSION = 1


@dataclass
class Node:
    id: int
    kind: str
    parents: tuple = ()
    shape: tuple = ()
    batched: bool = False
    label: str | None = None
    attrs: dict = field(default_factory=dict)

    @property
    def is_leaf(self):
        return self.kind in LEAF_KINDS

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))


class Graph:
    """Static graph plus the run-time state of its last forward/backward pass."""

    def __init__(self, nodes, loss=None, meta=None):
        self.nodes = list(nodes)
        self.loss = loss
        self.meta = dict(meta or {})
        self.params = {}
        self.values = None
        self.adjoints = None
        self.cache = None
        self.labels = None
        self._children = None
        self._by_label = {nd.label: nd.id for nd in self.nodes if nd.label}

    # -- structure ---------------------------------------------------------

    @property
    def n(self):
        return len(self.nodes)

    @property
    def l(self):  # noqa: E743 - matches the vertex-count naming of the graph tuple
        return sum(nd.is_leaf for nd in self.nodes)

    def node(self, i) -> Node:
        if not 1 <= i <= self.n:
            raise KeyError(f"no node {i}")
        return self.nodes[i - 1]

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.node(self.id_of(key))
        return self.node(key)

    def id_of(self, label):
        try:
            return self._by_label[label]
        except KeyError:
            raise KeyError(f"no node labelled {label!r}") from None

    @property
    def edges(self):
        return {(j, nd.id) for nd in self.nodes for j in nd.parents}

    @property
    def topo_order(self):
        return [nd.id for nd in self.nodes]

    @property
    def input(self):
        return next(nd.id for nd in self.nodes if nd.kind == "Input")

    @property
    def input_ids(self):
        return [nd.id for nd in self.nodes if nd.kind == "Input"]

    @property
    def parameter_ids(self):
        return [nd.id for nd in self.nodes if nd.kind == "Parameter"]

    def children(self, i):
        if self._children is None:
            kids = {nd.id: [] for nd in self.nodes}
            for nd in self.nodes:
                for j in nd.parents:
                    kids[j].append(nd.id)
            self._children = kids
        return self._children[i]

    def ancestors(self, i):
        seen, stack = set(), list(self.node(i).parents)
        while stack:
            j = stack.pop()
            if j not in seen:
                seen.add(j)
                stack.extend(self.node(j).parents)
        return seen

    def descendants(self, i):
        seen, stack = set(), list(self.children(i))
        while stack:
            j = stack.pop()
            if j not in seen:
                seen.add(j)
                stack.extend(self.children(j))
        return seen

    def sinks(self):
        return [nd.id for nd in self.nodes if not self.children(nd.id)]

    def check_edges(self):
        """Assert the numbering conditions on every edge (j, i): j < i and i > l."""
        l = self.l
        for j, i in self.edges:
            if not (j < i and 1 <= j <= self.n - 1 and l < i <= self.n):
                raise EdgeOrderError(f"edge ({j},{i}) violates j<i, i>l")

    def runtime_shape(self, i, batch):
        nd = self.node(i)
        return ((batch,) + nd.shape) if nd.batched else nd.shape

    # -- description round trip -------------------------------------------

    def to_description(self):
        nodes = []
        for nd in self.nodes:
            entry = {"id": nd.id, "kind": nd.kind}
            if nd.label:
                entry["label"] = nd.label
            if nd.parents:
                entry["parents"] = list(nd.parents)
            entry["shape"] = list(nd.shape)
            if nd.attrs:
                entry["attrs"] = copy.deepcopy(nd.attrs)
            nodes.append(entry)
        desc = {"format": FORMAT, "version": VERSION, "nodes": nodes}
        if self.loss is not None:
            desc["loss"] = self.loss
        if self.meta:
            desc["meta"] = copy.deepcopy(self.meta)
        return desc

    def dumps(self):
        return json.dumps(self.to_description(), indent=1, sort_keys=True)

    def copy(self):
        """Structural copy with copied parameters and no run-time state."""
        g = Graph([copy.deepcopy(nd) for nd in self.nodes], self.loss, copy.deepcopy(self.meta))
        g.params = {k: v.copy() for k, v in self.params.items()}
        return g

    def __repr__(self):
        return f"Graph(n={self.n}, l={self.l}, loss={self.loss})"


def _find_cycle(ids, parents):
    state = {}

    def visit(i):
        state[i] = 1
        for j in parents.get(i, ()):
            if j not in parents:
                continue
            if state.get(j) == 1:
                return True
            if state.get(j) is None and visit(j):
                return True
        state[i] = 2
        return False

    return any(state.get(i) is None and visit(i) for i in ids)


def build_graph(desc) -> Graph:
    """Validate a model description (dict or JSON text) and return a Graph."""
    if isinstance(desc, (str, bytes)):
        desc = json.loads(desc)
    entries = desc.get("nodes")
    if not entries:
        raise GraphError("description has no nodes")
    entries = sorted(entries, key=lambda e: e["id"])
    ids = [e["id"] for e in entries]
    if ids != list(range(1, len(ids) + 1)):
        raise GraphError(f"node ids must be exactly 1..n, got {ids}")
    parents = {e["id"]: tuple(e.get("parents", ())) for e in entries}
    for e in entries:
        if e["kind"] not in ALL_KINDS:
            raise GraphError(f"node {e['id']}: unsupported kind {e['kind']!r}")
        for j in parents[e["id"]]:
            if j not in parents:
                raise GraphError(f"node {e['id']}: unknown parent {j}")
    if _find_cycle(ids, parents):
        raise CycleError("graph contains a cycle")

    n = len(entries)
    l = sum(e["kind"] in LEAF_KINDS for e in entries)
    if not 1 <= l < n:
        raise GraphError(f"need 1 <= l < n, got l={l}, n={n}")
    for e in entries:
        i = e["id"]
        leaf = e["kind"] in LEAF_KINDS
        if leaf and parents[i]:
            raise GraphError(f"leaf node {i} cannot have parents")
        if leaf != (i <= l):
            raise EdgeOrderError(f"node {i}: leaves must be numbered 1..{l} before all transforms")
        for j in parents[i]:
            if not j < i:
                raise EdgeOrderError(f"edge ({j},{i}) violates j<i")
    if not any(e["kind"] == "Input" for e in entries):
        raise GraphError("graph has no Input leaf")

    nodes = []
    for e in entries:
        i, kind = e["id"], e["kind"]
        attrs = copy.deepcopy(e.get("attrs", {}))
        declared = tuple(e["shape"]) if e.get("shape") is not None else None
        if kind in LEAF_KINDS:
            if declared is None:
                raise ShapeError(i, "leaf nodes must declare a shape")
            shape, batched = declared, kind == "Input"
        else:
            op = OPS[kind]
            lo, hi = op.arity
            ps = parents[i]
            if not lo <= len(ps) <= hi:
                raise ShapeError(i, f"{kind} takes {lo}..{hi} parents, got {len(ps)}")
            specs = [(nodes[j - 1].shape, nodes[j - 1].batched) for j in ps]
            try:
                shape, batched = op.infer(specs, attrs)
            except ValueError as exc:
                raise ShapeError(i, str(exc)) from None
            if declared is not None and declared != tuple(shape):
                raise ShapeError(i, f"declared shape {declared} but {kind} produces {tuple(shape)}")
        nodes.append(Node(i, kind, parents[i], tuple(int(d) for d in shape), batched, e.get("label"), attrs))

    labels = [nd.label for nd in nodes if nd.label]
    if len(labels) != len(set(labels)):
        raise GraphError("node labels must be unique")
    loss = desc.get("loss")
    if loss is not None:
        if not 1 <= loss <= n:
            raise GraphError(f"loss node {loss} out of range")
        if nodes[loss - 1].shape != () or nodes[loss - 1].batched:
            raise ShapeError(loss, "loss node must be an unbatched scalar")
    g = Graph(nodes, loss, desc.get("meta"))
    g.check_edges()
    return g


def loads(text) -> Graph:
    return build_graph(json.loads(text))


def init_params(g: Graph, seed: int) -> dict:
    """Draw parameter values: uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) unless the
    node's ``init`` attribute says ``ones``/``zeros``.  Nodes are drawn in id order
    from one seeded stream, so the result depends only on (description, seed)."""
    rng = np.random.default_rng(seed)
    params = {}
    for i in g.parameter_ids:
        nd = g.node(i)
        init = nd.attrs.get("init", "uniform")
        if init == "zeros":
            params[i] = np.zeros(nd.shape)
        elif init == "ones":
            params[i] = np.ones(nd.shape)
        elif init == "uniform":
            fan_in = nd.attrs.get("fan_in") or (nd.shape[0] if nd.shape else 1)
            a = np.sqrt(1.0 / fan_in)
            params[i] = rng.uniform(-a, a, size=nd.shape)
        else:
            raise GraphError(f"node {i}: unknown init {init!r}")
    return params


class GraphBuilder:
    """Incremental construction with automatic leaves-first numbering.

    Handles returned by ``input``/``param``/``op`` are provisional; ``build``
    renumbers leaves to 1..l (in creation order) and transforms to l+1..n.
    """

    def __init__(self):
        self._entries = []

    def _add(self, kind, label, parents=(), shape=None, attrs=None):
        handle = len(self._entries)
        self._entries.append(
            {"kind": kind, "label": label, "parents": list(parents), "shape": shape, "attrs": attrs or {}}
        )
        return handle

    def input(self, shape, label="x"):
        return self._add("Input", label, shape=list(shape))

    def param(self, shape, label=None, init="uniform", fan_in=None, trainable=True, role=None):
        attrs = {"init": init}
        if init == "uniform":
            attrs["fan_in"] = int(fan_in if fan_in is not None else shape[0])
        if not trainable:
            attrs["trainable"] = False
        if role:
            attrs["role"] = role
        return self._add("Parameter", label, shape=list(shape), attrs=attrs)

    def op(self, kind, *parents, label=None, **attrs):
        if kind not in OPS:
            raise GraphError(f"unsupported kind {kind!r}")
        return self._add(kind, label, parents=parents, attrs=attrs)

    def description(self, loss=None, meta=None):
        leaves = [h for h, e in enumerate(self._entries) if e["kind"] in LEAF_KINDS]
        ops = [h for h, e in enumerate(self._entries) if e["kind"] not in LEAF_KINDS]
        number = {h: k + 1 for k, h in enumerate(leaves + ops)}
        nodes = []
        for h in leaves + ops:
            e = self._entries[h]
            entry = {"id": number[h], "kind": e["kind"], "attrs": e["attrs"]}
            if e["label"]:
                entry["label"] = e["label"]
            if e["parents"]:
                entry["parents"] = [number[p] for p in e["parents"]]
            if e["shape"] is not None:
                entry["shape"] = e["shape"]
            nodes.append(entry)
        desc = {"format": FORMAT, "version": VERSION, "nodes": nodes}
        if loss is not None:
            desc["loss"] = number[loss]
        if meta:
            desc["meta"] = meta
        return desc

    def build(self, loss=None, meta=None, seed=None) -> Graph:
        g = build_graph(self.description(loss, meta))
        if seed is not None:
            g.params = init_params(g, seed)
        return g
