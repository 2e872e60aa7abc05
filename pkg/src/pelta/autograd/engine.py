"""Forward evaluation and reverse-mode differentiation over a Graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingParameterError, NoForwardPassError, NonScalarLossError, NumericalError, ShapeError
from .graph import Graph
from .ops import OPS


@dataclass
class BackwardResult:
    adjoints: dict  # node id -> dL/du, same shape as the node value
    grad_wrt_input: np.ndarray


def forward(g: Graph, x, params=None, y=None, feeds=None) -> dict:
    """Evaluate every node; values are stored on ``g`` for a following backward.

    ``x`` carries a leading batch axis.  ``params`` defaults to ``g.params``;
    ``y`` holds integer labels for a CrossEntropyLoss node; ``feeds`` supplies
    any Input leaves beyond the first.
    """
    params = g.params if params is None else params
    x = np.asarray(x, dtype=np.float64)
    inputs = g.input_ids
    x_id = inputs[0]
    if x.shape[1:] != g.node(x_id).shape:
        raise ShapeError(x_id, f"input shape {x.shape[1:]} does not match declared {g.node(x_id).shape}")
    values = {x_id: x}
    for i in inputs[1:]:
        if feeds is None or i not in feeds:
            raise MissingParameterError(f"no value fed for Input node {i}")
        values[i] = np.asarray(feeds[i], dtype=np.float64)
    for i in g.parameter_ids:
        if i not in params:
            raise MissingParameterError(f"missing value for Parameter node {i} ({g.node(i).label})")
        v = np.asarray(params[i], dtype=np.float64)
        if v.shape != g.node(i).shape:
            raise ShapeError(i, f"parameter value shape {v.shape} != declared {g.node(i).shape}")
        values[i] = v

    ctx = {"labels": y}
    cache = {}
    for nd in g.nodes:
        if nd.is_leaf:
            continue
        xs = [values[j] for j in nd.parents]
        batched = [g.node(j).batched for j in nd.parents]
        c = {}
        out = OPS[nd.kind].forward(xs, nd.attrs, batched, c, ctx)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"node {nd.id} ({nd.kind}) produced non-finite values")
        values[nd.id] = out
        cache[nd.id] = c
    g.values, g.cache, g.labels, g.adjoints = values, cache, y, None
    return values


def backprop(g: Graph, seeds: dict) -> dict:
    """Propagate cotangents ``{node: dL/du}`` to every node.

    Each parent accumulates the transposed local jacobian applied to the
    child's adjoint, summed over children.  Nodes never reached get zero
    adjoints."""
    if g.values is None:
        raise NoForwardPassError("run forward() before backward()")
    values = g.values
    adj = {}
    for i, s in seeds.items():
        adj[i] = np.array(np.broadcast_to(s, values[i].shape), dtype=np.float64)
    top = max(seeds)
    for nd in reversed(g.nodes[:top]):
        if nd.is_leaf or nd.id not in adj:
            continue
        xs = [values[j] for j in nd.parents]
        batched = [g.node(j).batched for j in nd.parents]
        grads = OPS[nd.kind].vjp(adj[nd.id], xs, values[nd.id], nd.attrs, batched, g.cache[nd.id])
        for j, gj in zip(nd.parents, grads):
            if gj is None:
                continue
            if j in adj:
                adj[j] = adj[j] + gj
            else:
                adj[j] = np.array(gj, dtype=np.float64)
    for nd in g.nodes:
        if nd.id not in adj:
            adj[nd.id] = np.zeros(np.shape(values[nd.id]))
    return adj


def backward(g: Graph, loss_node=None) -> BackwardResult:
    if g.values is None:
        raise NoForwardPassError("run forward() before backward()")
    loss_node = g.loss if loss_node is None else loss_node
    if loss_node is None:
        raise NonScalarLossError("graph has no designated loss node")
    if np.size(g.values[loss_node]) != 1 or g.node(loss_node).batched:
        raise NonScalarLossError(f"node {loss_node} is not a scalar")
    adj = backprop(g, {loss_node: 1.0})
    g.adjoints = adj
    return BackwardResult(adj, adj[g.input])


def finite_diff_grad(g: Graph, x, h=1e-5, params=None, y=None, loss_node=None, wrt=None):
    """Central differences (L(v + h e_k) - L(v - h e_k)) / 2h for every coordinate k.

    ``wrt`` selects a Parameter node instead of the input.  The graph's run-time
    state is restored afterwards.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = dict(g.params if params is None else params)
    loss_node = g.loss if loss_node is None else loss_node
    saved = (g.values, g.cache, g.labels, g.adjoints)
    x = np.array(x, dtype=np.float64)
    target = x if wrt is None else np.array(params[wrt], dtype=np.float64)
    if wrt is not None:
        params[wrt] = target

    def loss():
        return float(forward(g, x, params, y)[loss_node])

    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    try:
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss()
            flat[k] = orig - h
            down = loss()
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
    finally:
        g.values, g.cache, g.labels, g.adjoints = saved
    return grad
