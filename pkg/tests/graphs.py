"""Seeded toy graphs shared by the gradient and shield tests."""

import numpy as np

from pelta.autograd import GraphBuilder, init_params

# kind -> builder(b, x_handle, rng) returning the op handle; the input shape is
# chosen per kind below.
INPUT_SHAPES = {
    "MatMul": (3, 4),
    "Add": (3, 4),
    "PositionAdd": (5, 4),
    "ElementwiseMul": (3, 4),
    "ScalarMul": (6,),
    "ReLU": (2, 3, 3),
    "Softmax": (3, 5),
    "LayerNorm": (3, 6),
    "BatchNorm": (3, 4, 4),
    "Conv2d": (2, 6, 6),
    "WeightStandardizedConv2d": (2, 6, 6),
    "TransposedConv2d": (3, 3, 3),
    "MaxPool": (2, 6, 6),
    "Mean": (4, 5),
    "CrossEntropyLoss": (5,),
    "PatchEmbed": (2, 4, 4),
    "Concat": (3, 4),
    "Reshape": (2, 3, 4),
    "Select": (4, 3),
    "AttentionHead": (5, 6),
}

SMOOTH_EXEMPT = {"Softmax", "LayerNorm", "AttentionHead", "CrossEntropyLoss", "WeightStandardizedConv2d"}


def _op(kind, b, x, rng):
    if kind == "MatMul":
        return b.op("MatMul", x, b.param((4, 3), "w"))
    if kind in ("Add", "ElementwiseMul"):
        return b.op(kind, x, b.param((4,), "w", fan_in=1))
    if kind == "PositionAdd":
        return b.op(kind, x, b.param((5, 4), "pos", fan_in=1))
    if kind == "ScalarMul":
        return b.op(kind, x, scale=float(rng.uniform(-2, 2)))
    if kind in ("ReLU", "Softmax"):
        return b.op(kind, x)
    if kind == "LayerNorm":
        return b.op(kind, x, b.param((6,), "g", fan_in=1), b.param((6,), "bt", fan_in=1))
    if kind == "BatchNorm":
        ps = [b.param((3,), n, fan_in=1) for n in ("g", "bt", "mu")]
        var = b.param((3,), "var", init="ones")
        return b.op(kind, x, *ps, var)
    if kind in ("Conv2d", "WeightStandardizedConv2d"):
        w = b.param((3, 2, 3, 3), "w", fan_in=18)
        return b.op(kind, x, w, b.param((3,), "b", fan_in=18), stride=int(rng.integers(1, 3)), padding=int(rng.integers(0, 2)))
    if kind == "TransposedConv2d":
        w = b.param((3, 2, 2, 2), "w", fan_in=12)
        return b.op(kind, x, w, b.param((2,), "b", fan_in=12), stride=2, padding=int(rng.integers(0, 2)))
    if kind == "MaxPool":
        return b.op(kind, x, kernel=2, stride=int(rng.integers(1, 3)))
    if kind == "Mean":
        return b.op(kind, x, axis=int(rng.integers(0, 2)))
    if kind == "CrossEntropyLoss":
        return b.op(kind, x, reduction=str(rng.choice(["sum", "mean"])))
    if kind == "PatchEmbed":
        return b.op(kind, x, b.param((8, 5), "E", fan_in=8), b.param((5,), "eb", fan_in=8), patch=2)
    if kind == "Concat":
        return b.op(kind, b.param((1, 4), "cls", fan_in=1), x, axis=0)
    if kind == "Reshape":
        return b.op(kind, x, shape=[4, -1])
    if kind == "Select":
        return b.op(kind, x, axis=0, index=int(rng.integers(0, 4)))
    if kind == "AttentionHead":
        ws = [b.param((6, 3), n, fan_in=6) for n in ("wq", "wk", "wv")]
        return b.op(kind, x, *ws)
    raise KeyError(kind)


def single_op_graph(kind, seed, batch=2):
    """Input -> <kind> -> (weighted) scalar loss, with seeded params, input, labels."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    x = b.input(INPUT_SHAPES[kind])
    out = _op(kind, b, x, rng)
    tmp = b.build()
    nd = tmp.node(tmp.n)
    if nd.shape == () and not nd.batched:
        loss = out
    else:
        r = b.param(nd.shape, "r", fan_in=1)
        loss = b.op("Mean", b.op("ElementwiseMul", out, r))
    g = b.build(loss=loss)
    g.params = init_params(g, seed)
    for i in g.parameter_ids:
        if g.node(i).label == "var":
            g.params[i] = rng.uniform(0.5, 2.0, size=g.node(i).shape)
    x = rng.normal(size=(batch,) + INPUT_SHAPES[kind])
    y = rng.integers(0, 5, size=batch) if kind == "CrossEntropyLoss" else None
    return g, x, y


def rel_err(a, b):
    """max |a - b| scaled by the larger of the two max-magnitudes."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def random_dag(seed, max_nodes=12):
    """Input + a few parameters, then Add/ReLU transforms over random earlier nodes."""
    rng = np.random.default_rng(seed)
    n_params = int(rng.integers(1, 4))
    n_ops = int(rng.integers(2, max_nodes - n_params))
    b = GraphBuilder()
    handles = [b.input((3,))] + [b.param((3,), f"p{k}", fan_in=1) for k in range(n_params)]
    for _ in range(n_ops):
        if rng.random() < 0.6:
            a, c = rng.choice(len(handles), size=2, replace=True)
            handles.append(b.op("Add", handles[a], handles[c]))
        else:
            handles.append(b.op("ReLU", handles[int(rng.integers(len(handles)))]))
    return b.build(seed=seed), rng


def paths_oracle(g, frontier):
    """Masked sets by explicit enumeration of every input-to-frontier path."""
    parents = {nd.id: nd.parents for nd in g.nodes}

    def paths(i):
        if i == g.input:
            return [[i]]
        return [p + [i] for j in parents[i] for p in paths(j)]

    on_path = set()
    for s in frontier:
        for p in paths(s):
            on_path.update(p)
    values = set(on_path)
    jac = set()
    for i in on_path:
        for j in parents[i]:
            if j in on_path:
                jac.add((j, i))
            elif g.node(j).kind == "Parameter":
                values.add(j)
    return values, jac
