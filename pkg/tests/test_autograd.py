import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from graphs import INPUT_SHAPES, rel_err, single_op_graph
from pelta.autograd import (
    ALL_KINDS,
    OPS,
    CycleError,
    EdgeOrderError,
    GraphBuilder,
    GraphError,
    MissingParameterError,
    NoForwardPassError,
    NonScalarLossError,
    ShapeError,
    backward,
    build_graph,
    finite_diff_grad,
    forward,
    loads,
    transposed_conv2d,
)
from pelta.autograd.ops import _conv
from pelta.zoo import build_model

LOOSE = {"Softmax", "LayerNorm"}


def test_every_kind_is_covered_by_the_toy_graphs():
    assert set(INPUT_SHAPES) == set(OPS)
    assert set(ALL_KINDS) == set(OPS) | {"Input", "Parameter"}


@pytest.mark.parametrize("kind", sorted(INPUT_SHAPES))
def test_vjp_matches_central_differences(kind):
    for seed in range(3):
        g, x, y = single_op_graph(kind, seed)
        forward(g, x, None, y)
        res = backward(g)
        tol = 1e-3 if kind in LOOSE else 1e-4
        assert rel_err(res.grad_wrt_input, finite_diff_grad(g, x, y=y)) < tol
        for p in g.parameter_ids:
            assert rel_err(res.adjoints[p], finite_diff_grad(g, x, y=y, wrt=p)) < tol


@pytest.mark.parametrize("name", ["mlp", "ws_cnn", "resnet_stem_cnn", "tiny_vit"])
def test_zoo_models_input_gradient(name):
    g = build_model(name, seed=3)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(2, 1, 16, 16))
    y = np.array([0, 1])
    forward(g, x, None, y)
    res = backward(g)
    # a sample of coordinates keeps the check fast on the 256-pixel input
    h = 1e-5
    for k in rng.choice(x[0].size, size=12, replace=False):
        e = np.zeros(x.size)
        e[k] = h
        e = e.reshape(x.shape)
        num = (float(forward(g, x + e, None, y)[g.loss]) - float(forward(g, x - e, None, y)[g.loss])) / (2 * h)
        ana = res.grad_wrt_input.reshape(-1)[k]
        assert abs(num - ana) <= 1e-4 * max(1.0, abs(num))


def test_matmul_known_values():
    b = GraphBuilder()
    x = b.input((2,))
    w = b.param((2, 2), "w")
    out = b.op("MatMul", x, w)
    g = b.build(loss=None)
    g.params = {g.id_of("w"): np.array([[1.0, 2.0], [3.0, 4.0]])}
    v = forward(g, np.array([[1.0, 1.0]]))
    assert np.array_equal(v[g.n], np.array([[4.0, 6.0]]))
    assert out == 2


def test_cross_entropy_known_value():
    b = GraphBuilder()
    z = b.input((2,))
    loss = b.op("CrossEntropyLoss", z, reduction="sum")
    g = b.build(loss=loss)
    v = forward(g, np.zeros((1, 2)), y=np.array([0]))
    assert v[g.loss] == pytest.approx(np.log(2.0), abs=1e-15)
    assert np.allclose(backward(g).grad_wrt_input, [[-0.5, 0.5]])


def test_relu_gradient_at_zero_is_zero():
    g, _, _ = single_op_graph("ReLU", 0, batch=1)
    x = np.zeros((1,) + INPUT_SHAPES["ReLU"])
    forward(g, x)
    assert np.all(backward(g).grad_wrt_input == 0.0)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = _conv(x, w, 2, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    assert np.allclose(out, ref, atol=1e-12)


def test_transposed_conv_is_conv_adjoint():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    y = _conv(x, w, 2, 1)
    u = rng.normal(size=y.shape)
    # symmetric cropping gives the usual (H - 1) s - 2p + k output size
    assert transposed_conv2d(u, w, stride=2, padding=1).shape == (1, 2, 5, 5)
    back = transposed_conv2d(u, w, stride=2)[..., 1:7, 1:7]
    assert np.sum(y * u) == pytest.approx(np.sum(x * back), rel=1e-12)


def test_loss_is_batch_polymorphic():
    g = build_model("mlp", seed=0)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(4, 1, 16, 16))
    y = np.array([0, 1, 1, 0])
    total = float(forward(g, x, None, y)[g.loss])
    parts = sum(float(forward(g, x[k : k + 1], None, y[k : k + 1])[g.loss]) for k in range(4))
    assert total == pytest.approx(parts, rel=1e-12)


def _desc(nodes, loss=None):
    d = {"format": "pelta-graph", "version": 1, "nodes": nodes}
    if loss:
        d["loss"] = loss
    return d


def test_edge_order_violation_rejected():
    nodes = [
        {"id": 1, "kind": "Input", "shape": [3]},
        {"id": 2, "kind": "ReLU", "parents": [3]},
        {"id": 3, "kind": "ReLU", "parents": [1]},
    ]
    with pytest.raises(EdgeOrderError):
        build_graph(_desc(nodes))


def test_leaf_after_transform_rejected():
    nodes = [
        {"id": 1, "kind": "Input", "shape": [3]},
        {"id": 2, "kind": "ReLU", "parents": [1]},
        {"id": 3, "kind": "Parameter", "shape": [3]},
    ]
    with pytest.raises(EdgeOrderError):
        build_graph(_desc(nodes))


def test_cycle_rejected():
    nodes = [
        {"id": 1, "kind": "Input", "shape": [3]},
        {"id": 2, "kind": "Add", "parents": [1, 3]},
        {"id": 3, "kind": "ReLU", "parents": [2]},
    ]
    with pytest.raises(CycleError):
        build_graph(_desc(nodes))


def test_shape_mismatch_names_node():
    b = GraphBuilder()
    x = b.input((3,))
    b.op("MatMul", x, b.param((4, 2), "w"))
    with pytest.raises(ShapeError) as info:
        b.build()
    assert info.value.node == 3


def test_unknown_kind_and_duplicate_labels():
    with pytest.raises(GraphError):
        build_graph(_desc([{"id": 1, "kind": "Input", "shape": [2]}, {"id": 2, "kind": "Gelu", "parents": [1]}]))
    b = GraphBuilder()
    x = b.input((2,), label="a")
    b.op("ReLU", x, label="a")
    with pytest.raises(GraphError):
        b.build()


def test_non_scalar_loss_and_missing_state():
    b = GraphBuilder()
    x = b.input((2,))
    b.op("ReLU", x)
    g = b.build()
    with pytest.raises(NoForwardPassError):
        backward(g)
    forward(g, np.ones((1, 2)))
    with pytest.raises(NonScalarLossError):
        backward(g, loss_node=2)


def test_missing_parameter_value():
    g = build_model("mlp", seed=0)
    g.params.pop(g.parameter_ids[0])
    with pytest.raises(MissingParameterError):
        forward(g, np.zeros((1, 1, 16, 16)), None, np.zeros(1, dtype=int))


def test_description_round_trip():
    g = build_model("tiny_vit", seed=0)
    h = loads(g.dumps())
    assert json.loads(h.dumps()) == json.loads(g.dumps())
    assert [(nd.kind, nd.parents, nd.shape) for nd in h.nodes] == [(nd.kind, nd.parents, nd.shape) for nd in g.nodes]


def test_finite_difference_rejects_bad_step():
    g, x, y = single_op_graph("ReLU", 0)
    with pytest.raises(ValueError):
        finite_diff_grad(g, x, h=0.0)


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float64, (2, 3, 4), elements=st.floats(-3, 3)),
    hnp.arrays(np.float64, (4, 5), elements=st.floats(-3, 3)),
)
def test_matmul_forward_and_vjp_match_numpy(x, w):
    b = GraphBuilder()
    xi = b.input((3, 4))
    out = b.op("MatMul", xi, b.param((4, 5), "w"))
    loss = b.op("Mean", out)
    g = b.build(loss=loss)
    g.params = {g.id_of("w"): w}
    v = forward(g, x)
    assert np.allclose(v[g.n - 1], x @ w)
    gx = backward(g).grad_wrt_input
    assert np.allclose(gx, np.broadcast_to(w.sum(axis=1) / 30.0, x.shape))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 6), elements=st.floats(-20, 20)))
def test_softmax_rows_are_distributions(x):
    b = GraphBuilder()
    xi = b.input((6,))
    b.op("Softmax", xi)
    g = b.build()
    p = forward(g, x)[g.n]
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0)
