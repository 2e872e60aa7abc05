import numpy as np
import pytest

from pelta.autograd import GraphBuilder, forward
from pelta.autograd.ops import _standardize
from pelta.zoo import (
    MEMBER_K,
    AttentionTrace,
    EnsembleModel,
    TinyViTSpec,
    attention_rollout,
    attention_trace,
    build_model,
    build_tiny_vit,
    dump_params,
    ensemble_predict,
    load_checkpoint,
    parse_params,
    predict,
    rollout_image_map,
    save_checkpoint,
    selection_coins,
    vit_l16,
)


def test_tiny_vit_token_count_and_shapes():
    spec = TinyViTSpec(image_size=16, patch_size=4, embed_dim=16)
    g = build_tiny_vit(spec, seed=0)
    assert spec.n_tokens == 17
    assert g["patch_embed"].shape == (16, 16)
    assert g["concat_cls"].shape == (17, 16)
    assert g["pos_add"].shape == (17, 16)
    x = np.random.default_rng(0).uniform(size=(3, 1, 16, 16))
    v = forward(g, x, None, np.zeros(3, dtype=int))
    assert v[g.id_of("logits")].shape == (3, 2)


def test_vit_spec_validation():
    with pytest.raises(ValueError):
        TinyViTSpec(image_size=15, patch_size=4)
    with pytest.raises(ValueError):
        TinyViTSpec(embed_dim=15, n_heads=2)


def test_large_vit_description():
    g = vit_l16()
    assert g["patch_embed"].shape == (196, 1024)
    assert g["pos_add"].shape == (197, 1024)


def _single_conv(kind, kernel, bias):
    b = GraphBuilder()
    x = b.input((2, 6, 6))
    b.op(kind, x, b.param(kernel.shape, "w"), b.param(bias.shape, "b"), stride=1, padding=1)
    g = b.build()
    g.params = {g.id_of("w"): kernel, g.id_of("b"): bias}
    return g


def test_ws_conv_equals_plain_conv_with_standardised_kernel():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(4, 2, 3, 3))
    bias = rng.normal(size=4)
    x = rng.normal(size=(2, 2, 6, 6))
    ws = forward(_single_conv("WeightStandardizedConv2d", w, bias), x)
    w_hat, _ = _standardize(w)
    plain = forward(_single_conv("Conv2d", w_hat, bias), x)
    assert np.array_equal(ws[4], plain[4])
    # independent recomputation of the standardised kernel
    flat = w.reshape(4, -1)
    ref = ((flat - flat.mean(1, keepdims=True)) / flat.std(1, keepdims=True)).reshape(w.shape)
    assert np.allclose(w_hat, ref, atol=1e-12)


def test_ws_conv_constant_kernel_gives_bias_only():
    bias = np.array([0.5, -1.0, 2.0])
    x = np.random.default_rng(4).normal(size=(2, 2, 6, 6))
    expect = np.broadcast_to(bias.reshape(1, 3, 1, 1), (2, 3, 6, 6))
    # a dyadic constant has an exact mean, so the centred kernel is exactly zero
    out = forward(_single_conv("WeightStandardizedConv2d", np.full((3, 2, 3, 3), 0.5), bias), x)[4]
    assert np.array_equal(out, expect)
    out = forward(_single_conv("WeightStandardizedConv2d", np.full((3, 2, 3, 3), 0.7), bias), x)[4]
    assert np.allclose(out, expect, atol=1e-9)


def test_rollout_identity_and_uniform_attention():
    t = 5
    eye = np.eye(t)
    assert np.array_equal(attention_rollout(AttentionTrace([[eye]])), eye)
    uni = np.full((t, t), 1.0 / t)
    r = attention_rollout(AttentionTrace([[uni]]))
    assert np.allclose(r, 0.5 * uni + 0.5 * eye, atol=1e-15)
    # two heads, two blocks: the block-1 matrix is applied first (rightmost)
    rng = np.random.default_rng(0)
    a = [rng.dirichlet(np.ones(t), size=t) for _ in range(4)]
    m1 = (0.5 * a[0] + 0.5 * eye) + (0.5 * a[1] + 0.5 * eye)
    m2 = (0.5 * a[2] + 0.5 * eye) + (0.5 * a[3] + 0.5 * eye)
    r = attention_rollout(AttentionTrace([[a[0], a[1]], [a[2], a[3]]]))
    assert np.allclose(r, m2 @ m1, atol=1e-14)


def test_attention_trace_rows_are_stochastic():
    g = build_model("tiny_vit", seed=0)
    forward(g, np.random.default_rng(0).uniform(size=(2, 1, 16, 16)), None, np.zeros(2, dtype=int))
    tr = attention_trace(g)
    assert tr.n_tokens == 17
    for heads in tr.weights:
        for w in heads:
            assert w.shape == (2, 17, 17)
            assert np.allclose(w.sum(axis=-1), 1.0)


def test_rollout_image_map_upsamples_patch_row():
    t = 1 + 4
    r = np.zeros((t, t))
    r[0, 1:] = [1.0, 2.0, 3.0, 4.0]
    m = rollout_image_map(r, (2, 4, 4), 2)
    assert m.shape == (2, 4, 4)
    expect = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
    assert np.array_equal(m[0], expect) and np.array_equal(m[1], expect)


def test_selection_coins_are_fair():
    coins = selection_coins(np.random.default_rng(123), 10_000)
    k = int((coins == MEMBER_K).sum())
    # binomial(10000, 1/2): standard deviation 50, allow 4 of them
    assert abs(k - 5000) < 200


def test_ensemble_predict_follows_the_coin():
    k = build_model("resnet_stem_cnn", seed=0)
    v = build_model("tiny_vit", seed=5)
    e = EnsembleModel(k, v, selection_seed=9)
    x = np.random.default_rng(1).uniform(size=(64, 1, 16, 16))
    labels, choice = ensemble_predict(e, x)
    assert np.array_equal(labels, np.where(choice == MEMBER_K, predict(k, x), predict(v, x)))
    again, _ = ensemble_predict(e, x)
    assert np.array_equal(labels, again)


def test_ensemble_rejects_mismatched_members():
    with pytest.raises(ValueError):
        EnsembleModel(build_model("resnet_stem_cnn"), build_model("tiny_vit", image_size=8))


def test_checkpoint_round_trip(tmp_path):
    g = build_model("tiny_vit", seed=4)
    path = tmp_path / "vit.pzoo"
    save_checkpoint(g, path)
    params = load_checkpoint(build_model("tiny_vit", seed=99), path)
    assert params.keys() == g.params.keys()
    for i in params:
        assert np.array_equal(params[i], g.params[i])
    assert dump_params(g) == path.read_bytes()


def test_checkpoint_truncation_and_magic():
    blob = dump_params(build_model("mlp", seed=0))
    with pytest.raises(ValueError):
        parse_params(blob[:-3])
    with pytest.raises(ValueError):
        parse_params(b"NOPE" + blob[4:])
