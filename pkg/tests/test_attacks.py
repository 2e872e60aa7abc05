import numpy as np
import pytest

from pelta.attacks import (
    BPDA,
    AttackConfig,
    GradientOracle,
    GradientSource,
    Upsampler,
    apgd,
    apgd_checkpoints,
    attention_factor,
    blend_gradient,
    cw,
    fgsm,
    mim,
    mim_accumulator,
    pgd,
    random_uniform_attack,
    run_attack,
    saga,
)
from pelta.autograd import GraphBuilder, backward, forward
from pelta.harness import clean_correct, shield_model
from pelta.zoo import EnsembleModel, build_model, predict

EPS = 0.1


@pytest.fixture(scope="module")
def batch(trained_cnn, data):
    test = data[1]
    idx = clean_correct([trained_cnn], test, 40, seed=0)
    return test.images[idx], test.labels[idx], idx


def cfg(kind, **kw):
    base = dict(epsilon=EPS, epsilon_step=EPS / 8, steps=10)
    base.update(kw)
    return AttackConfig(kind, **base)


def test_config_aliases_and_validation():
    c = AttackConfig.from_dict({"name": "apgd", "ε": 0.05, "ρ": 0.6, "N_restarts": 2, "n²_queries": 100})
    assert (c.kind, c.epsilon, c.rho, c.n_restarts, c.query_budget) == ("apgd", 0.05, 0.6, 2, 100)
    assert AttackConfig.from_dict({"name": "saga", "α_k": 0.3}).alpha_v == pytest.approx(0.7)
    for bad in ({"kind": "nope"}, {"epsilon": -1}, {"steps": 0}, {"rho": 1.0}, {"alpha_k": 0.5, "alpha_v": 0.6}):
        with pytest.raises(ValueError):
            AttackConfig(**bad)
    with pytest.raises(ValueError):
        AttackConfig.from_dict({"unknown": 1})


def test_pgd_single_full_step_is_fgsm(trained_cnn, batch):
    x, y, _ = batch
    a = pgd(trained_cnn, x, y, cfg("pgd", steps=1, epsilon_step=EPS))
    b = fgsm(trained_cnn, x, y, cfg("fgsm"))
    assert np.array_equal(a.x_adv, b.x_adv)


def test_mim_without_momentum_is_pgd(trained_cnn, batch):
    x, y, _ = batch
    a = mim(trained_cnn, x, y, cfg("mim", mu=0.0))
    b = pgd(trained_cnn, x, y, cfg("pgd"))
    assert np.array_equal(a.x_adv, b.x_adv)


def test_saga_with_full_cnn_weight_is_signed_cnn_step(trained_cnn, trained_vit, batch):
    x, y, _ = batch
    ens = EnsembleModel(trained_cnn, trained_vit, 0)
    a = saga(ens, x, y, cfg("saga", alpha_k=1.0))
    b = pgd(trained_cnn, x, y, cfg("pgd"))
    assert np.array_equal(a.x_adv, b.x_adv)


@pytest.mark.parametrize("kind", ["fgsm", "pgd", "mim", "apgd", "cw", "random"])
def test_every_iterate_stays_in_the_ball(trained_cnn, batch, kind):
    x, y, _ = batch
    res = run_attack(trained_cnn, x, y, cfg(kind, query_budget=40), keep_iterates=True)
    for it in res.iterates + [res.x_adv]:
        assert np.abs(it - x).max() <= EPS + 1e-9
        assert it.min() >= 0.0 and it.max() <= 1.0


def test_query_counts(trained_cnn, batch):
    x, y, _ = batch
    assert fgsm(trained_cnn, x, y, cfg("fgsm")).queries_used == 1
    assert pgd(trained_cnn, x, y, cfg("pgd", steps=7)).queries_used == 7
    assert mim(trained_cnn, x, y, cfg("mim", steps=5)).queries_used == 5
    assert random_uniform_attack(trained_cnn, x, y, cfg("random")).queries_used == 1
    assert apgd(trained_cnn, x, y, cfg("apgd", steps=100, query_budget=30)).queries_used <= 30
    assert cw(trained_cnn, x, y, cfg("cw", steps=6)).queries_used == 7


def test_mim_accumulator_matches_straight_line_recursion():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(3, 2, 4)) for _ in range(5)]
    mu = 0.9
    for k in range(3):
        acc = np.zeros((2, 4))
        for g in grads:
            acc = mu * acc + g[k] / np.sum(np.abs(g[k]))
        assert np.allclose(mim_accumulator(grads, mu)[k], acc, atol=1e-15)


def test_mim_follows_the_accumulated_sign(trained_cnn, batch):
    x, y, _ = batch
    c = cfg("mim", steps=3, mu=1.0)
    res = mim(trained_cnn, x, y, c, keep_iterates=True)
    grads, xi = [], x.copy()
    for step in range(3):
        forward(trained_cnn, res.iterates[step], None, y)
        grads.append(backward(trained_cnn).grad_wrt_input)
        xi = np.clip(np.clip(xi + c.epsilon_step * np.sign(mim_accumulator(grads, 1.0)), x - EPS, x + EPS), 0, 1)
        assert np.array_equal(xi, res.iterates[step + 1])


def test_apgd_checkpoints():
    cps = apgd_checkpoints(100)
    assert cps[:3] == [0, 22, 41]
    assert all(b > a for a, b in zip(cps, cps[1:]))
    assert cps[-1] <= 100


def test_apgd_best_loss_never_below_start(trained_cnn, batch):
    x, y, _ = batch
    forward(trained_cnn, x, None, y)
    start = trained_cnn.cache[trained_cnn.loss]["per_sample"].copy()
    res = apgd(trained_cnn, x, y, cfg("apgd", steps=20, n_restarts=2, query_budget=100))
    assert np.all(res.best_loss >= start)


def test_apgd_matches_or_beats_pgd(trained_cnn, data):
    test = data[1]
    idx = clean_correct([trained_cnn], test, 200, seed=0)
    x, y = test.images[idx], test.labels[idx]
    c = AttackConfig("apgd", steps=20, query_budget=20)  # default budget, step size and radius
    a = apgd(trained_cnn, x, y, c)
    p = pgd(trained_cnn, x, y, c.replace(kind="pgd"))
    assert a.queries_used == p.queries_used == 20
    assert np.mean(a.best_loss >= p.trajectory[-1][1]) >= 0.8


def test_cw_objective_is_monotone(trained_cnn, batch):
    x, y, _ = batch
    res = cw(trained_cnn, x, y, cfg("cw", steps=15, epsilon_step=0.05))
    objs = np.array([o for _, o, _ in res.trajectory])
    assert np.all(np.diff(objs, axis=0) <= 1e-12)


def test_cw_with_zero_weight_stays_home(trained_cnn, batch):
    x, y, _ = batch
    res = cw(trained_cnn, x, y, cfg("cw", cw_c=0.0, steps=5))
    assert np.array_equal(res.x_adv, x)
    assert not res.success.any()


def test_cw_on_misclassified_input_reports_success(trained_cnn, data):
    test = data[1]
    wrong = np.flatnonzero(predict(trained_cnn, test.images) != test.labels)[:3]
    if len(wrong) == 0:
        x = test.images[:3]
        y = 1 - predict(trained_cnn, x)  # labels the model disagrees with
    else:
        x, y = test.images[wrong], test.labels[wrong]
    res = cw(trained_cnn, x, y, cfg("cw", steps=3))
    assert res.success.all()


def test_fgsm_beats_random_noise(trained_cnn, batch):
    x, y, _ = batch
    assert fgsm(trained_cnn, x, y, cfg("fgsm")).success_rate > random_uniform_attack(trained_cnn, x, y, cfg("random")).success_rate


def _unit_conv_model():
    b = GraphBuilder()
    x = b.input((1, 6, 6))
    h = b.op("Conv2d", x, b.param((1, 1, 1, 1), "stem_w", fan_in=1), label="stem_conv")
    flat = b.op("Reshape", b.op("ReLU", h), shape=[36])
    z = b.op("MatMul", flat, b.param((36, 2), "head_w"), label="logits")
    loss = b.op("CrossEntropyLoss", z, label="loss", reduction="sum")
    meta = {
        "name": "unit",
        "logits": "logits",
        "n_classes": 2,
        "shield": ["stem_conv"],
        "stem": {"layout": "conv", "kernel": 1, "stride": 1, "padding": 0},
    }
    g = b.build(loss=loss, meta=meta, seed=0)
    g.params[g.id_of("stem_w")] = np.ones((1, 1, 1, 1))
    return g


def test_identity_kernel_bpda_recovers_exact_gradient():
    g = _unit_conv_model()
    x = np.random.default_rng(0).uniform(size=(3, 1, 6, 6))
    y = np.array([0, 1, 0])
    forward(g, x, None, y)
    exact = backward(g).grad_wrt_input.copy()
    view = shield_model(g)
    src = GradientSource(BPDA, {"weights": np.ones((1, 1, 1, 1))})
    approx = GradientOracle(view, src).query(x, y).grad
    assert np.array_equal(approx, exact)


def test_upsampler_identity_layouts():
    d = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
    up = Upsampler({"layout": "conv", "kernel": 1}, (3, 4, 4), (3, 4, 4), override={"weights": np.eye(3).reshape(3, 3, 1, 1)})
    assert np.array_equal(up(d), d)
    dense = Upsampler({"layout": "dense"}, (5,), (5,), override={"weights": np.eye(5)})
    v = np.arange(10.0).reshape(2, 5)
    assert np.array_equal(dense(v), v)


def test_upsampler_kernels_are_per_sample_and_reproducible():
    up = Upsampler({"layout": "conv", "kernel": 3, "stride": 1, "padding": 1}, (8, 16, 16), (1, 16, 16), seed=4)
    again = Upsampler({"layout": "conv", "kernel": 3, "stride": 1, "padding": 1}, (8, 16, 16), (1, 16, 16), seed=4)
    assert np.array_equal(up.kernel(7), again.kernel(7))
    assert not np.array_equal(up.kernel(7), up.kernel(8))
    assert np.abs(up.kernel(0)).max() <= np.sqrt(1.0 / (8 * 9))
    d = np.random.default_rng(0).normal(size=(2, 8, 16, 16))
    both = up(d, [7, 8])
    assert np.array_equal(both[1:], up(d[1:], [8]))


@pytest.mark.parametrize("name", ["mlp", "ws_cnn", "resnet_stem_cnn", "tiny_vit"])
def test_bpda_gradient_has_input_shape(name):
    g = build_model(name, seed=0)
    x = np.random.default_rng(0).uniform(size=(2, 1, 16, 16))
    grad = GradientOracle(shield_model(g), seed=3).query(x, np.array([0, 1])).grad
    assert grad.shape == x.shape
    assert np.all(np.isfinite(grad)) and np.abs(grad).sum() > 0


def test_full_gradient_refuses_view_and_bpda_refuses_graph():
    g = build_model("mlp", seed=0)
    with pytest.raises(TypeError):
        GradientOracle(shield_model(g), GradientSource())
    with pytest.raises(TypeError):
        GradientOracle(g, GradientSource(BPDA))


def test_shielded_attack_makes_no_masked_reads(trained_cnn, batch):
    x, y, idx = batch
    view = shield_model(trained_cnn)
    for kind in ("fgsm", "pgd", "mim", "apgd", "cw", "random"):
        run_attack(GradientOracle(view, sample_ids=idx), x, y, cfg(kind, steps=3, query_budget=10))
    assert view.denied == []


def test_blend_gradient_formula():
    rng = np.random.default_rng(0)
    gk, gv, phi = (rng.normal(size=(2, 1, 4, 4)) for _ in range(3))
    assert np.array_equal(blend_gradient(gk, gv, phi, 0.3, 0.7), 0.3 * gk + 0.7 * (phi * gv))


def test_attention_factor_matches_manual_rollout(trained_vit):
    x = np.random.default_rng(2).uniform(size=(2, 1, 16, 16))
    forward(trained_vit, x, None, np.zeros(2, dtype=int))
    phi = attention_factor(trained_vit, x)
    labels = trained_vit.meta["attention"][0]
    a = sum(0.5 * trained_vit.cache[trained_vit.id_of(lbl)]["attention"] + 0.5 * np.eye(17) for lbl in labels)
    row = a[:, 0, 1:].reshape(2, 4, 4)
    expect = np.kron(row, np.ones((4, 4)))[:, None] * x
    assert np.allclose(phi, expect, atol=1e-14)


def test_zero_radius_returns_input(trained_cnn, batch):
    x, y, _ = batch
    assert np.array_equal(fgsm(trained_cnn, x, y, cfg("fgsm", epsilon=0.0)).x_adv, x)
    assert np.array_equal(pgd(trained_cnn, x, y, cfg("pgd", epsilon=0.0)).x_adv, x)


def test_fgsm_moves_every_interior_pixel_by_epsilon():
    b = GraphBuilder()
    x = b.input((4,))
    z = b.op("MatMul", x, b.param((4, 2), "w"), label="logits")
    g = b.build(loss=b.op("CrossEntropyLoss", z, reduction="sum"), meta={"logits": "logits", "n_classes": 2})
    # class 0 loses score as every pixel grows: the loss gradient is all positive
    g.params = {g.id_of("w"): np.array([[-1.0, 1.0]] * 4)}
    x0 = np.full((1, 4), 0.5)
    res = fgsm(g, x0, np.array([0]), AttackConfig("fgsm"))
    assert np.array_equal(res.x_adv, x0 + 0.031)


def _constant_model():
    b = GraphBuilder()
    x = b.input((1, 4, 4))
    flat = b.op("ScalarMul", b.op("Reshape", x, shape=[16]), scale=0.0)
    z = b.op("Add", b.op("MatMul", flat, b.param((16, 2), "w")), b.param((2,), "b", fan_in=1), label="logits")
    g = b.build(loss=b.op("CrossEntropyLoss", z, reduction="sum"), meta={"logits": "logits", "n_classes": 2}, seed=0)
    g.params[g.id_of("b")] = np.array([1.0, 0.0])
    return g


def test_apgd_on_zero_gradient_model_keeps_input():
    g = _constant_model()
    x = np.random.default_rng(0).uniform(size=(4, 1, 4, 4))
    res = apgd(g, x, np.zeros(4, dtype=int), cfg("apgd", steps=10))
    assert np.array_equal(res.x_adv, x)
    assert not res.success.any()


def test_small_steps_increase_the_loss(trained_cnn, data):
    test = data[1]
    idx = clean_correct([trained_cnn], test, 100, seed=1)
    x, y = test.images[idx], test.labels[idx]
    res = pgd(trained_cnn, x, y, cfg("pgd", epsilon_step=1e-3, steps=10))
    first, last = res.trajectory[0][1], res.trajectory[-1][1]
    assert np.mean(last >= first) >= 0.95


def test_cw_monotone_on_mlp(data):
    g = build_model("mlp", seed=0)
    x = data[1].images[:20]
    y = data[1].labels[:20]
    res = cw(g, x, y, cfg("cw", steps=30, epsilon_step=0.00155))
    objs = np.array([o for _, o, _ in res.trajectory])
    assert np.all(np.diff(objs, axis=0) <= 0)
