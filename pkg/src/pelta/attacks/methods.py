"""Gradient-based evasion attacks on a single model, plus a random baseline.

All attacks are batched: ``x0`` has a leading sample axis and ``y`` holds one
label per sample.  The model is a clear Graph (exact gradients) or an
AttackerView (upsampled boundary adjoints); a prepared GradientOracle may be
passed instead to share query accounting.
"""

from __future__ import annotations

import numpy as np

from ..autograd.ops import sign
from .config import AdvResult, AttackConfig, linf_dist
from .gradients import GradientOracle

# APGD constants from the auto-PGD recipe
APGD_MOMENTUM = 0.75
TANH_SHRINK = 0.999999  # keeps arctanh finite at the pixel range ends


def make_oracle(model, src=None, seed=0):
    if isinstance(model, GradientOracle):
        return model
    return GradientOracle(model, src, seed)


def _per_sample(v, x):
    return v.reshape((len(x),) + (1,) * (x.ndim - 1))


def project(x, x0, cfg: AttackConfig):
    """Onto the epsilon ball around x0 (per sample), then onto the pixel range."""
    if cfg.norm == "linf":
        x = np.clip(x, x0 - cfg.epsilon, x0 + cfg.epsilon)
    else:
        d = x - x0
        n = np.sqrt((d.reshape(len(d), -1) ** 2).sum(axis=1))
        scale = np.minimum(1.0, cfg.epsilon / np.maximum(n, 1e-12))
        x = x0 + d * _per_sample(scale, d)
    return np.clip(x, cfg.clip_min, cfg.clip_max)


def direction(g, cfg: AttackConfig):
    """Steepest-ascent direction for the configured norm."""
    if cfg.norm == "linf":
        return sign(g)
    n = np.sqrt((g.reshape(len(g), -1) ** 2).sum(axis=1))
    return g / _per_sample(np.where(n > 0, n, 1.0), g)


class _Recorder:
    def __init__(self, x0, keep):
        self.x0 = x0
        self.trajectory = []
        self.iterates = [] if keep else None

    def __call__(self, step, x, loss):
        self.trajectory.append((step, np.array(loss), linf_dist(x, self.x0)))
        if self.iterates is not None:
            self.iterates.append(x.copy())

    def result(self, oracle, x_adv, y, queries=None):
        z, _ = oracle.evaluate(x_adv, y)
        return AdvResult(
            x_adv,
            z.argmax(axis=1) != y,
            oracle.queries if queries is None else queries,
            self.trajectory,
            self.iterates,
        )


def _start(x0, cfg, rng):
    if not cfg.random_start:
        return x0.copy()
    return project(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), x0, cfg)


def fgsm(model, x0, y, cfg: AttackConfig, src=None, seed=0, keep_iterates=False):
    """One signed-gradient step of size epsilon."""
    oracle = make_oracle(model, src, seed)
    x0 = np.asarray(x0, dtype=np.float64)
    rec = _Recorder(x0, keep_iterates)
    q = oracle.query(x0, y)
    rec(0, x0, q.loss)
    x = project(x0 + cfg.epsilon * direction(q.grad, cfg), x0, cfg)
    res = rec.result(oracle, x, y)
    rec(1, x, oracle.evaluate(x, y)[1])
    return res


def pgd(model, x0, y, cfg: AttackConfig, src=None, seed=0, keep_iterates=False):
    """Projected signed-gradient ascent, gradient taken at the current iterate."""
    return mim(model, x0, y, cfg.replace(mu=0.0), src, seed, keep_iterates, _plain=True)


def mim(model, x0, y, cfg: AttackConfig, src=None, seed=0, keep_iterates=False, _plain=False):
    """Momentum iterative method: accumulate L1-normalised gradients with decay mu."""
    oracle = make_oracle(model, src, seed)
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    rec = _Recorder(x0, keep_iterates)
    x = _start(x0, cfg, rng)
    acc = np.zeros_like(x0)
    for step in range(cfg.steps):
        q = oracle.query(x, y)
        rec(step, x, q.loss)
        if _plain:
            d = q.grad
        else:
            l1 = np.abs(q.grad).reshape(len(x), -1).sum(axis=1)
            acc = cfg.mu * acc + q.grad / _per_sample(np.where(l1 > 0, l1, 1.0), x)
            d = acc
        x = project(x + cfg.epsilon_step * direction(d, cfg), x0, cfg)
    res = rec.result(oracle, x, y)
    rec(cfg.steps, x, oracle.evaluate(x, y)[1])
    return res


def mim_accumulator(grads, mu):
    """The momentum recursion on its own, for a sequence of per-step gradients."""
    acc = np.zeros_like(grads[0])
    for g in grads:
        l1 = np.abs(g).reshape(len(g), -1).sum(axis=1)
        acc = mu * acc + g / _per_sample(np.where(l1 > 0, l1, 1.0), g)
    return acc


def apgd_checkpoints(n_iter):
    """Iterations at which the step size may be halved (0.22, 0.41, 0.57, ... of the run)."""
    p = [0.0, 0.22]
    while p[-1] < 1:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    return sorted({int(np.ceil(q * n_iter)) for q in p if q <= 1})


def apgd(model, x0, y, cfg: AttackConfig, src=None, seed=0, keep_iterates=False):
    """Auto-PGD with momentum, checkpointed step halving and restarts from the best point."""
    oracle = make_oracle(model, src, seed)
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    rec = _Recorder(x0, keep_iterates)
    budget = cfg.query_budget
    per_restart = max(budget // cfg.n_restarts, 1)
    best_x, best_loss = x0.copy(), np.full(len(x0), -np.inf)
    adv_x, fooled = x0.copy(), np.zeros(len(x0), dtype=bool)
    step_base = 0

    for restart in range(cfg.n_restarts):
        n_iter = min(cfg.steps, per_restart - 1, budget - oracle.queries - 1)
        if n_iter < 1:
            break
        x = _start(x0, cfg, rng) if (cfg.random_start or restart == 0) else project(
            x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), x0, cfg
        )
        checkpoints = set(apgd_checkpoints(n_iter)[1:])
        eta = np.full(len(x0), 2.0 * cfg.epsilon)

        def visit(k, x):
            q = oracle.query(x, y)
            rec(step_base + k, x, q.loss)
            wrong = q.logits.argmax(axis=1) != y
            new = wrong & ~fooled
            adv_x[new] = x[new]
            fooled[:] |= wrong
            return q

        q = visit(0, x)
        f_prev, g_cur = q.loss, q.grad
        x_max, f_max, g_max = x.copy(), q.loss.copy(), q.grad.copy()
        x_prev = x.copy()
        x_new = project(x + _per_sample(eta, x) * direction(g_cur, cfg), x0, cfg)
        increases = np.zeros(len(x0))
        last_ckpt, eta_at_ckpt, fmax_at_ckpt = 0, eta.copy(), f_max.copy()
        for k in range(1, n_iter + 1):
            q = visit(k, x_new)
            increases += q.loss > f_prev
            better = q.loss > f_max
            x_max[better], f_max[better], g_max[better] = x_new[better], q.loss[better], q.grad[better]
            x_prev, x, f_prev, g_cur = x, x_new, q.loss, q.grad
            if k == n_iter:
                break
            if k in checkpoints:
                span = k - last_ckpt
                cond_a = increases < cfg.rho * span
                cond_b = (eta == eta_at_ckpt) & (f_max == fmax_at_ckpt)
                halve = cond_a | cond_b
                eta_at_ckpt, fmax_at_ckpt = eta.copy(), f_max.copy()
                eta = np.where(halve, eta / 2.0, eta)
                x = np.where(_per_sample(halve, x), x_max, x)
                x_prev = np.where(_per_sample(halve, x), x_max, x_prev)
                g_cur = np.where(_per_sample(halve, x), g_max, g_cur)
                increases[:] = 0
                last_ckpt = k
            z = project(x + _per_sample(eta, x) * direction(g_cur, cfg), x0, cfg)
            a = APGD_MOMENTUM
            x_new = project(x + a * (z - x) + (1 - a) * (x - x_prev), x0, cfg)
        step_base += n_iter + 1
        improve = f_max > best_loss
        best_x[improve], best_loss[improve] = x_max[improve], f_max[improve]

    x_adv = np.where(_per_sample(fooled, x0), adv_x, best_x)
    res = rec.result(oracle, x_adv, y)
    res.best_loss = best_loss
    return res


def cw_margin(z, y):
    """Z_y - max_{j != y} Z_j per sample, and the runner-up class."""
    idx = np.arange(len(y))
    others = z.copy()
    others[idx, y] = -np.inf
    j = others.argmax(axis=1)
    return z[idx, y] - z[idx, j], j


def cw(model, x0, y, cfg: AttackConfig, src=None, seed=0, keep_iterates=False):
    """Carlini-Wagner style: minimise ||x - x0||^2 + c * max(margin, -confidence)
    over tanh-space variables by gradient descent.

    A step is accepted only if the objective does not increase; otherwise the
    step size for that sample halves.  Iterates are also kept inside the
    epsilon ball so every attack honours the same perturbation budget.
    """
    oracle = make_oracle(model, src, seed)
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y)
    rec = _Recorder(x0, keep_iterates)
    kappa, c = cfg.confidence, cfg.cw_c
    bounded = np.isfinite(cfg.epsilon)

    def to_x(w):
        x = (np.tanh(w) + 1.0) / 2.0
        return project(x, x0, cfg) if bounded else np.clip(x, cfg.clip_min, cfg.clip_max)

    def objective(x, z):
        margin, _ = cw_margin(z, y)
        dist = ((x - x0).reshape(len(x), -1) ** 2).sum(axis=1)
        return dist + c * np.maximum(margin, -kappa), margin <= 0

    def evaluate(w):
        x = to_x(w)

        def cot(z):
            margin, j = cw_margin(z, y)
            active = (margin > -kappa).astype(np.float64) * c
            g = np.zeros_like(z)
            idx = np.arange(len(y))
            g[idx, y] += active
            g[idx, j] -= active
            return g

        q = oracle.query(x, y, cotangent=cot)
        obj, fooled = objective(x, q.logits)
        gx = 2.0 * (x - x0) + q.grad
        gw = gx * (1.0 - np.tanh(w) ** 2) / 2.0
        return x, obj, fooled, gw

    # the untouched input is the first candidate (distance exactly zero)
    z0, _ = oracle.evaluate(x0, y)
    best_obj, best_fooled = objective(x0, z0)
    best_x = x0.copy()

    def consider(x, obj, fooled):
        take = (fooled & ~best_fooled) | ((fooled == best_fooled) & (obj < best_obj))
        best_x[take], best_obj[take], best_fooled[take] = x[take], obj[take], fooled[take]

    w = np.arctanh((2.0 * x0 - 1.0) * TANH_SHRINK)
    x, obj, fooled, gw = evaluate(w)
    rec(0, x, obj)
    consider(x, obj, fooled)
    lr = np.full(len(x0), cfg.epsilon_step)
    for step in range(1, cfg.steps + 1):
        w_c = w - _per_sample(lr, w) * gw
        x_c, obj_c, fooled_c, gw_c = evaluate(w_c)
        consider(x_c, obj_c, fooled_c)
        accept = obj_c <= obj
        m = _per_sample(accept, w)
        w, x, gw = np.where(m, w_c, w), np.where(m, x_c, x), np.where(m, gw_c, gw)
        obj = np.where(accept, obj_c, obj)
        lr = np.where(accept, lr, lr / 2.0)
        rec(step, x, obj)
    return rec.result(oracle, best_x, y)


def random_uniform_attack(model, x0, y, cfg: AttackConfig, src=None, seed=0, keep_iterates=False):
    """Uniform noise in the l-inf ball: the no-gradient baseline (one model query)."""
    oracle = make_oracle(model, src, seed)
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    rec = _Recorder(x0, keep_iterates)
    x = np.clip(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), cfg.clip_min, cfg.clip_max)
    res = rec.result(oracle, x, y, queries=1)
    rec(0, x, oracle.evaluate(x, y)[1])
    return res
