"""Self-attention gradient attack on a CNN + ViT random-selection ensemble."""

from __future__ import annotations

import numpy as np

from ..autograd.ops import sign
from ..zoo import EnsembleModel, attention_rollout, attention_trace, rollout_image_map, selection_coins
from .config import AttackConfig
from .gradients import GradientOracle
from .methods import _Recorder, project


def attention_factor(view_or_graph, x):
    """phi_v: the rollout's class-token row mapped to pixels, times x."""
    meta = view_or_graph.meta
    r = attention_rollout(attention_trace(view_or_graph))
    return rollout_image_map(r, x.shape[1:], meta["stem"]["patch"]) * x


def blend_gradient(g_k, g_v, phi, alpha_k, alpha_v):
    return alpha_k * g_k + alpha_v * (phi * g_v)


def saga(
    ensemble: EnsembleModel, x0, y, cfg: AttackConfig, members=None, seed=0, coins=None, keep_iterates=False, sample_ids=None
):
    """Signed ascent on the blended gradient of both members.

    ``members`` gives the (CNN, ViT) handles the attacker holds: clear Graphs
    or AttackerViews for shielded members.  Success is judged against the
    member each sample's coin selects.
    """
    model_k, model_v = members or ensemble.members
    oracle_k = GradientOracle(model_k, seed=seed, sample_ids=sample_ids)
    oracle_v = GradientOracle(model_v, seed=seed + 1, sample_ids=sample_ids)
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y)
    if coins is None:
        coins = selection_coins(np.random.default_rng(ensemble.selection_seed), len(x0))
    rec = _Recorder(x0, keep_iterates)
    x = x0.copy()

    def chosen_loss(lk, lv):
        return np.where(coins == 0, lk, lv)

    for step in range(cfg.steps):
        qk = oracle_k.query(x, y)
        qv = oracle_v.query(x, y)
        phi = attention_factor(model_v, x)
        rec(step, x, chosen_loss(qk.loss, qv.loss))
        g = blend_gradient(qk.grad, qv.grad, phi, cfg.alpha_k, cfg.alpha_v)
        x = project(x + cfg.epsilon_step * sign(g), x0, cfg)

    zk, lk = oracle_k.evaluate(x, y)
    zv, lv = oracle_v.evaluate(x, y)
    pred = np.where(coins == 0, zk.argmax(axis=1), zv.argmax(axis=1))
    rec(cfg.steps, x, chosen_loss(lk, lv))
    res = rec.result(oracle_k, x, y, queries=oracle_k.queries + oracle_v.queries)
    res.success = pred != y
    return res
