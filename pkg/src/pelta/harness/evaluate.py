"""Robust-accuracy evaluation of clear and shielded models.

Individual models are attacked twice: with exact gradients on the clear graph
and through the AttackerView of the shielded graph.  The two-member ensemble
is attacked with SAGA under the four shield settings (no member, ViT only,
CNN only, both).  Robust accuracy is measured only on samples the models
classify correctly when clean.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..attacks import AttackConfig, GradientOracle, SINGLE_MODEL, saga
from ..shield import named_prefix, pelta_shield, select
from ..zoo import MEMBER_K, EnsembleModel, predict, selection_coins
from .data import Dataset

CLEAR, SHIELDED = "clear", "shielded"
INDIVIDUAL_SETTINGS = (CLEAR, SHIELDED)
ENSEMBLE_SETTINGS = ("none", "vit_only", "cnn_only", "both")
NO_ATTACK = "none"

FOOTER = (
    "Desk-scale run: toy models on small synthetic or CIFAR-10 images. Absolute numbers are not "
    "comparable to large pretrained models; only the direction and rough size of the shield effect "
    "carry over."
)


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class EvalReport:
    clean_accuracy: dict  # model -> accuracy on the evaluation pool
    cells: dict  # (model, attack, shield) -> robust accuracy
    sample_count: int
    seed: int
    runtime_s: float = 0.0
    notes: list = field(default_factory=list)

    def cell(self, model, attack, shield):
        return self.cells[(model, attack, shield)]


def shield_model(g):
    """Shield a zoo model at its declared stem; returns the AttackerView."""
    return pelta_shield(g, select(g, named_prefix(g.meta["shield"])))[1]


def clean_correct(models, ds: Dataset, n_samples, seed):
    """Indices (in a seeded random order) of the first n samples every model gets right."""
    order = np.random.default_rng(seed).permutation(len(ds))
    ok = np.ones(len(ds), dtype=bool)
    for g in models:
        ok &= predict(g, ds.images) == ds.labels
    picked = [int(i) for i in order if ok[i]][:n_samples]
    if len(picked) < n_samples:
        raise InsufficientSamplesError(f"only {len(picked)} clean-correct samples, {n_samples} requested")
    return np.array(picked, dtype=np.int64)


def _single(g, cfg, setting, x, y, idx, seed):
    model = g if setting == CLEAR else shield_model(g)
    oracle = GradientOracle(model, seed=seed, sample_ids=idx)
    return SINGLE_MODEL[cfg.kind](oracle, x, y, cfg, seed=seed)


def _members_for(ens: EnsembleModel, setting):
    k, v = ens.member_k, ens.member_v
    vk = shield_model(k) if setting in ("cnn_only", "both") else k
    vv = shield_model(v) if setting in ("vit_only", "both") else v
    return vk, vv


def evaluate(models, attacks, shield_configs=None, ds: Dataset = None, n_samples=500, seed=0, ensemble=None):
    """Fill one robust-accuracy cell per (model, attack, shield setting).

    ``models`` maps names to trained Graphs; ``attacks`` is a list of
    AttackConfig (``kind="saga"`` applies to the ensemble only, and a config
    named ``none`` stands for no attack).  ``ensemble`` is an optional
    EnsembleModel whose coin is flipped once per sample.
    """
    t0 = time.perf_counter()
    shield_configs = list(shield_configs or INDIVIDUAL_SETTINGS)
    cells, clean = {}, {}
    for name, g in models.items():
        clean[name] = float(np.mean(predict(g, ds.images) == ds.labels))
        idx = clean_correct([g], ds, n_samples, seed)
        x, y = ds.images[idx], ds.labels[idx]
        for cfg in attacks:
            if cfg == NO_ATTACK or cfg.kind == "saga":
                if cfg == NO_ATTACK:
                    for s in shield_configs:
                        cells[(name, NO_ATTACK, s)] = 1.0
                continue
            for s in shield_configs:
                res = _single(g, cfg, s, x, y, idx, seed)
                cells[(name, cfg.kind, s)] = 1.0 - res.success_rate

    if ensemble is not None:
        k, v = ensemble.member_k, ensemble.member_v
        coins_all = selection_coins(np.random.default_rng(ensemble.selection_seed), len(ds))
        pk, pv = predict(k, ds.images), predict(v, ds.images)
        clean["ensemble"] = float(np.mean(np.where(coins_all == MEMBER_K, pk, pv) == ds.labels))
        clean["ensemble.cnn"] = float(np.mean(pk == ds.labels))
        clean["ensemble.vit"] = float(np.mean(pv == ds.labels))
        idx = clean_correct([k, v], ds, n_samples, seed)
        x, y, coins = ds.images[idx], ds.labels[idx], coins_all[idx]
        for cfg in attacks:
            if cfg == NO_ATTACK:
                for s in ENSEMBLE_SETTINGS:
                    for m in ("ensemble", "ensemble.cnn", "ensemble.vit"):
                        cells[(m, NO_ATTACK, s)] = 1.0
                continue
            if cfg.kind not in ("saga", "random"):
                continue
            for s in ENSEMBLE_SETTINGS:
                mk, mv = _members_for(ensemble, s)
                if cfg.kind == "saga":
                    res = saga(ensemble, x, y, cfg, members=(mk, mv), seed=seed, coins=coins, sample_ids=idx)
                    x_adv = res.x_adv
                else:
                    rng = np.random.default_rng(seed)
                    x_adv = np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), cfg.clip_min, cfg.clip_max)
                ok_k = predict(k, x_adv) == y
                ok_v = predict(v, x_adv) == y
                cells[("ensemble", cfg.kind, s)] = float(np.mean(np.where(coins == MEMBER_K, ok_k, ok_v)))
                cells[("ensemble.cnn", cfg.kind, s)] = float(np.mean(ok_k))
                cells[("ensemble.vit", cfg.kind, s)] = float(np.mean(ok_v))

    return EvalReport(clean, cells, int(n_samples), int(seed), time.perf_counter() - t0)


def attack_configs(specs):
    """AttackConfig list from {name: params} (e.g. a config file's attack section)."""
    out = []
    for name, params in specs.items():
        if name == NO_ATTACK:
            out.append(NO_ATTACK)
            continue
        params = dict(params)
        params.setdefault("kind", name)
        out.append(AttackConfig.from_dict(params))
    return out
