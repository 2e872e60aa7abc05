"""Two-member random-selection ensemble and plain prediction helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autograd import Graph, forward

MEMBER_K = 0  # convolutional member
MEMBER_V = 1  # attention member


def logits(g: Graph, x):
    """Forward pass returning the logits; labels are irrelevant so zeros are fed."""
    x = np.asarray(x, dtype=np.float64)
    values = forward(g, x, None, np.zeros(len(x), dtype=np.int64))
    return values[g.id_of(g.meta.get("logits", "logits"))]


def predict(g: Graph, x):
    return logits(g, x).argmax(axis=1)


@dataclass
class EnsembleModel:
    member_k: Graph
    member_v: Graph
    selection_seed: int = 0

    def __post_init__(self):
        sk = self.member_k.node(self.member_k.input).shape
        sv = self.member_v.node(self.member_v.input).shape
        if sk != sv:
            raise ValueError(f"ensemble members disagree on input shape: {sk} vs {sv}")
        if self.member_k.meta.get("n_classes") != self.member_v.meta.get("n_classes"):
            raise ValueError("ensemble members disagree on the number of classes")

    @property
    def members(self):
        return (self.member_k, self.member_v)


def selection_coins(rng, n):
    """One fair coin per sample: MEMBER_K or MEMBER_V."""
    return (rng.random(n) >= 0.5).astype(np.int64)


def ensemble_predict(e: EnsembleModel, x, rng_state=None):
    """Label each sample with a uniformly chosen member; returns (labels, choices)."""
    rng = np.random.default_rng(e.selection_seed if rng_state is None else rng_state)
    x = np.asarray(x, dtype=np.float64)
    choice = selection_coins(rng, len(x))
    pk, pv = predict(e.member_k, x), predict(e.member_v, x)
    return np.where(choice == MEMBER_K, pk, pv), choice
