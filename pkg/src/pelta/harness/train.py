"""Plain SGD on the summed cross-entropy, averaged over the minibatch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autograd import Graph, NumericalError, backward, forward
from ..zoo import predict
from .data import Dataset


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class TrainResult:
    params: dict
    train_accuracy: float
    losses: list


def trainable_ids(g: Graph):
    return [i for i in g.parameter_ids if g.node(i).attrs.get("trainable", True)]


def sgd_step(g: Graph, params, x, y, lr):
    """One SGD step in place on ``params``; returns the mean loss before the step."""
    try:
        values = forward(g, x, params, y)
    except NumericalError as err:
        raise TrainingDiverged(str(err)) from None
    loss = float(values[g.loss])
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss}")
    adj = backward(g).adjoints
    scale = lr / len(x) if g.node(g.loss).attrs.get("reduction", "sum") == "sum" else lr
    for i in trainable_ids(g):
        params[i] = params[i] - scale * adj[i]
    return loss / len(x)


def accuracy(g: Graph, ds: Dataset, params=None, batch=500):
    saved = g.params
    if params is not None:
        g.params = params
    try:
        hits = 0
        for s in range(0, len(ds), batch):
            hits += int((predict(g, ds.images[s : s + batch]) == ds.labels[s : s + batch]).sum())
    finally:
        g.params = saved
    return hits / max(len(ds), 1)


def train_toy(g: Graph, ds: Dataset, steps=200, lr=0.1, seed=0, batch_size=32, params=None):
    """Minibatch SGD with batches drawn from a seeded stream.  ``g.params`` is left
    untouched; the trained values are returned."""
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in (g.params if params is None else params).items()}
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(ds), size=min(batch_size, len(ds)), replace=False)
        losses.append(sgd_step(g, params, ds.images[idx], ds.labels[idx], lr))
    return TrainResult(params, accuracy(g, ds, params), losses)
