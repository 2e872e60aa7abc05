"""In-process federated averaging with honest-but-curious compromised clients.

Each round the server broadcasts the global parameters, every client runs a
few SGD steps on its shard, and the server averages the client parameters.
A compromised client follows the protocol unchanged, but after its local
steps it also attacks its own local copy of the model (clear, or shielded
behind an enclave).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..attacks import SINGLE_MODEL, AttackConfig, GradientOracle
from ..zoo import build_model, predict
from .data import Dataset
from .evaluate import shield_model
from .train import sgd_step


@dataclass
class FLRoundConfig:
    n_clients: int = 4
    n_rounds: int = 3
    local_steps: int = 20
    learning_rate: float = 0.1
    compromised_indices: frozenset = frozenset({0})
    attack: AttackConfig = field(default_factory=lambda: AttackConfig("pgd", epsilon=0.1, epsilon_step=0.0125))
    shield_enabled: bool = False
    batch_size: int = 32
    seed: int = 0
    model: str = "resnet_stem_cnn"
    attack_samples: int = 200

    def __post_init__(self):
        self.compromised_indices = frozenset(int(i) for i in self.compromised_indices)
        if self.n_clients < 1 or self.n_rounds < 0 or self.local_steps < 0:
            raise ValueError("n_clients must be >= 1; n_rounds and local_steps >= 0")
        bad = [i for i in self.compromised_indices if not 0 <= i < self.n_clients]
        if bad:
            raise ValueError(f"compromised indices {bad} outside 0..{self.n_clients - 1}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class FLResult:
    global_params: list  # one parameter dict per round, after aggregation
    attacks: dict  # (round, client) -> AdvResult

    def success_rate(self):
        rates = [r.success_rate for r in self.attacks.values()]
        return float(np.mean(rates)) if rates else 0.0


def client_rng(seed, client):
    """Each client keeps one private batch stream for the whole simulation."""
    return np.random.default_rng([seed, client])


def fedavg(client_params):
    """Unweighted parameter-wise mean."""
    n = len(client_params)
    return {k: sum(p[k] for p in client_params) / n for k in client_params[0]}


def shards(ds: Dataset, n_clients):
    return [ds.subset(slice(c, None, n_clients), f"{ds.name}/client{c}") for c in range(n_clients)]


def _attack_local(g, cfg: FLRoundConfig, eval_ds: Dataset, seed):
    ok = np.flatnonzero(predict(g, eval_ds.images) == eval_ds.labels)[: cfg.attack_samples]
    x, y = eval_ds.images[ok], eval_ds.labels[ok]
    model = shield_model(g) if cfg.shield_enabled else g
    oracle = GradientOracle(model, seed=seed, sample_ids=ok)
    return SINGLE_MODEL[cfg.attack.kind](oracle, x, y, cfg.attack, seed=seed)


def run_fl_simulation(cfg: FLRoundConfig, ds: Dataset, eval_ds: Dataset | None = None, graph=None):
    """Returns the aggregated parameters of every round and the compromised
    clients' attack results keyed by (round, client)."""
    g = graph if graph is not None else build_model(cfg.model, seed=cfg.seed)
    eval_ds = ds if eval_ds is None else eval_ds
    trainable = [i for i in g.parameter_ids if g.node(i).attrs.get("trainable", True)]
    data = shards(ds, cfg.n_clients)
    rngs = [client_rng(cfg.seed, c) for c in range(cfg.n_clients)]
    global_params = {k: v.copy() for k, v in g.params.items()}
    history, attacks = [], {}
    for rnd in range(cfg.n_rounds):
        updates = []
        for c in range(cfg.n_clients):
            local = {k: v.copy() for k, v in global_params.items()}
            shard = data[c]
            for _ in range(cfg.local_steps):
                idx = rngs[c].choice(len(shard), size=min(cfg.batch_size, len(shard)), replace=False)
                sgd_step(g, local, shard.images[idx], shard.labels[idx], cfg.learning_rate)
            if c in cfg.compromised_indices:
                copy = g.copy()
                copy.params = local
                attacks[(rnd, c)] = _attack_local(copy, cfg, eval_ds, cfg.seed + rnd)
            updates.append(local)
        agg = fedavg([{k: u[k] for k in trainable} for u in updates])
        global_params = {**global_params, **agg}
        history.append({k: v.copy() for k, v in global_params.items()})
    return FLResult(history, attacks)
