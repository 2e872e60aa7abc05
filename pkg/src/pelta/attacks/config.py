"""Attack configuration and results."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields

import numpy as np

KINDS = ("fgsm", "pgd", "mim", "apgd", "cw", "saga", "random")

# Alternative spellings accepted when loading configs, e.g. straight from the
# attack-parameter tables ("ε_step", "N_restarts", "n2_queries", ...).
ALIASES = {
    "ε": "epsilon",
    "eps": "epsilon",
    "ε_step": "epsilon_step",
    "eps_step": "epsilon_step",
    "step": "epsilon_step",
    "μ": "mu",
    "ρ": "rho",
    "N_restarts": "n_restarts",
    "restarts": "n_restarts",
    "n_queries": "query_budget",
    "n2_queries": "query_budget",
    "n²_queries": "query_budget",
    "queries": "query_budget",
    "κ": "confidence",
    "kappa": "confidence",
    "c": "cw_c",
    "α_k": "alpha_k",
    "α_2": "alpha_k",
    "alpha_2": "alpha_k",
    "α_v": "alpha_v",
    "name": "kind",
}


@dataclass
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.031
    epsilon_step: float = 0.00155
    steps: int = 20
    mu: float = 1.0
    rho: float = 0.75
    n_restarts: int = 1
    query_budget: int = 5000
    confidence: float = 50.0
    cw_c: float = 1.0
    alpha_k: float = 0.5
    alpha_v: float | None = None
    norm: str = "linf"
    random_start: bool = False
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; choose from {KINDS}")
        if self.alpha_v is None:
            self.alpha_v = 1.0 - self.alpha_k
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if abs(self.alpha_k + self.alpha_v - 1.0) > 1e-12:
            raise ValueError("alpha_k + alpha_v must equal 1")
        if not self.clip_min < self.clip_max:
            raise ValueError("clip_min must be below clip_max")
        if self.norm not in ("linf", "l2"):
            raise ValueError("norm must be 'linf' or 'l2'")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")

    @classmethod
    def from_dict(cls, d, **overrides):
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, val in {**d, **overrides}.items():
            name = ALIASES.get(key, key)
            if name not in known:
                raise ValueError(f"unknown attack parameter {key!r}")
            kw[name] = val
        return cls(**kw)

    def replace(self, **kw):
        d = asdict(self)
        if "alpha_k" in kw and "alpha_v" not in kw:
            d["alpha_v"] = None
        d.update(kw)
        return AttackConfig(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class AdvResult:
    """Outcome of one batched attack run.

    ``trajectory`` holds one (step, per-sample loss, per-sample distance)
    record per iterate; ``iterates`` keeps the iterates themselves when asked.
    """

    x_adv: np.ndarray
    success: np.ndarray
    queries_used: int
    trajectory: list = field(default_factory=list)
    iterates: list | None = None
    best_loss: np.ndarray | None = None  # highest per-sample loss reached (APGD)

    @property
    def success_rate(self):
        return float(np.mean(self.success)) if len(self.success) else 0.0

    def write_trajectory_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "sample", "loss", "linf_dist"])
            for step, loss, dist in self.trajectory:
                for k, (lv, dv) in enumerate(zip(loss, dist)):
                    w.writerow([step, k, repr(float(lv)), repr(float(dv))])


def linf_dist(x, x0):
    return np.abs(x - x0).reshape(len(x), -1).max(axis=1)
