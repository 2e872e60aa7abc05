"""White-box evasion attacks against clear or shielded models."""

from .config import ALIASES, KINDS, AdvResult, AttackConfig, linf_dist
from .gradients import BPDA, FULL, GradientOracle, GradientSource, Upsampler, input_gradient, source_for
from .methods import (
    apgd,
    apgd_checkpoints,
    cw,
    cw_margin,
    direction,
    fgsm,
    make_oracle,
    mim,
    mim_accumulator,
    pgd,
    project,
    random_uniform_attack,
)
from .saga import attention_factor, blend_gradient, saga

SINGLE_MODEL = {
    "fgsm": fgsm,
    "pgd": pgd,
    "mim": mim,
    "apgd": apgd,
    "cw": cw,
    "random": random_uniform_attack,
}


def run_attack(model, x0, y, cfg: AttackConfig, seed=0, keep_iterates=False):
    """Dispatch a single-model attack by ``cfg.kind``."""
    try:
        fn = SINGLE_MODEL[cfg.kind]
    except KeyError:
        raise ValueError(f"{cfg.kind!r} is not a single-model attack") from None
    return fn(model, x0, y, cfg, seed=seed, keep_iterates=keep_iterates)
