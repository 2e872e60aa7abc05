"""Desk-scale models whose stems mirror shielded production architectures."""

from .checkpoint import dump_params, load_checkpoint, parse_params, save_checkpoint
from .cnn import build_linear_classifier, build_mlp, build_resnet_stem_cnn, build_ws_cnn
from .ensemble import MEMBER_K, MEMBER_V, EnsembleModel, ensemble_predict, logits, predict, selection_coins
from .vit import (
    VIT_SHIELD,
    AttentionTrace,
    TinyViTSpec,
    attention_rollout,
    attention_trace,
    build_tiny_vit,
    rollout_image_map,
    vit_b16,
    vit_description,
    vit_l16,
)

BUILDERS = {
    "linear": build_linear_classifier,
    "mlp": build_mlp,
    "ws_cnn": build_ws_cnn,
    "resnet_stem_cnn": build_resnet_stem_cnn,
    "tiny_vit": lambda seed=0, **kw: build_tiny_vit(TinyViTSpec(**kw), seed),
}


def build_model(name, seed=0, **kwargs):
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(BUILDERS)}") from None
    return builder(seed=seed, **kwargs)
