"""Vision transformer builder, attention traces and attention rollout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autograd import GraphBuilder

VIT_SHIELD = ["patch_embed", "concat_cls", "pos_add"]


@dataclass(frozen=True)
class TinyViTSpec:
    image_size: int = 16
    patch_size: int = 4
    embed_dim: int = 16
    n_heads: int = 2
    n_blocks: int = 1
    n_classes: int = 2
    channels: int = 1
    mlp_dim: int | None = None  # defaults to 2 * embed_dim

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "n_heads", "n_blocks", "n_classes", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_tokens(self):
        return self.grid**2 + 1


def _vit_graph(spec: TinyViTSpec, name, seed):
    b = GraphBuilder()
    c, p, d, t = spec.channels, spec.patch_size, spec.embed_dim, spec.n_tokens
    dh = d // spec.n_heads
    mlp = spec.mlp_dim or 2 * d
    x = b.input((c, spec.image_size, spec.image_size))
    e = b.param((c * p * p, d), "E", fan_in=c * p * p)
    cls = b.param((1, d), "x_class", fan_in=d)
    pos = b.param((t, d), "E_pos", fan_in=d)
    h = b.op("PatchEmbed", x, e, label="patch_embed", patch=p)
    h = b.op("Concat", cls, h, label="concat_cls", axis=0)
    h = b.op("PositionAdd", h, pos, label="pos_add")

    heads_by_block = []
    for blk in range(spec.n_blocks):
        pre = f"b{blk}_"
        ln = b.op(
            "LayerNorm",
            h,
            b.param((d,), pre + "ln1_g", init="ones"),
            b.param((d,), pre + "ln1_b", init="zeros", role="bias"),
            label=pre + "ln1",
        )
        heads = []
        for k in range(spec.n_heads):
            w = [b.param((d, dh), f"{pre}h{k}_{m}", fan_in=d) for m in ("wq", "wk", "wv")]
            heads.append(b.op("AttentionHead", ln, *w, label=f"{pre}head{k}"))
        heads_by_block.append([f"{pre}head{k}" for k in range(spec.n_heads)])
        cat = b.op("Concat", *heads, label=pre + "heads", axis=1) if len(heads) > 1 else heads[0]
        att = b.op("MatMul", cat, b.param((d, d), pre + "wo"), label=pre + "proj")
        att = b.op("Add", att, b.param((d,), pre + "bo", fan_in=d, role="bias"))
        h = b.op("Add", h, att, label=pre + "res1")
        ln = b.op(
            "LayerNorm",
            h,
            b.param((d,), pre + "ln2_g", init="ones"),
            b.param((d,), pre + "ln2_b", init="zeros", role="bias"),
            label=pre + "ln2",
        )
        m = b.op("MatMul", ln, b.param((d, mlp), pre + "fc1_w"))
        m = b.op("ReLU", b.op("Add", m, b.param((mlp,), pre + "fc1_b", fan_in=d, role="bias")))
        m = b.op("MatMul", m, b.param((mlp, d), pre + "fc2_w"))
        m = b.op("Add", m, b.param((d,), pre + "fc2_b", fan_in=mlp, role="bias"))
        h = b.op("Add", h, m, label=pre + "res2")

    z = b.op("Select", h, label="cls_token", axis=0, index=0)
    z = b.op(
        "LayerNorm",
        z,
        b.param((d,), "ln_f_g", init="ones"),
        b.param((d,), "ln_f_b", init="zeros", role="bias"),
        label="ln_f",
    )
    w = b.param((d, spec.n_classes), "head_w")
    bias = b.param((spec.n_classes,), "head_b", fan_in=d, role="bias")
    logits = b.op("Add", b.op("MatMul", z, w, label="head"), bias, label="logits")
    loss = b.op("CrossEntropyLoss", logits, label="loss", reduction="sum")
    meta = {
        "name": name,
        "logits": "logits",
        "n_classes": spec.n_classes,
        "shield": list(VIT_SHIELD),
        "attention": heads_by_block,
        "stem": {"layout": "patch", "patch": p, "channels_in": c, "grid": [spec.grid, spec.grid]},
    }
    return b.build(loss, meta, seed)


def build_tiny_vit(spec: TinyViTSpec = TinyViTSpec(), seed=0):
    """Patch embedding -> class token -> position embedding -> pre-norm blocks -> head.

    The patch projection carries no bias, so the embedded sequence is exactly
    ``[x_class; patches @ E] + E_pos``.
    """
    return _vit_graph(spec, "tiny_vit", seed)


def vit_description(image_size=224, patch_size=16, embed_dim=1024, n_heads=16, n_blocks=24, mlp_dim=4096, n_classes=1000, channels=3, name="vit_l16"):
    """Shape-only graph of a full-size ViT (no parameter values are drawn)."""
    spec = TinyViTSpec(image_size, patch_size, embed_dim, n_heads, n_blocks, n_classes, channels, mlp_dim)
    return _vit_graph(spec, name, None)


def vit_l16():
    return vit_description()


def vit_b16():
    return vit_description(embed_dim=768, n_heads=12, n_blocks=12, mlp_dim=3072, name="vit_b16")


# ---------------------------------------------------------------- attention


@dataclass
class AttentionTrace:
    """weights[block][head] is a row-stochastic (batch, T, T) attention matrix."""

    weights: list

    @property
    def n_tokens(self):
        return self.weights[0][0].shape[-1]


def attention_trace(source):
    """Collect attention matrices from the last forward of a Graph or AttackerView."""
    g = source if hasattr(source, "cache") else None
    meta = source.meta
    blocks = meta.get("attention")
    if not blocks:
        raise ValueError("model has no attention blocks")
    weights = []
    for labels in blocks:
        row = []
        for lbl in labels:
            if g is not None:
                if g.cache is None:
                    raise RuntimeError("run a forward pass before reading attention")
                row.append(g.cache[g.id_of(lbl)]["attention"])
            else:
                row.append(source.node_cache(source.id_of(lbl), "attention"))
        weights.append(row)
    return AttentionTrace(weights)


def attention_rollout(trace: AttentionTrace):
    """prod over blocks of sum over heads of (0.5 W + 0.5 I), block 1 applied first.

    Heads are summed without renormalising.  Works on (T, T) or batched
    (B, T, T) matrices.
    """
    if not trace.weights or not trace.weights[0]:
        raise ValueError("empty attention trace")
    t = trace.n_tokens
    eye = np.eye(t)
    out = None
    for heads in trace.weights:
        mixed = sum(0.5 * w + 0.5 * eye for w in heads)
        out = mixed if out is None else mixed @ out
    return out


def rollout_image_map(rollout, image_shape, patch):
    """Class-token row over patch tokens, upsampled to (B, C, H, W) pixel space."""
    c, hgt, wid = image_shape
    row = rollout[..., 0, 1:]
    grid = row.reshape(row.shape[:-1] + (hgt // patch, wid // patch))
    up = np.repeat(np.repeat(grid, patch, axis=-2), patch, axis=-1)
    return np.broadcast_to(up[..., None, :, :], up.shape[:-2] + (c, hgt, wid))
