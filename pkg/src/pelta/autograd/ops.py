"""Forward functions and vector-jacobian products for every supported node kind.

Batched nodes carry a leading batch axis at run time that is not part of their
static shape.  Parameters are never batched.  Each op exposes three hooks:

``infer(specs, attrs)``
    static shape inference; ``specs`` is a list of ``(shape, batched)`` pairs.
``forward(xs, attrs, batched, cache, ctx)``
    evaluate the node; ``cache`` is private scratch space kept for ``vjp``.
``vjp(g, xs, out, attrs, batched, cache)``
    return one cotangent per parent (``None`` when not differentiable).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAF_KINDS = ("Input", "Parameter")

WS_EPS = 1e-10
LN_EPS = 1e-5
BN_EPS = 1e-5


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def sign(x):
    """Elementwise sign with sign(0) == 0."""
    return np.sign(x)


def _norm_axis(axis, rank):
    if axis < 0:
        axis += rank
    if not 0 <= axis < rank:
        raise ValueError(f"axis {axis} out of range for rank {rank}")
    return axis


# ---------------------------------------------------------------- convolution helpers


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_out(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def _windows(xp, kh, kw, s):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::s, ::s]


def _conv(x, w, s, p):
    """Cross-correlation of x (B,C,H,W) with w (O,C,kh,kw)."""
    win = _windows(_pad(x, p), w.shape[2], w.shape[3], s)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2)


def _scatter_taps(g, w, s, full_shape):
    """Adjoint of ``_conv`` w.r.t. its padded input: scatter g (B,O,Ho,Wo) through w."""
    out = np.zeros(full_shape)
    ho, wo = g.shape[2], g.shape[3]
    for i in range(w.shape[2]):
        for j in range(w.shape[3]):
            tap = np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            out[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += tap
    return out


def _conv_grads(g, x, w, s, p):
    xp = _pad(x, p)
    gxp = _scatter_taps(g, w, s, xp.shape)
    h, wd = x.shape[2], x.shape[3]
    gx = gxp[:, :, p : p + h, p : p + wd]
    win = _windows(xp, w.shape[2], w.shape[3], s)
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    return gx, gw


def _standardize(w):
    flat = w.reshape(w.shape[0], -1)
    mu = flat.mean(axis=1, keepdims=True)
    var = flat.var(axis=1, keepdims=True)
    std = np.sqrt(np.maximum(var, WS_EPS))
    return ((flat - mu) / std).reshape(w.shape), (flat, mu, var, std)


def _standardize_vjp(g_hat, parts, shape):
    flat, mu, var, std = parts
    g = g_hat.reshape(shape[0], -1)
    w_hat = (flat - mu) / std
    # below the variance floor the denominator is a constant
    live = var >= WS_EPS
    g_flat = (g - g.mean(axis=1, keepdims=True) - live * w_hat * (g * w_hat).mean(axis=1, keepdims=True)) / std
    return g_flat.reshape(shape)


# ---------------------------------------------------------------- op definitions


class Op:
    kind = ""
    arity = (1, 1)

    def infer(self, specs, attrs):
        raise NotImplementedError

    def forward(self, xs, attrs, batched, cache, ctx):
        raise NotImplementedError

    def vjp(self, g, xs, out, attrs, batched, cache):
        raise NotImplementedError


class MatMul(Op):
    kind = "MatMul"
    arity = (2, 2)

    def infer(self, specs, attrs):
        (a, ab), (w, wb) = specs
        if wb:
            raise ValueError("right operand of MatMul must be a parameter-like (unbatched) tensor")
        if len(w) != 2 or len(a) < 1:
            raise ValueError(f"MatMul expects (..., k) @ (k, m), got {a} @ {w}")
        if a[-1] != w[0]:
            raise ValueError(f"MatMul inner dimensions differ: {a} @ {w}")
        return a[:-1] + (w[1],), ab

    def forward(self, xs, attrs, batched, cache, ctx):
        return xs[0] @ xs[1]

    def vjp(self, g, xs, out, attrs, batched, cache):
        a, w = xs
        ga = g @ w.T
        gw = a.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return [ga, gw]


class _Broadcast(Op):
    arity = (2, 2)

    def infer(self, specs, attrs):
        (s1, b1), (s2, b2) = specs
        if b1 and b2 and len(s1) != len(s2):
            raise ValueError(f"batched operands must share rank, got {s1} and {s2}")
        if b1 != b2:
            per, flat = (s1, s2) if b1 else (s2, s1)
            if len(flat) > len(per):
                raise ValueError(f"unbatched operand {flat} outranks batched operand {per}")
        try:
            shape = np.broadcast_shapes(s1, s2)
        except ValueError as exc:
            raise ValueError(f"shapes {s1} and {s2} do not broadcast") from exc
        return tuple(shape), b1 or b2


class Add(_Broadcast):
    kind = "Add"

    def forward(self, xs, attrs, batched, cache, ctx):
        return xs[0] + xs[1]

    def vjp(self, g, xs, out, attrs, batched, cache):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


class PositionAdd(Add):
    kind = "PositionAdd"


class ElementwiseMul(_Broadcast):
    kind = "ElementwiseMul"

    def forward(self, xs, attrs, batched, cache, ctx):
        return xs[0] * xs[1]

    def vjp(self, g, xs, out, attrs, batched, cache):
        a, b = xs
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


class ScalarMul(Op):
    kind = "ScalarMul"

    def infer(self, specs, attrs):
        if "scale" not in attrs:
            raise ValueError("ScalarMul needs a 'scale' attribute")
        return specs[0]

    def forward(self, xs, attrs, batched, cache, ctx):
        return attrs["scale"] * xs[0]

    def vjp(self, g, xs, out, attrs, batched, cache):
        return [attrs["scale"] * g]


class ReLU(Op):
    kind = "ReLU"

    def infer(self, specs, attrs):
        return specs[0]

    def forward(self, xs, attrs, batched, cache, ctx):
        return np.maximum(xs[0], 0.0)

    def vjp(self, g, xs, out, attrs, batched, cache):
        return [g * (xs[0] > 0)]


class Softmax(Op):
    kind = "Softmax"

    def infer(self, specs, attrs):
        if len(specs[0][0]) < 1:
            raise ValueError("Softmax needs at least one axis")
        return specs[0]

    def forward(self, xs, attrs, batched, cache, ctx):
        z = xs[0] - xs[0].max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def vjp(self, g, xs, out, attrs, batched, cache):
        return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


class LayerNorm(Op):
    kind = "LayerNorm"
    arity = (3, 3)

    def infer(self, specs, attrs):
        (x, xb), (gm, gb), (bt, bb) = specs
        if gb or bb:
            raise ValueError("LayerNorm affine parameters must be unbatched")
        if len(x) < 1 or gm != (x[-1],) or bt != (x[-1],):
            raise ValueError(f"LayerNorm over last axis of {x} needs gamma/beta of shape ({x[-1] if x else '?'},)")
        return x, xb

    def forward(self, xs, attrs, batched, cache, ctx):
        x, gamma, beta = xs
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        xhat = (x - mu) * inv
        cache["xhat"], cache["inv"] = xhat, inv
        return gamma * xhat + beta

    def vjp(self, g, xs, out, attrs, batched, cache):
        xhat, inv = cache["xhat"], cache["inv"]
        gamma = xs[1]
        gx_hat = g * gamma
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return [gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)]


class BatchNorm(Op):
    """Inference-mode batch normalisation over the channel axis (per-sample axis 0)."""

    kind = "BatchNorm"
    arity = (5, 5)

    def infer(self, specs, attrs):
        (x, xb) = specs[0]
        if not xb or len(x) < 1:
            raise ValueError("BatchNorm expects a batched input with a channel axis")
        for s, b in specs[1:]:
            if b or s != (x[0],):
                raise ValueError(f"BatchNorm statistics must have shape ({x[0]},), got {s}")
        return x, xb

    @staticmethod
    def _expand(v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, xs, attrs, batched, cache, ctx):
        x, gamma, beta, mean, var = xs
        nd = x.ndim
        inv = 1.0 / np.sqrt(var + BN_EPS)
        cache["inv"] = inv
        return self._expand(gamma * inv, nd) * (x - self._expand(mean, nd)) + self._expand(beta, nd)

    def vjp(self, g, xs, out, attrs, batched, cache):
        x, gamma, beta, mean, var = xs
        nd = x.ndim
        inv = cache["inv"]
        axes = (0,) + tuple(range(2, nd))
        centered = x - self._expand(mean, nd)
        gx = g * self._expand(gamma * inv, nd)
        g_gamma = (g * centered).sum(axis=axes) * inv
        g_beta = g.sum(axis=axes)
        g_mean = -g.sum(axis=axes) * gamma * inv
        g_var = (g * centered).sum(axis=axes) * gamma * (-0.5) * inv**3
        return [gx, g_gamma, g_beta, g_mean, g_var]


class Conv2d(Op):
    kind = "Conv2d"
    arity = (2, 3)

    def infer(self, specs, attrs):
        (x, xb), (w, wb) = specs[:2]
        s, p = attrs.get("stride", 1), attrs.get("padding", 0)
        if not xb or len(x) != 3:
            raise ValueError(f"{self.kind} expects a batched (C,H,W) input, got {x}")
        if wb or len(w) != 4 or w[1] != x[0]:
            raise ValueError(f"{self.kind} kernel {w} incompatible with input {x}")
        if len(specs) == 3 and (specs[2][1] or specs[2][0] != (w[0],)):
            raise ValueError(f"{self.kind} bias must have shape ({w[0]},)")
        ho, wo = _conv_out(x[1], w[2], s, p), _conv_out(x[2], w[3], s, p)
        if ho < 1 or wo < 1:
            raise ValueError(f"{self.kind} output would be empty for input {x}")
        return (w[0], ho, wo), True

    def _kernel(self, w, cache):
        return w

    def forward(self, xs, attrs, batched, cache, ctx):
        x, w = xs[0], self._kernel(xs[1], cache)
        out = _conv(x, w, attrs.get("stride", 1), attrs.get("padding", 0))
        if len(xs) == 3:
            out = out + xs[2].reshape(1, -1, 1, 1)
        return out

    def _kernel_vjp(self, gw, w, cache):
        return gw

    def vjp(self, g, xs, out, attrs, batched, cache):
        x, w = xs[0], self._kernel(xs[1], cache)
        gx, gw = _conv_grads(g, x, w, attrs.get("stride", 1), attrs.get("padding", 0))
        grads = [gx, self._kernel_vjp(gw, xs[1], cache)]
        if len(xs) == 3:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads


class WeightStandardizedConv2d(Conv2d):
    """Convolution whose kernel is standardised per output channel before use."""

    kind = "WeightStandardizedConv2d"

    def _kernel(self, w, cache):
        if "w_hat" not in cache:
            cache["w_hat"], cache["ws_parts"] = _standardize(w)
        return cache["w_hat"]

    def _kernel_vjp(self, gw, w, cache):
        return _standardize_vjp(gw, cache["ws_parts"], w.shape)


class TransposedConv2d(Op):
    kind = "TransposedConv2d"
    arity = (2, 3)

    def infer(self, specs, attrs):
        (x, xb), (w, wb) = specs[:2]
        s, p = attrs.get("stride", 1), attrs.get("padding", 0)
        if not xb or len(x) != 3:
            raise ValueError(f"TransposedConv2d expects a batched (C,H,W) input, got {x}")
        if wb or len(w) != 4 or w[0] != x[0]:
            raise ValueError(f"TransposedConv2d kernel {w} incompatible with input {x}")
        if len(specs) == 3 and (specs[2][1] or specs[2][0] != (w[1],)):
            raise ValueError(f"TransposedConv2d bias must have shape ({w[1]},)")
        ho = (x[1] - 1) * s - 2 * p + w[2]
        wo = (x[2] - 1) * s - 2 * p + w[3]
        if ho < 1 or wo < 1:
            raise ValueError("TransposedConv2d output would be empty")
        return (w[1], ho, wo), True

    def forward(self, xs, attrs, batched, cache, ctx):
        out = transposed_conv2d(xs[0], xs[1], attrs.get("stride", 1), attrs.get("padding", 0))
        if len(xs) == 3:
            out = out + xs[2].reshape(1, -1, 1, 1)
        return out

    def vjp(self, g, xs, out, attrs, batched, cache):
        x, w = xs[0], xs[1]
        s, p = attrs.get("stride", 1), attrs.get("padding", 0)
        gp = _pad(g, p)
        # the kernel is indexed (Cin, Cout, kh, kw); as a forward conv on g it maps Cout -> Cin
        gx = _conv(gp, w, s, 0)[:, :, : x.shape[2], : x.shape[3]]
        win = _windows(gp, w.shape[2], w.shape[3], s)[:, :, : x.shape[2], : x.shape[3]]
        gw = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx, gw]
        if len(xs) == 3:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads


def transposed_conv2d(x, w, stride=1, padding=0):
    """Transposed convolution of x (B,Cin,H,W) with w (Cin,Cout,kh,kw)."""
    b, _, h, wd = x.shape
    full = ((h - 1) * stride + w.shape[2], (wd - 1) * stride + w.shape[3])
    out = _scatter_taps(x, w, stride, (b, w.shape[1]) + full)
    if padding:
        out = out[:, :, padding : full[0] - padding, padding : full[1] - padding]
    return out


class MaxPool(Op):
    kind = "MaxPool"

    def infer(self, specs, attrs):
        (x, xb) = specs[0]
        k = attrs.get("kernel", 2)
        s = attrs.get("stride", k)
        if not xb or len(x) != 3:
            raise ValueError(f"MaxPool expects a batched (C,H,W) input, got {x}")
        ho, wo = _conv_out(x[1], k, s, 0), _conv_out(x[2], k, s, 0)
        if ho < 1 or wo < 1:
            raise ValueError("MaxPool output would be empty")
        return (x[0], ho, wo), True

    def forward(self, xs, attrs, batched, cache, ctx):
        k = attrs.get("kernel", 2)
        s = attrs.get("stride", k)
        win = _windows(xs[0], k, k, s)
        flat = win.reshape(win.shape[:4] + (k * k,))
        idx = flat.argmax(axis=-1)
        cache["idx"] = idx
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(self, g, xs, out, attrs, batched, cache):
        k = attrs.get("kernel", 2)
        s = attrs.get("stride", k)
        idx = cache["idx"]
        b, c, ho, wo = idx.shape
        gx = np.zeros_like(xs[0])
        bi, ci, hi, wi = np.indices((b, c, ho, wo), sparse=False)
        rows = hi * s + idx // k
        cols = wi * s + idx % k
        np.add.at(gx, (bi, ci, rows, cols), g)
        return [gx]


class Mean(Op):
    kind = "Mean"

    def infer(self, specs, attrs):
        shape, b = specs[0]
        axis = attrs.get("axis")
        if axis is None:
            return (), False
        axis = _norm_axis(axis, len(shape))
        return shape[:axis] + shape[axis + 1 :], b

    def _rt_axis(self, attrs, batched, ndim):
        axis = attrs["axis"]
        rank = ndim - 1 if batched[0] else ndim
        axis = _norm_axis(axis, rank)
        return axis + 1 if batched[0] else axis

    def forward(self, xs, attrs, batched, cache, ctx):
        if attrs.get("axis") is None:
            return np.asarray(xs[0].mean())
        return xs[0].mean(axis=self._rt_axis(attrs, batched, xs[0].ndim))

    def vjp(self, g, xs, out, attrs, batched, cache):
        x = xs[0]
        if attrs.get("axis") is None:
            return [np.full(x.shape, float(g) / x.size)]
        axis = self._rt_axis(attrs, batched, x.ndim)
        return [np.broadcast_to(np.expand_dims(g, axis), x.shape) / x.shape[axis]]


class CrossEntropyLoss(Op):
    """Softmax cross-entropy on logits, fused through a log-sum-exp shift."""

    kind = "CrossEntropyLoss"

    def infer(self, specs, attrs):
        shape, b = specs[0]
        if not b or len(shape) != 1:
            raise ValueError(f"CrossEntropyLoss expects batched logits (K,), got {shape}")
        if attrs.get("reduction", "sum") not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")
        return (), False

    def forward(self, xs, attrs, batched, cache, ctx):
        z = xs[0]
        y = ctx.get("labels")
        if y is None:
            raise ValueError("CrossEntropyLoss needs labels")
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (z.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match batch {z.shape[0]}")
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
        lse = m[:, 0] + np.log(e.sum(axis=1))
        per = lse - z[np.arange(len(y)), y]
        cache["probs"] = e / e.sum(axis=1, keepdims=True)
        cache["labels"] = y
        cache["per_sample"] = per
        total = per.sum()
        if attrs.get("reduction", "sum") == "mean":
            total = total / len(y)
        return np.asarray(total)

    def vjp(self, g, xs, out, attrs, batched, cache):
        p, y = cache["probs"], cache["labels"]
        gz = p.copy()
        gz[np.arange(len(y)), y] -= 1.0
        scale = float(g)
        if attrs.get("reduction", "sum") == "mean":
            scale /= len(y)
        return [gz * scale]


class PatchEmbed(Op):
    """Split (C,H,W) images into non-overlapping patches and project them: (N, D)."""

    kind = "PatchEmbed"
    arity = (2, 3)

    def infer(self, specs, attrs):
        (x, xb), (e, eb) = specs[:2]
        p = attrs.get("patch")
        if not p:
            raise ValueError("PatchEmbed needs a 'patch' attribute")
        if not xb or len(x) != 3 or x[1] % p or x[2] % p:
            raise ValueError(f"PatchEmbed input {x} not divisible into {p}x{p} patches")
        if eb or len(e) != 2 or e[0] != x[0] * p * p:
            raise ValueError(f"PatchEmbed projection {e} expects {x[0] * p * p} rows")
        if len(specs) == 3 and (specs[2][1] or specs[2][0] != (e[1],)):
            raise ValueError(f"PatchEmbed bias must have shape ({e[1]},)")
        return ((x[1] // p) * (x[2] // p), e[1]), True

    @staticmethod
    def patchify(x, p):
        b, c, h, w = x.shape
        t = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
        return t.reshape(b, (h // p) * (w // p), c * p * p)

    @staticmethod
    def unpatchify(t, shape, p):
        b, c, h, w = shape
        t = t.reshape(b, h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2, 5)
        return t.reshape(shape)

    def forward(self, xs, attrs, batched, cache, ctx):
        patches = self.patchify(xs[0], attrs["patch"])
        cache["patches"] = patches
        out = patches @ xs[1]
        if len(xs) == 3:
            out = out + xs[2]
        return out

    def vjp(self, g, xs, out, attrs, batched, cache):
        e = xs[1]
        patches = cache["patches"]
        gx = self.unpatchify(g @ e.T, xs[0].shape, attrs["patch"])
        ge = patches.reshape(-1, e.shape[0]).T @ g.reshape(-1, e.shape[1])
        grads = [gx, ge]
        if len(xs) == 3:
            grads.append(g.sum(axis=(0, 1)))
        return grads


class Concat(Op):
    """Concatenate along a per-sample axis; unbatched parents are tiled over the batch."""

    kind = "Concat"
    arity = (1, 64)

    def infer(self, specs, attrs):
        batched = any(b for _, b in specs)
        rank = len(specs[0][0])
        axis = _norm_axis(attrs.get("axis", 0), rank)
        total = 0
        for shape, _ in specs:
            if len(shape) != rank:
                raise ValueError(f"Concat operands differ in rank: {[s for s, _ in specs]}")
            rest = shape[:axis] + shape[axis + 1 :]
            if rest != specs[0][0][:axis] + specs[0][0][axis + 1 :]:
                raise ValueError(f"Concat operands differ off-axis: {[s for s, _ in specs]}")
            total += shape[axis]
        out = list(specs[0][0])
        out[axis] = total
        return tuple(out), batched

    def forward(self, xs, attrs, batched, cache, ctx):
        out_batched = any(batched)
        rank = xs[0].ndim - (1 if batched[0] else 0)
        axis = _norm_axis(attrs.get("axis", 0), rank)
        if not out_batched:
            return np.concatenate(xs, axis=axis)
        bsz = next(x.shape[0] for x, b in zip(xs, batched) if b)
        parts = [x if b else np.broadcast_to(x, (bsz,) + x.shape) for x, b in zip(xs, batched)]
        return np.concatenate(parts, axis=axis + 1)

    def vjp(self, g, xs, out, attrs, batched, cache):
        out_batched = any(batched)
        rank = g.ndim - (1 if out_batched else 0)
        axis = _norm_axis(attrs.get("axis", 0), rank) + (1 if out_batched else 0)
        sizes = [x.shape[axis - (1 if out_batched and not b else 0)] for x, b in zip(xs, batched)]
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return [pc if (b or not out_batched) else pc.sum(axis=0) for pc, b in zip(pieces, batched)]


class Reshape(Op):
    kind = "Reshape"

    def infer(self, specs, attrs):
        shape, b = specs[0]
        target = list(attrs.get("shape", shape))
        size = math.prod(shape)
        if target.count(-1) > 1:
            raise ValueError("Reshape allows at most one -1")
        if -1 in target:
            known = math.prod(d for d in target if d != -1)
            if known == 0 or size % known:
                raise ValueError(f"cannot reshape {shape} to {attrs['shape']}")
            target[target.index(-1)] = size // known
        if math.prod(target) != size:
            raise ValueError(f"cannot reshape {shape} to {tuple(target)}")
        attrs["shape"] = list(target)
        return tuple(target), b

    def forward(self, xs, attrs, batched, cache, ctx):
        lead = (xs[0].shape[0],) if batched[0] else ()
        return xs[0].reshape(lead + tuple(attrs["shape"]))

    def vjp(self, g, xs, out, attrs, batched, cache):
        return [g.reshape(xs[0].shape)]


class Select(Op):
    """Pick one index along a per-sample axis, dropping that axis."""

    kind = "Select"

    def infer(self, specs, attrs):
        shape, b = specs[0]
        axis = _norm_axis(attrs.get("axis", 0), len(shape))
        index = attrs.get("index", 0)
        if not -shape[axis] <= index < shape[axis]:
            raise ValueError(f"Select index {index} out of range for {shape}")
        return shape[:axis] + shape[axis + 1 :], b

    def _rt_axis(self, attrs, batched, ndim):
        rank = ndim - (1 if batched[0] else 0)
        return _norm_axis(attrs.get("axis", 0), rank) + (1 if batched[0] else 0)

    def forward(self, xs, attrs, batched, cache, ctx):
        return np.take(xs[0], attrs.get("index", 0), axis=self._rt_axis(attrs, batched, xs[0].ndim))

    def vjp(self, g, xs, out, attrs, batched, cache):
        axis = self._rt_axis(attrs, batched, xs[0].ndim)
        gx = np.zeros_like(xs[0])
        idx = [slice(None)] * gx.ndim
        idx[axis] = attrs.get("index", 0)
        gx[tuple(idx)] = g
        return [gx]


class AttentionHead(Op):
    """One scaled dot-product self-attention head on (T, D) tokens -> (T, dh).

    The softmax attention matrix is kept in the node cache as ``attention``.
    """

    kind = "AttentionHead"
    arity = (4, 4)

    def infer(self, specs, attrs):
        (h, hb) = specs[0]
        if not hb or len(h) != 2:
            raise ValueError(f"AttentionHead expects batched (T, D) tokens, got {h}")
        dh = None
        for s, b in specs[1:]:
            if b or len(s) != 2 or s[0] != h[1]:
                raise ValueError(f"AttentionHead projection {s} incompatible with tokens {h}")
            if dh is not None and s[1] != dh:
                raise ValueError("AttentionHead projections must share head width")
            dh = s[1]
        return (h[0], dh), True

    def forward(self, xs, attrs, batched, cache, ctx):
        h, wq, wk, wv = xs
        q, k, v = h @ wq, h @ wk, h @ wv
        scale = 1.0 / math.sqrt(wq.shape[1])
        s = (q @ k.transpose(0, 2, 1)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=-1, keepdims=True)
        cache.update(q=q, k=k, v=v, attention=a, scale=scale)
        return a @ v

    def vjp(self, g, xs, out, attrs, batched, cache):
        h, wq, wk, wv = xs
        q, k, v, a, scale = cache["q"], cache["k"], cache["v"], cache["attention"], cache["scale"]
        ga = g @ v.transpose(0, 2, 1)
        gv = a.transpose(0, 2, 1) @ g
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k
        gk = gs.transpose(0, 2, 1) @ q
        gh = gq @ wq.T + gk @ wk.T + gv @ wv.T
        d = h.shape[-1]
        hf = h.reshape(-1, d)
        return [
            gh,
            hf.T @ gq.reshape(-1, gq.shape[-1]),
            hf.T @ gk.reshape(-1, gk.shape[-1]),
            hf.T @ gv.reshape(-1, gv.shape[-1]),
        ]


OPS = {
    cls.kind: cls()
    for cls in (
        MatMul,
        Add,
        PositionAdd,
        ElementwiseMul,
        ScalarMul,
        ReLU,
        Softmax,
        LayerNorm,
        BatchNorm,
        Conv2d,
        WeightStandardizedConv2d,
        TransposedConv2d,
        MaxPool,
        Mean,
        CrossEntropyLoss,
        PatchEmbed,
        Concat,
        Reshape,
        Select,
        AttentionHead,
    )
}

ALL_KINDS = LEAF_KINDS + tuple(OPS)
