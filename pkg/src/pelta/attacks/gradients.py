"""Input gradients for attacks: exact on clear models, upsampled adjoints on shielded ones.

On a shielded model the attacker only receives the adjoint at the shield
frontier.  The backward pass through the hidden stem is replaced by a
transposed convolution with the stem's geometry and a random-uniform kernel
drawn once per attack run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autograd import Graph, backprop, backward, forward
from ..shield import AttackerView

FULL = "full_whitebox"
BPDA = "shielded_bpda"


@dataclass
class GradientSource:
    """How gradients are obtained.  ``upsampler`` may override the stem geometry
    (``kernel``, ``stride``, ``padding``) or supply a fixed ``weights`` array."""

    mode: str = FULL
    upsampler: dict | None = None

    def __post_init__(self):
        if self.mode not in (FULL, BPDA):
            raise ValueError(f"unknown gradient mode {self.mode!r}")


def source_for(model):
    return GradientSource(BPDA if isinstance(model, AttackerView) else FULL)


@dataclass
class Query:
    grad: np.ndarray  # d objective / dx, input shaped
    loss: np.ndarray  # per-sample cross-entropy
    logits: np.ndarray


def _fit(u, shape):
    """Crop or zero-pad the trailing spatial axes of ``u`` to ``shape``."""
    out = np.zeros((u.shape[0],) + tuple(shape))
    sl = tuple(slice(0, min(a, b)) for a, b in zip(u.shape[1:], shape))
    out[(slice(None),) + sl] = u[(slice(None),) + sl]
    return out


def _per_sample_transposed_conv(x, w, stride, padding):
    """Transposed convolution where sample b uses its own kernel w[b] (Cin, Cout, k, k)."""
    b, _, h, wd = x.shape
    k = w.shape[-1]
    full = ((h - 1) * stride + k, (wd - 1) * stride + k)
    out = np.zeros((b, w.shape[2]) + full)
    for ky in range(k):
        for kx in range(k):
            tap = np.einsum("bihw,bio->bohw", x, w[:, :, :, ky, kx])
            out[:, :, ky : ky + stride * (h - 1) + 1 : stride, kx : kx + stride * (wd - 1) + 1 : stride] += tap
    if padding:
        out = out[:, :, padding : full[0] - padding, padding : full[1] - padding]
    return out


class Upsampler:
    """Transposed-convolution stand-in for the backward pass of a hidden stem.

    Kernels are drawn uniform(-a, a), a = sqrt(1/fan_in), once per attack run.
    A run is one sample under one seed, so sample ``i`` gets its kernel from
    the stream ``(seed, i)``; a fixed ``weights`` override is shared by all.
    """

    def __init__(self, stem, adjoint_shape, input_shape, seed=0, override=None):
        stem = dict(stem)
        stem.update({k: v for k, v in (override or {}).items() if k != "weights"})
        self.layout = stem["layout"]
        self.input_shape = tuple(input_shape)
        self.adjoint_shape = tuple(adjoint_shape)
        self.seed = seed
        if self.layout == "conv":
            k, c_out = stem["kernel"], self.adjoint_shape[0]
            self.stride, self.padding = stem.get("stride", 1), stem.get("padding", 0)
            self.wshape = (c_out, self.input_shape[0], k, k)
            fan_in = c_out * k * k
        elif self.layout == "patch":
            p, d = stem["patch"], self.adjoint_shape[1]
            self.stride, self.padding = p, 0
            self.grid = tuple(stem.get("grid") or (self.input_shape[1] // p, self.input_shape[2] // p))
            self.wshape = (d, self.input_shape[0], p, p)
            fan_in = d * p * p
        elif self.layout == "dense":
            self.wshape = (int(np.prod(self.adjoint_shape)), int(np.prod(self.input_shape)))
            fan_in = self.wshape[0]
        else:
            raise ValueError(f"unknown stem layout {self.layout!r}")
        self.bound = np.sqrt(1.0 / fan_in)
        self.shared = None
        if override and "weights" in override:
            self.shared = np.asarray(override["weights"], dtype=np.float64)
            if self.shared.shape != self.wshape:
                raise ValueError(f"upsampler weights {self.shared.shape} != expected {self.wshape}")
        self._cache = {}

    def kernel(self, sample_id):
        """The kernel of the run for one sample."""
        if self.shared is not None:
            return self.shared
        if sample_id not in self._cache:
            rng = np.random.default_rng([self.seed, int(sample_id)])
            self._cache[sample_id] = rng.uniform(-self.bound, self.bound, size=self.wshape)
        return self._cache[sample_id]

    def __call__(self, delta, sample_ids=None):
        if delta.shape[1:] != self.adjoint_shape:
            raise ValueError(f"adjoint shape {delta.shape[1:]} != upsampler input {self.adjoint_shape}")
        b = len(delta)
        ids = range(b) if sample_ids is None else sample_ids
        w = np.stack([self.kernel(i) for i in ids])
        if self.layout == "dense":
            return np.einsum("bi,bio->bo", delta.reshape(b, -1), w).reshape((b,) + self.input_shape)
        if self.layout == "patch":
            tokens = delta[:, 1:, :] if delta.shape[1] == self.grid[0] * self.grid[1] + 1 else delta
            delta = tokens.transpose(0, 2, 1).reshape((b, -1) + self.grid)
        up = _per_sample_transposed_conv(delta, w, self.stride, self.padding)
        return _fit(up, self.input_shape)


class GradientOracle:
    """One attack's gradient access to a model (Graph or AttackerView).

    ``queries`` counts gradient calls exactly.  ``sample_ids`` names the
    samples in the batch so per-sample randomness is independent of batching.
    """

    def __init__(self, model, src: GradientSource | None = None, seed=0, sample_ids=None):
        self.model = model
        self.src = src or source_for(model)
        self.queries = 0
        self.sample_ids = None if sample_ids is None else list(sample_ids)
        self.view = model if isinstance(model, AttackerView) else None
        meta = model.meta
        if self.src.mode == FULL:
            if self.view is not None:
                raise TypeError("full white-box gradients need the clear Graph, not an AttackerView")
            g = model
            self._logits = g.id_of(meta.get("logits", "logits"))
            self._loss = g.loss
            self.input_shape = g.node(g.input).shape
            self.upsampler = None
        else:
            if self.view is None:
                raise TypeError("BPDA gradients go through an AttackerView")
            if len(self.view.frontier) != 1:
                raise ValueError("BPDA needs a single frontier node")
            (self._frontier,) = self.view.frontier
            topo = {nd["id"]: nd for nd in self.view.topology["nodes"]}
            self._logits = self.view.id_of(meta.get("logits", "logits"))
            self._loss = self.view.topology["loss"]
            x_id = next(i for i, nd in topo.items() if nd["kind"] == "Input")
            self.input_shape = tuple(topo[x_id]["shape"])
            self.upsampler = Upsampler(
                meta["stem"], topo[self._frontier]["shape"], self.input_shape, seed, self.src.upsampler
            )

    @property
    def meta(self):
        return self.model.meta

    def _forward(self, x, y):
        if self.view is not None:
            self.view.run(x, y, backward=False)
            return self.view.value(self._logits), self.view.node_cache(self._loss, "per_sample")
        values = forward(self.model, x, None, y)
        return values[self._logits], self.model.cache[self._loss]["per_sample"]

    def evaluate(self, x, y=None):
        """Forward only: (logits, per-sample loss).  Not a gradient query."""
        x = np.asarray(x, dtype=np.float64)
        y = np.zeros(len(x), dtype=np.int64) if y is None else y
        z, loss = self._forward(x, y)
        return z.copy(), loss.copy()

    def query(self, x, y, cotangent=None):
        """Gradient of the summed per-sample loss (or of a logit objective: pass
        ``cotangent(logits) -> dObjective/dlogits``) with respect to the input."""
        x = np.asarray(x, dtype=np.float64)
        self.queries += 1
        z, loss = self._forward(x, y)
        z, loss = z.copy(), loss.copy()
        if self.view is not None:
            if cotangent is None:
                delta = self.view.pullback(self._loss, 1.0)[self._frontier]
            else:
                delta = self.view.pullback(self._logits, cotangent(z))[self._frontier]
            if self.sample_ids is not None and len(self.sample_ids) != len(x):
                raise ValueError("sample_ids do not match the batch")
            grad = self.upsampler(delta, self.sample_ids)
        elif cotangent is None:
            grad = backward(self.model).grad_wrt_input
        else:
            g = self.model
            g.adjoints = backprop(g, {self._logits: cotangent(z)})
            grad = g.adjoints[g.input]
        return Query(np.array(grad, dtype=np.float64), loss, z)


def input_gradient(src: GradientSource, model, x, y, seed=0):
    """One-off input gradient (exact or BPDA-upsampled)."""
    return GradientOracle(model, src, seed).query(x, y).grad
