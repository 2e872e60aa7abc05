"""Small dense and convolutional classifiers with shieldable stems.

Every builder returns a Graph with seeded parameters and a ``meta`` block:

``name``      model identifier
``logits``    label of the logits node
``n_classes`` number of classes
``shield``    labels of the stem transforms to mask (a named prefix)
``stem``      geometry the attacker uses to upsample the boundary adjoint
"""

from __future__ import annotations

from ..autograd import GraphBuilder


def _head(b, h, in_features, n_classes, loss_reduction="sum"):
    w = b.param((in_features, n_classes), "head_w")
    bias = b.param((n_classes,), "head_b", fan_in=in_features, role="bias")
    logits = b.op("Add", b.op("MatMul", h, w, label="head"), bias, label="logits")
    return b.op("CrossEntropyLoss", logits, label="loss", reduction=loss_reduction)


def build_linear_classifier(n_features=4, n_classes=2, seed=0):
    """x -> xW -> softmax cross-entropy: the smallest shieldable model."""
    b = GraphBuilder()
    x = b.input((n_features,))
    w = b.param((n_features, n_classes), "W")
    logits = b.op("MatMul", x, w, label="logits")
    loss = b.op("CrossEntropyLoss", logits, label="loss", reduction="sum")
    meta = {
        "name": "linear",
        "logits": "logits",
        "n_classes": n_classes,
        "shield": ["logits"],
        "stem": {"layout": "dense"},
    }
    return b.build(loss, meta, seed)


def build_mlp(seed=0, image_size=16, channels=1, hidden=32, n_classes=2):
    """flatten -> fc1 (+bias) -> ReLU -> fc2 (+bias).  The first layer is the stem."""
    b = GraphBuilder()
    x = b.input((channels, image_size, image_size))
    d = channels * image_size * image_size
    flat = b.op("Reshape", x, label="flatten", shape=[d])
    w1 = b.param((d, hidden), "fc1_w")
    b1 = b.param((hidden,), "fc1_b", fan_in=d, role="bias")
    h = b.op("Add", b.op("MatMul", flat, w1, label="fc1"), b1, label="fc1_bias")
    h = b.op("ReLU", h, label="fc1_relu")
    loss = _head(b, h, hidden, n_classes)
    meta = {
        "name": "mlp",
        "logits": "logits",
        "n_classes": n_classes,
        "shield": ["flatten", "fc1", "fc1_bias"],
        "stem": {"layout": "dense"},
    }
    return b.build(loss, meta, seed)


def _trunk(b, h, c_in, size, width, n_classes):
    """2x2 pool -> conv(stride 2) -> ReLU -> flatten -> classifier."""
    h = b.op("MaxPool", h, label="pool1", kernel=2, stride=2)
    size //= 2
    w = b.param((width, c_in, 3, 3), "conv2_w", fan_in=9 * c_in)
    cb = b.param((width,), "conv2_b", fan_in=9 * c_in, role="bias")
    h = b.op("Conv2d", h, w, cb, label="conv2", stride=2, padding=1)
    h = b.op("ReLU", h, label="relu2")
    size = (size + 2 - 3) // 2 + 1
    flat = b.op("Reshape", h, label="flatten", shape=[width * size * size])
    return _head(b, flat, width * size * size, n_classes)


def build_ws_cnn(seed=0, image_size=16, channels=1, stem_channels=8, width=8, n_classes=2):
    """Weight-standardised conv stem (zero padding 1, 3x3) followed by a small conv trunk."""
    b = GraphBuilder()
    x = b.input((channels, image_size, image_size))
    w = b.param((stem_channels, channels, 3, 3), "stem_w", fan_in=9 * channels)
    sb = b.param((stem_channels,), "stem_b", fan_in=9 * channels, role="bias")
    h = b.op("WeightStandardizedConv2d", x, w, sb, label="stem_conv", stride=1, padding=1)
    h = b.op("ReLU", h, label="relu1")
    loss = _trunk(b, h, stem_channels, image_size, width, n_classes)
    meta = {
        "name": "ws_cnn",
        "logits": "logits",
        "n_classes": n_classes,
        "shield": ["stem_conv"],
        "stem": {"layout": "conv", "kernel": 3, "stride": 1, "padding": 1, "channels_in": channels},
    }
    return b.build(loss, meta, seed)


def build_resnet_stem_cnn(seed=0, image_size=16, channels=1, stem_channels=8, width=8, n_classes=2):
    """conv -> inference batch norm -> ReLU stem followed by a small conv trunk."""
    b = GraphBuilder()
    x = b.input((channels, image_size, image_size))
    w = b.param((stem_channels, channels, 3, 3), "stem_w", fan_in=9 * channels)
    h = b.op("Conv2d", x, w, label="stem_conv", stride=1, padding=1)
    bn = [
        b.param((stem_channels,), "bn_gamma", init="ones"),
        b.param((stem_channels,), "bn_beta", init="zeros", role="bias"),
        b.param((stem_channels,), "bn_mean", init="zeros", trainable=False),
        b.param((stem_channels,), "bn_var", init="ones", trainable=False),
    ]
    h = b.op("BatchNorm", h, *bn, label="stem_bn")
    h = b.op("ReLU", h, label="stem_relu")
    loss = _trunk(b, h, stem_channels, image_size, width, n_classes)
    meta = {
        "name": "resnet_stem_cnn",
        "logits": "logits",
        "n_classes": n_classes,
        "shield": ["stem_conv", "stem_bn", "stem_relu"],
        "stem": {"layout": "conv", "kernel": 3, "stride": 1, "padding": 1, "channels_in": channels},
    }
    return b.build(loss, meta, seed)
