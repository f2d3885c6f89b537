"""Reference architectures and their torch realizations.

Each architecture is a flat list of layer specs; the same list drives both
the torch module construction and the JSON export, so normalization
placement tags always match the built graph.  Spec entries:

    ("flatten",)
    ("linear", n_in, n_out, bias)
    ("conv", in_ch, out_ch, k, stride, padding, bias)
    ("bn1d", n, placement) / ("bn2d", channels, placement)
    ("relu",)
    ("maxpool", k, stride) / ("avgpool", k, stride)

The five MNIST networks come in matched pairs for comparing propagation
with and without normalization handling: fc1 is a plain dense stack, fc2
adds a normalization in front of every dense layer, fc3 puts the
normalization between each dense layer and its activation, conv1 is a
four-conv stack, conv2 adds a normalization in front of every conv.  conv2
uses padding 0 (a channel-level fold of a normalization into a following
conv is only exact without padding) and bias-free linear maps, so relevance
conservation is exact in both the fused and the bypass propagation modes.
The CIFAR-10 network has seven convs, each directly followed by a
normalization, four pools, and a final dense layer.  The concrete widths
are this module's choice and are recorded in each fixture's metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

AFTER = "after_activation"
BEFORE = "before_activation"


@dataclass
class Architecture:
    name: str
    dataset: str  # "mnist" | "cifar10" | "digits"
    input_shape: tuple
    class_count: int
    spec: list
    target_accuracy: float | None = None
    epochs: int = 8
    note: str = ""


def fc_spec(width, hidden1, hidden2, classes, bn: str | None):
    spec = [("flatten",)]
    dims = [(width, hidden1), (hidden1, hidden2), (hidden2, classes)]
    for i, (n_in, n_out) in enumerate(dims):
        last = i == len(dims) - 1
        if bn == "pre":
            spec.append(("bn1d", n_in, AFTER))
        spec.append(("linear", n_in, n_out, True))
        if bn == "post" and not last:
            spec.append(("bn1d", n_out, BEFORE))
        if not last:
            spec.append(("relu",))
    return spec


def conv_stack_spec(channels, classes, side, bn_before_conv=False, pool_after=(1, 3)):
    """Four 3x3/pad-0 convs with pools after the given conv indices."""
    spec = []
    c_in = channels[0]
    for i, c_out in enumerate(channels[1:]):
        if bn_before_conv:
            spec.append(("bn2d", c_in, AFTER))
        spec.append(("conv", c_in, c_out, 3, 1, 0, not bn_before_conv))
        spec.append(("relu",))
        side -= 2
        if i in pool_after:
            spec.append(("maxpool", 2, 2))
            side //= 2
        c_in = c_out
    spec.append(("flatten",))
    spec.append(("linear", c_in * side * side, classes, not bn_before_conv))
    return spec


def cifar_spec(classes=10):
    plan = [(3, 16), (16, 16), "pool", (16, 32), (32, 32), "pool",
            (32, 64), (64, 64), "pool", (64, 64), "pool"]
    spec = []
    side = 32
    c_last = 3
    for step in plan:
        if step == "pool":
            spec.append(("maxpool", 2, 2))
            side //= 2
            continue
        c_in, c_out = step
        spec.append(("conv", c_in, c_out, 3, 1, 1, False))
        spec.append(("bn2d", c_out, BEFORE))
        spec.append(("relu",))
        c_last = c_out
    spec.append(("flatten",))
    spec.append(("linear", c_last * side * side, classes, True))
    return spec


ARCHITECTURES = {
    "fc1_mnist": Architecture(
        "fc1_mnist", "mnist", (1, 28, 28), 10,
        fc_spec(784, 64, 32, 10, bn=None), target_accuracy=0.9781,
        note="plain dense stack",
    ),
    "fc2_mnist": Architecture(
        "fc2_mnist", "mnist", (1, 28, 28), 10,
        fc_spec(784, 64, 32, 10, bn="pre"), target_accuracy=0.9742,
        note="normalization in front of every dense layer",
    ),
    "fc3_mnist": Architecture(
        "fc3_mnist", "mnist", (1, 28, 28), 10,
        fc_spec(784, 64, 32, 10, bn="post"), target_accuracy=0.9831,
        note="normalization between dense layers and activations",
    ),
    "conv1_mnist": Architecture(
        "conv1_mnist", "mnist", (1, 28, 28), 10,
        conv_stack_spec([1, 8, 16, 16, 32], 10, 28), target_accuracy=0.9903,
        note="four conv layers, no normalization",
    ),
    "conv2_mnist": Architecture(
        "conv2_mnist", "mnist", (1, 28, 28), 10,
        conv_stack_spec([1, 8, 16, 16, 32], 10, 28, bn_before_conv=True),
        target_accuracy=0.9924,
        note="normalization in front of every conv; bias-free linear maps",
    ),
    "cifar10": Architecture(
        "cifar10", "cifar10", (3, 32, 32), 10, cifar_spec(),
        target_accuracy=0.9378, epochs=30,
        note="seven convs each followed by a normalization, four pools",
    ),
    "conv2_digits": Architecture(
        "conv2_digits", "digits", (1, 8, 8), 10,
        [
            ("bn2d", 1, AFTER), ("conv", 1, 8, 3, 1, 0, False), ("relu",),
            ("bn2d", 8, AFTER), ("conv", 8, 16, 3, 1, 0, False), ("relu",),
            ("maxpool", 2, 2), ("flatten",),
            ("linear", 16 * 2 * 2, 10, False),
        ],
        epochs=40,
        note="normalization in front of every conv, trained on the bundled 8x8 digits",
    ),
}


def build_torch(spec) -> nn.Sequential:
    mods = []
    for item in spec:
        kind = item[0]
        if kind == "flatten":
            mods.append(nn.Flatten())
        elif kind == "linear":
            _, n_in, n_out, bias = item
            mods.append(nn.Linear(n_in, n_out, bias=bias))
        elif kind == "conv":
            _, c_in, c_out, k, stride, padding, bias = item
            mods.append(nn.Conv2d(c_in, c_out, k, stride=stride, padding=padding, bias=bias))
        elif kind == "bn1d":
            mods.append(nn.BatchNorm1d(item[1]))
        elif kind == "bn2d":
            mods.append(nn.BatchNorm2d(item[1]))
        elif kind == "relu":
            mods.append(nn.ReLU())
        elif kind == "maxpool":
            mods.append(nn.MaxPool2d(item[1], item[2]))
        elif kind == "avgpool":
            mods.append(nn.AvgPool2d(item[1], item[2]))
        else:
            raise ValueError(f"unknown spec entry {item!r}")
    return nn.Sequential(*mods)
