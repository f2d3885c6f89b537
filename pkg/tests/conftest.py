"""Shared builders for the test suite.

Random networks are built so that every propagation-rule precondition holds
by construction: the layer closest to the input consumes raw values inside
the input box, every later dense/conv layer sits behind a ReLU, and pooling
geometry always divides exactly.
"""

import numpy as np
import pytest

from relprop import (
    AvgPool,
    BatchNorm,
    BnParams,
    Conv2D,
    Dense,
    Flatten,
    MaxPool,
    Network,
    ReLU,
    forward,
)

FIXTURES_DIR_NAME = "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def fixtures_dir():
    from pathlib import Path

    return Path(__file__).resolve().parent.parent / FIXTURES_DIR_NAME


def random_bn(rng, n, per_element=False):
    return BnParams(
        gamma=rng.uniform(-5.0, 5.0, n),
        beta=rng.uniform(-2.0, 2.0, n),
        running_mean=rng.uniform(-2.0, 2.0, n),
        running_std=rng.uniform(0.1, 10.0, n),
    )


def random_dense(rng, n_out, n_in, zero_bias=False, positive_weights=False):
    if positive_weights:
        w = rng.uniform(0.05, 1.0, (n_out, n_in))
    else:
        w = rng.uniform(-1.0, 1.0, (n_out, n_in))
    b = np.zeros(n_out) if zero_bias else rng.uniform(-0.5, 0.5, n_out)
    return Dense(w, b)


def random_conv(rng, oc, ic, k=3, stride=1, padding=0, zero_bias=False):
    kern = rng.uniform(-1.0, 1.0, (oc, ic, k, k))
    b = np.zeros(oc) if zero_bias else rng.uniform(-0.5, 0.5, oc)
    return Conv2D(kern, b, stride, padding)


def random_network(rng, zero_bias=True, classes=3, spatial=None):
    """Small network with mixed layer kinds and valid rule preconditions."""
    if spatial is None:
        spatial = bool(rng.integers(0, 2))
    layers = []
    if spatial:
        c = int(rng.integers(1, 4))
        h = int(rng.choice([6, 8]))
        input_shape = (c, h, h)
        oc = int(rng.integers(2, 5))
        layers += [random_conv(rng, oc, c, k=3, stride=1, padding=1, zero_bias=zero_bias), ReLU()]
        pool_kind = rng.integers(0, 3)
        if pool_kind == 1:
            layers.append(MaxPool((2, 2), 2))
            h //= 2
        elif pool_kind == 2:
            layers.append(AvgPool((2, 2), 2))
            h //= 2
        if rng.integers(0, 2):
            oc2 = int(rng.integers(2, 5))
            layers += [random_conv(rng, oc2, oc, k=3, stride=1, padding=1, zero_bias=zero_bias), ReLU()]
            oc = oc2
        layers.append(Flatten())
        width = oc * h * h
    else:
        width = int(rng.integers(4, 9))
        input_shape = (width,)
        hidden = int(rng.integers(3, 7))
        layers += [random_dense(rng, hidden, width, zero_bias=zero_bias), ReLU()]
        if rng.integers(0, 2):
            hidden2 = int(rng.integers(3, 7))
            layers += [random_dense(rng, hidden2, hidden, zero_bias=zero_bias), ReLU()]
            hidden = hidden2
        width = hidden
    layers.append(random_dense(rng, classes, width, zero_bias=zero_bias, positive_weights=True))
    return Network(layers, input_shape, -1.0, 1.0, classes)


def random_input(rng, network):
    return rng.uniform(network.input_low, network.input_high, network.input_shape)


def network_with_positive_seed(rng, **kwargs):
    """(network, input) whose argmax logit is strictly positive."""
    for _ in range(50):
        net = random_network(rng, **kwargs)
        x = random_input(rng, net)
        if forward(net, x).logits.max() > 1e-6:
            return net, x
    raise AssertionError("could not draw a network with a positive seed logit")


def compose_dense_bn_pre(bn, dense, x):
    from relprop import batchnorm_forward, dense_forward

    return dense_forward(dense.weights, dense.bias, batchnorm_forward(bn, x))


def compose_dense_bn_post(dense, bn, x):
    from relprop import batchnorm_forward, dense_forward

    return batchnorm_forward(bn, dense_forward(dense.weights, dense.bias, x))
