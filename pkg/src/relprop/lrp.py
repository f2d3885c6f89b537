"""Backward relevance propagation: z+ rule inside, box rule at the input.

Both rules share one skeleton: per output neuron j, a non-negative
denominator z_j sums the contributions it received, each input i takes the
fraction numerator_ij / z_j of the output relevance R_j, and numerators sum
to the denominator, so relevance is conserved column by column.  The z+ rule
uses only positive weights (valid for non-negative activations); the box
rule handles the input layer, whose values lie in a known interval [low,
high], via ``x*w - low*w+ - high*w-`` numerators.

Convolutions are propagated directly over their geometry; semantically this
is the dense rule applied to the lowered weight matrix, and must agree with
that path to high precision.

Zero denominators distribute nothing.  The optional stabilizer epsilon keeps
ratios finite when activations collapse; both rule families produce
non-negative denominators, so it is added plainly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionError,
    InvalidValueError,
    PolicyError,
    PreconditionError,
    RelpropError,
)
from .model import (
    AvgPool,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    MaxPool,
    Network,
    ReLU,
    forward,
    layer_kind,
)
from .tensor import Tensor, conv2d_forward

log = logging.getLogger(__name__)

BIAS_ABSORB = "absorb_in_denominator"
BIAS_REQUIRE_NONPOSITIVE = "require_nonpositive"
POOL_WINNER = "winner_take_all"
POOL_PROPORTIONAL = "proportional"


@dataclass(frozen=True)
class LrpConfig:
    bias_policy: str = BIAS_ABSORB
    pool_rule: str = POOL_WINNER
    epsilon: float = 1e-9
    seed_class: int | None = None  # None selects the argmax logit

    def __post_init__(self):
        if self.bias_policy not in (BIAS_ABSORB, BIAS_REQUIRE_NONPOSITIVE):
            raise InvalidValueError(f"unknown bias_policy {self.bias_policy!r}")
        if self.pool_rule not in (POOL_WINNER, POOL_PROPORTIONAL):
            raise InvalidValueError(f"unknown pool_rule {self.pool_rule!r}")
        if not self.epsilon >= 0.0:
            raise InvalidValueError(f"stabilizer epsilon must be >= 0, got {self.epsilon}")
        if self.seed_class is not None and self.seed_class < 0:
            raise InvalidValueError(f"seed_class must be >= 0, got {self.seed_class}")


@dataclass
class RelevanceTrace:
    """Per-layer relevance tensors ordered from the output back to the input."""

    relevances: list
    layer_sums: list
    class_index: int
    seed_logit: float
    warnings: list

    @property
    def input_relevance(self) -> Tensor:
        return self.relevances[-1]


def _stabilize(z: Tensor, eps: float) -> Tensor:
    if eps == 0.0:
        return z
    return z + np.where(z >= 0.0, eps, -eps)


def _ratio(r_out: Tensor, z: Tensor) -> Tensor:
    """r_out / z with zero denominators distributing nothing."""
    s = np.zeros_like(z)
    nz = z != 0.0
    np.divide(r_out, z, out=s, where=nz)
    if not nz.all():
        log.debug("%d columns with zero denominator received no relevance", int((~nz).sum()))
    return s


def _bias_denominator(bias: Tensor, cfg: LrpConfig) -> Tensor:
    if cfg.bias_policy == BIAS_REQUIRE_NONPOSITIVE:
        if np.any(bias > 0.0):
            raise PolicyError(
                "bias_policy 'require_nonpositive' rejects this layer: "
                f"{int((bias > 0).sum())} bias entries are positive"
            )
        return np.zeros_like(bias)
    return np.maximum(bias, 0.0)


def _check_dense(x_in, dense, r_out):
    if x_in.shape != (dense.weights.shape[1],):
        raise DimensionError(
            f"activation shape {list(x_in.shape)} does not match dense input "
            f"width {dense.weights.shape[1]}"
        )
    if r_out.shape != (dense.weights.shape[0],):
        raise DimensionError(
            f"relevance shape {list(r_out.shape)} does not match dense output "
            f"width {dense.weights.shape[0]}"
        )


def lrp_dense_zplus(x_in: Tensor, dense: Dense, r_out: Tensor, cfg: LrpConfig) -> Tensor:
    x_in = np.asarray(x_in, dtype=np.float64)
    r_out = np.asarray(r_out, dtype=np.float64)
    _check_dense(x_in, dense, r_out)
    if np.any(x_in < 0.0):
        raise PreconditionError("z+ rule requires non-negative input activations")
    return _dense_zplus(x_in, dense, r_out, cfg)


def _dense_zplus(x_in, dense, r_out, cfg):
    wp = np.maximum(dense.weights, 0.0)
    z = wp @ x_in + _bias_denominator(dense.bias, cfg)
    s = _ratio(r_out, _stabilize(z, cfg.epsilon))
    return x_in * (wp.T @ s)


def lrp_dense_zB(
    x_in: Tensor, dense: Dense, low: float, high: float, r_out: Tensor, cfg: LrpConfig
) -> Tensor:
    x_in = np.asarray(x_in, dtype=np.float64)
    r_out = np.asarray(r_out, dtype=np.float64)
    _check_dense(x_in, dense, r_out)
    if np.any(x_in < low) or np.any(x_in > high):
        raise PreconditionError(f"box rule requires inputs within [{low}, {high}]")
    return _dense_zB(x_in, dense, low, high, r_out, cfg)


def _dense_zB(x_in, dense, low, high, r_out, cfg):
    # numerator_ij = x*w - low*w+ - high*w- rearranged as
    # w+*(x - low) + w-*(x - high): both products are non-negative inside the
    # box, so relevance comes out exactly >= 0 with no cancellation
    wp = np.maximum(dense.weights, 0.0)
    wn = np.minimum(dense.weights, 0.0)
    z = wp @ (x_in - low) + wn @ (x_in - high) + _bias_denominator(dense.bias, cfg)
    s = _ratio(r_out, _stabilize(z, cfg.epsilon))
    return (x_in - low) * (wp.T @ s) + (x_in - high) * (wn.T @ s)


def _check_conv(x_in, conv, r_out):
    oc, ic = conv.kernel.shape[:2]
    if x_in.ndim != 3 or x_in.shape[0] != ic:
        raise DimensionError(
            f"activation shape {list(x_in.shape)} does not match conv input channels {ic}"
        )
    if r_out.ndim != 3 or r_out.shape[0] != oc:
        raise DimensionError(
            f"relevance shape {list(r_out.shape)} does not match conv output channels {oc}"
        )


def lrp_conv_zplus(x_in: Tensor, conv: Conv2D, r_out: Tensor, cfg: LrpConfig) -> Tensor:
    x_in = np.asarray(x_in, dtype=np.float64)
    r_out = np.asarray(r_out, dtype=np.float64)
    _check_conv(x_in, conv, r_out)
    if np.any(x_in < 0.0):
        raise PreconditionError("z+ rule requires non-negative input activations")
    return _conv_zplus(x_in, conv, r_out, cfg)


def _conv_zplus(x_in, conv, r_out, cfg):
    kp = np.maximum(conv.kernel, 0.0)
    z = conv2d_forward(kp, _bias_denominator(conv.bias, cfg), x_in, conv.stride, conv.padding)
    s = _ratio(r_out, _stabilize(z, cfg.epsilon))
    return x_in * _backscatter(kp, s, x_in.shape, conv.stride, conv.padding)


def lrp_conv_zB(
    x_in: Tensor, conv: Conv2D, low: float, high: float, r_out: Tensor, cfg: LrpConfig
) -> Tensor:
    x_in = np.asarray(x_in, dtype=np.float64)
    r_out = np.asarray(r_out, dtype=np.float64)
    _check_conv(x_in, conv, r_out)
    if np.any(x_in < low) or np.any(x_in > high):
        raise PreconditionError(f"box rule requires inputs within [{low}, {high}]")
    return _conv_zB(x_in, conv, low, high, r_out, cfg)


def _conv_zB(x_in, conv, low, high, r_out, cfg):
    # same w+*(x - low) + w-*(x - high) rearrangement as the dense rule; the
    # zero-padded (x - low)/(x - high) images keep padded taps contributing
    # nothing, matching the lowered dense matrix where those taps do not exist
    kp = np.maximum(conv.kernel, 0.0)
    kn = np.minimum(conv.kernel, 0.0)
    zero_bias = np.zeros_like(conv.bias)
    z = conv2d_forward(
        kp, zero_bias, x_in - low, conv.stride, conv.padding
    ) + conv2d_forward(kn, zero_bias, x_in - high, conv.stride, conv.padding)
    z = z + _bias_denominator(conv.bias, cfg)[:, None, None]
    s = _ratio(r_out, _stabilize(z, cfg.epsilon))
    shape = x_in.shape
    return (x_in - low) * _backscatter(kp, s, shape, conv.stride, conv.padding) + (
        x_in - high
    ) * _backscatter(kn, s, shape, conv.stride, conv.padding)


def _backscatter(kernel, s, in_shape, stride, padding):
    """Transpose of the conv weight application: c[i] = sum_j kernel_tap*s[j]."""
    oc, ic, kh, kw = kernel.shape
    _, oh, ow = s.shape
    _, h, w = in_shape
    c = np.zeros((ic, h + 2 * padding, w + 2 * padding))
    for dy in range(kh):
        for dx in range(kw):
            c[:, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride] += np.einsum(
                "oi,ohw->ihw", kernel[:, :, dy, dx], s, optimize=True
            )
    if padding:
        c = c[:, padding : padding + h, padding : padding + w]
    return c


def lrp_maxpool(x_in, layer: MaxPool, argmax, r_out, cfg: LrpConfig) -> Tensor:
    """Winner-take-all routes each cell to its recorded argmax; proportional
    splits by each input's share of the window sum (0/0 windows split evenly)."""
    r_in = np.zeros_like(np.asarray(x_in, dtype=np.float64))
    if cfg.pool_rule == POOL_WINNER:
        c = r_in.shape[0]
        flat = r_in.reshape(c, -1)
        for ch in range(c):
            np.add.at(flat[ch], argmax[ch].reshape(-1), r_out[ch].reshape(-1))
        return r_in
    return _pool_proportional(x_in, layer.window, layer.stride, r_out)


def lrp_avgpool(x_in, layer: AvgPool, r_out, cfg: LrpConfig) -> Tensor:
    return _pool_proportional(x_in, layer.window, layer.stride, r_out)


def _pool_proportional(x_in, window, stride, r_out):
    x_in = np.asarray(x_in, dtype=np.float64)
    th, tw = window
    _, oh, ow = r_out.shape
    tot = np.zeros_like(r_out)
    for dy in range(th):
        for dx in range(tw):
            tot += x_in[:, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride]
    share = _ratio(r_out, tot)
    zero = tot == 0.0
    if zero.any():
        log.debug("%d pooling windows with zero sum split evenly", int(zero.sum()))
    uniform = np.where(zero, r_out / (th * tw), 0.0)
    r_in = np.zeros_like(x_in)
    for dy in range(th):
        for dx in range(tw):
            tap = np.s_[:, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride]
            r_in[tap] += x_in[tap] * share + uniform
    return r_in


def explain(network: Network, x: Tensor, cfg: LrpConfig | None = None) -> RelevanceTrace:
    """Propagate the chosen class logit back to the input pixels.

    The network must contain no live BN layer: fold them first or mark them
    with the bypass flag, in which case they pass relevance through unchanged
    while still participating in the forward pass.  The layer closest to the
    input uses the box rule with the network's input bounds; every other
    dense/conv layer uses the z+ rule.
    """
    cfg = cfg or LrpConfig()
    x = np.asarray(x, dtype=np.float64)
    warnings: list = []
    if x.size and (x.min() < network.input_low or x.max() > network.input_high):
        raise PreconditionError(
            f"input values outside the declared bounds "
            f"[{network.input_low}, {network.input_high}]"
        )
    for i, layer in enumerate(network.layers):
        if isinstance(layer, BatchNorm) and not layer.bypass:
            raise PreconditionError(
                f"layer {i} is an unfused batchnorm; fold it (fuse_network) or "
                f"use the bypass policy before explaining"
            )

    run = forward(network, x)
    if cfg.seed_class is not None:
        if cfg.seed_class >= network.class_count:
            raise InvalidValueError(
                f"seed_class {cfg.seed_class} out of range for {network.class_count} classes"
            )
        target = cfg.seed_class
    else:
        target = int(np.argmax(run.logits))
    seed = float(run.logits[target])
    if seed < 0.0:
        warnings.append(
            f"seed logit {seed:.6g} for class {target} is negative; "
            f"relevance interpretation degrades"
        )

    first_linear = next(
        (i for i, l in enumerate(network.layers) if isinstance(l, (Dense, Conv2D))), None
    )
    r = np.zeros(network.class_count)
    r[target] = seed
    relevances = [r]
    sums = [float(r.sum())]
    soft_warned = False
    for i in range(len(network.layers) - 1, -1, -1):
        layer = network.layers[i]
        x_in = run.activations[i]
        r_out = relevances[-1]
        try:
            if isinstance(layer, (Dense, Conv2D)):
                # Bypassed BN layers feed linear layers activations outside
                # the rules' nominal domain (negative, or beyond the input
                # box).  Conservation still holds by construction; warn once
                # instead of failing, since that is the baseline's nature.
                if i == first_linear:
                    out_of_box = x_in.min() < network.input_low or x_in.max() > network.input_high
                else:
                    out_of_box = bool(np.any(x_in < 0.0))
                if out_of_box and not soft_warned:
                    warnings.append(
                        f"layer {i}: activations outside the propagation rule's nominal "
                        f"domain (bypassed normalization upstream); results are the "
                        f"baseline approximation"
                    )
                    soft_warned = True
            if isinstance(layer, Dense):
                if i == first_linear:
                    r_in = _dense_zB(
                        x_in, layer, network.input_low, network.input_high, r_out, cfg
                    )
                else:
                    r_in = _dense_zplus(x_in, layer, r_out, cfg)
            elif isinstance(layer, Conv2D):
                if i == first_linear:
                    r_in = _conv_zB(
                        x_in, layer, network.input_low, network.input_high, r_out, cfg
                    )
                else:
                    r_in = _conv_zplus(x_in, layer, r_out, cfg)
            elif isinstance(layer, (BatchNorm, ReLU)):
                r_in = r_out
            elif isinstance(layer, MaxPool):
                r_in = lrp_maxpool(x_in, layer, run.pool_argmax[i], r_out, cfg)
            elif isinstance(layer, AvgPool):
                r_in = lrp_avgpool(x_in, layer, r_out, cfg)
            elif isinstance(layer, Flatten):
                r_in = r_out.reshape(x_in.shape)
            else:
                raise PreconditionError(f"no propagation rule for {type(layer).__name__}")
        except RelpropError as e:
            raise type(e)(f"layer {i} ({layer_kind(layer)}): {e}") from None
        relevances.append(r_in)
        sums.append(float(r_in.sum()))
    return RelevanceTrace(relevances, sums, target, seed, warnings)
