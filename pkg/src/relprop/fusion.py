"""Closed-form folding of batch normalization into adjacent linear layers.

Writing the normalization as the per-channel affine map
``bn(x) = scale*x + shift`` with ``scale = gamma/std`` and
``shift = beta - gamma*mean/std``, the four folding rules are:

* dense after BN:   w'[j,i] = scale[i]*w[j,i]          b'[j] = b[j] + sum_i w[j,i]*shift[i]
* BN after dense:   w'[j,i] = scale[j]*w[j,i]          b'[j] = scale[j]*b[j] + shift[j]
* BN after conv:    k'[oc,...] = scale[oc]*k[oc,...]   b'[oc] = scale[oc]*b[oc] + shift[oc]
* conv after BN:    k'[:,ic,...] = scale[ic]*k[:,ic,...]
                    b'[oc] = b[oc] + sum_{ic,kh,kw} k[oc,ic,kh,kw]*shift[ic]

All four reproduce the two-layer composition exactly (up to rounding), with
one restriction: folding BN into a *following* convolution is exact only for
padding 0, because padded positions are zeros rather than normalized values.
``lower_conv_to_dense`` converts any convolution into an equivalent dense
layer over flattened data, which both removes that restriction and supports
normalizations whose parameters vary per element instead of per channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, InvalidValueError, RelpropError, UnsupportedFusionError
from .model import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    Network,
    PLACEMENT_BEFORE,
    annotate_bypass,
    forward,
    propagate_shapes,
)
from .tensor import BnParams, Tensor, conv_output_extent

POLICY_FUSE = "fuse"
POLICY_LOWER = "lower_then_fuse"
POLICY_BYPASS = "bypass"
POLICIES = (POLICY_FUSE, POLICY_LOWER, POLICY_BYPASS)

RULE_DENSE_PRE = "dense_pre"
RULE_DENSE_POST = "dense_post"
RULE_CONV_PRE = "conv_pre"
RULE_CONV_POST = "conv_post"
RULE_LOWERED = "lowered"


@dataclass
class FusionRecord:
    layer_indices: tuple
    rule: str
    exact: bool = True
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "layer_indices_consumed": list(self.layer_indices),
            "rule_applied": self.rule,
            "exact": self.exact,
            "note": self.note,
        }


@dataclass
class FusionReport:
    records: list = field(default_factory=list)
    unfused: list = field(default_factory=list)

    def mark_unfused(self, index: int, reason: str) -> None:
        self.unfused.append({"layer_index": index, "reason": reason})

    def accounted_bn_indices(self) -> set:
        done = {rec.layer_indices[0] for rec in self.records}
        done.update(entry["layer_index"] for entry in self.unfused)
        return done

    def to_dict(self) -> dict:
        return {
            "records": [rec.to_dict() for rec in self.records],
            "unfused": list(self.unfused),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="ascii")


def fuse_bn_dense_pre(bn: BnParams, dense: Dense) -> Dense:
    """Fold a normalization whose output feeds the dense layer."""
    n = dense.weights.shape[1]
    if len(bn) != n:
        raise DimensionError(
            f"normalization over {len(bn)} values cannot precede dense input width {n}"
        )
    w = dense.weights * bn.scale()[None, :]
    b = dense.bias + dense.weights @ bn.shift()
    return Dense(w, b)


def fuse_bn_dense_post(dense: Dense, bn: BnParams) -> Dense:
    """Fold a normalization applied to the dense layer's output."""
    m = dense.weights.shape[0]
    if len(bn) != m:
        raise DimensionError(
            f"normalization over {len(bn)} values cannot follow dense output width {m}"
        )
    w = dense.weights * bn.scale()[:, None]
    b = bn.beta + bn.gamma * (dense.bias - bn.running_mean) / bn.running_std
    return Dense(w, b)


def fuse_bn_conv_post(conv: Conv2D, bn: BnParams) -> Conv2D:
    """Fold a per-output-channel normalization applied to the conv output."""
    oc = conv.kernel.shape[0]
    if len(bn) != oc:
        raise DimensionError(
            f"normalization over {len(bn)} channels cannot follow conv with {oc} output channels"
        )
    k = conv.kernel * bn.scale()[:, None, None, None]
    b = bn.beta + bn.gamma * (conv.bias - bn.running_mean) / bn.running_std
    return Conv2D(k, b, conv.stride, conv.padding)


def fuse_bn_conv_pre(bn: BnParams, conv: Conv2D) -> Conv2D:
    """Fold a per-input-channel normalization whose output feeds the conv.

    Requires padding 0: zero-padded positions are not normalized, so the
    constant bias rewrite would be wrong on border outputs.  Callers that
    need padding should lower the convolution to a dense layer instead.
    """
    ic = conv.kernel.shape[1]
    if len(bn) != ic:
        raise DimensionError(
            f"normalization over {len(bn)} channels cannot precede conv with {ic} input channels"
        )
    if conv.padding != 0:
        raise UnsupportedFusionError(
            f"folding a normalization into a following conv with padding "
            f"{conv.padding} is not exact at the borders; lower the conv to a "
            f"dense layer (policy '{POLICY_LOWER}') instead"
        )
    k = conv.kernel * bn.scale()[None, :, None, None]
    b = conv.bias + conv.kernel.sum(axis=(2, 3)) @ bn.shift()
    return Conv2D(k, b, conv.stride, conv.padding)


def lower_conv_to_dense(conv: Conv2D, input_shape) -> Dense:
    """Equivalent dense layer over flattened input/output, padding baked in.

    Rows follow channel-major flatten order of the conv output, columns the
    flatten order of the input; each row holds the kernel taps at the offsets
    the sliding window visits, zeros elsewhere (taps that fall on padding are
    dropped).  The bias is replicated once per output spatial position.
    """
    input_shape = tuple(int(e) for e in input_shape)
    oc, ic, kh, kw = conv.kernel.shape
    if len(input_shape) != 3 or input_shape[0] != ic:
        raise DimensionError(
            f"conv expects input shape [{ic}, h, w], got {list(input_shape)}"
        )
    _, h, w = input_shape
    oh = conv_output_extent(h, kh, conv.stride, conv.padding)
    ow = conv_output_extent(w, kw, conv.stride, conv.padding)
    weights = np.zeros((oc * oh * ow, ic * h * w))
    view = weights.reshape(oc, oh * ow, ic, h * w)
    for dy in range(kh):
        iy = np.arange(oh) * conv.stride + dy - conv.padding
        oy = np.nonzero((iy >= 0) & (iy < h))[0]
        for dx in range(kw):
            ix = np.arange(ow) * conv.stride + dx - conv.padding
            ox = np.nonzero((ix >= 0) & (ix < w))[0]
            if oy.size == 0 or ox.size == 0:
                continue
            out_pos = (oy[:, None] * ow + ox[None, :]).reshape(-1)
            in_pos = (iy[oy][:, None] * w + ix[ox][None, :]).reshape(-1)
            view[:, out_pos, :, in_pos] = conv.kernel[:, :, dy, dx]
    bias = np.repeat(conv.bias, oh * ow)
    return Dense(weights, bias)


def expand_bn_per_element(bn: BnParams, shape) -> BnParams:
    """Per-element parameter vectors in flatten order for the given shape.

    Per-channel vectors are repeated across the spatial positions of each
    channel; vectors that are already per-element pass through unchanged.
    """
    shape = tuple(int(e) for e in shape)
    total = int(np.prod(shape))
    if len(bn) == total:
        return bn
    if len(shape) == 3 and len(bn) == shape[0]:
        reps = shape[1] * shape[2]
        return BnParams(
            np.repeat(bn.gamma, reps),
            np.repeat(bn.beta, reps),
            np.repeat(bn.running_mean, reps),
            np.repeat(bn.running_std, reps),
        )
    raise DimensionError(
        f"normalization over {len(bn)} values does not match shape {list(shape)}"
    )


@dataclass
class _Item:
    origin: int  # index in the original network; carried through fusions
    layer: object


def fuse_network(network: Network, policy: str = POLICY_FUSE):
    """Fold every foldable BN layer, returning (new network, report).

    ``bypass`` removes nothing: BN layers stay in the forward pass and are
    marked relevance-transparent for the propagation engine (the comparison
    baseline).  Under ``fuse``/``lower_then_fuse`` a BN is folded into the
    adjacent layer selected by its placement tag (untagged: the following
    layer); BN layers with no foldable neighbor are reported as unfused
    residue, never silently dropped.
    """
    if policy not in POLICIES:
        raise InvalidValueError(f"unknown fusion policy {policy!r}, expected one of {POLICIES}")
    report = FusionReport()
    if policy == POLICY_BYPASS:
        for i in network.bn_indices():
            report.mark_unfused(i, "bypass policy: kept in forward pass, relevance-transparent")
        return annotate_bypass(network), report

    items = [_Item(i, layer) for i, layer in enumerate(network.layers)]
    blocked: dict = {}
    changed = True
    while changed:
        changed = False
        for pos, item in enumerate(items):
            if not isinstance(item.layer, BatchNorm):
                continue
            outcome = _try_fuse_at(items, pos, network.input_shape, policy, report)
            if outcome is True:
                changed = True
                blocked.pop(item.origin, None)
                break
            if outcome:
                blocked[item.origin] = outcome
    for item in items:
        if isinstance(item.layer, BatchNorm):
            report.mark_unfused(
                item.origin, blocked.get(item.origin, "no adjacent dense or conv layer to fold into")
            )
    fused = Network(
        [item.layer for item in items],
        network.input_shape,
        network.input_low,
        network.input_high,
        network.class_count,
        dict(network.metadata),
    )
    return fused, report


def _try_fuse_at(items, pos, input_shape, policy, report):
    """Attempt one fold; True on success, else a reason string."""
    bn_item = items[pos]
    bn = bn_item.layer
    backward = bn.placement == PLACEMENT_BEFORE
    if backward:
        if pos == 0:
            return "placement 'before_activation' but no preceding layer"
        target = items[pos - 1]
    else:
        if pos + 1 >= len(items):
            return "no following layer to fold into"
        target = items[pos + 1]

    if isinstance(target.layer, Dense):
        width = target.layer.weights.shape[0 if backward else 1]
        if len(bn.params) != width:
            return (
                f"parameter vector length {len(bn.params)} does not match the "
                f"adjacent dense width {width}"
            )
        if backward:
            fused = fuse_bn_dense_post(target.layer, bn.params)
            rule = RULE_DENSE_POST
            indices = (bn_item.origin, target.origin)
        else:
            fused = fuse_bn_dense_pre(bn.params, target.layer)
            rule = RULE_DENSE_PRE
            indices = (bn_item.origin, target.origin)
        _splice(items, pos, backward, [_Item(target.origin, fused)])
        report.records.append(FusionRecord(indices, rule))
        return True

    if isinstance(target.layer, Conv2D):
        conv = target.layer
        per_channel = len(bn.params) == conv.kernel.shape[1 if not backward else 0]
        if backward and per_channel:
            fused = fuse_bn_conv_post(conv, bn.params)
            _splice(items, pos, backward, [_Item(target.origin, fused)])
            report.records.append(FusionRecord((bn_item.origin, target.origin), RULE_CONV_POST))
            return True
        if not backward and per_channel and conv.padding == 0:
            fused = fuse_bn_conv_pre(bn.params, conv)
            _splice(items, pos, backward, [_Item(target.origin, fused)])
            report.records.append(FusionRecord((bn_item.origin, target.origin), RULE_CONV_PRE))
            return True
        why = (
            f"conv padding {conv.padding} prevents exact channel-level folding"
            if per_channel
            else "per-element normalization parameters prevent channel-level folding"
        )
        if policy != POLICY_LOWER:
            return f"{why}; re-run with policy '{POLICY_LOWER}'"
        return _lower_and_fuse(items, pos, backward, input_shape, report, why)

    return (
        f"adjacent layer is {type(target.layer).__name__}, which cannot absorb a normalization"
    )


def _lower_and_fuse(items, pos, backward, input_shape, report, why):
    bn_item = items[pos]
    target = items[pos - 1] if backward else items[pos + 1]
    conv = target.layer
    shapes = propagate_shapes([it.layer for it in items], input_shape)
    conv_pos = pos - 1 if backward else pos + 1
    conv_in_shape = shapes[conv_pos]
    try:
        lowered = lower_conv_to_dense(conv, conv_in_shape)
        if backward:
            bn_shape = shapes[conv_pos + 1]
            fused = fuse_bn_dense_post(lowered, expand_bn_per_element(bn_item.layer.params, bn_shape))
        else:
            fused = fuse_bn_dense_pre(
                expand_bn_per_element(bn_item.layer.params, conv_in_shape), lowered
            )
    except RelpropError as e:
        return f"{why}; lowering failed: {e}"

    replacement = [_Item(target.origin, Flatten()), _Item(target.origin, fused)]
    saved = list(items)
    _splice(items, pos, backward, replacement)
    try:
        propagate_shapes([it.layer for it in items], input_shape)
    except RelpropError as e:
        items[:] = saved
        return f"{why}; lowering would break downstream layers: {e}"
    report.records.append(
        FusionRecord(
            (bn_item.origin, target.origin),
            RULE_LOWERED,
            note=f"{why}; conv lowered to dense over flattened data",
        )
    )
    return True


def _splice(items, bn_pos, backward, replacement):
    lo = bn_pos - 1 if backward else bn_pos
    items[lo : lo + 2] = replacement


def composition_max_deviation(network: Network, fused: Network, probes) -> float:
    """Largest |fused(x) - original(x)| over the probe inputs."""
    worst = 0.0
    for x in probes:
        a = forward(network, x).logits
        b = forward(fused, x).logits
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst
