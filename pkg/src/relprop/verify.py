"""Model-level invariant checks backing the CLI ``verify`` command.

Each check runs against a loaded network with freshly drawn probe inputs and
reports one pass/fail line.  Tolerances are fixed here, not configurable:
they are the contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import POLICY_BYPASS, POLICY_LOWER, fuse_network, lower_conv_to_dense
from .lrp import LrpConfig, explain
from .model import Conv2D, Network, forward
from .tensor import dense_forward, flatten

FUSION_TOL = 1e-6  # relative, on probe logits
LOWERING_TOL = 1e-9  # absolute, per activation value
CONSERVATION_TOL = 1e-9  # relative slack on the non-increasing sum chain
LOWERING_SIZE_CAP = 4_000_000  # matrix elements; larger convs are skipped


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s} {self.name}" + (f": {self.detail}" if self.detail else "")


def _probe_inputs(network: Network, count: int, rng) -> list:
    lo, hi = network.input_low, network.input_high
    return [rng.uniform(lo, hi, size=network.input_shape) for _ in range(count)]


def check_determinism(network: Network, probes) -> CheckResult:
    for x in probes[:3]:
        a = forward(network, x).logits
        b = forward(network, x).logits
        if not np.array_equal(a, b):
            return CheckResult("forward determinism", False, "repeat run differed")
    return CheckResult("forward determinism", True)


def check_shape_propagation(network: Network, probes) -> CheckResult:
    run = forward(network, probes[0])
    for i, act in enumerate(run.activations):
        if act.shape != network.activation_shapes[i]:
            return CheckResult(
                "shape propagation", False,
                f"boundary {i}: declared {network.activation_shapes[i]}, got {act.shape}",
            )
    return CheckResult("shape propagation", True)


def check_fusion_equivalence(network: Network, probes) -> CheckResult:
    name = "fusion equivalence"
    if not network.bn_indices():
        return CheckResult(name, True, "no normalization layers")
    fused, report = fuse_network(network, POLICY_LOWER)
    if report.unfused:
        reasons = "; ".join(e["reason"] for e in report.unfused)
        return CheckResult(name, False, f"unfusable residue: {reasons}")
    worst = 0.0
    for x in probes:
        a = forward(network, x).logits
        b = forward(fused, x).logits
        scale = max(1.0, float(np.max(np.abs(a))))
        worst = max(worst, float(np.max(np.abs(a - b))) / scale)
    ok = worst <= FUSION_TOL
    return CheckResult(name, ok, f"max relative deviation {worst:.3e} (tol {FUSION_TOL:.0e})")


def check_lowering_equivalence(network: Network, probes) -> CheckResult:
    name = "lowering equivalence"
    convs = [(i, l) for i, l in enumerate(network.layers) if isinstance(l, Conv2D)]
    if not convs:
        return CheckResult(name, True, "no conv layers")
    worst = 0.0
    skipped = 0
    for x in probes[:5]:
        run = forward(network, x)
        for i, conv in convs:
            in_shape = run.activations[i].shape
            oc, _, kh, kw = conv.kernel.shape
            rows = oc * np.prod(
                [  # output extents
                    (in_shape[1] + 2 * conv.padding - kh) // conv.stride + 1,
                    (in_shape[2] + 2 * conv.padding - kw) // conv.stride + 1,
                ]
            )
            if rows * np.prod(in_shape) > LOWERING_SIZE_CAP:
                skipped += 1
                continue
            lowered = lower_conv_to_dense(conv, in_shape)
            direct = flatten(run.activations[i + 1])
            via_dense = dense_forward(lowered.weights, lowered.bias, flatten(run.activations[i]))
            worst = max(worst, float(np.max(np.abs(direct - via_dense))))
    detail = f"max deviation {worst:.3e} (tol {LOWERING_TOL:.0e})"
    if skipped:
        detail += f"; {skipped} conv instances skipped (lowered matrix above size cap)"
    return CheckResult(name, worst <= LOWERING_TOL, detail)


def check_conservation(network: Network, probes) -> CheckResult:
    """Per-layer relevance sums behave as the rules guarantee.

    Layers whose denominators carry no positive bias conserve the sum
    exactly; layers absorbing a positive bias dissipate it (the sum moves
    towards zero) provided their activations are inside the rule's domain.
    A bypassed normalization can push activations outside that domain, where
    no bound exists; such steps are counted and skipped.
    """
    name = "relevance conservation"
    if network.bn_indices():
        nets = [fuse_network(network, POLICY_BYPASS)[0]]
        fused, report = fuse_network(network, POLICY_LOWER)
        if not report.unfused:
            nets.append(fused)
    else:
        nets = [network]
    cfg = LrpConfig(epsilon=0.0)  # probe the exact invariant, not the stabilized ratio
    skipped = 0
    for net in nets:
        first_linear = next(
            (i for i, l in enumerate(net.layers) if hasattr(l, "weights") or hasattr(l, "kernel")),
            None,
        )
        for x in probes:
            run = forward(net, x)
            trace = explain(net, x, cfg)
            if not all(np.all(np.isfinite(r)) for r in trace.relevances):
                return CheckResult(name, False, "non-finite relevance values")
            sums = trace.layer_sums
            n_layers = len(net.layers)
            for t in range(1, len(sums)):
                i = n_layers - t
                layer = net.layers[i]
                prev, cur = sums[t - 1], sums[t]
                scale = max(1.0, abs(prev))
                linear = isinstance(layer, (Conv2D,)) or hasattr(layer, "weights")
                if linear:
                    has_pos_bias = bool(np.any(layer.bias > 0.0))
                    x_in = run.activations[i]
                    if i == first_linear:
                        in_domain = (
                            x_in.min() >= net.input_low and x_in.max() <= net.input_high
                        )
                    else:
                        in_domain = bool(np.all(x_in >= 0.0))
                    if not has_pos_bias:
                        ok = abs(cur - prev) <= CONSERVATION_TOL * scale
                    elif in_domain:
                        ok = abs(cur) <= abs(prev) * (1.0 + CONSERVATION_TOL) + 1e-12
                    else:
                        skipped += 1
                        continue
                else:
                    ok = abs(cur - prev) <= CONSERVATION_TOL * scale
                if not ok:
                    return CheckResult(
                        name, False,
                        f"relevance sum moved from {prev:.6g} to {cur:.6g} at layer {i}",
                    )
    detail = f"{len(nets)} propagation mode(s) probed"
    if skipped:
        detail += f"; {skipped} positive-bias steps outside the rule domain skipped"
    return CheckResult(name, True, detail)


def run_verification(network: Network, probes: int = 20, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    inputs = _probe_inputs(network, probes, rng)
    return [
        check_shape_propagation(network, inputs),
        check_determinism(network, inputs),
        check_fusion_equivalence(network, inputs),
        check_lowering_equivalence(network, inputs),
        check_conservation(network, inputs),
    ]
