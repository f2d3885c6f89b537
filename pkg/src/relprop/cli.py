"""Command-line driver: fuse, explain, verify, render, info.

Every failure exits non-zero with a single machine-parseable line
``error:<category>: message`` on stderr.  Exit codes: 0 success, 1 usage,
2 validation or invariant failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import RelpropError
from .fusion import POLICIES, POLICY_BYPASS, POLICY_LOWER, fuse_network
from .heatmap import load_image, read_csv, render_heatmap, write_csv, write_ppm
from .lrp import (
    BIAS_ABSORB,
    BIAS_REQUIRE_NONPOSITIVE,
    LrpConfig,
    POOL_PROPORTIONAL,
    POOL_WINNER,
    explain,
)
from .model import (
    BatchNorm,
    Conv2D,
    Dense,
    layer_kind,
    load_model,
    normalize_pixels,
    save_model,
)
from .verify import run_verification

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relprop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fold normalization layers and write the result")
    p.add_argument("model")
    p.add_argument("--policy", choices=POLICIES, default="fuse")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("explain", help="relevance heat-map for one image")
    p.add_argument("model")
    p.add_argument("image", help="PGM/PPM image with raw 0..255 pixel values")
    p.add_argument("--class", dest="seed_class", type=int, default=None)
    p.add_argument(
        "--bias-policy", choices=[BIAS_ABSORB, BIAS_REQUIRE_NONPOSITIVE], default=BIAS_ABSORB
    )
    p.add_argument("--pool-rule", choices=[POOL_WINNER, POOL_PROPORTIONAL], default=POOL_WINNER)
    p.add_argument("--epsilon", type=float, default=1e-9)
    p.add_argument(
        "--no-fuse-bn", action="store_true",
        help="bypass normalization layers during propagation (comparison baseline)",
    )
    p.add_argument("--norm", default="max", help="heat-map normalization: max or pN")

    p = sub.add_parser("verify", help="run the invariant suite against a model")
    p.add_argument("model")
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("render", help="render a relevance CSV as a PPM heat-map")
    p.add_argument("relevance", help="relevance CSV file")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--norm", default="max", help="max or pN")

    p = sub.add_parser("info", help="print the layer table and metadata")
    p.add_argument("model")
    return parser


def _cmd_fuse(args) -> int:
    network = load_model(args.model)
    fused, report = fuse_network(network, args.policy)
    save_model(fused, args.output)
    out = Path(args.output)
    base = out.name[: -len(".lrp.json")] if out.name.endswith(".lrp.json") else out.stem
    report_path = out.with_name(base + ".fusion.json")
    report.save(report_path)
    print(f"wrote {out} and {report_path}")
    print(f"fused {len(report.records)} normalization layer(s), {len(report.unfused)} left")
    for entry in report.unfused:
        print(f"  layer {entry['layer_index']}: {entry['reason']}")
    return EXIT_OK


def _cmd_explain(args) -> int:
    network = load_model(args.model)
    raw = load_image(args.image)
    x = normalize_pixels(raw)
    policy = POLICY_BYPASS if args.no_fuse_bn else POLICY_LOWER
    prepared, report = fuse_network(network, policy)
    if report.unfused and policy != POLICY_BYPASS:
        reasons = "; ".join(
            f"layer {e['layer_index']}: {e['reason']}" for e in report.unfused
        )
        raise RelpropError(f"cannot fold every normalization layer ({reasons})")
    cfg = LrpConfig(
        bias_policy=args.bias_policy,
        pool_rule=args.pool_rule,
        epsilon=args.epsilon,
        seed_class=args.seed_class,
    )
    trace = explain(prepared, x, cfg)
    csv_path = args.image + ".relevance.csv"
    ppm_path = args.image + ".heat.ppm"
    write_csv(trace.input_relevance, csv_path)
    heat = render_heatmap(_pixel_map(trace.input_relevance), args.norm)
    write_ppm(heat, ppm_path)
    print(
        f"class {trace.class_index} logit {trace.seed_logit:.6g} "
        f"input relevance sum {trace.layer_sums[-1]:.6g}"
    )
    for w in trace.warnings:
        print(f"warning: {w}")
    if heat.all_zero:
        print("warning: relevance map is all zero, heat-map is uniform white")
    print(f"wrote {csv_path} and {ppm_path}")
    return EXIT_OK


def _pixel_map(r):
    r = np.asarray(r, dtype=np.float64)
    if r.ndim == 3:
        r = r.sum(axis=0)
    # negative values only arise in the bypass baseline; clamp for display
    return np.maximum(r, 0.0)


def _cmd_verify(args) -> int:
    network = load_model(args.model)
    results = run_verification(network, probes=args.probes, seed=args.seed)
    for res in results:
        print(res.line())
    if all(res.passed for res in results):
        return EXIT_OK
    failed = ", ".join(res.name for res in results if not res.passed)
    print(f"error:validation: invariant checks failed: {failed}", file=sys.stderr)
    return EXIT_VALIDATION


def _cmd_render(args) -> int:
    r = read_csv(args.relevance)
    heat = render_heatmap(np.maximum(r, 0.0), args.norm)
    write_ppm(heat, args.output)
    if heat.all_zero:
        print("warning: relevance map is all zero, heat-map is uniform white")
    print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_info(args) -> int:
    network = load_model(args.model)
    shapes = network.activation_shapes
    print(f"input shape {list(network.input_shape)}, "
          f"bounds [{network.input_low}, {network.input_high}], "
          f"{network.class_count} classes")
    for i, layer in enumerate(network.layers):
        detail = ""
        if isinstance(layer, Dense):
            detail = f"weights {list(layer.weights.shape)}"
        elif isinstance(layer, Conv2D):
            detail = (
                f"kernel {list(layer.kernel.shape)} stride {layer.stride} "
                f"padding {layer.padding}"
            )
        elif isinstance(layer, BatchNorm):
            detail = f"{len(layer.params)} channels, placement {layer.placement or 'untagged'}"
            if layer.bypass:
                detail += ", bypass"
        elif hasattr(layer, "window"):
            detail = f"window {list(layer.window)} stride {layer.stride}"
        print(f"{i:3d}  {layer_kind(layer):9s} {str(list(shapes[i])):>16s} -> "
              f"{str(list(shapes[i + 1])):16s} {detail}")
    if network.metadata:
        print("metadata:")
        for key, value in network.metadata.items():
            print(f"  {key}: {value}")
    return EXIT_OK


_COMMANDS = {
    "fuse": _cmd_fuse,
    "explain": _cmd_explain,
    "verify": _cmd_verify,
    "render": _cmd_render,
    "info": _cmd_info,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error:usage: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except RelpropError as e:
        print(f"error:{e.category}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error:io: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
