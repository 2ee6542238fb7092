"""Command-line interface.

Subcommands: forward, gradcheck, bench, toytrain, visualize.

Exit codes: 0 on success, 1 for configuration or validation errors,
2 when a numeric gate trips (disagreement, divergence, threshold miss),
3 for file I/O problems.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .. import attention, backend, channelwise, inspect as inspect_mod
from ..tensor import read_stns, write_stns
from . import bench as bench_mod
from . import gradcheck as gradcheck_mod
from .config import (
    ConfigError,
    NumericGateError,
    RunConfig,
    VARIANTS,
    build_params,
    parse_extents,
)
from .toy import metrics_csv, train_toy


class _Parser(argparse.ArgumentParser):
    """argparse reports usage errors with exit code 2; remap them onto the
    validation exit code by raising through the normal error path."""

    def error(self, message):
        raise ConfigError(message)


def _add_model_args(parser, variant_default="structsa-contextual"):
    parser.add_argument("--variant", default=variant_default,
                        help="one of: " + ", ".join(VARIANTS))
    parser.add_argument("--grid", default="16",
                        help="token grid extents, e.g. 16 or 4x4")
    parser.add_argument("--kernel", default="3",
                        help="window extents per axis, e.g. 3 or 3x3")
    parser.add_argument("--padding", default="zero",
                        help="zero or circular")
    parser.add_argument("--d", dest="structure_dim", type=int, default=4,
                        help="number of structure slots D")
    parser.add_argument("--heads", type=int, default=1)
    parser.add_argument("--softmax-domain", default="flat",
                        help="flat or per-query")
    parser.add_argument("--scale", type=float, default=1.0)
    parser.add_argument("--dtype", default="f64", help="f32 or f64")
    parser.add_argument("--seed", type=int, default=0)


def _config_from_args(args):
    return RunConfig(
        variant=args.variant,
        extents=parse_extents(args.grid),
        kernel_extents=parse_extents(args.kernel),
        padding=args.padding,
        structure_dim=args.structure_dim,
        heads=args.heads,
        softmax_domain=args.softmax_domain,
        scale=args.scale,
        dtype=args.dtype,
        seed=args.seed,
    ).validate()


def _load_input(path, config):
    x = read_stns(path)
    if x.ndim != 2:
        raise ConfigError(
            "input: expected a 2D (tokens, channels) tensor, got %dD" % x.ndim)
    n = config.grid().n_tokens
    if x.shape[0] != n:
        raise ConfigError(
            "input: %d tokens do not match grid with %d sites" % (x.shape[0], n))
    return np.ascontiguousarray(x.astype(config.numpy_dtype(), copy=False))


def _cmd_forward(args):
    config = _config_from_args(args)
    x = _load_input(args.in_path, config)
    params = build_params(config, x.shape[1])
    ledger = None
    if args.heads > 1:
        y = attention.multihead(x, params)
    elif config.variant == "channelwise-naive":
        ledger = channelwise.CostLedger()
        y = channelwise.structsa_channelwise_naive(x, params, ledger)
    elif config.variant == "channelwise-efficient":
        ledger = channelwise.CostLedger()
        y = channelwise.structsa_channelwise_efficient(x, params, ledger)
    else:
        y = attention.dispatch(x, params)
    write_stns(args.out_path, y)
    if ledger is not None:
        for phase, flops, elems in ledger.rows():
            print("ledger %s flops=%d intermediate_elems=%d"
                  % (phase, flops, elems))
        print("ledger total flops=%d intermediate_elems=%d"
              % (ledger.total_flops(), ledger.total_intermediates()))
    print("forward %s tokens=%d channels=%d backend=%s -> %s"
          % (config.variant, y.shape[0], y.shape[1], backend.name(),
             args.out_path))
    return 0


def _cmd_gradcheck(args):
    if args.variant == "all":
        ops = gradcheck_mod.CHECK_OPS
    else:
        matches = [op for op, name in gradcheck_mod.VARIANT_FOR_OP.items()
                   if name == args.variant and op != "multihead"]
        if not matches:
            raise ConfigError("variant: unknown gradcheck target %r"
                              % args.variant)
        ops = tuple(matches)
    records, worst = gradcheck_mod.run(
        ops=ops, configs=args.configs, seed=args.seed, step=args.step,
        corrupt=args.corrupt)
    by_case = {}
    for op_id, index, leaf, err in records:
        key = (index, op_id)
        if key not in by_case or err > by_case[key][1]:
            by_case[key] = (leaf, err)
    for (index, op_id), (leaf, err) in sorted(by_case.items()):
        print("config %02d %-22s max_rel_err=%.3e (%s)"
              % (index, op_id, err, leaf))
    print("gradcheck worst=%.3e threshold=%.1e checks=%d"
          % (worst, args.threshold, len(records)))
    if not (worst <= args.threshold):
        raise NumericGateError(
            "gradient check failed: worst relative error %.3e exceeds %.1e"
            % (worst, args.threshold))
    return 0


def _cmd_bench(args):
    cases = [bench_mod.parse_case(text) for text in args.sweep]
    backends = bench_mod.resolve_backends(args.backends)
    lines = bench_mod.run_sweep(cases, backends, seed=args.seed,
                                dtype=args.dtype, timing=args.timing)
    text = "\n".join(lines) + "\n"
    if args.out_path:
        with open(args.out_path, "w", encoding="ascii") as handle:
            handle.write(text)
    sys.stdout.write(text)
    return 0


def _cmd_toytrain(args):
    config = RunConfig(
        variant=args.variant,
        extents=(args.tokens,),
        kernel_extents=parse_extents(args.kernel),
        padding=args.padding,
        structure_dim=args.structure_dim,
        heads=1,
        softmax_domain=args.softmax_domain,
        scale=args.scale,
        dtype="f64",
        seed=args.seed,
    ).validate()
    metrics, reached = train_toy(
        config=config, steps=args.steps, lr=args.lr, seed=args.seed,
        samples=args.samples, tokens=args.tokens, channels=args.channels,
        threshold=args.threshold)
    if args.out_path:
        with open(args.out_path, "w", encoding="ascii") as handle:
            handle.write(metrics_csv(metrics))
    last = metrics[-1]
    print("toytrain %s steps=%d final_loss=%.6f final_acc=%.4f"
          % (config.variant, last[0], last[1], last[2]))
    if reached is None:
        raise NumericGateError(
            "toy task did not reach accuracy %.2f within %d steps"
            % (args.threshold, args.steps))
    print("reached accuracy >= %.2f at step %d" % (args.threshold, reached))
    return 0


_VISUAL_VARIANTS = ("convsa", "structsa-scalar", "structsa-contextual",
                    "channelwise-naive", "channelwise-efficient")


def _cmd_visualize(args):
    config = _config_from_args(args)
    if config.variant not in _VISUAL_VARIANTS:
        raise ConfigError("variant: visualization supports %s"
                          % ", ".join(_VISUAL_VARIANTS))
    if config.heads != 1:
        raise ConfigError("heads: visualization uses a single head")
    if args.in_path:
        x = _load_input(args.in_path, config)
        channels = x.shape[1]
    else:
        channels = args.channels
        rng = np.random.default_rng(config.seed)
        n = config.grid().n_tokens
        x = rng.uniform(-1.0, 1.0, size=(n, channels))
        x = x.astype(config.numpy_dtype())
    params = build_params(config, channels)
    field = inspect_mod.extract_kernels(x, params)
    queries = args.query if args.query else [0]
    n = field.grid.n_tokens
    os.makedirs(args.out_dir, exist_ok=True)
    written = []
    for q in queries:
        if not 0 <= q < n:
            raise ConfigError("query: index %d out of range for %d tokens"
                              % (q, n))
        if field.variant == inspect_mod.VARIANT_SCALAR:
            merged = inspect_mod.MergedMap(field.kernels, field.grid)
            path = os.path.join(args.out_dir, "q%03d_scores.pgm" % q)
            inspect_mod.export_map(merged, path, query=q)
            written.append(path)
        else:
            if field.variant == inspect_mod.VARIANT_CHANNELWISE:
                per_channel = inspect_mod.merge_channel(field, args.channel)
                window = field.kernels[q, :, :, args.channel]
                merged = per_channel
            else:
                window = field.kernels[q]
                merged = inspect_mod.merge_attention_map(field)
            kpath = os.path.join(args.out_dir, "q%03d_kernels.pgm" % q)
            inspect_mod.export_pgm(window, kpath)
            written.append(kpath)
            mpath = os.path.join(args.out_dir, "q%03d_merged.pgm" % q)
            inspect_mod.export_map(merged, mpath, query=q)
            written.append(mpath)
    if args.dump_kernels:
        with open(args.dump_kernels, "w", encoding="ascii") as handle:
            handle.write(_kernel_csv(field))
        written.append(args.dump_kernels)
    for path in written:
        print("wrote %s" % path)
    print("visualize %s queries=%d files=%d"
          % (field.variant, len(queries), len(written)))
    return 0


def _kernel_csv(field):
    k = field.kernels
    if field.variant == inspect_mod.VARIANT_SCALAR:
        header = "i,j,value"
        rows = ("%d,%d,%r" % (i, j, float(k[i, j]))
                for i in range(k.shape[0]) for j in range(k.shape[1]))
    elif field.variant == inspect_mod.VARIANT_CHANNELWISE:
        header = "i,j,m,c,value"
        rows = ("%d,%d,%d,%d,%r" % (i, j, m, c, float(k[i, j, m, c]))
                for i in range(k.shape[0]) for j in range(k.shape[1])
                for m in range(k.shape[2]) for c in range(k.shape[3]))
    else:
        header = "i,j,m,value"
        rows = ("%d,%d,%d,%r" % (i, j, m, float(k[i, j, m]))
                for i in range(k.shape[0]) for j in range(k.shape[1])
                for m in range(k.shape[2]))
    return header + "\n" + "\n".join(rows) + "\n"


def build_parser():
    parser = _Parser(prog="structsa",
                     description="structural self-attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="run one attention forward pass")
    _add_model_args(p)
    p.add_argument("--in", dest="in_path", required=True,
                   help="input tensor (.stns)")
    p.add_argument("--out", dest="out_path", required=True,
                   help="output tensor (.stns)")
    p.set_defaults(handler=_cmd_forward)

    p = sub.add_parser("gradcheck",
                       help="compare analytic gradients to finite differences")
    p.add_argument("--variant", default="all",
                   help="'all' or one of: " + ", ".join(VARIANTS))
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-6)
    p.add_argument("--corrupt", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(handler=_cmd_gradcheck)

    p = sub.add_parser("bench",
                       help="compare naive and reordered channelwise routes")
    p.add_argument("--sweep", action="append", default=None,
                   help="case as N,C,M,D (repeatable)")
    p.add_argument("--backends", default="current",
                   help="current, both, python, or compiled")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="f64")
    p.add_argument("--timing", dest="timing", action="store_true",
                   default=True)
    p.add_argument("--no-timing", dest="timing", action="store_false",
                   help="write zeros in the wall_time_s column")
    p.add_argument("--out", dest="out_path", default=None)
    p.set_defaults(handler=_cmd_bench)

    p = sub.add_parser("toytrain", help="train the shifted-pattern toy task")
    p.add_argument("--variant", default="structsa-contextual")
    p.add_argument("--kernel", default="3")
    p.add_argument("--padding", default="circular")
    p.add_argument("--d", dest="structure_dim", type=int, default=4)
    p.add_argument("--softmax-domain", default="flat")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--threshold", type=float, default=0.99)
    p.add_argument("--out", dest="out_path", default=None,
                   help="metrics CSV path")
    p.set_defaults(handler=_cmd_toytrain)

    p = sub.add_parser("visualize", help="export attention kernel images")
    _add_model_args(p)
    p.add_argument("--in", dest="in_path", default=None,
                   help="input tensor (.stns); random when omitted")
    p.add_argument("--channels", type=int, default=8,
                   help="channel count for random input")
    p.add_argument("--query", type=int, action="append", default=None,
                   help="query index (repeatable, default 0)")
    p.add_argument("--channel", type=int, default=0,
                   help="channel slice for channelwise kernels")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--dump-kernels", dest="dump_kernels", default=None,
                   help="also write the full kernel field as CSV")
    p.set_defaults(handler=_cmd_visualize)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) == "bench" and args.sweep is None:
            args.sweep = ["128,16,3,4"]
        return args.handler(args)
    except NumericGateError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except ValueError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
