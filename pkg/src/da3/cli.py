"""Command-line entry point: ``da3 <command> [flags]``.

Exit codes: 0 success, 1 usage/configuration error, 2 invariant violation,
3 numeric failure (non-finite values or a failed gradcheck).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvariantViolation, NumericError

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_NUMERIC = 0, 1, 2, 3
ARCHS = ("tiny-cnn", "resnet-basic", "resnet-bottleneck", "resnet50")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


class Context:
    def __init__(self, workdir):
        self.root = Path(workdir)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def emit(self, relpath, text: str) -> Path:
        from .io import atomic_open

        target = self.path(relpath)
        with atomic_open(target, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return target


def _seed(value: int) -> int:
    env = os.environ.get("DA3_SEED")
    if env is None:
        return value
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"DA3_SEED must be an integer, got {env!r}") from None


def _parse_depth(text):
    if text is None:
        return None
    parts = [int(x) for x in str(text).replace("-", ",").split(",") if x]
    return parts[0] if len(parts) == 1 else tuple(parts)


def _load_graph(ctx: Context, args):
    from .layers import build_backbone, load_model

    if getattr(args, "model", None):
        path = ctx.path(args.model)
        if not path.exists():
            raise ConfigError(f"model file not found: {path}")
        return load_model(path)
    arch = getattr(args, "arch", None) or "tiny-cnn"
    shape = None
    if getattr(args, "input_size", None):
        shape = (3, args.input_size, args.input_size)
    return build_backbone(arch, args.num_classes, depth=_parse_depth(args.depth),
                          input_shape=shape)


def _model_flags(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--model", help="model description JSON")
    g.add_argument("--arch", choices=ARCHS, help="built-in backbone instead of --model")
    p.add_argument("--depth", help="blocks per stage, e.g. 3,4,6,3 (or one int)")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--input-size", type=int, help="square input extent for --arch")
    p.add_argument("--odd-mode", choices=("strict", "floor", "ceil"), default=None,
                   help="adaptor behaviour at odd extents (default: ceil for resnet50)")


def _with_strategy(graph, strategy, args):
    from .adaptor import attach_adaptors
    from .layers import set_strategy

    if strategy in ("da3", "adaptor-only") and not graph.adaptors():
        odd = args.odd_mode or ("ceil" if graph.arch == "resnet-bottleneck" else "strict")
        graph = attach_adaptors(graph, beta=getattr(args, "beta", 5.0),
                                temperature=getattr(args, "temperature", 1.0), odd_mode=odd)
    return set_strategy(graph, strategy)


def _resolution(graph, args):
    return tuple(args.res) if args.res else tuple(graph.input_shape[1:])


def _analysis_flags(p):
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--res", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--policy", choices=("paper", "strict"), default="paper")


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(ctx: Context, args) -> int:
    from .profiler import MB, profile

    graph = _with_strategy(_load_graph(ctx, args), args.strategy, args)
    report = profile(graph, None, n=args.batch, resolution=_resolution(graph, args),
                     dtype=args.dtype, policy=args.policy)
    report.strategy = args.strategy
    if args.out:
        ctx.emit(args.out, report.to_csv())
    sys.stdout.write(report.to_text())
    print(f"headline: {args.strategy} activation {report.total_act / MB:.2f} MB, "
          f"param {report.total_param / MB:.3f} MB, grad {report.total_grad / MB:.3f} MB")
    return EXIT_OK


def cmd_compare(ctx: Context, args) -> int:
    from .profiler import compare, profile

    base = _load_graph(ctx, args)
    reports = []
    for strategy in args.strategies:
        graph = _with_strategy(base, strategy, args)
        rep = profile(graph, None, n=args.batch, resolution=_resolution(graph, args),
                      dtype=args.dtype, policy=args.policy)
        rep.strategy = strategy
        reports.append(rep)
    table = compare(reports, args.baseline or args.strategies[0])
    if args.out:
        ctx.emit(args.out, table.to_csv())
    sys.stdout.write(table.to_text())
    return EXIT_OK


def _load_data(ctx: Context, cfg, domain_default: str):
    from .data import TaskSpec, load_dataset, make_domain
    from .train import Dataset

    d = dict(cfg.data)
    if "path" in d:
        return load_dataset(ctx.path(d["path"]), cfg.np_dtype)
    kind = d.pop("kind", "synthetic")
    if kind != "synthetic":
        raise ConfigError(f"unknown data kind {kind!r}")
    domain = d.pop("domain", domain_default)
    n_train = int(d.pop("n_train", 256))
    n_test = int(d.pop("n_test", 256))
    data_seed = int(d.pop("seed", cfg.seed))
    spec = TaskSpec(**d)
    xtr, ytr = make_domain(domain, n_train, spec, seed=2 * data_seed, dtype=cfg.np_dtype)
    xte, yte = make_domain(domain, n_test, spec, seed=2 * data_seed + 1, dtype=cfg.np_dtype)
    return Dataset(xtr, ytr, xte, yte)


def _load_config(ctx: Context, args):
    from .train import RunConfig

    cfg = RunConfig.load(ctx.path(args.config)) if args.config else RunConfig()
    cfg.seed = _seed(cfg.seed)
    if getattr(args, "strategy", None):
        cfg.strategy = args.strategy
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    return cfg


def _write_run(ctx, out_dir, graph, params, cfg):
    from .io import save_checkpoint
    from .layers import save_model

    out = ctx.path(out_dir)
    save_checkpoint(out / "checkpoint", params)
    save_model(graph, out / "model.json")
    cfg.save(out / "config.json")  # fully resolved; rerunnable as --config
    return out


def cmd_train(ctx: Context, args) -> int:
    from .layers import init_params, set_strategy
    from .train import prepare_adaptation, train

    cfg = _load_config(ctx, args)
    backbone = _load_graph(ctx, args)
    data = _load_data(ctx, cfg, "A")
    if cfg.strategy in ("da3", "adaptor-only"):
        graph, params = prepare_adaptation(backbone, init_params(backbone, cfg.seed), cfg)
    else:
        graph = set_strategy(backbone, cfg.strategy)
        params = init_params(graph, cfg.seed)
    out = ctx.path(args.out)
    params, metrics = train(graph, params, data, cfg, metrics_path=out / "metrics.csv",
                            gates_path=out / "gates.csv")
    _write_run(ctx, args.out, graph, params, cfg)
    last = metrics[-1] if metrics else {}
    print(f"trained {cfg.strategy} for {cfg.epochs} epochs; last: "
          f"{json.dumps(last, sort_keys=True)}")
    return EXIT_OK


def cmd_adapt(ctx: Context, args) -> int:
    from .io import load_checkpoint
    from .train import adapt_domain

    cfg = _load_config(ctx, args)
    backbone = _load_graph(ctx, args)
    pretrained = load_checkpoint(ctx.path(args.checkpoint))
    data = _load_data(ctx, cfg, "B")
    out = ctx.path(args.out)
    graph, params, metrics = adapt_domain(backbone, pretrained, data, cfg,
                                          metrics_path=out / "metrics.csv",
                                          gates_path=out / "gates.csv")
    _write_run(ctx, args.out, graph, params, cfg)
    last = metrics[-1] if metrics else {}
    print(f"adapted with {cfg.strategy}; last: {json.dumps(last, sort_keys=True)}")
    return EXIT_OK


def cmd_gradcheck(ctx: Context, args) -> int:
    from .layers import init_missing, init_params
    from .train import gradcheck

    graph = _with_strategy(_load_graph(ctx, args), args.strategy, args)
    seed = _seed(args.seed)
    params = init_missing(graph, init_params(graph, seed, np.float64), seed)
    rng = np.random.default_rng(seed)
    c, h, w = graph.input_shape
    x = rng.normal(size=(args.batch, c, h, w))
    y = rng.integers(graph.num_classes, size=args.batch)
    report = gradcheck(graph, params, x, y, n_probes=args.probes, seed=seed)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        ctx.emit(args.out, text)
    print(f"gradcheck {args.strategy}: max rel err {report.max_rel_err:.3e} over "
          f"{len(report.probes)} probes -> {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_audit(ctx: Context, args) -> int:
    from .layers import forward_record, init_missing, init_params
    from .profiler import profile

    graph = _with_strategy(_load_graph(ctx, args), args.strategy, args)
    seed = _seed(args.seed)
    dtype = np.float32 if args.dtype == "f32" else np.float64
    params = init_missing(graph, init_params(graph, seed, dtype), seed)
    c, h, w = graph.input_shape
    hw = tuple(args.res) if args.res else (h, w)
    x = np.random.default_rng(seed).normal(size=(args.batch, c, *hw)).astype(dtype)
    _, tape = forward_record(graph, params, x, policy=args.policy)
    dump = tape.audit()
    predicted = profile(graph, None, n=args.batch, resolution=hw, dtype=args.dtype,
                        policy=args.policy).total_act
    dump["profiler_saved_bytes"] = predicted
    text = json.dumps(dump, indent=2, sort_keys=True) + "\n"
    if args.out:
        ctx.emit(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"audit: tape retains {dump['saved_bytes']} B, profiler predicts {predicted} B",
          file=sys.stderr)
    if dump["saved_bytes"] != predicted:
        raise InvariantViolation("tape audit disagrees with the analytic profiler")
    return EXIT_OK


def cmd_ablate(ctx: Context, args) -> int:
    from .ablation import AblationConfig, run_ablation
    from .io import read_json

    raw = read_json(ctx.path(args.config)) if args.config else {}
    cfg = AblationConfig.from_dict(raw)
    if args.smoke:
        cfg.smoke = True
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    if "DA3_SEED" in os.environ:
        cfg.seeds = [_seed(0) + i for i in range(len(cfg.seeds))]
    result = run_ablation(cfg, ctx.path(args.out))
    sys.stdout.write(result.to_text())
    failed = [r for r in result.rows if r["status"] != "ok"]
    if failed:
        print(f"{len(failed)} arm run(s) failed; partial results written", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .layers import STRATEGIES

    parser = _Parser(prog="da3", description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default=".", help="root for all relative paths")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="analytic memory report for one strategy")
    _model_flags(p)
    _analysis_flags(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="full")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="compare strategies like-for-like")
    _model_flags(p)
    _analysis_flags(p)
    p.add_argument("--strategies", nargs="+", choices=STRATEGIES,
                   default=["full", "bn-only", "bias-only", "mask", "da3"])
    p.add_argument("--baseline", choices=STRATEGIES)
    p.add_argument("--out", help="comparison CSV output path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("train", help="train from scratch (or with a strategy)")
    _model_flags(p)
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="run", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="adapt a pretrained checkpoint to a new domain")
    _model_flags(p)
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint directory")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="adapt", help="output directory")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _model_flags(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="full")
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("audit", help="dump the tape's retained tensors")
    _model_flags(p)
    _analysis_flags(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON output path (default stdout)")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("ablate", help="four-arm ablation on the synthetic task")
    p.add_argument("--config", help="ablation config JSON")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--smoke", action="store_true", help="one epoch per phase")
    p.add_argument("--out", default="ablation", help="output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help end here
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    ctx = Context(args.workdir)
    if not ctx.root.is_dir():
        print(f"da3: error: workdir {ctx.root} does not exist", file=sys.stderr)
        return EXIT_USAGE
    for flag in ("batch", "probes"):
        if getattr(args, flag, 1) is not None and getattr(args, flag, 1) < 1:
            print(f"da3: error: --{flag} must be >= 1", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(ctx, args)
    except InvariantViolation as exc:
        print(f"da3: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except NumericError as exc:
        print(f"da3: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FileNotFoundError, KeyError, TypeError) as exc:
        print(f"da3: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
