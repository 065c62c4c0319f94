"""``effvit`` command-line entry point.

Exit status: 0 success, 1 validation failure (a check ran and did not pass),
2 input, usage or spec error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from effvit.analysis import TOY_CASES, check_case, compare_attention_variants, taylor_importance
from effvit.analysis.reports import dumps
from effvit.bench import profile_model, throughput
from effvit.core import evt1
from effvit.core import tensor as T
from effvit.core.rng import Rng
from effvit.errors import EffVitError, InputError
from effvit.model import VARIANTS, build_model, count_report, fold_bn, get_spec, load_config, load_weights, save_weights

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class UsageError(EffVitError):
    pass


def _spec(args):
    if args.config:
        try:
            return load_config(args.config)
        except (OSError, ValueError) as exc:
            if isinstance(exc, EffVitError):
                raise
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; choose from {', '.join(VARIANTS)}")
    return get_spec(args.variant)


def _model(args, spec=None):
    spec = spec or _spec(args)
    if args.weights:
        return load_weights(args.weights, spec)
    return build_model(spec, Rng(args.seed), dtype=args.dtype)


def _input_seed(args) -> int:
    # inputs use a stream distinct from the weight stream
    return (args.seed + 1) % 2**64


def _emit(args, text: str) -> None:
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def _render(args, report, table=None, csv=None) -> str:
    if args.format == "table":
        return table() if table else report.to_text()
    if args.format == "csv":
        if csv is None:
            raise UsageError(f"--format csv is not available for {args.command}")
        return csv()
    return report.to_json() + "\n"


def cmd_info(args) -> int:
    spec = _spec(args)
    model = build_model(spec, Rng(args.seed), dtype=args.dtype)
    rep = count_report(model, args.variant if not args.config else "custom", args.resolution)
    doc = {"spec": json.loads(spec.to_json()), "counts": rep.to_dict()}
    if args.format == "table":
        text = (f"variant {rep.variant}\n"
                f"C{{{','.join(map(str, spec.widths))}}} L{{{','.join(map(str, spec.depths))}}} "
                f"H{{{','.join(map(str, spec.heads))}}}\n"
                f"qk_dim {spec.qk_dim}  ffn_ratio {spec.ffn_ratio}  resolution {spec.input_resolution}"
                f"  classes {spec.num_classes}\n" + rep.to_text())
    else:
        text = dumps(doc) + "\n"
    _emit(args, text)
    return EXIT_OK


def cmd_count(args) -> int:
    names = list(VARIANTS) if args.all else [None]
    reports = []
    for n in names:
        if n is not None:
            args.variant, args.config = n, None
        spec = _spec(args)
        model = build_model(spec, Rng(args.seed), dtype=args.dtype)
        reports.append(count_report(model, n or (args.variant if not args.config else "custom"), args.resolution))
    if args.format == "table":
        text = f"{'variant':<10}{'params':>12}{'flops':>14}\n" + "".join(
            f"{r.variant:<10}{r.params / 1e6:>11.2f}M{r.flops / 1e6:>13.1f}M\n" for r in reports)
    elif args.format == "csv":
        text = "variant,resolution,params,flops\n" + "".join(
            f"{r.variant},{r.resolution},{r.params},{r.flops}\n" for r in reports)
    else:
        text = dumps({"reports": [r.to_dict() for r in reports]}) + "\n"
    _emit(args, text)
    return EXIT_OK


def cmd_forward(args) -> int:
    if not args.output:
        raise UsageError("forward needs --output for the logits file")
    spec = _spec(args)
    model = _model(args, spec)
    dtype = T.DTYPE_NAMES[next(t for _, t in model.named_params()).dtype]
    if args.input:
        x = evt1.load(args.input)
        if x.dtype != T.as_dtype(dtype):
            x = T.Tensor(x.data.astype(T.as_dtype(dtype)))
    else:
        r = spec.input_resolution
        x = T.uniform((args.batch, 3, r, r), Rng(_input_seed(args)), -1, 1, dtype=dtype)
    logits = model(x)
    evt1.save(logits, args.output)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = list(TOY_CASES) if args.module == "all" else [args.module]
    reports = [check_case(n, args.tol, args.seed) for n in names]
    ok = all(r.passed for r in reports)
    if args.format == "json":
        text = dumps({"passed": ok, "tolerance": args.tol,
                      "reports": [r.to_dict() for r in reports]}) + "\n"
    else:
        text = "".join(r.to_text() for r in reports) + f"overall {'PASS' if ok else 'FAIL'}\n"
    _emit(args, text)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_similarity(args) -> int:
    spec = _spec(args)
    rep = compare_attention_variants(spec, args.seed, args.batch)
    _emit(args, _render(args, rep, csv=rep.to_csv))
    return EXIT_OK


def cmd_importance(args) -> int:
    spec = _spec(args)
    model = _model(args, spec)
    rng = Rng(_input_seed(args))
    r = spec.input_resolution
    dtype = T.DTYPE_NAMES[next(t for _, t in model.named_params()).dtype]
    x = T.uniform((args.batch, 3, r, r), rng, -1, 1, dtype=dtype)
    labels = rng.integers(args.batch, spec.num_classes)
    rep = taylor_importance(model, x, labels)
    if args.format == "table":
        text = rep.to_text(args.keep)
    else:
        text = rep.to_json(args.keep) + "\n"
    _emit(args, text)
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = _spec(args)
    model = _model(args, spec)
    if args.fold and not model.folded:
        model = fold_bn(model)
    model.eval()
    dtype = T.DTYPE_NAMES[next(t for _, t in model.named_params()).dtype]
    r = spec.input_resolution
    x = T.uniform((args.batch, 3, r, r), Rng(_input_seed(args)), -1, 1, dtype=dtype)
    prof = profile_model(model, x, warmup=1, repeats=args.repeats, granularity=args.granularity)
    tp = throughput(model, args.batch, args.repeats, threads=args.threads, seed=_input_seed(args))
    prof.env["threads"] = args.threads
    prof.env["folded"] = bool(model.folded)
    if args.format == "table":
        text = prof.to_text() + tp.to_text()
    else:
        text = dumps({"profile": prof.to_dict(), "throughput": tp.to_dict()}) + "\n"
    _emit(args, text)
    return EXIT_OK


def cmd_fold(args) -> int:
    if not args.output:
        raise UsageError("fold needs --output for the folded weights file")
    model = _model(args)
    if not model.folded:
        model = fold_bn(model)
    save_weights(model, args.output)
    return EXIT_OK


COMMANDS = {
    "info": cmd_info, "count": cmd_count, "forward": cmd_forward, "gradcheck": cmd_gradcheck,
    "similarity": cmd_similarity, "importance": cmd_importance, "bench": cmd_bench, "fold": cmd_fold,
}


def _positive(kind):
    def parse(s):
        v = kind(s)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {s}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="effvit", description="EfficientViT reference engine and analysis tools")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--variant", default="M0", help="M0..M5 (default M0)")
    src.add_argument("--config", help="JSON model config file")
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    common.add_argument("--format", choices=["json", "table", "csv"], default="json")
    common.add_argument("--output", "-o", help="output path (default stdout for text reports)")
    common.add_argument("--weights", help="weights file to load instead of seeded init")

    helps = {
        "info": "print the model spec with parameter and FLOP counts",
        "count": "parameter and FLOP counts",
        "forward": "run inference, writing logits as EVT1",
        "gradcheck": "finite-difference gradient check on toy modules",
        "similarity": "paired CGA/MHSA head similarity report",
        "importance": "Taylor channel importance scores",
        "bench": "op-category profile and throughput",
        "fold": "fold BatchNorm into weights and save",
    }
    subs = {name: sub.add_parser(name, parents=[common], help=h) for name, h in helps.items()}
    for name in ("info", "count"):
        subs[name].add_argument("--resolution", type=_positive(int))
    subs["count"].add_argument("--all", action="store_true", help="every M0..M5 variant")
    subs["forward"].add_argument("--input", help="EVT1 input tensor [B,3,R,R]")
    subs["gradcheck"].add_argument("--module", default="all", choices=["all", *TOY_CASES])
    subs["gradcheck"].add_argument("--tol", type=_positive(float), default=1e-4)
    for name in ("forward", "similarity", "importance", "bench"):
        subs[name].add_argument("--batch", type=_positive(int), default={"similarity": 2, "importance": 4}.get(name, 1))
    subs["importance"].add_argument("--keep", type=float, default=0.5, help="retained channel fraction")
    subs["bench"].add_argument("--repeats", type=int, default=5)
    subs["bench"].add_argument("--threads", type=_positive(int), default=1)
    subs["bench"].add_argument("--granularity", choices=["category", "op"], default="category")
    subs["bench"].add_argument("--fold", action="store_true", help="fold BatchNorm before timing")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (EffVitError, OSError) as exc:
        print(f"effvit {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
