"""``quota`` command line: calibrate, run, gflops, compare.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Settings come from a JSON config file; ``QUOTA_SEED`` overrides its seed and
explicit flags override both.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .gflops import CostModel, recipe_flops
from .harness import MODES, ConfigError, PipelineConfig, RunReport, build_context, calibrate, compare_report, run_pipeline
from .recipe import RecipeError, load_recipe

log = logging.getLogger("quota")


class UsageError(Exception):
    pass


def _header(seed, recipe_digest) -> dict:
    return {"tool": "quota", "version": __version__, "seed": seed, "recipe_digest": recipe_digest}


def _write_json(obj, out) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def load_config(args) -> PipelineConfig:
    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
    cfg = PipelineConfig.from_dict(data)
    overrides = {}
    env_seed = os.environ.get("QUOTA_SEED")
    if env_seed is not None:
        try:
            overrides["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"QUOTA_SEED must be an integer, got {env_seed!r}") from None
    for flag in ("seed", "p_min", "tau", "window", "text_len", "mode"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    if getattr(args, "samples", None) is not None:
        overrides["eval_samples"] = args.samples
    cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def cmd_calibrate(args) -> int:
    cfg = load_config(args)
    ctx = build_context(cfg)
    result = calibrate(ctx)
    out = Path(args.out)
    result.recipe.save(out)
    diag_out = Path(args.diagnostics_out) if args.diagnostics_out else out.with_suffix(".diagnostics.json")
    sched = result.schedule
    _write_json({
        "header": _header(cfg.seed, result.recipe.digest()),
        "diagnostics": result.diagnostics.to_dict(),
        "sensitivity": result.profile.to_dict(),
        "schedule": {
            "candidate_layers": list(sched.candidate_layers),
            "drop_shares": [float(x) for x in sched.drop_shares],
            "drops": [float(x) for x in sched.drops],
            "keep_ratios": [float(x) for x in sched.keep_ratios],
            "tau": sched.tau,
            "p_min": sched.p_min,
        },
    }, diag_out)
    log.info("wrote %s and %s", out, diag_out)
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args)
    recipe = load_recipe(args.recipe) if args.recipe else None
    report = run_pipeline(cfg, recipe=recipe)
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    else:
        sys.stdout.write(report.to_json())
    if args.trace:
        lines = [json.dumps(row, sort_keys=True) for sample in report.retained for row in sample]
        Path(args.trace).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return 0


def parse_dims(text: str) -> dict:
    dims = {}
    for part in text.split(","):
        key, sep, value = part.partition("=")
        if not sep or key.strip() not in ("n_layers", "d_model", "d_ff", "n_heads"):
            raise UsageError(f"bad --dims entry {part!r}; expected n_layers=,d_model=,d_ff=[,n_heads=]")
        try:
            dims[key.strip()] = int(value)
        except ValueError:
            raise UsageError(f"bad --dims value {part!r}") from None
    missing = {"n_layers", "d_model", "d_ff"} - set(dims)
    if missing:
        raise UsageError(f"--dims is missing {sorted(missing)}")
    return dims


def cmd_gflops(args) -> int:
    recipe = load_recipe(args.recipe)
    if args.dims:
        dims = parse_dims(args.dims)
    else:
        m = load_config(args).model
        dims = {"n_layers": m.n_layers, "d_model": m.d_model, "d_ff": m.d_ff, "n_heads": m.n_heads}
    try:
        cost = CostModel(text_len=args.text_len, f_vt=args.f_vt, f_pj=args.f_pj, **dims)
        report = recipe_flops(recipe, cost)
    except ValueError as exc:
        raise UsageError(f"inconsistent dims: {exc}") from None
    payload = {"header": _header(None, recipe.digest()), "text_len": args.text_len, **report.to_dict()}
    _write_json(payload, args.out)
    if args.out:
        print(f"GFLOPs ratio: {report.ratio_pct:.2f}%")
    return 0


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        try:
            reports.append(RunReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8"))))
        except FileNotFoundError:
            raise UsageError(f"report not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path} is not valid JSON: {exc}") from None
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from None
    try:
        table = compare_report(reports)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.write(table.render_text())
    if args.json_out:
        Path(args.json_out).write_text(table.to_json(), encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quota", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"quota {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="model/sample seed (overrides QUOTA_SEED and config)")

    p = sub.add_parser("calibrate", help="profile sensitivities and write a pruning recipe")
    common(p)
    p.add_argument("--out", default="recipe.json")
    p.add_argument("--diagnostics-out", help="defaults to <out>.diagnostics.json")
    p.add_argument("--p-min", dest="p_min", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--window", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="evaluate one pipeline mode")
    common(p)
    p.add_argument("--recipe", help="recipe JSON (calibrated inline when omitted)")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--samples", type=int, help="number of evaluation samples")
    p.add_argument("--out")
    p.add_argument("--trace", help="write retained-token trace as JSON lines")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gflops", help="estimate the prefill GFLOPs ratio of a recipe")
    common(p)
    p.add_argument("--recipe", required=True)
    p.add_argument("--dims", help="n_layers=..,d_model=..,d_ff=..[,n_heads=..]; default: config model")
    p.add_argument("--text-len", dest="text_len", type=int, default=16)
    p.add_argument("--f-vt", dest="f_vt", type=float, default=0.0)
    p.add_argument("--f-pj", dest="f_pj", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gflops)

    p = sub.add_parser("compare", help="tabulate run reports over the same samples")
    p.add_argument("reports", nargs="+")
    p.add_argument("--json-out", dest="json_out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, RecipeError) as exc:
        print(f"quota {args.command}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"quota {args.command}: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"quota {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
