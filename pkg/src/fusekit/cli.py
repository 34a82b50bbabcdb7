"""Command-line interface.

Exit codes: 0 success, 1 validation or compatibility error (and "files
differ" for ``diff``), 2 I/O or checkpoint format error, 3 internal error.
Data goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CompatibilityError, FusekitError, ValidationError
from .fusion import FusionParams, Granularity
from .recipe import MergeRecipe, MergeReport, compare_plans, execute, load_recipe
from .synth import generate_synthetic_checkpoint, parse_synth_spec, perturb_expert
from .tensor_store import read_checkpoint, read_header, to_f64, validate_compat, write_checkpoint

log = logging.getLogger("fusekit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _print_summary(report: MergeReport) -> None:
    agg = report.aggregate
    if "update_ratio" in agg:
        print(f"update_ratio {agg['update_ratio']:.6f} ({agg['total_updated']}/{agg['total_elements']})")
    for stage in report.stages:
        ratio = stage.get("update_ratio")
        ratio = "" if ratio is None else f" update_ratio {ratio:.6f}"
        print(f"stage {stage['node']}{ratio} wall_time {stage['wall_time_s']:.3f}s")


def cmd_merge(args) -> int:
    recipe = load_recipe(args.recipe)
    if recipe.output is None:
        raise ValidationError("output: required to run a recipe from the command line")
    _, report = execute(recipe, threads=args.threads)
    _print_summary(report)
    if args.table:
        print(report.render_table())
    return 0


def cmd_fuse(args) -> int:
    left = read_checkpoint(args.left, lazy=True)
    right = read_checkpoint(args.right, lazy=True)
    compat = validate_compat(left, right)
    if not compat.ok:
        raise CompatibilityError(compat.render(), compat)
    params = FusionParams(
        lam=args.lam,
        epsilon=args.epsilon,
        granularity=Granularity.parse(args.granularity),
        fixed_threshold=args.fixed_threshold,
    )
    recipe = MergeRecipe(
        models={"left": Path(args.left).resolve(), "right": Path(args.right).resolve()},
        plan=("left", "right"),
        fusion=params,
        output=Path(args.out).resolve(),
        report=Path(args.report).resolve() if args.report else None,
    )
    _, report = execute(recipe, threads=args.threads)
    _print_summary(report)
    if args.table:
        print(report.render_table())
    return 0


def cmd_inspect(args) -> int:
    header = read_header(args.checkpoint)
    rows = [
        {
            "name": e.name,
            "dtype": e.dtype.label,
            "shape": list(e.shape),
            "elements": e.numel,
            "data_offsets": [e.begin, e.end],
        }
        for e in header.entries.values()
    ]
    if args.json:
        doc = {"header_length": header.header_len, "metadata": header.metadata, "tensors": rows}
        print(json.dumps(doc, indent=2, sort_keys=True))
        return 0
    print(f"header_length {header.header_len}  tensors {len(rows)}  elements {sum(r['elements'] for r in rows)}")
    for key, value in sorted(header.metadata.items()):
        print(f"metadata {key} = {value}")
    if rows:
        name_w = max(4, *(len(r["name"]) for r in rows))
        print(f"{'name':<{name_w}}  {'dtype':<5}  {'shape':<20}  {'elements':>12}  byte_range")
        for r in rows:
            shape = "[" + ",".join(map(str, r["shape"])) + "]"
            begin, end = r["data_offsets"]
            print(f"{r['name']:<{name_w}}  {r['dtype']:<5}  {shape:<20}  {r['elements']:>12}  [{begin}, {end})")
    return 0


def _count_diff(a, b, tolerance: float) -> int:
    if tolerance == 0:
        return int(np.count_nonzero(a.bits() != b.bits()))
    x, y = to_f64(a), to_f64(b)
    with np.errstate(invalid="ignore"):
        far = np.abs(x - y) > tolerance
    nan_x, nan_y = np.isnan(x), np.isnan(y)
    return int(np.count_nonzero(far | (nan_x != nan_y)))


def cmd_diff(args) -> int:
    if not (args.tolerance >= 0):
        raise ValidationError("--tolerance must be >= 0")
    a = read_checkpoint(args.a, lazy=True)
    b = read_checkpoint(args.b, lazy=True)
    rows = []
    for name in sorted(set(a) | set(b)):
        row = {"name": name, "status": "ok", "differing": 0, "elements": None}
        if name not in a:
            row["status"] = "missing in a"
        elif name not in b:
            row["status"] = "missing in b"
        elif a[name].shape != b[name].shape:
            row["status"] = f"shape {list(a[name].shape)} vs {list(b[name].shape)}"
        elif a[name].dtype is not b[name].dtype:
            row["status"] = f"dtype {a[name].dtype} vs {b[name].dtype}"
        else:
            row["elements"] = a[name].numel
            row["differing"] = _count_diff(a[name].materialize(), b[name].materialize(), args.tolerance)
            if row["differing"]:
                row["status"] = "differs"
        rows.append(row)
    identical = all(r["status"] == "ok" for r in rows)
    if args.json:
        print(json.dumps({"identical": identical, "tensors": rows}, indent=2, sort_keys=True))
    else:
        name_w = max([4] + [len(r["name"]) for r in rows])
        print(f"{'name':<{name_w}}  {'differing':>10}  {'elements':>12}  status")
        for r in rows:
            elements = "-" if r["elements"] is None else r["elements"]
            print(f"{r['name']:<{name_w}}  {r['differing']:>10}  {elements:>12}  {r['status']}")
        total = sum(r["differing"] for r in rows)
        mismatched = sum(r["elements"] is None for r in rows)
        print(f"total differing {total}, mismatched tensors {mismatched}")
    return 0 if identical else 1


def cmd_synth(args) -> int:
    spec = parse_synth_spec(Path(args.spec).read_text(encoding="utf-8"))
    tmap = generate_synthetic_checkpoint(spec, lazy=True)
    write_checkpoint(tmap, args.out)
    print(f"wrote {args.out} ({len(tmap)} tensors, {tmap.numel} elements)")
    return 0


def cmd_perturb(args) -> int:
    base = read_checkpoint(args.base, lazy=True)
    expert = perturb_expert(base, args.seed, args.fraction, args.magnitude, lazy=True)
    write_checkpoint(expert, args.out)
    print(f"wrote {args.out} ({len(expert)} tensors, {expert.numel} elements)")
    return 0


def cmd_compare(args) -> int:
    recipes = [load_recipe(p) for p in args.recipes]
    result = compare_plans(recipes, threads=args.threads)
    if args.json:
        print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    else:
        print(result.render_table())
    return 0


def _add_threads(p) -> None:
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (output is invariant)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusekit", description="Importance-scored selective merging of model checkpoints.")
    parser.add_argument("--version", action="version", version=f"fusekit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("merge", help="run a merge recipe")
    p.add_argument("recipe")
    p.add_argument("--table", action="store_true", help="print the per-tensor report table")
    _add_threads(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("fuse", help="fuse two checkpoints without a recipe")
    p.add_argument("left")
    p.add_argument("right")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=FusionParams.lam)
    p.add_argument("--epsilon", type=float, default=FusionParams.epsilon)
    p.add_argument("--granularity", choices=["tensor", "global"], default="tensor")
    p.add_argument("--report")
    p.add_argument("--fixed-threshold", type=float, default=None)
    p.add_argument("--table", action="store_true")
    _add_threads(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("inspect", help="list the tensors of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("diff", help="count differing elements per tensor")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--tolerance", type=float, default=0.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("synth", help="generate a synthetic checkpoint from a spec")
    p.add_argument("spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("perturb", help="derive a synthetic expert from a base checkpoint")
    p.add_argument("base")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--magnitude", type=float, default=0.01)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("compare", help="run several recipes and compare their outputs")
    p.add_argument("recipes", nargs="+")
    p.add_argument("--json", action="store_true")
    _add_threads(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, format="fusekit: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.DEBUG)
        if getattr(args, "threads", 1) < 1:
            raise ValidationError("--threads must be >= 1")
        return args.func(args)
    except FusekitError as exc:
        print(f"fusekit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fusekit: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"fusekit: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
