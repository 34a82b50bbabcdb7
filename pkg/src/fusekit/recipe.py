"""Declarative merge recipes and the pairwise fold executor.

A recipe is a JSON document::

    {
      "models": {"math": "math.safetensors", "science": "sci.safetensors",
                 "coding": "code.safetensors"},
      "method": "fusion",
      "plan": [["math", "science"], "coding"],
      "lambda": 1.5,
      "epsilon": 1e-8,
      "granularity": "tensor",
      "output": "merged.safetensors"
    }

Fusion merges two models at a time, so ``plan`` is a full binary tree of
model names. At every node the already-merged subtree is the left model and
the newly introduced expert the right one; for two leaves the first listed
is left. ``"swap_sides": true`` flips every node.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from . import __version__
from .baselines import BaselineMethod, BaselineParams, linear_merge, task_arithmetic_merge
from .errors import CompatibilityError, ValidationError
from .fusion import DEFAULT_EPSILON, DEFAULT_LAMBDA, FusionParams, Granularity, fuse_models
from .quantiles import ImportanceStats
from .tensor_store import (
    CheckpointWriter,
    Dtype,
    TensorMap,
    TensorRecord,
    from_f32,
    read_checkpoint,
    to_f32,
    validate_compat,
)

Plan = Union[str, tuple["Plan", "Plan"]]

_KEYS = {
    "models", "method", "plan", "lambda", "epsilon", "granularity", "fixed_threshold",
    "swap_sides", "weights", "scales", "base", "output", "output_dtype", "report",
}
_FUSION_ONLY = {"plan", "lambda", "epsilon", "granularity", "fixed_threshold", "swap_sides"}
_BASELINE_ONLY = {"weights", "scales", "base"}


class Method(enum.Enum):
    FUSION = "fusion"
    LINEAR = "linear"
    TASK_ARITHMETIC = "task_arithmetic"


@dataclass(frozen=True)
class MergeRecipe:
    models: dict[str, Path]
    method: Method = Method.FUSION
    plan: Optional[Plan] = None
    fusion: FusionParams = field(default_factory=FusionParams)
    baseline: Optional[BaselineParams] = None
    output: Optional[Path] = None
    output_dtype: Optional[Dtype] = None
    report: Optional[Path] = None
    swap_sides: bool = False

    @property
    def report_path(self) -> Optional[Path]:
        return self.report

    def used_models(self) -> list[str]:
        if self.method is Method.FUSION:
            return plan_leaves(self.plan)
        return list(self.models)

    def echo(self) -> dict:
        doc: dict[str, Any] = {
            "method": self.method.value,
            "models": {name: str(self.models[name]) for name in self.used_models()},
        }
        if self.method is Method.FUSION:
            doc.update(
                {
                    "plan": plan_to_json(self.plan),
                    "order": plan_label(self.plan),
                    "lambda": self.fusion.lam,
                    "epsilon": self.fusion.epsilon,
                    "granularity": self.fusion.granularity.value,
                    "fixed_threshold": self.fusion.fixed_threshold,
                    "swap_sides": self.swap_sides,
                }
            )
        else:
            doc["weights"] = list(self.baseline.weights)
            if self.baseline.base is not None:
                doc["base"] = self.baseline.base
        doc["output_dtype"] = None if self.output_dtype is None else self.output_dtype.label
        return doc


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------


def plan_leaves(plan: Plan) -> list[str]:
    if isinstance(plan, str):
        return [plan]
    return plan_leaves(plan[0]) + plan_leaves(plan[1])


def plan_label(plan: Plan) -> str:
    if isinstance(plan, str):
        return plan
    return f"({plan_label(plan[0])},{plan_label(plan[1])})"


def plan_to_json(plan: Plan):
    if isinstance(plan, str):
        return plan
    return [plan_to_json(plan[0]), plan_to_json(plan[1])]


def _parse_plan(node, declared: Mapping, path: str, seen: set) -> Plan:
    if isinstance(node, str):
        if node not in declared:
            raise ValidationError(f"{path}: plan references undeclared model {node!r}")
        if node in seen:
            raise ValidationError(f"{path}: model {node!r} appears more than once in the plan")
        seen.add(node)
        return node
    if not isinstance(node, list):
        raise ValidationError(f"{path}: expected a model name or a two-element list")
    if len(node) != 2:
        raise ValidationError(
            f"{path}: fusion merges exactly two models per step, node has {len(node)} entries"
        )
    return (
        _parse_plan(node[0], declared, f"{path}[0]", seen),
        _parse_plan(node[1], declared, f"{path}[1]", seen),
    )


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _number(doc: Mapping, key: str, default=None):
    value = doc.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ValidationError(f"{key}: expected a finite number, got {value!r}")
    return float(value)


def _per_model(value, names: Sequence[str], key: str) -> tuple[float, ...]:
    if isinstance(value, list):
        if len(value) != len(names):
            raise ValidationError(f"{key}: expected {len(names)} values, got {len(value)}")
        values = dict(zip(names, value))
    elif isinstance(value, Mapping):
        missing = [n for n in names if n not in value]
        extra = [n for n in value if n not in names]
        if missing or extra:
            raise ValidationError(f"{key}: must cover exactly {names}; missing {missing}, unexpected {extra}")
        values = dict(value)
    else:
        raise ValidationError(f"{key}: expected an object or a list")
    for name, v in values.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ValidationError(f"{key}.{name}: expected a finite number, got {v!r}")
    return tuple(float(values[n]) for n in names)


def recipe_from_dict(doc: Mapping, base_dir: str | os.PathLike | None = None) -> MergeRecipe:
    if not isinstance(doc, Mapping):
        raise ValidationError("recipe: expected a JSON object")
    unknown = sorted(set(doc) - _KEYS)
    if unknown:
        raise ValidationError(f"recipe: unknown field(s) {', '.join(unknown)}")
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    def resolve(p) -> Path:
        return (base_dir / p).resolve()

    models_doc = doc.get("models")
    if not isinstance(models_doc, Mapping) or not models_doc:
        raise ValidationError("models: expected a non-empty object mapping names to paths")
    models = {}
    for name, p in models_doc.items():
        if not name or not isinstance(p, str) or not p:
            raise ValidationError(f"models.{name}: expected a non-empty path string")
        models[name] = resolve(p)

    try:
        method = Method(doc.get("method", "fusion"))
    except ValueError:
        raise ValidationError(
            f"method: expected one of {[m.value for m in Method]}, got {doc.get('method')!r}"
        ) from None

    output = resolve(doc["output"]) if doc.get("output") is not None else None
    if doc.get("report") is not None:
        report = resolve(doc["report"])
    elif output is not None:
        report = output.with_name(output.name + ".report.json")
    else:
        report = None
    output_dtype = None
    if doc.get("output_dtype") is not None:
        try:
            output_dtype = Dtype.parse(doc["output_dtype"])
        except ValueError as exc:
            raise ValidationError(f"output_dtype: {exc}") from None

    if method is Method.FUSION:
        stray = sorted(_BASELINE_ONLY & set(doc))
        if stray:
            raise ValidationError(f"{stray[0]}: only used by the linear and task_arithmetic methods")
        if "plan" in doc:
            plan = _parse_plan(doc["plan"], models, "plan", set())
        elif len(models) == 2:
            plan = tuple(models)
        else:
            raise ValidationError(f"plan: required when more than two models are declared ({len(models)})")
        if isinstance(plan, str):
            raise ValidationError("plan: fusion needs at least two models")
        swap = doc.get("swap_sides", False)
        if not isinstance(swap, bool):
            raise ValidationError("swap_sides: expected true or false")
        try:
            fusion = FusionParams(
                lam=_number(doc, "lambda", DEFAULT_LAMBDA),
                epsilon=_number(doc, "epsilon", DEFAULT_EPSILON),
                granularity=Granularity.parse(doc.get("granularity", "tensor")),
                fixed_threshold=_number(doc, "fixed_threshold"),
            )
        except ValidationError as exc:
            raise ValidationError(f"fusion parameters: {exc}") from None
        return MergeRecipe(models, method, plan, fusion, None, output, output_dtype, report, swap)

    stray = sorted(_FUSION_ONLY & set(doc))
    if stray:
        raise ValidationError(f"{stray[0]}: only used by the fusion method")
    names = list(models)
    if method is Method.LINEAR:
        if len(names) < 2:
            raise ValidationError("models: linear merge needs at least two models")
        if "base" in doc or "scales" in doc:
            raise ValidationError("linear merge takes weights, not base/scales")
        if "weights" not in doc:
            raise ValidationError("weights: required for method linear")
        weights = _per_model(doc["weights"], names, "weights")
        baseline = BaselineParams(BaselineMethod.LINEAR, weights)
    else:
        if "weights" in doc:
            raise ValidationError("weights: task_arithmetic takes scales")
        base = doc.get("base")
        if base not in models:
            raise ValidationError(f"base: expected a declared model name, got {base!r}")
        experts = [n for n in names if n != base]
        if not experts:
            raise ValidationError("models: task_arithmetic needs at least one expert besides the base")
        if "scales" not in doc:
            raise ValidationError("scales: required for method task_arithmetic")
        scales = _per_model(doc["scales"], experts, "scales")
        baseline = BaselineParams(BaselineMethod.TASK_ARITHMETIC, scales, base)
    return MergeRecipe(models, method, None, FusionParams(), baseline, output, output_dtype, report)


def parse_recipe(text: str, base_dir: str | os.PathLike | None = None) -> MergeRecipe:
    """Parse and validate a JSON recipe; relative paths resolve against ``base_dir``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"recipe is not valid JSON: {exc}") from None
    return recipe_from_dict(doc, base_dir)


def load_recipe(path: str | os.PathLike) -> MergeRecipe:
    path = Path(path)
    return parse_recipe(path.read_text(encoding="utf-8"), path.parent)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _row(stats: ImportanceStats) -> dict:
    return {
        "name": stats.scope,
        "elements": stats.total,
        "threshold": stats.threshold,
        "median": stats.median,
        "q1": stats.q1,
        "q3": stats.q3,
        "updated": stats.updated,
        "update_ratio": stats.update_ratio,
    }


@dataclass
class MergeReport:
    recipe: dict
    inputs: dict
    tensors: list[dict]
    stages: list[dict]
    aggregate: dict
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "tool": "fusekit",
            "version": self.version,
            "recipe": self.recipe,
            "inputs": self.inputs,
            "stages": self.stages,
            "tensors": self.tensors,
            "aggregate": self.aggregate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render_table(self) -> str:
        def fmt(v):
            if v is None:
                return "-"
            if isinstance(v, float):
                return f"{v:.6g}"
            return str(v)

        cols = ["name", "elements", "threshold", "median", "q1", "q3", "updated", "update_ratio"]
        rows = [[fmt(r.get(c)) for c in cols] for r in self.tensors]
        widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(cols)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines.extend("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows)
        return "\n".join(lines)


def strip_timings(doc):
    """Copy of a report dict without wall-clock fields, for reproducibility checks."""
    if isinstance(doc, dict):
        return {k: strip_timings(v) for k, v in doc.items() if k != "wall_time_s"}
    if isinstance(doc, list):
        return [strip_timings(v) for v in doc]
    return doc


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(1 << 24):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


class _Sink:
    """Collects the final stage's tensors, or streams them to disk."""

    def __init__(self, recipe: MergeRecipe, layout_from: TensorMap, write: bool):
        self.dtype = recipe.output_dtype
        self.records: list[TensorRecord] = []
        self.writer = None
        if write and recipe.output is not None:
            layout = [(r.name, self.dtype or r.dtype, r.shape) for r in layout_from.values()]
            self.writer = CheckpointWriter(recipe.output, layout, layout_from.metadata)
        self.metadata = layout_from.metadata

    def __call__(self, rec: TensorRecord) -> None:
        if self.dtype is not None and rec.dtype is not self.dtype:
            rec = rec.with_data(from_f32(to_f32(rec), self.dtype), self.dtype)
        if self.writer is not None:
            self.writer.write(rec.name, rec.data)
        else:
            self.records.append(rec)

    def finish(self, output: Optional[Path]) -> TensorMap:
        if self.writer is not None:
            self.writer.close()
            return read_checkpoint(output, lazy=True)
        return TensorMap(self.records, self.metadata)

    def abort(self) -> None:
        if self.writer is not None:
            self.writer.abort()


def _sides(plan: tuple, swap: bool) -> tuple:
    a, b = plan
    # the accumulated subtree goes left; the fresh expert right
    if isinstance(a, str) and not isinstance(b, str):
        a, b = b, a
    return (b, a) if swap else (a, b)


def execute(recipe: MergeRecipe, threads: int = 1, write: bool = True) -> tuple[TensorMap, MergeReport]:
    """Run a recipe; returns the merged model and its report.

    With ``write`` and an ``output`` path the final stage streams straight to
    disk and the report is written next to it.
    """
    started = time.perf_counter()
    used = recipe.used_models()
    inputs = {name: {"path": str(recipe.models[name]), "sha256": file_digest(recipe.models[name])} for name in used}
    loaded = {name: read_checkpoint(recipe.models[name], lazy=True) for name in used}
    stages: list[dict] = []
    final_stats: list[ImportanceStats] = []

    if recipe.method is Method.FUSION:
        def run(node: Plan, is_root: bool) -> TensorMap:
            if isinstance(node, str):
                return loaded[node]
            left_node, right_node = _sides(node, recipe.swap_sides)
            left = run(left_node, False)
            right = run(right_node, False)
            label = plan_label(node)
            report = validate_compat(left, right)
            if not report.ok:
                raise CompatibilityError(f"at plan node {label}: {report.render()}", report)
            t0 = time.perf_counter()
            sink = _Sink(recipe, left, write) if is_root else None
            try:
                outcome = fuse_models(left, right, recipe.fusion, threads, sink=sink)
            except BaseException:
                if sink is not None:
                    sink.abort()
                raise
            merged = sink.finish(recipe.output) if is_root else outcome.tensors
            stage = {
                "node": label,
                "left": plan_label(left_node),
                "right": plan_label(right_node),
                "elements": outcome.total,
                "updated": outcome.updated,
                "update_ratio": outcome.update_ratio,
                "wall_time_s": time.perf_counter() - t0,
            }
            if outcome.global_stats is not None:
                stage["global"] = _row(outcome.global_stats)
            stages.append(stage)
            if is_root:
                final_stats.extend(outcome.stats)
            return merged

        merged = run(recipe.plan, True)
        rows = [_row(s) for s in final_stats]
        aggregate = {
            "total_elements": sum(r["elements"] for r in rows),
            "total_updated": sum(r["updated"] for r in rows),
        }
        aggregate["update_ratio"] = (
            aggregate["total_updated"] / aggregate["total_elements"] if aggregate["total_elements"] else 0.0
        )
    else:
        t0 = time.perf_counter()
        names = list(recipe.models)
        if recipe.method is Method.LINEAR:
            result = linear_merge([loaded[n] for n in names], recipe.baseline.weights, threads)
        else:
            base = recipe.baseline.base
            experts = [loaded[n] for n in names if n != base]
            result = task_arithmetic_merge(loaded[base], experts, recipe.baseline.weights, threads)
        sink = _Sink(recipe, result, write)
        try:
            for rec in result.values():
                sink(rec)
        except BaseException:
            sink.abort()
            raise
        merged = sink.finish(recipe.output)
        rows = [{"name": r.name, "elements": r.numel} for r in result.values()]
        stages.append(
            {"node": recipe.method.value, "elements": result.numel, "wall_time_s": time.perf_counter() - t0}
        )
        aggregate = {"total_elements": result.numel}

    aggregate["wall_time_s"] = {"total": time.perf_counter() - started}
    report = MergeReport(recipe.echo(), inputs, rows, stages, aggregate)
    if write and recipe.report_path is not None:
        recipe.report_path.write_text(report.to_json(), encoding="utf-8")
    return merged, report


# ---------------------------------------------------------------------------
# plan comparison
# ---------------------------------------------------------------------------


def count_differences(a: TensorMap, b: TensorMap) -> dict[str, int]:
    """Per-tensor count of elements whose stored bits differ."""
    report = validate_compat(a, b)
    if not report.ok:
        raise CompatibilityError(report.render(), report)
    return {name: int(np.count_nonzero(a[name].bits() != b[name].bits())) for name in a}


@dataclass
class PlanComparison:
    plans: list[dict]
    differences: list[dict]

    def to_dict(self) -> dict:
        return {"plans": self.plans, "differences": self.differences}

    def render_table(self) -> str:
        lines = ["plan                          update_ratio"]
        for p in self.plans:
            ratio = "-" if p["update_ratio"] is None else f"{p['update_ratio']:.6f}"
            lines.append(f"{p['plan']:<30}{ratio}")
        lines.append("")
        for d in self.differences:
            lines.append(f"{d['a']} vs {d['b']}: {d['differing']} differing elements")
        return "\n".join(lines)


def compare_plans(recipes: Sequence[MergeRecipe], threads: int = 1) -> PlanComparison:
    """Run several recipes over the same models and compare their outputs."""
    if len(recipes) < 2:
        raise ValidationError(f"comparison needs at least 2 recipes, got {len(recipes)}")
    model_sets = [{(n, recipe.models[n]) for n in recipe.used_models()} for recipe in recipes]
    if any(s != model_sets[0] for s in model_sets[1:]):
        raise ValidationError("all recipes in a comparison must use the same models")
    outputs, plans = [], []
    for i, recipe in enumerate(recipes):
        merged, report = execute(recipe, threads=threads, write=False)
        outputs.append(merged)
        label = plan_label(recipe.plan) if recipe.plan is not None else recipe.method.value
        plans.append(
            {
                "index": i,
                "plan": label,
                "update_ratio": report.aggregate.get("update_ratio"),
                "stages": [
                    {"node": s["node"], "update_ratio": s.get("update_ratio")} for s in report.stages
                ],
            }
        )
    differences = []
    for i in range(len(recipes)):
        for j in range(i + 1, len(recipes)):
            per_tensor = count_differences(outputs[i], outputs[j])
            differences.append(
                {"a": i, "b": j, "differing": sum(per_tensor.values()), "per_tensor": per_tensor}
            )
    return PlanComparison(plans, differences)
