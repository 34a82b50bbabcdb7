from __future__ import annotations

import json
from pathlib import Path

import pytest

from fusekit.synth import Normal, SynthSpec, TensorSpec, Uniform, generate_synthetic_checkpoint, perturb_expert
from fusekit.tensor_store import Dtype, write_checkpoint

_criteria: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    number, title = marker
    _criteria.setdefault(number, (title, []))[1].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        rep._criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes = _criteria[number]
        verdict = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {verdict}  {title}")


def small_spec(seed: int = 7) -> SynthSpec:
    return SynthSpec(
        seed,
        (
            TensorSpec("embed.weight", (16, 8), Dtype.F32, Normal(0.0, 0.02)),
            TensorSpec("layer.0.bias", (8,), Dtype.BF16, Uniform(-0.1, 0.1)),
            TensorSpec("layer.0.weight", (8, 8), Dtype.F16, Normal(0.0, 0.5)),
            TensorSpec("norm.scale", (8,), Dtype.F64, Normal(1.0, 0.1)),
        ),
    )


@pytest.fixture
def small_base():
    return generate_synthetic_checkpoint(small_spec())


@pytest.fixture
def experts(tmp_path):
    """Base plus three perturbed experts written to disk; returns name -> path."""
    base = generate_synthetic_checkpoint(small_spec(11))
    paths = {"base": tmp_path / "base.safetensors"}
    write_checkpoint(base, paths["base"])
    for i, name in enumerate(["math", "coding", "science"]):
        paths[name] = tmp_path / f"{name}.safetensors"
        write_checkpoint(perturb_expert(base, seed=100 + i, fraction=0.3, magnitude=0.05), paths[name])
    return paths


def write_recipe(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path
