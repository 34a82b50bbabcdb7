import numpy as np
import pytest

from conftest import small_spec

from fusekit.baselines import BaselineMethod, BaselineParams, linear_merge, task_arithmetic_merge
from fusekit.errors import CompatibilityError, ValidationError
from fusekit.synth import generate_synthetic_checkpoint, perturb_expert
from fusekit.tensor_store import Dtype, TensorMap, TensorRecord, from_f32, to_f32


def scalar_map(value, dtype=Dtype.F32):
    return TensorMap([TensorRecord("w", dtype, (1,), from_f32([value], dtype))])


@pytest.fixture
def models():
    base = generate_synthetic_checkpoint(small_spec(21))
    return base, [perturb_expert(base, seed=s, fraction=0.4, magnitude=0.2) for s in (1, 2, 3)]


def test_linear_one_hot_is_identity(models):
    base, (a, b, c) = models
    assert linear_merge([a, b], [1.0, 0.0]) == a
    assert linear_merge([a, b, c], [0.0, 0.0, 1.0]) == c


def test_linear_fixed_point(models):
    base, _ = models
    assert linear_merge([base, base], [0.3, 0.7]).keys() == base.keys()
    merged = linear_merge([base, base], [0.25, 0.75])
    for name in base:
        np.testing.assert_array_equal(to_f32(merged[name]), to_f32(base[name]))


def test_linear_midpoint():
    out = linear_merge([scalar_map(2.0), scalar_map(4.0)], [0.5, 0.5])
    assert to_f32(out["w"]).tolist() == [3.0]


def test_linear_permutation_equivariance(models):
    _, (a, b, c) = models
    one = linear_merge([a, b, c], [0.2, 0.3, 0.5])
    other = linear_merge([c, a, b], [0.5, 0.2, 0.3])
    for name in one:
        # summation order differs, so allow one rounding step
        np.testing.assert_allclose(to_f32(one[name]), to_f32(other[name]), rtol=1e-6)


def test_linear_invalid_weights(models):
    _, (a, b, _) = models
    with pytest.raises(ValidationError, match="sum to 1"):
        linear_merge([a, b], [0.5, 0.6])
    with pytest.raises(ValidationError, match="non-negative"):
        linear_merge([a, b], [1.5, -0.5])
    with pytest.raises(ValidationError, match="at least two"):
        linear_merge([a], [1.0])
    with pytest.raises(ValidationError):
        linear_merge([a, b], [1.0])


def test_linear_incompatible():
    with pytest.raises(CompatibilityError):
        linear_merge([scalar_map(1.0), scalar_map(1.0, Dtype.F16)], [0.5, 0.5])


def test_task_arithmetic_identities(models):
    base, (a, b, c) = models
    assert task_arithmetic_merge(base, [a, b], [0.0, 0.0]) == base
    assert task_arithmetic_merge(base, [a], [1.0]) == a
    assert task_arithmetic_merge(base, [a, b, c], [0.0, 1.0, 0.0]) == b


def test_task_arithmetic_direct_evaluation():
    out = task_arithmetic_merge(scalar_map(0.0), [scalar_map(1.0), scalar_map(2.0)], [0.5, 0.5])
    assert to_f32(out["w"]).tolist() == [1.5]


def test_task_arithmetic_errors(models):
    base, (a, b, _) = models
    with pytest.raises(ValidationError, match="2 experts but 1 scales"):
        task_arithmetic_merge(base, [a, b], [1.0])
    with pytest.raises(ValidationError):
        task_arithmetic_merge(base, [], [])
    with pytest.raises(CompatibilityError):
        task_arithmetic_merge(scalar_map(0.0), [scalar_map(0.0, Dtype.F64)], [1.0])


def test_nan_propagates():
    out = linear_merge([scalar_map(float("nan")), scalar_map(1.0)], [0.5, 0.5])
    assert np.isnan(to_f32(out["w"])).all()


def test_baseline_params():
    assert BaselineParams(BaselineMethod.LINEAR, [0.5, 0.5]).weights == (0.5, 0.5)
    with pytest.raises(ValidationError):
        BaselineParams(BaselineMethod.LINEAR, [0.5, 0.4])
    with pytest.raises(ValidationError, match="base"):
        BaselineParams(BaselineMethod.TASK_ARITHMETIC, [1.0])
