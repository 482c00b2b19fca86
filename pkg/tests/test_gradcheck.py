import numpy as np
import pytest

from crdn import ops
from crdn.gradcheck import finite_diff_check, relative_error
from crdn.gradsuite import run_suite
from crdn.model import CrdnConfig
from crdn.tensor import Tensor, make_output


def test_quadratic_derivative():
    theta = Tensor(np.array([3.0]))
    res = finite_diff_check(lambda: ops.sum_all(theta * theta), [theta])
    assert res.checked == 1
    assert res.max_rel_error * 6.0 < 1e-8


def test_relu_kink_at_zero_is_excluded():
    x = Tensor(np.array([0.0, 0.5, -0.5]))
    res = finite_diff_check(lambda: ops.sum_all(ops.relu(x)), [x], max_coords=None)
    assert res.skipped_kinks == 1
    assert res.checked == 2
    assert res.max_rel_error < 1e-9


def test_conv_sigmoid_sum_pipeline():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3)
    b = Tensor(rng.standard_normal(4))
    res = finite_diff_check(lambda: ops.sum_all(ops.sigmoid(ops.conv2d(x, w, b, padding=1))), [x, w, b])
    assert res.max_rel_error < 1e-6


def test_wrong_gradient_is_caught():
    def bad_square(t):
        return make_output(t.data ** 2, (t,), lambda g: (g * 2.2 * t.data,))

    x = Tensor(np.array([1.0, -2.0, 0.7]))
    res = finite_diff_check(lambda: ops.sum_all(bad_square(x)), [x])
    assert res.max_rel_error > 0.05
    assert not res.passed()


def test_single_precision_rejected():
    x = Tensor(np.ones(2, dtype=np.float32))
    with pytest.raises(TypeError, match="double"):
        finite_diff_check(lambda: ops.sum_all(x), [x])


def test_sampling_is_seeded():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 2, 8, 8)))
    f = lambda: ops.sum_all(ops.tanh(x) * x)
    a = finite_diff_check(f, [x], max_coords=5, seed=3)
    b = finite_diff_check(f, [x], max_coords=5, seed=3)
    assert a.max_rel_error == b.max_rel_error and a.checked == 5


def test_relative_error_floor():
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-6)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_parameters_restored_after_check():
    x = Tensor(np.array([0.25, 1.5]))
    before = x.data.copy()
    finite_diff_check(lambda: ops.sum_all(ops.sigmoid(x)), [x])
    np.testing.assert_array_equal(x.data, before)


@pytest.mark.parametrize("variant", ["convrnn", "convgru"])
def test_suite_passes_for_other_model_variants(variant):
    cases = run_suite(CrdnConfig(variant=variant, gates="literal-relu"), seed=2)
    model_case = cases[-1]
    assert model_case.name.startswith("model:" + variant)
    failed = [c.name for c in cases if not c.passed(1e-4)]
    assert not failed
