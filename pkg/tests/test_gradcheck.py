import numpy as np
import pytest

from extensions.autodiff import Tensor, make_result, mul, reduce_sum
from utils.gradcheck import check_gradients, op_checks, pipeline_check, relative_error, run_suite, stpdfa_checks


def _scaled_square(x: Tensor, wrong: bool) -> Tensor:
    def backward(g):
        return (g * (3.0 if wrong else 2.0) * x.values,)

    return make_result(x.values ** 2, (x,), backward, "square")


def test_correct_backward_passes():
    x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    result = check_gradients("square", lambda: reduce_sum(_scaled_square(x, wrong=False)), {"x": x}, 1e-6)
    assert result.passed
    assert result.n_checked == 3
    assert x.grad is None


def test_wrong_backward_is_caught():
    x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    result = check_gradients("square", lambda: reduce_sum(_scaled_square(x, wrong=True)), {"x": x})
    assert not result.passed
    assert result.max_rel_error == pytest.approx(1.0 / 3.0, rel=1e-4)


def test_sampled_entries():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    weights = np.linspace(-1.0, 1.0, 12).reshape(3, 4)
    result = check_gradients("weighted", lambda: reduce_sum(mul(x, weights)), {"x": x}, samples=5, seed=2)
    assert result.n_checked == 5
    assert result.passed


def test_relative_error_scale():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0


def test_every_op_passes():
    results = op_checks(seed=0)
    failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not failed
    assert len({r.name for r in results}) == len(results)


def test_aggregation_stack_passes():
    results = stpdfa_checks(seed=0)
    assert results
    assert all(r.passed for r in results), [(r.name, r.max_rel_error) for r in results]


def test_suite_without_pipeline():
    results = run_suite(seed=1, include_pipeline=False)
    assert all(r.passed for r in results)
    assert "pipeline" not in {r.name for r in results}


@pytest.mark.slow
def test_pipeline_passes():
    assert pipeline_check(seed=0).passed
