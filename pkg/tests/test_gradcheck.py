import numpy as np
import pytest

from surfage.checks import GRADCHECK_GATE, run_gradient_checks
from surfage.gradcheck import finite_diff_gradcheck
from surfage.tensor import Parameter, Tensor, _record, _make


def test_sum_of_squares_is_tight():
    rng = np.random.default_rng(0)
    x = Parameter(rng.normal(size=8))
    assert finite_diff_gradcheck(lambda t: (t ** 2).sum(), x) < 1e-6


def test_linear_function_is_nearly_exact():
    x = Parameter([1.0, -2.0, 0.5])
    w = Tensor([3.0, 1.0, -4.0])
    assert finite_diff_gradcheck(lambda t: (t * w).sum(), x) < 1e-8


def test_every_registered_layer_passes_gate():
    for result in run_gradient_checks():
        assert result.passed, f"{result.name}: {result.max_rel_error:.3e}"


def test_corrupted_backward_rule_is_detected():
    """Negative control: a wrong backward rule must trip the check."""

    def broken_double(t):
        out = _make(t.data * 2.0, (t,))
        if out.requires_grad:
            _record((t,), out, lambda g: (g * 3.0,))  # wrong factor
        return out

    x = Parameter([1.0, 2.0])
    err = finite_diff_gradcheck(lambda t: broken_double(t).sum(), x)
    assert err > GRADCHECK_GATE
