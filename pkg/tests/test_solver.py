import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from eulervisc.solver import ConvergenceError, InfeasibleIterate, solve_coupled


def test_linear_system_one_iteration(rng):
    A = np.eye(5) * 4 + 0.1 * rng.standard_normal((5, 5))
    b = rng.standard_normal(5)
    res = solve_coupled(lambda x: A @ x - b, np.zeros(5), jvp=lambda x, r, w: A @ w)
    assert res.converged and res.iterations == 1
    assert np.allclose(res.x, np.linalg.solve(A, b), atol=1e-11)


@given(st.floats(-50, 50), st.floats(-5, 5))
def test_scalar_cubic_matches_bracketing(b, guess):
    # x^3 + x is strictly increasing, so the root is unique
    def f(x):
        return x ** 3 + x - b
    root = brentq(f, -10, 10, xtol=1e-15)
    res = solve_coupled(lambda x: f(x), np.array([guess]), tol_rel=1e-14, tol_abs=1e-13)
    assert abs(res.x[0] - root) <= 1e-10 * max(1.0, abs(root))


def test_guess_independence(rng):
    b = rng.standard_normal(20)

    def resid(x):
        return x ** 3 + 2 * x - b

    sols = [solve_coupled(resid, rng.standard_normal(20) * s, tol_rel=1e-14, tol_abs=1e-14).x for s in (0, 1, 3)]
    assert np.allclose(sols[0], sols[1], atol=1e-10) and np.allclose(sols[0], sols[2], atol=1e-10)


def test_failure_carries_breakdown():
    # x^2 + 1 has no real root
    blocks = [("a", slice(0, 1)), ("b", slice(1, 2))]
    with pytest.raises(ConvergenceError) as err:
        solve_coupled(lambda x: x ** 2 + 1.0, np.array([0.3, 0.5]), max_iter=5, blocks=blocks)
    assert set(err.value.breakdown) == {"a", "b"}
    assert err.value.result is not None


def test_line_search_rejects_infeasible_trials():
    # log residual: iterates must stay positive
    def resid(x):
        if np.any(x <= 0):
            raise InfeasibleIterate("x <= 0")
        return np.log(x) - 1.0

    res = solve_coupled(resid, np.array([20.0]), tol_rel=1e-14, tol_abs=1e-14)
    assert res.x[0] == pytest.approx(np.e, rel=1e-12)
