import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize, rosen, rosen_der

from gsvb.optim import lbfgs


def test_rosenbrock_matches_scipy():
    x0 = np.array([-1.2, 1.0, -0.5, 0.8])
    res = lbfgs(lambda x: (rosen(x), rosen_der(x)), x0, gtol=1e-9, max_iter=2000)
    ref = minimize(rosen, x0, jac=rosen_der, method="L-BFGS-B", options={"gtol": 1e-10, "ftol": 0})
    assert res.converged
    assert np.allclose(res.x, ref.x, atol=1e-6)
    assert np.allclose(res.x, 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_convex_quadratic_solution(dim, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((dim, dim))
    H = A @ A.T + 0.5 * np.eye(dim)
    b = rng.standard_normal(dim)
    res = lbfgs(lambda x: (0.5 * x @ H @ x - b @ x, H @ x - b), np.zeros(dim), gtol=1e-10, max_iter=500)
    assert np.allclose(res.x, np.linalg.solve(H, b), atol=1e-7)


def test_objective_never_increases():
    def fg(x):
        f = np.sum(np.cosh(x)) + 0.3 * np.sum(x**4)
        return f, np.sinh(x) + 1.2 * x**3

    x0 = np.array([2.0, -3.0, 0.5])
    f0 = fg(x0)[0]
    res = lbfgs(fg, x0, gtol=1e-12)
    assert res.fun <= f0
    assert np.allclose(res.x, 0.0, atol=1e-8)


def test_infeasible_region_is_backtracked():
    # log barrier: any step past x = 0 is infeasible
    def fg(x):
        if x[0] <= 0:
            return np.inf, np.zeros(1)
        return x[0] - np.log(x[0]), np.array([1.0 - 1.0 / x[0]])

    res = lbfgs(fg, np.array([10.0]), gtol=1e-10)
    assert res.x[0] == pytest.approx(1.0, abs=1e-8)


def test_overflow_is_treated_as_infeasible():
    def fg(x):
        with np.errstate(over="raise"):
            v = np.exp(50.0 * x[0])
        return float(v - 10 * x[0]), np.array([50.0 * v - 10.0])

    res = lbfgs(fg, np.array([0.0]), gtol=1e-9)
    assert res.x[0] == pytest.approx(np.log(0.2) / 50.0, abs=1e-8)


def test_nonfinite_start_raises():
    with pytest.raises(FloatingPointError):
        lbfgs(lambda x: (np.inf, x), np.zeros(2))


def test_already_optimal_start():
    res = lbfgs(lambda x: (x @ x, 2 * x), np.zeros(3))
    assert res.converged and res.n_iter == 0
