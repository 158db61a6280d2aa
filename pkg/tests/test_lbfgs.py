"""Batched quasi-Newton minimizer: convergence, guarantees, batching."""

import numpy as np
import pytest

from genviews.lbfgs import minimize_adam, minimize_lbfgs


def _row_quadratic(mats, centers):
    """f_i(x) = 0.5 (x - c_i)^T A_i (x - c_i), computed one row at a time.

    Row-at-a-time arithmetic makes the objective identical for any batch
    size, which the batching-equivalence test relies on.
    """

    def fun(x, idx):
        f = np.empty(len(idx))
        g = np.empty_like(x)
        for k, i in enumerate(idx):
            d = x[k] - centers[i]
            ad = mats[i] @ d
            f[k] = 0.5 * float(d @ ad)
            g[k] = ad
        return f, g

    return fun


def _spd_batch(m, n, seed):
    rng = np.random.default_rng(seed)
    mats = []
    for _ in range(m):
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        eigs = rng.uniform(0.5, 3.0, n)
        mats.append((q * eigs) @ q.T)
    centers = rng.standard_normal((m, n))
    return mats, centers


class TestLbfgs:
    def test_quadratic_reaches_optimum(self):
        mats, centers = _spd_batch(5, 6, seed=0)
        res = minimize_lbfgs(_row_quadratic(mats, centers), np.zeros((5, 6)), steps=100)
        np.testing.assert_allclose(res.x, centers, atol=1e-8)
        assert res.converged.all()
        assert np.all(res.fun <= 1e-16)

    def test_never_increases_objective(self):
        rng = np.random.default_rng(1)
        coef = rng.uniform(0.5, 2.0, (6, 4))

        def fun(x, idx):
            f = (coef[idx] * x**4 + x**2 - x).sum(axis=1)
            g = 4 * coef[idx] * x**3 + 2 * x - 1
            return f, g

        res = minimize_lbfgs(fun, rng.standard_normal((6, 4)) * 3, steps=40)
        assert np.all(res.fun <= res.initial_fun)
        assert np.all(res.fun < res.initial_fun)  # something must move

    def test_zero_steps_returns_start(self):
        mats, centers = _spd_batch(3, 4, seed=2)
        x0 = np.full((3, 4), 0.25)
        res = minimize_lbfgs(_row_quadratic(mats, centers), x0, steps=0)
        np.testing.assert_array_equal(res.x, x0)
        np.testing.assert_array_equal(res.fun, res.initial_fun)
        assert np.all(res.steps == 0)

    def test_start_at_optimum_is_converged_noop(self):
        mats, centers = _spd_batch(2, 3, seed=3)
        res = minimize_lbfgs(_row_quadratic(mats, centers), centers.copy(), steps=50)
        np.testing.assert_array_equal(res.x, centers)
        assert res.converged.all()
        assert np.all(res.steps == 0)

    def test_batched_matches_solo_runs(self):
        # Independent systems optimized jointly must trace the exact same
        # iterates as three separate runs.
        mats, centers = _spd_batch(3, 5, seed=4)
        x0 = np.linspace(-1.0, 1.0, 15).reshape(3, 5)
        joint = minimize_lbfgs(_row_quadratic(mats, centers), x0, steps=25)
        for i in range(3):
            solo = minimize_lbfgs(
                _row_quadratic([mats[i]], centers[i : i + 1]), x0[i : i + 1], steps=25
            )
            np.testing.assert_array_equal(solo.x[0], joint.x[i])
            np.testing.assert_array_equal(solo.fun[0], joint.fun[i])
            assert solo.steps[0] == joint.steps[i]

    def test_rosenbrock(self):
        def fun(x, idx):
            a, b = x[:, 0], x[:, 1]
            f = (1 - a) ** 2 + 100 * (b - a**2) ** 2
            g = np.stack(
                [-2 * (1 - a) - 400 * a * (b - a**2), 200 * (b - a**2)], axis=1
            )
            return f, g

        res = minimize_lbfgs(fun, np.array([[-1.2, 1.0]]), steps=300)
        np.testing.assert_allclose(res.x[0], [1.0, 1.0], atol=1e-5)
        assert res.fun[0] < 1e-10

    def test_backtracks_past_nonfinite_trials(self):
        # Barrier objective: trial points past the pole come back nan and the
        # line search must shrink through them instead of accepting.
        saw_nonfinite = []

        def fun(x, idx):
            v = x[:, 0]
            safe = np.maximum(v, 1e-300)
            f = np.where(v > 0, -np.log(safe) + 10 * v, np.nan)
            g = np.where(v > 0, -1.0 / safe + 10.0, np.nan)[:, None]
            if not np.all(np.isfinite(f)):
                saw_nonfinite.append(True)
            return f, g

        res = minimize_lbfgs(fun, np.array([[0.15]]), steps=60)
        assert saw_nonfinite, "expected at least one non-finite trial"
        assert np.isfinite(res.fun[0])
        np.testing.assert_allclose(res.x[0, 0], 0.1, rtol=1e-6)

    def test_unbounded_descent_uses_all_steps(self):
        def fun(x, idx):
            return x[:, 0].copy(), np.ones_like(x)

        res = minimize_lbfgs(fun, np.zeros((1, 1)), steps=7)
        assert res.steps[0] == 7
        assert not res.converged[0]
        assert res.fun[0] < res.initial_fun[0]

    def test_rejects_bad_start(self):
        mats, centers = _spd_batch(1, 2, seed=5)
        with pytest.raises(ValueError):
            minimize_lbfgs(_row_quadratic(mats, centers), np.zeros(2), steps=1)

        def bad(x, idx):
            return np.full(len(idx), np.nan), np.zeros_like(x)

        with pytest.raises(ValueError):
            minimize_lbfgs(bad, np.zeros((1, 2)), steps=1)


class TestAdam:
    def test_improves_quadratic(self):
        mats, centers = _spd_batch(4, 3, seed=6)
        res = minimize_adam(_row_quadratic(mats, centers), np.zeros((4, 3)), steps=400, lr=0.1)
        assert np.all(res.fun < res.initial_fun)
        np.testing.assert_allclose(res.x, centers, atol=0.05)

    def test_best_iterate_never_degrades(self):
        # Absurd learning rate bounces around the optimum; the tracked best
        # must still be at least as good as the start.
        mats, centers = _spd_batch(2, 3, seed=7)
        res = minimize_adam(_row_quadratic(mats, centers), centers + 0.01, steps=50, lr=25.0)
        assert np.all(res.fun <= res.initial_fun)

    def test_rejects_bad_start(self):
        with pytest.raises(ValueError):
            minimize_adam(lambda x, i: (x.sum(1), np.ones_like(x)), np.zeros(3), steps=1)
