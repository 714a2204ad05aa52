import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from threadpoolctl import threadpool_limits

from gplar.dense_linalg import inverse_from_chol, solve_chol
from gplar.errors import NotPositiveDefinite
from gplar.iterative_solvers import (
    BENCH_COLUMNS,
    CgConfig,
    bench_cg,
    bench_table,
    cg_solve,
    condition_estimate,
    hutchinson_trace_inv,
    kl_to_gp_prior_cg,
    power_iteration,
)
from gplar.kernels import GramMatrix, KernelSpec
from gplar.variational import DiagonalPosterior, kl_to_gp_prior

from conftest import random_pd, rbf_gram


class TestCg:
    def test_identity_one_iteration(self, rng):
        b = rng.standard_normal(10)
        x, rep = cg_solve(np.eye(10), b)
        np.testing.assert_allclose(x, b, rtol=1e-15)
        assert rep.iterations == 1 and rep.converged

    def test_diagonal(self):
        x, rep = cg_solve(np.diag([1.0, 2.0, 4.0]), np.array([1.0, 2.0, 4.0]), CgConfig(tol=1e-12))
        np.testing.assert_allclose(x, [1, 1, 1], rtol=1e-12)
        assert rep.iterations <= 3

    def test_zero_rhs(self):
        x, rep = cg_solve(np.eye(3), np.zeros(3))
        assert not x.any() and rep.iterations == 0

    def test_callable_operator(self, rng):
        A = random_pd(rng, 12)
        b = rng.standard_normal(12)
        x, _ = cg_solve(lambda v: A @ v, b, CgConfig(tol=1e-12))
        np.testing.assert_allclose(A @ x, b, atol=1e-10)

    def test_rbf_against_cholesky(self, rng):
        K = rbf_gram(64, 0.2, jitter_abs=1e-2)
        b = rng.standard_normal(64)
        x, rep = cg_solve(K.K, b)
        ref = solve_chol(K.chol, b)
        assert rep.converged
        assert np.linalg.norm(x - ref) <= 1e-6 * np.linalg.norm(ref) * 1e2

    @pytest.mark.parametrize("L", [64, 128, 256, 512])
    def test_tight_tolerance_against_cholesky(self, rng, L):
        K = rbf_gram(L, 0.2, jitter_abs=1e-2)
        b = rng.standard_normal(L)
        x, _ = cg_solve(K.K, b, CgConfig(tol=1e-10))
        ref = solve_chol(K.chol, b)
        assert np.linalg.norm(x - ref) <= 1e-6 * np.linalg.norm(ref)

    def test_true_residual_reported(self, rng):
        K = rbf_gram(128, 0.2, jitter_abs=1e-3)
        b = rng.standard_normal(128)
        x, rep = cg_solve(K.K, b, CgConfig(tol=1e-10))
        assert rep.final_residual == pytest.approx(np.linalg.norm(b - K.K @ x), rel=1e-12)
        assert rep.final_residual <= 1e-10 * np.linalg.norm(b)

    def test_non_convergence_reported(self, rng):
        K = rbf_gram(64, 0.2, jitter_abs=1e-6)
        _, rep = cg_solve(K.K, rng.standard_normal(64), CgConfig(tol=1e-12, max_iters=3))
        assert not rep.converged and rep.iterations == 3

    def test_jacobi(self, rng):
        d = np.geomspace(1, 1e4, 50)
        A = np.diag(d) + 0.01 * np.ones((50, 50))
        b = rng.standard_normal(50)
        _, plain = cg_solve(A, b, CgConfig(tol=1e-10))
        x, pre = cg_solve(A, b, CgConfig(tol=1e-10, preconditioner="jacobi"))
        np.testing.assert_allclose(A @ x, b, atol=1e-8)
        assert pre.iterations < plain.iterations

    def test_jacobi_needs_diag_for_callable(self):
        with pytest.raises(ValueError):
            cg_solve(lambda v: v, np.ones(3), CgConfig(preconditioner="jacobi"))

    @pytest.mark.parametrize("kw", [dict(tol=0.0), dict(tol=1.0), dict(max_iters=0), dict(preconditioner="ilu")])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            CgConfig(**kw)

    @given(st.integers(1, 8), st.integers(0, 2**31))
    def test_distinct_eigenvalues(self, m, seed):
        rng = np.random.default_rng(seed)
        L = int(rng.integers(m, 33))
        eig = rng.choice(np.linspace(1.0, 10.0, m), size=L)
        eig[:m] = np.linspace(1.0, 10.0, m)
        Q, _ = np.linalg.qr(rng.standard_normal((L, L)))
        A = (Q * eig) @ Q.T
        A = 0.5 * (A + A.T)
        _, rep = cg_solve(A, rng.standard_normal(L), CgConfig(tol=1e-10))
        assert rep.converged and rep.iterations <= m + 2

    @given(st.integers(0, 2**31), st.sampled_from([1e-4, 1e-3, 1e-2]))
    def test_error_energy_norm_non_increasing(self, seed, jitter):
        # the A-norm of the error is the quantity CG minimizes monotonically
        rng = np.random.default_rng(seed)
        K = rbf_gram(40, float(rng.uniform(0.1, 0.5)), jitter_abs=jitter)
        b = rng.standard_normal(40)
        xs = solve_chol(K.chol, b)
        errs = []
        for k in range(1, 25):
            x, _ = cg_solve(K.K, b, CgConfig(tol=1e-14, max_iters=k))
            e = x - xs
            errs.append(float(e @ K.K @ e))
        scale = float(xs @ K.K @ xs)
        assert all(b_ <= a + 1e-12 * scale for a, b_ in zip(errs, errs[1:]))

    @pytest.mark.parametrize("L", [64, 128, 256])
    def test_iterations_decrease_with_jitter(self, L):
        counts = []
        for jit in (1e-4, 1e-3, 1e-2, 1e-1):
            spec = KernelSpec.from_constrained("rbf", 0.2, 1.0, jitter_abs=jit)
            rows = bench_cg(spec, [L], CgConfig(tol=1e-8), trials=3, seed=1)
            counts.append(rows[0].iters_mean)
        assert counts == sorted(counts, reverse=True)


class TestHutchinson:
    def test_identity_exact(self):
        est = hutchinson_trace_inv(np.eye(7), np.ones(7), 5)
        np.testing.assert_allclose(est.samples, 7.0, rtol=1e-14)
        assert est.stderr == pytest.approx(0.0, abs=1e-12)

    def test_scaled_identity(self):
        est = hutchinson_trace_inv(2 * np.eye(2), np.ones(2), 4)
        np.testing.assert_allclose(est.samples, 1.0, rtol=1e-14)

    def test_random(self, rng):
        K = GramMatrix.from_matrix(random_pd(rng, 8))
        s = rng.uniform(0.1, 2.0, 8)
        est = hutchinson_trace_inv(K.K, s, 64, CgConfig(tol=1e-12), seed=3)
        exact = float(np.diag(inverse_from_chol(K.chol)) @ s)
        assert abs(est.estimate - exact) <= 4 * est.stderr

    def test_unbiased_many_probes(self, rng):
        K = GramMatrix.from_matrix(random_pd(rng, 5))
        s = rng.uniform(0.1, 2.0, 5)
        est = hutchinson_trace_inv(K.K, s, 10_000, CgConfig(tol=1e-12), seed=11)
        exact = float(np.diag(inverse_from_chol(K.chol)) @ s)
        assert abs(est.estimate - exact) <= 4 * est.stderr

    def test_reproducible(self, rng):
        A = random_pd(rng, 6)
        a = hutchinson_trace_inv(A, np.ones(6), 8, seed=2)
        b = hutchinson_trace_inv(A, np.ones(6), 8, seed=2)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_needs_two_probes(self):
        with pytest.raises(ValueError):
            hutchinson_trace_inv(np.eye(2), np.ones(2), 1)


class TestBbmmKl:
    @pytest.mark.parametrize("L,d_z", [(8, 2), (32, 3), (64, 2)])
    def test_agrees_with_dense(self, L, d_z):
        rng = np.random.default_rng(L)
        K = rbf_gram(L, 0.3, nugget_rel=1e-2)
        q = DiagonalPosterior(rng.normal(0, 0.5, (L, d_z)), rng.normal(-1, 0.3, (L, d_z)))
        kl, se, ok = kl_to_gp_prior_cg(q, K, n_probes=64, seed=4)
        exact = kl_to_gp_prior(q, K)
        assert ok
        assert abs(kl - exact) <= max(1e-4 * abs(exact), 4 * se)


class TestCondition:
    def test_power_iteration(self):
        assert power_iteration(np.diag([1.0, 3.0, 9.0]), 3, steps=200) == pytest.approx(9.0, rel=1e-8)

    def test_condition_estimate(self, rng):
        A = random_pd(rng, 20, cond=100.0)
        assert condition_estimate(A, CgConfig(), steps=300) == pytest.approx(100.0, rel=1e-3)


class TestBench:
    def test_identity(self):
        rows = bench_cg(None, [8, 16, 32], trials=2)
        assert [r.iters_mean for r in rows] == [1.0, 1.0, 1.0]
        assert all(r.kappa_est == 1.0 for r in rows)

    def test_table_columns(self):
        rows = bench_cg(KernelSpec.from_constrained("rbf", 0.2, 1.0, jitter_abs=1e-2), [16, 32], trials=2)
        table = bench_table(rows)
        assert len(table) == 2 and len(table[0]) == len(BENCH_COLUMNS)
        assert table[1][0] == 32 and table[1][1] > 1.0

    def test_insufficient_jitter(self):
        with pytest.raises(NotPositiveDefinite):
            bench_cg(KernelSpec.from_constrained("rbf", 10.0, 1.0, jitter_abs=0.0), [200], trials=1)

    def test_unsorted_lengths(self):
        with pytest.raises(ValueError):
            bench_cg(None, [32, 16])

    def test_wall_time_quadratic(self):
        # dense matvec dominates at this size: doubling L should cost about 4x per iteration
        def run(L):
            rng = np.random.default_rng(L)
            A = random_pd(rng, L, cond=1e3)
            b = rng.standard_normal(L)
            cfg = CgConfig(tol=1e-15, max_iters=60)
            times = []
            for _ in range(7):
                t0 = time.perf_counter()
                cg_solve(A, b, cfg)
                times.append(time.perf_counter() - t0)
            return float(np.median(times))

        with threadpool_limits(1):
            ratio = run(2048) / run(1024)
        assert 3.0 <= ratio <= 6.0, ratio
