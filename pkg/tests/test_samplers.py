import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gplar.errors import ShapeError
from gplar.kernels import GramMatrix, KernelSpec, TimeGrid, build_gram
from gplar.samplers import (
    NoiseBlock,
    empirical_moments,
    sample_batch,
    sample_conditioned,
    sample_parallel,
    sample_sequential,
)

from conftest import rbf_gram


def bivariate(c):
    return GramMatrix.from_matrix([[1.0, c], [c, 1.0]])


grams = st.builds(
    lambda fam, ell, L: build_gram(KernelSpec.from_constrained(fam, ell, 1.0, nugget_rel=1e-2), TimeGrid.default(L)),
    st.sampled_from(["rbf", "matern12", "matern32", "matern52"]),
    st.floats(0.05, 1.0),
    st.integers(1, 48),
)


class TestNoiseBlock:
    def test_reproducible(self):
        a = NoiseBlock.draw(7, 5, 2, "sample/3")
        b = NoiseBlock.draw(7, 5, 2, "sample/3")
        np.testing.assert_array_equal(a.eps, b.eps)

    def test_streams_differ(self):
        a = NoiseBlock.draw(7, 5, 2, "sample/0")
        b = NoiseBlock.draw(7, 5, 2, "sample/1")
        c = NoiseBlock.draw(8, 5, 2, "sample/0")
        assert not np.array_equal(a.eps, b.eps)
        assert not np.array_equal(a.eps, c.eps)

    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            sample_parallel(GramMatrix.from_matrix(np.eye(3)), 2, np.zeros((2, 2)))


class TestSamplers:
    @pytest.mark.parametrize("fn", [sample_sequential, sample_parallel])
    def test_identity(self, fn, rng):
        eps = rng.standard_normal((4, 3))
        np.testing.assert_allclose(fn(GramMatrix.from_matrix(np.eye(4)), 3, eps), eps, rtol=1e-15)

    @pytest.mark.parametrize("fn", [sample_sequential, sample_parallel])
    def test_bivariate(self, fn):
        c, e1, e2 = 0.7, 0.4, -1.3
        z = fn(bivariate(c), 1, [[e1], [e2]])
        np.testing.assert_allclose(z[:, 0], [e1, c * e1 + math.sqrt(1 - c * c) * e2], rtol=1e-14)

    @pytest.mark.parametrize("fn", [sample_sequential, sample_parallel])
    def test_zero_noise(self, fn):
        np.testing.assert_array_equal(fn(rbf_gram(6), 2, np.zeros((6, 2))), np.zeros((6, 2)))

    def test_accepts_noise_block(self):
        K = rbf_gram(5)
        nb = NoiseBlock.draw(1, 5, 2)
        np.testing.assert_array_equal(sample_parallel(K, 2, nb), K.chol @ nb.eps)

    @given(grams, st.sampled_from([1, 4]), st.integers(0, 2**32 - 1))
    def test_exact_equivalence(self, K, d_z, seed):
        eps = np.random.default_rng(seed).standard_normal((K.size, d_z))
        assert np.max(np.abs(sample_sequential(K, d_z, eps) - sample_parallel(K, d_z, eps))) <= 1e-8

    def test_equivalence_long(self, rng):
        K = rbf_gram(256, 0.2, nugget_rel=1e-2)
        eps = rng.standard_normal((256, 4))
        assert np.max(np.abs(sample_sequential(K, 4, eps) - sample_parallel(K, 4, eps))) <= 1e-8


class TestConditioned:
    def test_empty_prefix(self, rng):
        K = rbf_gram(7)
        eps = rng.standard_normal((7, 2))
        np.testing.assert_array_equal(sample_conditioned(K, np.zeros((0, 2)), eps), sample_sequential(K, 2, eps))

    def test_bivariate(self):
        c, z1, e = -0.5, 1.7, 0.3
        z = sample_conditioned(bivariate(c), [[z1]], [[e]])
        assert z[0, 0] == z1
        assert z[1, 0] == pytest.approx(c * z1 + math.sqrt(1 - c * c) * e, rel=1e-14)

    def test_diagonal_ignores_prefix(self, rng):
        K = GramMatrix.from_matrix(np.diag([1.0, 2.0, 3.0, 4.0]))
        eps = rng.standard_normal((2, 2))
        a = sample_conditioned(K, rng.standard_normal((2, 2)), eps)
        b = sample_conditioned(K, rng.standard_normal((2, 2)), eps)
        np.testing.assert_array_equal(a[2:], b[2:])

    @given(grams, st.data())
    def test_continuation_reproduces_run(self, K, data):
        seed = data.draw(st.integers(0, 2**32 - 1))
        T0 = data.draw(st.integers(0, K.size - 1))
        eps = np.random.default_rng(seed).standard_normal((K.size, 2))
        full = sample_sequential(K, 2, eps)
        np.testing.assert_array_equal(sample_conditioned(K, full[:T0], eps[T0:]), full)

    def test_rejects_full_prefix(self):
        with pytest.raises(ShapeError):
            sample_conditioned(rbf_gram(3), np.zeros((3, 1)), np.zeros((0, 1)))


class TestMoments:
    def test_all_zero(self):
        mean, cov = empirical_moments(np.zeros((5, 3, 2)))
        assert not mean.any() and not cov.any()

    def test_duplicated_sample(self, rng):
        x = rng.standard_normal((3, 2))
        mean, cov = empirical_moments(np.stack([x, x, x]))
        np.testing.assert_allclose(mean, x)
        np.testing.assert_allclose(cov, 0.0, atol=1e-15)

    def test_needs_two(self):
        with pytest.raises(ShapeError):
            empirical_moments(np.zeros((1, 3, 2)))

    @pytest.mark.parametrize("L", [4, 8])
    def test_clt_bound(self, L):
        K = rbf_gram(L, 0.3, nugget_rel=1e-2)
        N = 100_000
        rng = np.random.default_rng(2024)
        X = np.einsum("ij,njk->nik", K.chol, rng.standard_normal((N, L, 1)))
        _, cov = empirical_moments(X)
        d = np.diag(K.K)
        bound = 5 * np.sqrt((np.outer(d, d) + K.K**2) / N)
        assert np.all(np.abs(cov - K.K) <= bound)

    def test_batch_streams(self):
        K = rbf_gram(4)
        out = sample_batch(K, 2, 3, seed=5, mode="seq")
        np.testing.assert_array_equal(out[2], sample_sequential(K, 2, NoiseBlock.draw(5, 4, 2, "sample/2")))
        np.testing.assert_allclose(sample_batch(K, 2, 3, seed=5, mode="para"), out, atol=1e-12)
