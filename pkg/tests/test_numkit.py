import numpy as np
import pytest

from reslab import numkit
from reslab.numkit import RngState


class TestRngState:
    def test_same_key_replays_identical_samples(self):
        a = RngState(12, 3).standard_normal((16, 16))
        b = RngState(12, 3).standard_normal((16, 16))
        np.testing.assert_array_equal(a, b)

    def test_advancing_gives_disjoint_samples(self):
        rng = RngState(12, 3)
        a = rng.standard_normal((8, 8))
        b = rng.standard_normal((8, 8))
        assert not np.array_equal(a, b)

    def test_substreams_are_stable_and_distinct(self):
        root = RngState(5)
        s1 = root.substream("data").standard_normal(10)
        s2 = root.substream("data").standard_normal(10)
        s3 = root.substream("init").standard_normal(10)
        np.testing.assert_array_equal(s1, s2)
        assert not np.array_equal(s1, s3)

    def test_substream_independent_of_parent_draws(self):
        root = RngState(5)
        root.standard_normal(100)  # advancing the parent must not move children
        s1 = root.substream("data").standard_normal(10)
        s2 = RngState(5).substream("data").standard_normal(10)
        np.testing.assert_array_equal(s1, s2)


class TestGaussianMatrix:
    def test_rejects_empty_shapes(self):
        with pytest.raises(numkit.EmptyShapeError):
            numkit.gaussian_matrix(RngState(0), 0, 4, 1.0)
        with pytest.raises(numkit.EmptyShapeError):
            numkit.gaussian_matrix(RngState(0), 4, 0, 1.0)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            numkit.gaussian_matrix(RngState(0), 2, 2, 0.0)

    def test_small_variance_gives_small_norm(self):
        a = numkit.gaussian_matrix(RngState(0), 32, 32, 1e-20)
        assert numkit.frobenius_norm(a) < 1e-8

    def test_entry_mean_concentrates(self):
        # sample mean of m*m entries is within 4 sigma/m for every seed
        m = 256
        var = 2.0 / m
        bound = 4.0 * np.sqrt(var) / m
        for seed in range(10):
            a = numkit.gaussian_matrix(RngState(seed), m, m, var)
            assert abs(float(np.mean(a))) < bound

    def test_determinism_bitwise(self):
        a = numkit.gaussian_matrix(RngState(7, 1), 16, 8, 0.5)
        b = numkit.gaussian_matrix(RngState(7, 1), 16, 8, 0.5)
        assert a.tobytes() == b.tobytes()


class TestSums:
    def test_pairwise_tree_matches_naive_sum(self):
        rng = RngState(3)
        for size in (1, 2, 3, 7, 64, 1000):
            x = rng.standard_normal(size) * 100.0
            naive = 0.0
            for v in x:
                naive += v
            assert numkit.pairwise_sum(x) == pytest.approx(naive, rel=1e-12, abs=1e-12)

    def test_empty_sum_is_zero(self):
        assert numkit.pairwise_sum([]) == 0.0

    def test_frobenius_norm_values(self):
        assert numkit.frobenius_norm(np.zeros((3, 4))) == 0.0
        assert numkit.frobenius_norm(np.ones((2, 2))) == pytest.approx(2.0)

    def test_frobenius_matches_naive(self):
        x = RngState(9).standard_normal((37, 11))
        naive = float(np.sqrt(sum(v * v for v in x.ravel())))
        assert numkit.frobenius_norm(x) == pytest.approx(naive, rel=1e-12)


class TestMatmul:
    def test_matvec_matmul_match_triple_loop(self):
        rng = RngState(11)
        for rows, inner, cols in ((3, 5, 4), (17, 9, 13), (64, 64, 64)):
            a = rng.standard_normal((rows, inner))
            b = rng.standard_normal((inner, cols))
            x = rng.standard_normal(inner)
            mv = numkit.matvec(a, x)
            mm = numkit.matmul(a, b)
            mv_ref = np.array([sum(a[i, k] * x[k] for k in range(inner))
                               for i in range(rows)])
            np.testing.assert_allclose(mv, mv_ref, rtol=1e-12)
            mm_ref = np.array([[sum(a[i, k] * b[k, j] for k in range(inner))
                                for j in range(cols)] for i in range(rows)])
            np.testing.assert_allclose(mm, mm_ref, rtol=1e-12)

    def test_shape_mismatch_is_rejected(self):
        with pytest.raises(numkit.EmptyShapeError):
            numkit.matvec(np.ones((2, 3)), np.ones(2))


class TestSpectralNorm:
    def test_diagonal(self):
        assert numkit.spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, abs=1e-10)

    def test_identity(self):
        assert numkit.spectral_norm(np.eye(5)) == pytest.approx(1.0, abs=1e-12)

    def test_zero_matrix(self):
        assert numkit.spectral_norm(np.zeros((4, 4))) == 0.0

    def test_matches_svd_oracle(self):
        for seed in range(3):
            a = numkit.gaussian_matrix(RngState(seed), 256, 256, 2.0 / 256)
            svd_top = float(np.linalg.svd(a, compute_uv=False)[0])
            est = numkit.spectral_norm(a, iters=2000, tol=1e-12)
            assert est == pytest.approx(svd_top, rel=1e-6)
            assert est <= svd_top * (1 + 1e-9)  # power iteration never overshoots

    def test_rectangular_matches_svd(self):
        a = RngState(2).standard_normal((40, 90))
        svd_top = float(np.linalg.svd(a, compute_uv=False)[0])
        assert numkit.spectral_norm(a, iters=2000, tol=1e-12) == pytest.approx(svd_top, rel=1e-8)

    def test_spectral_at_most_frobenius(self):
        rng = RngState(4)
        for _ in range(10):
            a = rng.standard_normal((20, 30))
            assert numkit.spectral_norm(a) <= numkit.frobenius_norm(a) * (1 + 1e-12)

    def test_nonfinite_rejected(self):
        a = np.ones((3, 3))
        a[1, 1] = np.nan
        with pytest.raises(numkit.NumericDomainError):
            numkit.spectral_norm(a)

    def test_empty_rejected(self):
        with pytest.raises(numkit.EmptyShapeError):
            numkit.spectral_norm(np.zeros((0, 3)))


class TestOperatorNorm:
    def test_reports_convergence(self):
        a = np.diag([2.0, 0.5])
        est, converged = numkit.operator_norm(lambda v: a @ v, lambda u: a.T @ u, 2)
        assert converged
        assert est == pytest.approx(2.0, abs=1e-9)

    def test_factored_matches_dense(self):
        rng = RngState(6)
        A = rng.standard_normal((20, 50))
        B = rng.standard_normal((20, 70))
        dense = float(np.linalg.svd(A.T @ B, compute_uv=False)[0])
        est = numkit.factored_spectral_norm(A, B, iters=2000, tol=1e-12)
        assert est == pytest.approx(dense, rel=1e-7)
