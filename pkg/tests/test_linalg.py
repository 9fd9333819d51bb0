import numpy as np
import pytest

from hfmca import linalg
from oracles import lu_logabsdet, naive_cross_moment, naive_second_moment, random_pd_stats


class TestSecondMoment:
    def test_single_row_outer_product(self):
        out = linalg.second_moment(np.array([[1.0, 0.0]]))
        np.testing.assert_array_equal(out, [[1.0, 0.0], [0.0, 0.0]])

    def test_two_unit_rows(self):
        out = linalg.second_moment(np.array([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_array_equal(out, [[0.5, 0.0], [0.0, 0.5]])

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(50, 4))
        np.testing.assert_allclose(
            linalg.second_moment(x), naive_second_moment(x), rtol=0, atol=1e-12
        )

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty batch"):
            linalg.second_moment(np.zeros((0, 3)))

    def test_output_is_psd(self):
        # singular cases included (N < d); either Cholesky succeeds or the
        # smallest eigenvalue is numerically non-negative
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            d = int(rng.integers(1, 9))
            m = linalg.second_moment(rng.normal(size=(n, d)))
            try:
                np.linalg.cholesky(m)
            except np.linalg.LinAlgError:
                assert np.linalg.eigvalsh(m).min() >= -1e-10

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(20, 5))
        a = linalg.second_moment(x)
        b = linalg.second_moment(x.copy())
        assert np.array_equal(a, b)


class TestCrossMoment:
    def test_identity_rows(self):
        eye = np.eye(4)
        np.testing.assert_array_equal(linalg.cross_moment(eye, eye), eye / 4)

    def test_zero_left_factor(self):
        out = linalg.cross_moment(np.zeros((5, 2)), np.ones((5, 3)))
        np.testing.assert_array_equal(out, np.zeros((2, 3)))

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(20, 3))
        b = rng.normal(size=(20, 5))
        np.testing.assert_allclose(
            linalg.cross_moment(a, b), naive_cross_moment(a, b), rtol=0, atol=1e-12
        )

    def test_mismatched_rows_rejected(self):
        with pytest.raises(ValueError, match="row counts differ"):
            linalg.cross_moment(np.zeros((3, 2)), np.zeros((4, 2)))


class TestLogdetPd:
    def test_identity(self):
        assert linalg.logdet_pd(np.eye(3), 0.0) == 0.0

    def test_diagonal(self):
        out = linalg.logdet_pd(np.diag([2.0, 3.0]), 0.0)
        assert abs(out - np.log(6.0)) < 1e-12

    def test_matches_lu_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(6, 6))
        m = a.T @ a + np.eye(6)
        sign, ref = lu_logabsdet(m)
        assert sign > 0
        assert abs(linalg.logdet_pd(m, 0.0) - ref) < 1e-9

    def test_scaling_identity(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(5, 5))
        m = a.T @ a + np.eye(5)
        for c in (0.5, 2.0, 7.3):
            lhs = linalg.logdet_pd(c * m, 0.0)
            rhs = 5 * np.log(c) + linalg.logdet_pd(m, 0.0)
            assert abs(lhs - rhs) < 1e-9

    def test_jitter_escalation_recovers(self):
        # min eigenvalue -5e-5: fails at jitter 1e-5, succeeds at 1e-4
        m = np.diag([1.0, 1.0, -5e-5])
        out = linalg.logdet_pd(m, 1e-5)
        assert np.isfinite(out)

    def test_not_positive_definite(self):
        with pytest.raises(ValueError, match="matrix not positive definite"):
            linalg.logdet_pd(np.diag([1.0, -1.0]), 0.0)

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError, match="not symmetric"):
            linalg.logdet_pd(np.array([[1.0, 0.5], [0.0, 1.0]]), 0.0)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 4))
        m = a.T @ a + np.eye(4)
        assert linalg.logdet_pd(m, 1e-4) == linalg.logdet_pd(m.copy(), 1e-4)


class TestPdInverse:
    def test_inverse_of_identity(self):
        np.testing.assert_allclose(linalg.pd_inverse(np.eye(3)), np.eye(3), atol=1e-14)

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(5, 5))
        m = a.T @ a + np.eye(5)
        inv = linalg.pd_inverse(m)
        np.testing.assert_allclose(inv @ m, np.eye(5), atol=1e-10)
        assert np.array_equal(inv, inv.T)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="matrix not positive definite"):
            linalg.pd_inverse(np.diag([1.0, -1.0]))


class TestCanonicalCorrelations:
    def test_zero_cross_moment(self):
        rhos = linalg.canonical_correlations(np.eye(3), np.eye(2), np.zeros((3, 2)), 0.0)
        np.testing.assert_allclose(rhos, 0.0, atol=1e-14)

    def test_scalar_unit_moments(self):
        rhos = linalg.canonical_correlations(
            np.array([[1.0]]), np.array([[1.0]]), np.array([[0.6]]), 0.0
        )
        assert abs(rhos[0] - 0.6) < 1e-12

    def test_scalar_hand_value(self):
        # rho = p / sqrt(r1 * r2) = 1 / sqrt(3.75)
        rhos = linalg.canonical_correlations(
            np.array([[1.5]]), np.array([[2.5]]), np.array([[1.0]]), 0.0
        )
        assert abs(rhos[0] - 0.5163977794943222) < 1e-12

    def test_descending_within_unit_interval(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            r1, r2, p12 = random_pd_stats(rng, 4, 3)
            rhos = linalg.canonical_correlations(r1, r2, p12, 0.0)
            assert np.all(np.diff(rhos) <= 1e-15)
            assert np.all((rhos >= 0.0) & (rhos <= 1.0))

    def test_rejects_indefinite_inputs(self):
        with pytest.raises(ValueError, match="matrix not positive definite"):
            linalg.canonical_correlations(
                np.diag([1.0, -2.0]), np.eye(2), np.zeros((2, 2)), 0.0
            )


class TestSchurIdentity:
    def test_identity_on_random_stats(self):
        # logdet(joint) - logdet(r1) - logdet(r2) == sum log(1 - rho^2)
        rng = np.random.default_rng(33)
        for _ in range(100):
            d1 = int(rng.integers(1, 7))
            d2 = int(rng.integers(1, 7))
            r1, r2, p12 = random_pd_stats(rng, d1, d2)
            joint = linalg.assemble_block(r1, p12, r2)
            lhs = (
                linalg.logdet_pd(joint, 0.0)
                - linalg.logdet_pd(r1, 0.0)
                - linalg.logdet_pd(r2, 0.0)
            )
            rhos = linalg.canonical_correlations(r1, r2, p12, 0.0)
            rhs = float(np.sum(np.log1p(-rhos**2)))
            assert abs(lhs - rhs) < 1e-8

    def test_assemble_block_layout(self):
        r1 = np.eye(2)
        r2 = 2 * np.eye(3)
        p12 = np.arange(6.0).reshape(2, 3)
        joint = linalg.assemble_block(r1, p12, r2)
        np.testing.assert_array_equal(joint[:2, :2], r1)
        np.testing.assert_array_equal(joint[2:, 2:], r2)
        np.testing.assert_array_equal(joint[:2, 2:], p12)
        np.testing.assert_array_equal(joint[2:, :2], p12.T)
