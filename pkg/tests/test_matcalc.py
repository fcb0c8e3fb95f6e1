import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glmm_asym.matcalc import (
    DimensionError,
    ThreeArray,
    commutation_matrix,
    duplication_matrix,
    duplication_pinv,
    star,
    vec,
    vec_inv,
    vech,
    vech_inv,
)

from conftest import random_spd, random_symmetric

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def brute_duplication(d):
    # enumerate (i, j) of vec order and locate the vech slot of (max, min)
    slots = {}
    k = 0
    for j in range(d):
        for i in range(j, d):
            slots[(i, j)] = k
            k += 1
    D = np.zeros((d * d, k))
    for j in range(d):
        for i in range(d):
            D[j * d + i, slots[(max(i, j), min(i, j))]] = 1
    return D


class TestVec:
    def test_column_major(self):
        assert vec([[1, 3], [2, 4]]).tolist() == [1, 2, 3, 4]

    def test_inverse(self):
        assert vec_inv([1, 2, 3, 4], 2).tolist() == [[1, 3], [2, 4]]

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            vec_inv([1, 2, 3], 2)

    def test_vec_needs_matrix(self):
        with pytest.raises(DimensionError):
            vec(np.ones(3))

    @given(arrays(float, (3, 3), elements=finite))
    def test_round_trip(self, A):
        assert np.array_equal(vec_inv(vec(A), 3), A)

    @pytest.mark.parametrize("d", [1, 2, 3, 4])
    def test_vec_inverse_lemma(self, rng, d):
        for _ in range(100):
            a = rng.normal(size=d)
            b = rng.normal(size=d * d)
            I = np.eye(d)
            np.testing.assert_allclose(np.kron(a[None, :], I) @ b, vec_inv(b, d) @ a, atol=1e-10)
            np.testing.assert_allclose(np.kron(I, a[None, :]) @ b, vec_inv(b, d).T @ a, atol=1e-10)


class TestVech:
    def test_scalar(self):
        assert vech([[2.5]]).tolist() == [2.5]

    def test_two_by_two(self):
        assert vech([[1, 2], [2, 3]]).tolist() == [1, 2, 3]

    def test_three_by_three_order(self):
        A = np.array([[1, 2, 3], [2, 4, 5], [3, 5, 6]])
        assert vech(A).tolist() == [1, 2, 3, 4, 5, 6]

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            vech([[1, 2], [2.001, 3]])

    def test_tolerates_rounding_asymmetry(self):
        vech([[1.0, 2.0], [2.0 + 1e-14, 3.0]])

    def test_rejects_non_square(self):
        with pytest.raises(DimensionError):
            vech(np.ones((2, 3)))

    @pytest.mark.parametrize("d", [1, 2, 3, 4, 5])
    def test_duplication_property(self, rng, d):
        D = duplication_matrix(d)
        for _ in range(20):
            A = random_symmetric(rng, d)
            assert np.max(np.abs(D @ vech(A) - vec(A))) < 1e-12
            np.testing.assert_array_equal(vech_inv(vech(A)), A)


class TestDuplication:
    def test_d2_printed_form(self):
        expected = [[1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 1]]
        assert duplication_matrix(2).tolist() == expected

    def test_d1(self):
        assert duplication_matrix(1).tolist() == [[1]]

    @pytest.mark.parametrize("d", [1, 2, 3, 4, 5])
    def test_matches_enumeration(self, d):
        np.testing.assert_array_equal(duplication_matrix(d), brute_duplication(d))

    def test_d3_fifty_matrices(self, rng):
        D = duplication_matrix(3)
        for _ in range(50):
            A = random_symmetric(rng, 3)
            np.testing.assert_allclose(D @ vech(A), vec(A), atol=1e-12)

    @pytest.mark.parametrize("bad", [0, -1, 1.5])
    def test_domain(self, bad):
        with pytest.raises(ValueError):
            duplication_matrix(bad)

    def test_returns_copy(self):
        D = duplication_matrix(2)
        D[0, 0] = 7
        assert duplication_matrix(2)[0, 0] == 1


class TestCommutation:
    def test_d2_printed_form(self):
        expected = [[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]]
        assert commutation_matrix(2).tolist() == expected

    def test_d1(self):
        assert commutation_matrix(1).tolist() == [[1]]

    def test_domain(self):
        with pytest.raises(ValueError):
            commutation_matrix(0)

    @pytest.mark.parametrize("d", [1, 2, 3, 4, 5])
    def test_transposes_and_involution(self, rng, d):
        K = commutation_matrix(d)
        B = rng.normal(size=(d, d))
        np.testing.assert_array_equal(K @ vec(B), vec(B.T))
        np.testing.assert_array_equal(K @ K, np.eye(d * d))

    def test_kron_swap_d4(self, rng):
        K = commutation_matrix(4)
        A = rng.normal(size=(4, 4))
        b = rng.normal(size=(4, 1))
        np.testing.assert_allclose(K @ np.kron(A, b), np.kron(b, A), atol=1e-12)


class TestDuplicationPinv:
    def test_d1(self):
        assert duplication_pinv(1).tolist() == [[1]]

    @pytest.mark.parametrize("d", [1, 2, 3, 4])
    def test_left_inverse_and_moore_penrose(self, d):
        D = duplication_matrix(d)
        P = duplication_pinv(d)
        np.testing.assert_allclose(P @ D, np.eye(D.shape[1]), atol=1e-14)
        np.testing.assert_allclose(P, np.linalg.pinv(D), atol=1e-12)

    def test_inverse_of_symmetric_kron_form(self, rng):
        D, P = duplication_matrix(3), duplication_pinv(3)
        A = random_spd(rng, 3)
        Ai = np.linalg.inv(A)
        lhs = np.linalg.inv(D.T @ np.kron(A, A) @ D)
        np.testing.assert_allclose(lhs, P @ np.kron(Ai, Ai) @ P.T, atol=1e-10)


class TestMatrixIdentities:
    """Kronecker, vec and duplication identities on 100 random instances per order."""

    @pytest.mark.parametrize("d", [1, 2, 3, 4])
    def test_identities(self, rng, d):
        D, K, P = duplication_matrix(d), commutation_matrix(d), duplication_pinv(d)
        worst = 0.0
        for _ in range(100):
            A = rng.normal(size=(d, d))
            B = rng.normal(size=(d, d))
            C = rng.normal(size=(d, d))
            E = rng.normal(size=(d, d))
            b = rng.normal(size=(d, 1))
            S = random_spd(rng, d)
            Si = np.linalg.inv(S)
            checks = [
                K @ np.kron(A, b) - np.kron(b, A),
                K @ D - D,
                D.T @ vec(A) - D.T @ vec(A.T),
                D @ P @ np.kron(A, A) @ P.T - np.kron(A, A) @ P.T,
                np.linalg.inv(D.T @ np.kron(S, S) @ D) - P @ np.kron(Si, Si) @ P.T,
                vec(A @ B @ C) - np.kron(C.T, A) @ vec(B),
                np.kron(A, B) @ np.kron(C, E) - np.kron(A @ C, B @ E),
            ]
            worst = max(worst, max(np.max(np.abs(c)) for c in checks))
        assert worst < 1e-10


class TestStar:
    def test_scalar(self):
        assert star(ThreeArray([[[3.0]]]), [[2.0]]).tolist() == [6.0]

    def test_ones_with_identity(self):
        assert star(ThreeArray(np.ones((2, 2, 2))), np.eye(2)).tolist() == [2.0, 2.0]

    def test_triple_loop(self, rng):
        A = rng.normal(size=(3, 3, 2))
        M = rng.normal(size=(3, 3))
        expected = np.zeros(2)
        for r, s, t in itertools.product(range(3), range(3), range(2)):
            expected[t] += A[r, s, t] * M[r, s]
        np.testing.assert_allclose(ThreeArray(A).star(M), expected, atol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            star(ThreeArray(np.ones((2, 2, 3))), np.eye(3))

    def test_three_array_invariants(self):
        with pytest.raises(DimensionError):
            ThreeArray(np.ones((2, 2)))
        with pytest.raises(ValueError):
            ThreeArray(np.full((1, 1, 1), np.nan))

    def test_batched(self, rng):
        A = rng.normal(size=(5, 2, 2, 3))
        M = rng.normal(size=(5, 2, 2))
        out = star(A, M)
        for k in range(5):
            np.testing.assert_allclose(out[k], star(ThreeArray(A[k]), M[k]))

    @settings(max_examples=50)
    @given(
        arrays(float, (2, 3, 2), elements=finite),
        arrays(float, (2, 3), elements=finite),
        arrays(float, (2, 3), elements=finite),
        st.floats(-10, 10),
    )
    def test_bilinear(self, A, M1, M2, c):
        lhs = star(A, M1 + c * M2)
        rhs = star(A, M1) + c * star(A, M2)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-6)
