import numpy as np
import pytest

from plab import linalg
from plab.errors import InvalidInputError, NotPositiveDefiniteError


def gram_sigma_oracle(a: np.ndarray, iters: int = 20000) -> np.ndarray:
    """Singular values via power iteration + deflation on the Gram matrix.

    Pure numpy arithmetic (no LAPACK factorizations), so it is an
    independent route to the spectrum.
    """
    g = a.T @ a
    n = g.shape[0]
    lams = []
    for _ in range(n):
        v = np.full(n, 1.0) / np.sqrt(n)
        for _ in range(iters):
            w = g @ v
            norm = np.sqrt((w * w).sum())
            if norm == 0.0:
                break
            v = w / norm
        lam = max(float(v @ g @ v), 0.0)
        lams.append(lam)
        g = g - lam * np.outer(v, v)
    return np.sqrt(np.array(sorted(lams, reverse=True)))


def test_svd_identity():
    s = linalg.svd(np.eye(3)).singular_values
    assert np.allclose(s, [1.0, 1.0, 1.0], atol=1e-12)


def test_svd_diagonal():
    s = linalg.svd(np.diag([3.0, 1.0])).singular_values
    assert np.allclose(s, [3.0, 1.0], atol=1e-12)


def test_svd_matches_gram_oracle():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 4))
    got = linalg.svd(a).singular_values
    want = gram_sigma_oracle(a)
    assert got.shape == (4,)
    assert np.all(np.diff(got) <= 0)
    assert np.max(np.abs(got - want) / want) <= 1e-8


def test_svd_reconstruction():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(6, 9))
    res = linalg.svd(a)
    rebuilt = res.u @ np.diag(res.singular_values) @ res.vt
    assert np.linalg.norm(rebuilt - a) <= 1e-8 * np.linalg.norm(a)


def test_svd_rejects_nonfinite():
    bad = np.array([[1.0, np.nan], [0.0, 1.0]])
    with pytest.raises(InvalidInputError):
        linalg.svd(bad)
    with pytest.raises(InvalidInputError):
        linalg.svd(np.zeros((0, 3)))


def test_svd_permutation_and_scale_invariance():
    rng = np.random.default_rng(9)
    for _ in range(10):
        a = rng.normal(size=(6, 6))
        p = np.eye(6)[rng.permutation(6)]
        q = np.eye(6)[rng.permutation(6)]
        s0 = linalg.svd(a, want_vectors=False).singular_values
        s1 = linalg.svd(p @ a @ q, want_vectors=False).singular_values
        assert np.allclose(s0, s1, rtol=1e-10, atol=1e-12)
        c = float(rng.uniform(-5, 5))
        s2 = linalg.svd(c * a, want_vectors=False).singular_values
        assert np.allclose(s2, abs(c) * s0, rtol=1e-10, atol=1e-12)


def test_clip_spectrum():
    s = np.array([1.0, 1e-13, 0.0])
    out = linalg.clip_spectrum(s)
    assert out[0] == 1.0 and out[1] == 0.0 and out[2] == 0.0


def test_solve_spd_identity():
    x = linalg.solve_spd(np.eye(2), np.array([1.0, 2.0]))
    assert np.allclose(x, [1.0, 2.0], atol=1e-14)


def test_solve_spd_diagonal():
    x = linalg.solve_spd(np.diag([2.0, 4.0]), np.array([2.0, 4.0]))
    assert np.allclose(x, [1.0, 1.0], atol=1e-14)


def test_solve_spd_rank_one_fixture():
    # (I + g g^T) x = g with g = [2, 0] collapses to diag(5, 1).
    m = np.array([[5.0, 0.0], [0.0, 1.0]])
    x = linalg.solve_spd(m, np.array([2.0, 0.0]))
    assert np.allclose(x, [0.4, 0.0], atol=1e-14)


def test_solve_spd_residual_bound_random():
    rng = np.random.default_rng(10)
    for n in (3, 20, 80, 200):
        a = rng.normal(size=(n, n))
        m = a @ a.T + n * np.eye(n)
        b = rng.normal(size=n)
        x = linalg.solve_spd(m, b)
        lhs = np.linalg.norm(m @ x - b)
        rhs = 1e-10 * (linalg.frobenius_norm(m) * np.linalg.norm(x) + np.linalg.norm(b))
        assert lhs <= rhs


def test_solve_spd_rejects_indefinite():
    with pytest.raises(NotPositiveDefiniteError):
        linalg.solve_spd(np.diag([1.0, -1.0]), np.array([1.0, 1.0]))


def test_solve_spd_rejects_asymmetric():
    m = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(InvalidInputError):
        linalg.solve_spd(m, np.array([1.0, 1.0]))


def test_frobenius_fixtures():
    assert linalg.frobenius_norm(np.zeros((3, 3))) == 0.0
    assert linalg.frobenius_norm(np.array([[3.0, 4.0], [0.0, 0.0]])) == 5.0


def test_frobenius_matches_elementwise_oracle():
    rng = np.random.default_rng(11)
    m = rng.normal(size=(4, 4))
    oracle = 0.0
    for i in range(4):
        for j in range(4):
            oracle += m[i, j] ** 2
    oracle = oracle ** 0.5
    assert abs(linalg.frobenius_norm(m) - oracle) <= 1e-12


def test_frobenius_matches_spectrum():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(7, 5))
    s = linalg.svd(a, want_vectors=False).singular_values
    assert abs(linalg.frobenius_norm(a) ** 2 - (s * s).sum()) <= 1e-8 * (s * s).sum()
