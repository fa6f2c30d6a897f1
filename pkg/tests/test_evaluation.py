import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strsep.datagen import random_rotation
from strsep.evaluation import (UnsupportedSizeError, WhiteningError, align_and_normalize,
                               best_permutation, correlation_matrix, joint_diag_baseline,
                               joint_diagonalize, lagged_covariance, match_sources,
                               off_diagonal_energy, whiten)


def ar1(phi, T, rng):
    x = np.zeros(T)
    e = rng.normal(size=T)
    for t in range(1, T):
        x[t] = phi * x[t - 1] + e[t]
    return x


def test_correlation_examples():
    x = np.random.default_rng(0).normal(size=100)
    assert correlation_matrix(x, x)[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert correlation_matrix(-x, x)[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert correlation_matrix(np.ones(100), x)[0, 0] == 0.0
    with pytest.raises(ValueError):
        correlation_matrix(np.ones(5), np.ones(6))


def test_permutation_examples():
    res = best_permutation(np.array([[0.1, 0.9], [0.8, 0.2]]))
    assert res.permutation == (1, 0) and res.mac == pytest.approx(0.85)
    res = best_permutation(np.eye(3))
    assert res.permutation == (0, 1, 2) and res.mac == 1.0
    # ties resolve to the lexicographically smallest permutation
    assert best_permutation(np.full((3, 3), 0.5)).permutation == (0, 1, 2)
    with pytest.raises(UnsupportedSizeError):
        best_permutation(np.eye(9))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_permutation_matches_brute_force(k, seed):
    corr = np.random.default_rng(seed).uniform(size=(k, k))
    res = best_permutation(corr)
    brute = max(corr[np.arange(k), p].sum() for p in itertools.permutations(range(k)))
    assert corr[np.arange(k), res.permutation].sum() == pytest.approx(brute, abs=1e-12)
    assert 0.0 <= res.mac <= 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mac_invariant_to_column_permutation_and_sign(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(200, 3))
    S = X @ rng.normal(size=(3, 3))
    perm = rng.permutation(3)
    signs = rng.choice([-1.0, 1.0], size=3)
    assert match_sources(S[:, perm] * signs, X).mac == pytest.approx(match_sources(S, X).mac, abs=1e-12)


def test_align_and_normalize_recovers_reference_order():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(300, 3))
    S = np.stack([-2 * X[:, 2], 3 * X[:, 0] + 1, 0.5 * X[:, 1]], axis=1)
    m = match_sources(S, X)
    assert m.permutation == (2, 0, 1) and list(m.signs) == [-1, 1, 1]
    out = align_and_normalize(S, X, m)
    Xz = (X - X.mean(0)) / X.std(0)
    assert np.allclose(out, Xz, atol=1e-12)


def test_lagged_covariance_examples():
    X = np.random.default_rng(0).normal(size=(50, 2))
    X -= X.mean(0)
    assert np.allclose(lagged_covariance(X, 0), X.T @ X / 50)
    g = lagged_covariance(X, 3)
    assert np.array_equal(g, g.T)
    with pytest.raises(ValueError):
        lagged_covariance(X, 50)


def test_whiten_gives_identity_covariance():
    rng = np.random.default_rng(1)
    Y = rng.normal(size=(500, 3)) @ rng.normal(size=(3, 3)) + 5.0
    Z, W, mu = whiten(Y, 3)
    assert np.allclose(Z.T @ Z / 500, np.eye(3), atol=1e-10)
    assert np.allclose((Y - mu) @ W, Z)
    with pytest.raises(WhiteningError):
        whiten(np.outer(rng.normal(size=100), [1.0, 2.0, 3.0]), 2)


def test_jacobi_descent_is_monotone_and_exact_for_commuting_set():
    rng = np.random.default_rng(2)
    Q0 = random_rotation(4, rng)
    mats = [Q0 @ np.diag(rng.normal(size=4)) @ Q0.T for _ in range(3)]
    trace = []
    Q, rotated = joint_diagonalize(mats, trace=trace)
    assert off_diagonal_energy(rotated) <= 1e-18
    start = off_diagonal_energy(mats)
    seq = [start] + trace
    assert all(b <= a + 1e-12 for a, b in zip(seq, seq[1:]))
    assert np.allclose(Q.T @ Q, np.eye(4), atol=1e-12)


def test_ar1_baseline_recovers_sources():
    rng = np.random.default_rng(0)
    X = np.stack([ar1(0.9, 5000, rng), ar1(-0.5, 5000, rng)], axis=1)
    res = joint_diag_baseline(X @ random_rotation(2, rng).T)
    corr = correlation_matrix(res.sources, X)
    assert res.identifiable
    assert best_permutation(corr).corr[np.arange(2), best_permutation(corr).permutation].min() >= 0.99


def test_identical_dynamics_are_flagged():
    rng = np.random.default_rng(5)
    X = np.stack([ar1(0.7, 4000, rng), ar1(0.7, 4000, rng)], axis=1)
    res = joint_diag_baseline(X @ random_rotation(2, rng).T, lags=(1,), gap_tol=0.05)
    assert not res.identifiable
