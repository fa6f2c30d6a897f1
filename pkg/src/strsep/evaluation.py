"""Post-hoc recovery metrics and the whitening + joint-diagonalisation baseline."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

MAX_MATCH_SOURCES = 8
DEFAULT_LAGS = (1, 2, 3, 5, 8)


class UnsupportedSizeError(ValueError):
    pass


class WhiteningError(np.linalg.LinAlgError):
    pass


@dataclass
class MatchResult:
    corr: np.ndarray            # K x K absolute correlations
    permutation: tuple[int, ...]  # estimate k -> reference permutation[k]
    mac: float
    signs: np.ndarray | None = None

    def to_json(self) -> dict:
        out = {"permutation": list(self.permutation), "mac": self.mac,
               "corr": self.corr.tolist()}
        if self.signs is not None:
            out["signs"] = [int(s) for s in self.signs]
        return out


def _zscore_columns(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=0, keepdims=True)
    std = Xc.std(axis=0, keepdims=True)
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, Xc / safe, 0.0)


def correlation_matrix(S_hat, X) -> np.ndarray:
    """|Pearson corr| between estimate columns (rows) and references (columns).

    Constant columns give zero correlation.
    """
    S_hat, X = np.asarray(S_hat, float), np.asarray(X, float)
    if S_hat.ndim == 1:
        S_hat = S_hat[:, None]
    if X.ndim == 1:
        X = X[:, None]
    if S_hat.shape[0] != X.shape[0]:
        raise ValueError(f"length mismatch: {S_hat.shape[0]} vs {X.shape[0]}")
    if S_hat.shape[0] < 2:
        raise ValueError("correlation needs at least two samples")
    a, b = _zscore_columns(S_hat), _zscore_columns(X)
    return np.clip(np.abs(a.T @ b) / S_hat.shape[0], 0.0, 1.0)


def signed_correlation(S_hat, X) -> np.ndarray:
    S_hat, X = np.asarray(S_hat, float), np.asarray(X, float)
    return _zscore_columns(S_hat).T @ _zscore_columns(X) / S_hat.shape[0]


def best_permutation(corr) -> MatchResult:
    """Exhaustive search; ties go to the lexicographically smallest permutation."""
    corr = np.asarray(corr, float)
    k = corr.shape[0]
    if corr.shape != (k, k):
        raise ValueError(f"expected a square matrix, got {corr.shape}")
    if k > MAX_MATCH_SOURCES:
        raise UnsupportedSizeError(f"exhaustive matching supports K <= {MAX_MATCH_SOURCES}, got {k}")
    rows = np.arange(k)
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(k)):
        score = corr[rows, perm].sum()
        if score > best_score:
            best, best_score = perm, score
    mac = float(corr[rows, best].mean())
    return MatchResult(corr, tuple(int(i) for i in best), mac)


def match_sources(S_hat, X) -> MatchResult:
    res = best_permutation(correlation_matrix(S_hat, X))
    signed = signed_correlation(S_hat, X)
    res.signs = np.array([1 if signed[k, j] >= 0 else -1 for k, j in enumerate(res.permutation)])
    return res


def align_and_normalize(S_hat, X, match: MatchResult | None = None) -> np.ndarray:
    """Reorder estimates to reference order, fix signs, then z-score.

    Column j of the output is the estimate matched to reference j.
    """
    S_hat, X = np.asarray(S_hat, float), np.asarray(X, float)
    if match is None or match.signs is None:
        match = match_sources(S_hat, X)
    k = S_hat.shape[1]
    if len(match.permutation) != k or X.shape[1] != k:
        raise ValueError("match result does not fit the given shapes")
    out = np.empty_like(S_hat)
    for est, ref in enumerate(match.permutation):
        out[:, ref] = match.signs[est] * S_hat[:, est]
    return _zscore_columns(out)


# ---------------------------------------------------------------------------
# linear baseline
# ---------------------------------------------------------------------------

def lagged_covariance(X, lag: int) -> np.ndarray:
    """Symmetrised empirical lag covariance of zero-mean columns."""
    X = np.asarray(X, float)
    t = X.shape[0]
    if not (0 <= lag < t):
        raise ValueError(f"lag must satisfy 0 <= lag < T={t}, got {lag}")
    g = X[: t - lag].T @ X[lag:] / (t - lag)
    return 0.5 * (g + g.T)


def whiten(Y, n_components: int, rel_tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center and whiten to ``n_components`` dimensions.

    Returns (whitened data, whitening matrix W, mean) with data = (Y - mean) @ W.
    """
    Y = np.asarray(Y, float)
    mu = Y.mean(axis=0)
    Yc = Y - mu
    cov = Yc.T @ Yc / Y.shape[0]
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    evals, evecs = evals[order], evecs[:, order]
    if evals.size < n_components or evals[-1] <= rel_tol * max(evals[0], np.finfo(float).tiny):
        raise WhiteningError("covariance is rank deficient; cannot whiten")
    # deterministic sign: largest-magnitude entry of each eigenvector positive
    flip = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(n_components)])
    evecs = evecs * flip
    W = evecs / np.sqrt(evals)
    return Yc @ W, W, mu


def off_diagonal_energy(mats) -> float:
    return float(sum(np.sum(M ** 2) - np.sum(np.diag(M) ** 2) for M in mats))


def joint_diagonalize(mats, max_sweeps: int = 100, tol: float = 1e-10,
                      trace: list | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Orthogonal approximate joint diagonaliser by Jacobi (Givens) rotations.

    Each rotation angle is the closed-form minimiser of the summed squared
    off-diagonal entries for its (p, q) pair. Returns Q and the rotated
    matrices Q^T M Q. If ``trace`` is a list, the off-diagonal energy after
    every rotation is appended to it.
    """
    M = np.stack([np.asarray(m, float) for m in mats])
    k = M.shape[1]
    Q = np.eye(k)
    for _ in range(max_sweeps):
        largest = 0.0
        for p in range(k - 1):
            for q in range(p + 1, k):
                g1 = M[:, p, p] - M[:, q, q]
                g2 = M[:, p, q] + M[:, q, p]
                ton = g1 @ g1 - g2 @ g2
                toff = 2.0 * (g1 @ g2)
                theta = 0.5 * np.arctan2(toff, ton + np.hypot(ton, toff))
                c, s = np.cos(theta), np.sin(theta)
                largest = max(largest, abs(s))
                if abs(s) <= tol:
                    continue
                G = np.array([[c, -s], [s, c]])
                idx = [p, q]
                M[:, :, idx] = M[:, :, idx] @ G
                M[:, idx, :] = np.einsum("ji,mjk->mik", G, M[:, idx, :])
                Q[:, idx] = Q[:, idx] @ G
                if trace is not None:
                    trace.append(off_diagonal_energy(M))
        if largest <= tol:
            break
    return Q, list(M)


@dataclass
class BaselineResult:
    sources: np.ndarray      # T x K
    rotation: np.ndarray     # K x K orthogonal
    off_diagonality: float
    identifiable: bool
    whitening: np.ndarray    # m x K


def joint_diag_baseline(Y, lags=DEFAULT_LAGS, n_sources: int | None = None,
                        gap_tol: float = 1e-3) -> BaselineResult:
    Y = np.asarray(Y, float)
    k = Y.shape[1] if n_sources is None else n_sources
    if Y.shape[1] < k:
        raise ValueError(f"need at least {k} channels, got {Y.shape[1]}")
    if max(lags) >= Y.shape[0]:
        raise ValueError("largest lag must be shorter than the sequence")
    Z, W, _ = whiten(Y, k)
    covs = [lagged_covariance(Z, lag) for lag in lags]
    Q, rotated = joint_diagonalize(covs)
    diag1 = np.diag(Q.T @ lagged_covariance(Z, lags[0]) @ Q) if lags[0] != 0 else np.diag(rotated[0])
    gaps = np.abs(diag1[:, None] - diag1[None, :])[np.triu_indices(k, 1)]
    identifiable = bool(gaps.size == 0 or gaps.min() >= gap_tol)
    return BaselineResult(Z @ Q, Q, off_diagonal_energy(rotated), identifiable, W)
