"""Seeded synthetic sources and mixtures for the desk-scale case study."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import DEFAULT_LAGS

SOURCE_KINDS = ("sine", "chirp", "smoothed-noise")


@dataclass
class SourceRecipe:
    kind: str = "sine"
    period: float = 64.0
    harmonic: float = 0.3          # amplitude of the second harmonic (sine)
    end_period: float | None = None  # chirp: final period
    smoothing: float = 8.0         # smoothed-noise kernel width in samples
    perturbation: float = 0.05     # std of added smoothed noise, relative to unit amplitude

    def validate(self) -> None:
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.period <= 0 or self.smoothing <= 0 or self.perturbation < 0:
            raise ValueError(f"invalid recipe parameters: {self}")
        if self.kind == "chirp" and (self.end_period is None or self.end_period <= 0):
            raise ValueError("chirp recipe needs a positive end_period")


def case_study_recipes() -> list[SourceRecipe]:
    return [SourceRecipe("sine", 16.0), SourceRecipe("sine", 64.0), SourceRecipe("sine", 256.0)]


@dataclass
class SyntheticSpec:
    length: int = 1000
    n_sources: int = 3
    n_channels: int = 3
    recipes: list[SourceRecipe] = field(default_factory=case_study_recipes)
    mixing: str = "linear"          # linear | nonlinear
    noise_std: float = 0.01
    seed: int = 0
    mixing_matrix: np.ndarray | None = None  # overrides the random rotation/matrix
    check_distinct: bool = True

    def validate(self) -> None:
        if self.length < 2 or self.n_sources < 1 or self.n_channels < self.n_sources:
            raise ValueError("need T >= 2, K >= 1 and m >= K")
        if len(self.recipes) != self.n_sources:
            raise ValueError(f"{len(self.recipes)} recipes for {self.n_sources} sources")
        if self.mixing not in ("linear", "nonlinear"):
            raise ValueError(f"unknown mixing {self.mixing!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        for r in self.recipes:
            r.validate()


@dataclass
class Dataset:
    Y: np.ndarray
    X: np.ndarray | None
    A: np.ndarray | None
    meta: dict


def smoothed_noise(rng: np.random.Generator, length: int, width: float) -> np.ndarray:
    half = int(np.ceil(3 * width))
    raw = rng.normal(size=length + 2 * half)
    taps = np.exp(-0.5 * (np.arange(-half, half + 1) / width) ** 2)
    out = np.convolve(raw, taps / taps.sum(), mode="valid")
    return out[:length]


def _standardize(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    return x / x.std()


def _one_source(recipe: SourceRecipe, length: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(length, dtype=float)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    if recipe.kind == "sine":
        w = 2 * np.pi / recipe.period
        x = np.sin(w * t + phase[0]) + recipe.harmonic * np.sin(2 * w * t + phase[1])
    elif recipe.kind == "chirp":
        f0, f1 = 1.0 / recipe.period, 1.0 / recipe.end_period
        freq = f0 + (f1 - f0) * t / max(1, length - 1)
        x = np.sin(2 * np.pi * np.cumsum(freq) + phase[0])
    else:
        x = _standardize(smoothed_noise(rng, length, recipe.smoothing))
    if recipe.perturbation > 0 and recipe.kind != "smoothed-noise":
        x = _standardize(x) + recipe.perturbation * _standardize(
            smoothed_noise(rng, length, recipe.smoothing))
    return _standardize(x)


def autocorrelation(x: np.ndarray, lag: int) -> float:
    x = np.asarray(x, float) - np.mean(x)
    return float(x[:-lag] @ x[lag:] / (x @ x)) if lag else 1.0


def temporal_signatures(X: np.ndarray, lags=DEFAULT_LAGS) -> np.ndarray:
    """K x |lags| matrix of autocorrelations."""
    return np.array([[autocorrelation(X[:, k], lag) for lag in lags] for k in range(X.shape[1])])


def check_distinct_signatures(X: np.ndarray, lags=DEFAULT_LAGS, min_sep: float = 0.05) -> float:
    """Smallest pairwise max-norm distance between temporal signatures; raises if too small."""
    sig = temporal_signatures(X, lags)
    k = sig.shape[0]
    sep = min((np.abs(sig[i] - sig[j]).max() for i in range(k) for j in range(i + 1, k)),
              default=np.inf)
    if sep < min_sep:
        raise ValueError(f"source temporal signatures separated by only {sep:.4f} < {min_sep}")
    return float(sep)


def generate_sources(spec: SyntheticSpec) -> np.ndarray:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[0])
    X = np.column_stack([_one_source(r, spec.length, rng) for r in spec.recipes])
    if spec.check_distinct and spec.n_sources > 1:
        check_distinct_signatures(X)
    return X


def random_rotation(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def check_full_rank(A: np.ndarray, tol: float = 1e-8) -> None:
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.min() < tol:
        raise ValueError(f"mixing matrix is rank deficient (smallest singular value {sv.min():.3g})")


def leaky_nonlinearity(z: np.ndarray) -> np.ndarray:
    """Strictly increasing pointwise map (slope >= 1), hence injective."""
    return z + 0.5 * np.tanh(z)


def mix_sources(X: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
    """Return (Y, A) with Y = X A^T (+ noise), or the leaky map of it when nonlinear."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[1])
    K, m = X.shape[1], spec.n_channels
    if spec.mixing_matrix is not None:
        A = np.asarray(spec.mixing_matrix, float)
    elif m == K:
        A = random_rotation(K, rng)
    else:
        A = rng.normal(size=(m, K)) / np.sqrt(K)
    if A.shape != (m, K):
        raise ValueError(f"mixing matrix must be {m} x {K}, got {A.shape}")
    check_full_rank(A)
    Y = X @ A.T
    if spec.mixing == "nonlinear":
        Y = leaky_nonlinearity(Y)
    if spec.noise_std > 0:
        Y = Y + spec.noise_std * rng.normal(size=Y.shape)
    return Y, A


def generate_dataset(spec: SyntheticSpec) -> Dataset:
    X = generate_sources(spec)
    Y, A = mix_sources(X, spec)
    meta = {
        "length": spec.length, "n_sources": spec.n_sources, "n_channels": spec.n_channels,
        "mixing": spec.mixing, "noise_std": spec.noise_std, "seed": spec.seed,
        "recipes": [r.__dict__ for r in spec.recipes], "mixing_matrix": A.tolist(),
    }
    return Dataset(Y, X, A, meta)
