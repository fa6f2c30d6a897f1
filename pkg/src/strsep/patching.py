"""Overlapping patch extraction and random mask sets for 1-D trajectories."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, gather1d

DEFAULT_PATCH_SIZES = (4, 8, 16, 32)
DEFAULT_STRIDE_RATIO = 0.5
DEFAULT_MASK_RATIO = 0.3


class DegenerateScaleError(ValueError):
    """The trajectory is shorter than the patch size."""


def compute_stride(patch_size: int, stride_ratio: float) -> int:
    if patch_size < 1:
        raise ValueError(f"patch size must be >= 1, got {patch_size}")
    if not (0.0 < stride_ratio <= 1.0):
        raise ValueError(f"stride ratio must lie in (0, 1], got {stride_ratio}")
    return max(1, math.floor(stride_ratio * patch_size + 0.5))


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int
    stride_ratio: float = DEFAULT_STRIDE_RATIO

    @property
    def stride(self) -> int:
        return compute_stride(self.patch_size, self.stride_ratio)

    def num_patches(self, length: int) -> int:
        if length < self.patch_size:
            raise DegenerateScaleError(
                f"trajectory length {length} < patch size {self.patch_size}")
        return (length - self.patch_size) // self.stride + 1

    def start_indices(self, length: int) -> np.ndarray:
        return np.arange(self.num_patches(length)) * self.stride

    def index_matrix(self, length: int) -> np.ndarray:
        """Integer matrix whose row i lists the trajectory samples of patch i."""
        starts = self.start_indices(length)
        return starts[:, None] + np.arange(self.patch_size)[None, :]


@dataclass
class PatchSet:
    patches: Tensor          # N x P
    start_indices: np.ndarray

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


def extract_patches(s, spec: PatchSpec) -> PatchSet:
    """Gather the N x P patch matrix from a length-T trajectory (differentiable)."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    if s.ndim != 1:
        raise ValueError(f"trajectory must be 1-D, got shape {s.shape}")
    idx = spec.index_matrix(s.shape[0])
    return PatchSet(gather1d(s, idx), idx[:, 0].copy())


def mask_count(num_patches: int, mask_ratio: float) -> int:
    return max(1, math.floor(mask_ratio * num_patches + 0.5))


@dataclass(frozen=True)
class MaskSet:
    indices: tuple[int, ...]
    mask_ratio: float

    def __len__(self) -> int:
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.intp)


def sample_mask(num_patches: int, mask_ratio: float, rng: np.random.Generator) -> MaskSet:
    """Uniform draw without replacement; indices are 0-based and sorted."""
    if num_patches < 1:
        raise ValueError("need at least one patch")
    if not (0.0 <= mask_ratio <= 1.0):
        raise ValueError(f"mask ratio must lie in [0, 1], got {mask_ratio}")
    m = min(mask_count(num_patches, mask_ratio), num_patches)
    picked = rng.choice(num_patches, size=m, replace=False)
    return MaskSet(tuple(int(i) for i in np.sort(picked)), mask_ratio)


def usable_patch_sizes(patch_sizes, length: int) -> tuple[int, ...]:
    """Drop scales longer than the trajectory."""
    kept = tuple(p for p in patch_sizes if p <= length)
    if not kept:
        raise DegenerateScaleError(
            f"no patch size in {tuple(patch_sizes)} fits a trajectory of length {length}")
    return kept
