import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strsep.patching import (DegenerateScaleError, PatchSpec, compute_stride, extract_patches,
                             mask_count, sample_mask, usable_patch_sizes)


@pytest.mark.parametrize("size, ratio, expected", [(8, 0.5, 4), (1, 0.1, 1), (3, 1.0, 3)])
def test_compute_stride(size, ratio, expected):
    assert compute_stride(size, ratio) == expected


@pytest.mark.parametrize("ratio", [0.0, -0.5, 1.01])
def test_compute_stride_rejects_ratio(ratio):
    with pytest.raises(ValueError):
        compute_stride(4, ratio)


def test_extract_examples():
    s = np.arange(10.0)
    ps = extract_patches(s, PatchSpec(4, 0.5))
    assert list(ps.start_indices) == [0, 2, 4, 6]
    assert np.array_equal(ps.patches.data[1], [2, 3, 4, 5])

    whole = extract_patches(np.arange(4.0), PatchSpec(4, 0.5))
    assert whole.patches.shape == (1, 4)
    assert np.array_equal(whole.patches.data[0], np.arange(4.0))

    with pytest.raises(DegenerateScaleError):
        extract_patches(np.arange(3.0), PatchSpec(4, 0.5))


def test_extract_matches_direct_slicing_exhaustively():
    rng = np.random.default_rng(0)
    for T in range(1, 65):
        s = rng.normal(size=T)
        for P in range(1, T + 1):
            for q in range(1, P + 1):
                spec = PatchSpec(P, q / P)
                if spec.stride != q:
                    continue
                ps = extract_patches(s, spec)
                n = (T - P) // q + 1
                assert ps.patches.shape == (n, P)
                for i in range(n):
                    assert np.array_equal(ps.patches.data[i], s[i * q:i * q + P])


@settings(max_examples=50, deadline=None)
@given(st.integers(8, 40), st.integers(1, 8), st.floats(0.05, 1.0),
       st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_extract_is_linear(T, P, rho, a, b, seed):
    rng = np.random.default_rng(seed)
    s1, s2 = rng.normal(size=T), rng.normal(size=T)
    spec = PatchSpec(P, rho)
    lhs = extract_patches(a * s1 + b * s2, spec).patches.data
    rhs = a * extract_patches(s1, spec).patches.data + b * extract_patches(s2, spec).patches.data
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_mask_examples():
    rng = np.random.default_rng(0)
    assert len(sample_mask(10, 0.25, rng)) == 3
    assert sample_mask(1, 0.9, rng).indices == (0,)
    assert len(sample_mask(8, 0.0, rng)) == 1
    assert mask_count(10, 0.25) == 3


def test_mask_same_seed_same_set():
    a = sample_mask(50, 0.3, np.random.default_rng(7))
    b = sample_mask(50, 0.3, np.random.default_rng(7))
    assert a == b
    assert len(set(a.indices)) == len(a) and all(0 <= i < 50 for i in a.indices)


def test_usable_patch_sizes_drops_long_scales():
    assert usable_patch_sizes((4, 8, 16, 32, 256), 100) == (4, 8, 16, 32)
    with pytest.raises(DegenerateScaleError):
        usable_patch_sizes((128, 256), 100)
