"""Ordered multi-scale controller.

Raw gaps are mapped through softplus to positive increments whose normalised
cumulative sums give a strictly increasing coordinate ``u`` in (0, 1). The
coordinate places each branch's log-scale center and sets its locality slope,
so the branch order is structural rather than learned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

ENTROPY_EPS = 1e-8


@dataclass
class ControllerConfig:
    gap_floor: float = 1e-3
    temperature: float = 4.0
    alpha_min: float = 0.01
    alpha_max: float = 1.0
    min_center_gap: float | None = None  # None -> (a_max - a_min) / (2 (K + 1))

    def validate(self) -> None:
        if self.gap_floor <= 0:
            raise ValueError("gap_floor must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if not (0 < self.alpha_min < self.alpha_max):
            raise ValueError("need 0 < alpha_min < alpha_max")
        if self.min_center_gap is not None and self.min_center_gap <= 0:
            raise ValueError("min_center_gap must be positive")

    def center_gap(self, patch_sizes, n_sources: int) -> float:
        if self.min_center_gap is not None:
            return self.min_center_gap
        a = np.log(np.asarray(patch_sizes, dtype=float))
        return float(a.max() - a.min()) / (2 * (n_sources + 1))


@dataclass
class ControllerOutput:
    u: Tensor              # (K,)
    centers: Tensor        # (K,)
    weights: Tensor        # (K, R), rows sum to one
    expected_log_scale: Tensor  # (K,)
    expected_scale: Tensor      # (K,)
    alpha: Tensor          # (K,)
    log_scales: np.ndarray  # (R,)


def init_raw_gaps(n_sources: int) -> Tensor:
    return Tensor(np.zeros(n_sources + 1), requires_grad=True, name="eta")


def log_scales(patch_sizes) -> np.ndarray:
    sizes = np.asarray(patch_sizes, dtype=float)
    if sizes.ndim != 1 or sizes.size < 1 or (sizes < 1).any():
        raise ValueError(f"invalid patch sizes {patch_sizes!r}")
    return np.log(sizes)


def scale_weights(centers, log_scale: np.ndarray, temperature: float) -> Tensor:
    """Row softmax of -tau (a_r - c_k)^2; accepts one center or a vector of them."""
    c = centers if isinstance(centers, Tensor) else Tensor(np.asarray(centers, dtype=float))
    squeeze = c.ndim == 0
    if squeeze:
        c = nx.reshape(c, (1,))
    diff = nx.sub(Tensor(log_scale[None, :]), nx.reshape(c, (c.shape[0], 1)))
    w = nx.softmax(nx.mul(nx.square(diff), -float(temperature)), axis=-1)
    return nx.reshape(w, (log_scale.shape[0],)) if squeeze else w


def compute_controller(raw_gaps: Tensor, patch_sizes, cfg: ControllerConfig) -> ControllerOutput:
    a = log_scales(patch_sizes)
    if a.size < 2 or a.max() == a.min():
        raise ValueError("controller needs at least two distinct patch sizes")
    eta = raw_gaps if isinstance(raw_gaps, Tensor) else Tensor(raw_gaps)
    n_sources = eta.shape[0] - 1
    if n_sources < 1:
        raise ValueError("need K + 1 >= 2 raw gaps")
    a_min, a_max = float(a.min()), float(a.max())

    delta = nx.add(nx.softplus(eta), cfg.gap_floor)
    # row k sums gaps 0..k, i.e. the first k+1 of them (branch k is 0-based)
    lower = np.tril(np.ones((n_sources, n_sources + 1)), k=0)
    partial = nx.matmul(Tensor(lower), nx.reshape(delta, (n_sources + 1, 1)))
    u = nx.div(nx.reshape(partial, (n_sources,)), nx.tsum(delta))
    centers = nx.add(nx.mul(u, a_max - a_min), a_min)
    weights = scale_weights(centers, a, cfg.temperature)
    expected_log = nx.reshape(nx.matmul(weights, Tensor(a[:, None])), (n_sources,))
    expected = nx.exp(expected_log)
    log_amax = math.log(cfg.alpha_max)
    alpha = nx.exp(nx.add(nx.mul(u, math.log(cfg.alpha_min) - log_amax), log_amax))
    return ControllerOutput(u, centers, weights, expected_log, expected, alpha, a)


def entropy_penalty(weights, eps: float = ENTROPY_EPS) -> Tensor:
    w = weights if isinstance(weights, Tensor) else Tensor(weights)
    k = w.shape[0]
    ent = nx.tsum(nx.mul(w, nx.log(nx.add(w, eps))))
    return nx.mul(ent, -1.0 / k)


def gap_penalty(centers, min_gap: float) -> Tensor:
    c = centers if isinstance(centers, Tensor) else Tensor(np.asarray(centers, dtype=float))
    k = c.shape[0]
    if k <= 1:
        return Tensor(0.0)
    gaps = nx.sub(c[1:], c[:-1])
    hinge = nx.relu(nx.sub(min_gap, gaps))
    return nx.mul(nx.tsum(nx.square(hinge)), 1.0 / (k - 1))
