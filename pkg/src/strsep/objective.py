"""Mixer, reconstruction term, auxiliary penalties and the full objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .controller import ControllerOutput, entropy_penalty, gap_penalty
from .numerics import Tensor
from .patching import MaskSet, PatchSpec
from .strformer import BranchParams, StructuralResult, structural_loss

STD_EPS = 1e-8


@dataclass
class ObjectiveWeights:
    nu_y: float = 1e-2
    lam_str: float = 1.0
    lam_sep: float = 0.1
    lam_smooth: float = 1e-3
    lam_ent: float = 1e-2
    lam_gap: float = 1.0
    diff_order: int = 1
    std_eps: float = STD_EPS

    def validate(self) -> None:
        if not self.nu_y > 0:
            raise ValueError("nu_y must be positive")
        for name in ("lam_str", "lam_sep", "lam_smooth", "lam_ent", "lam_gap"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.diff_order not in (1, 2):
            raise ValueError("diff_order must be 1 or 2")


@dataclass
class Mixer:
    """Row-wise, time-shared map from latent rows (K) to observation rows (m)."""

    kind: str
    params: dict[str, Tensor]
    standardize_input: bool = False

    @property
    def n_sources(self) -> int:
        return self.params["A"].shape[1] if self.kind == "affine" else self.params["W1"].shape[0]

    @property
    def n_channels(self) -> int:
        return self.params["A"].shape[0] if self.kind == "affine" else self.params["W2"].shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(k, self.params[k]) for k in sorted(self.params)]


def init_mixer(kind: str, n_sources: int, n_channels: int, rng: np.random.Generator,
               hidden: int = 32, standardize_input: bool = False) -> Mixer:
    def xavier(fan_in, fan_out, shape):
        b = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)

    if kind == "affine":
        params = {"A": xavier(n_sources, n_channels, (n_channels, n_sources)),
                  "b": Tensor(np.zeros(n_channels), requires_grad=True)}
    elif kind == "mlp":
        params = {"W1": xavier(n_sources, hidden, (n_sources, hidden)),
                  "b1": Tensor(np.zeros(hidden), requires_grad=True),
                  "W2": xavier(hidden, n_channels, (hidden, n_channels)),
                  "b2": Tensor(np.zeros(n_channels), requires_grad=True)}
    else:
        raise ValueError(f"unknown mixer kind {kind!r}")
    return Mixer(kind, params, standardize_input)


def _column_std(S: Tensor) -> tuple[Tensor, Tensor]:
    centered = nx.sub(S, nx.mean(S, axis=0, keepdims=True))
    std = nx.sqrt(nx.mean(nx.square(centered), axis=0, keepdims=True))
    return centered, std


def decoder_input(S, standardize: bool = False, eps: float = STD_EPS) -> Tensor:
    S = nx.tensor(S)
    if not standardize:
        return S
    centered, std = _column_std(S)
    return nx.div(centered, nx.add(std, eps))


def mix(S_dec, mixer: Mixer) -> Tensor:
    S_dec = nx.tensor(S_dec)
    if S_dec.shape[1] != mixer.n_sources:
        raise nx.ShapeError(f"mixer expects {mixer.n_sources} sources, got {S_dec.shape[1]}")
    p = mixer.params
    if mixer.kind == "affine":
        return nx.add(nx.matmul(S_dec, nx.transpose(p["A"])), p["b"])
    hidden = nx.gelu(nx.add(nx.matmul(S_dec, p["W1"]), p["b1"]))
    return nx.add(nx.matmul(hidden, p["W2"]), p["b2"])


def reconstruction_loss(Y, Y_hat, nu_y: float) -> Tensor:
    Y, Y_hat = nx.tensor(Y), nx.tensor(Y_hat)
    if Y.shape != Y_hat.shape:
        raise nx.ShapeError(f"observation shape {Y.shape} != reconstruction shape {Y_hat.shape}")
    if not nu_y > 0:
        raise ValueError("nu_y must be positive")
    return nx.mul(nx.tsum(nx.square(nx.sub(Y, Y_hat))), 1.0 / (2.0 * nu_y))


def separation_penalty(S, eps: float = STD_EPS) -> Tensor:
    S = nx.tensor(S)
    t, k = S.shape
    if t < 2:
        raise ValueError("separation penalty needs T >= 2")
    centered, std = _column_std(S)
    z = nx.div(centered, nx.add(std, eps))
    corr = nx.mul(nx.matmul(nx.transpose(z), z), 1.0 / t)
    return nx.tsum(nx.square(nx.sub(corr, np.eye(k))))


def difference(S, order: int) -> Tensor:
    if order not in (1, 2):
        raise ValueError(f"difference order must be 1 or 2, got {order}")
    d = nx.tensor(S)
    for _ in range(order):
        d = nx.sub(d[1:], d[:-1])
    return d


def smoothness_penalty(S, order: int = 1) -> Tensor:
    S = nx.tensor(S)
    t, k = S.shape
    if order not in (1, 2):
        raise ValueError(f"difference order must be 1 or 2, got {order}")
    if t <= order:
        raise ValueError(f"need T > {order} for order-{order} differences")
    return nx.mul(nx.tsum(nx.square(difference(S, order))), 1.0 / ((t - order) * k))


@dataclass
class LossBreakdown:
    rec: Tensor
    str: Tensor
    sep: Tensor
    smooth: Tensor
    ent: Tensor
    gap: Tensor
    total: Tensor
    structural: StructuralResult | None = None
    Y_hat: Tensor | None = None
    extras: dict = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name).item()
                for name in ("rec", "str", "sep", "smooth", "ent", "gap", "total")}


def total_objective(Y, S: Tensor, mixer: Mixer, branches: Mapping[tuple[int, int], BranchParams],
                    specs: list[PatchSpec], ctrl: ControllerOutput, weights: ObjectiveWeights,
                    center_gap: float, rng: np.random.Generator | None = None,
                    masks: Mapping[tuple[int, int], MaskSet] | None = None,
                    mask_ratio: float = 0.3) -> LossBreakdown:
    """Assemble every term and the weighted total.

    Terms with zero weight are still reported but kept out of the total, so
    their parameters receive no gradient.
    """
    Y = nx.tensor(Y)
    S_dec = decoder_input(S, mixer.standardize_input, weights.std_eps)
    Y_hat = mix(S_dec, mixer)
    rec = reconstruction_loss(Y, Y_hat, weights.nu_y)
    st = structural_loss(S, ctrl.weights, ctrl.alpha, branches, specs, rng=rng, masks=masks,
                         mask_ratio=mask_ratio)
    sep = separation_penalty(S, weights.std_eps)
    smooth = smoothness_penalty(S, weights.diff_order)
    ent = entropy_penalty(ctrl.weights)
    gap = gap_penalty(ctrl.centers, center_gap)

    total = rec
    for lam, term in ((weights.lam_str, st.total), (weights.lam_sep, sep),
                      (weights.lam_smooth, smooth), (weights.lam_ent, ent),
                      (weights.lam_gap, gap)):
        if lam != 0.0:
            total = nx.add(total, nx.mul(term, lam))
    return LossBreakdown(rec, st.total, sep, smooth, ent, gap, total, structural=st, Y_hat=Y_hat)
