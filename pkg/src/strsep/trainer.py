"""Joint gradient optimisation of sources, mixer, branches and controller."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .controller import ControllerConfig, compute_controller, init_raw_gaps
from .evaluation import match_sources
from .io import append_diagnostics, read_checkpoint_blobs, write_checkpoint_blobs
from .numerics import AdamState, NonFiniteError, Tensor
from .objective import LossBreakdown, Mixer, ObjectiveWeights, init_mixer, total_objective
from .patching import (DEFAULT_MASK_RATIO, DEFAULT_PATCH_SIZES, DEFAULT_STRIDE_RATIO,
                       PatchSpec, usable_patch_sizes)
from .strformer import ArchConfig, BranchParams, init_branch

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1


class TrainingAborted(RuntimeError):
    """Raised when a loss term or gradient becomes non-finite."""

    def __init__(self, message: str, iteration: int):
        self.iteration = iteration
        super().__init__(message)


@dataclass
class TrainConfig:
    n_sources: int = 3
    patch_sizes: tuple[int, ...] = DEFAULT_PATCH_SIZES
    stride_ratio: float = DEFAULT_STRIDE_RATIO
    mask_ratio: float = DEFAULT_MASK_RATIO
    mixer: str = "affine"
    mixer_hidden: int = 32
    standardize_input: bool = False
    init_scale: float = 0.1
    max_iters: int = 3000
    lr: float = 3e-3
    scheduler: str = "cosine"
    warmup_steps: int = 50
    clip_norm: float | None = 5.0
    seed: int = 0
    deterministic: bool = True
    diagnostics_every: int = 10
    arch: ArchConfig = field(default_factory=ArchConfig)
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def validate(self) -> None:
        if self.n_sources < 1:
            raise ValueError("n_sources must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.scheduler not in ("constant", "cosine"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.diagnostics_every < 1:
            raise ValueError("diagnostics_every must be >= 1")
        if self.mixer not in ("affine", "mlp"):
            raise ValueError(f"unknown mixer {self.mixer!r}")
        if not (0.0 <= self.mask_ratio <= 1.0):
            raise ValueError("mask_ratio must lie in [0, 1]")
        if not (0.0 < self.stride_ratio <= 1.0):
            raise ValueError("stride_ratio must lie in (0, 1]")
        self.arch.validate()
        self.weights.validate()
        self.controller.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_sizes"] = list(self.patch_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["arch"] = ArchConfig(**d.get("arch", {}))
        d["weights"] = ObjectiveWeights(**d.get("weights", {}))
        d["controller"] = ControllerConfig(**d.get("controller", {}))
        d["patch_sizes"] = tuple(d.get("patch_sizes", DEFAULT_PATCH_SIZES))
        return cls(**d)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Rate for 0-based ``step``: linear warmup, then optional cosine decay to zero."""
    base = cfg.lr
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return base * (step + 1) / cfg.warmup_steps
    if cfg.scheduler == "constant":
        return base
    span = max(1, cfg.max_iters - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainingState:
    iteration: int
    S: Tensor
    mixer: Mixer
    branches: dict[tuple[int, int], BranchParams]
    eta: Tensor
    adam: AdamState
    rng: np.random.Generator
    patch_sizes: tuple[int, ...]
    config: TrainConfig

    @property
    def specs(self) -> list[PatchSpec]:
        return [PatchSpec(p, self.config.stride_ratio) for p in self.patch_sizes]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [("S", self.S)]
        named.extend((f"mixer.{n}", t) for n, t in self.mixer.named_tensors())
        for (k, r) in sorted(self.branches):
            named.extend((f"branch.{k}.{r}.{n}", t) for n, t in self.branches[(k, r)].named_tensors())
        named.append(("eta", self.eta))
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def center_gap(self) -> float:
        return self.config.controller.center_gap(self.patch_sizes, self.config.n_sources)


@dataclass
class DiagnosticsRecord:
    iteration: int
    losses: dict[str, float]
    branch_str: list[float]
    expected_scale: list[float]
    centers: list[float]
    alpha: list[float]
    mac: float | None = None
    branch_corr: list[float] | None = None
    matched_index: list[int] | None = None
    grad_norm: float = 0.0

    def to_json(self) -> dict:
        rec = {
            "iter": self.iteration,
            "loss_total": self.losses["total"],
            "loss_rec": self.losses["rec"],
            "loss_str": self.losses["str"],
            "loss_sep": self.losses["sep"],
            "loss_smooth": self.losses["smooth"],
            "loss_ent": self.losses["ent"],
            "loss_gap": self.losses["gap"],
            "branch_str": self.branch_str,
            "expected_scale": self.expected_scale,
            "center": self.centers,
            "alpha": self.alpha,
        }
        if self.mac is not None:
            rec["mac"] = self.mac
            rec["branch_corr"] = self.branch_corr
            rec["matched_index"] = self.matched_index
        return rec


def init_state(Y, cfg: TrainConfig) -> TrainingState:
    cfg.validate()
    Y = np.asarray(Y, float)
    if Y.ndim != 2:
        raise ValueError("observations must be a T x m matrix")
    T, m = Y.shape
    sizes = usable_patch_sizes(cfg.patch_sizes, T)
    dropped = set(cfg.patch_sizes) - set(sizes)
    if dropped:
        log.info("dropping patch sizes %s longer than T=%d", sorted(dropped), T)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng = np.random.default_rng(seeds[0])
    mask_rng = np.random.default_rng(seeds[1])
    K = cfg.n_sources
    S = Tensor(init_rng.normal(0.0, cfg.init_scale, size=(T, K)), requires_grad=True, name="S")
    mixer = init_mixer(cfg.mixer, K, m, init_rng, cfg.mixer_hidden, cfg.standardize_input)
    branches = {(k, r): init_branch(p, cfg.arch, init_rng)
                for k in range(K) for r, p in enumerate(sizes)}
    eta = init_raw_gaps(K)
    state = TrainingState(0, S, mixer, branches, eta, AdamState(lr=cfg.lr), mask_rng, sizes, cfg)
    state.adam = AdamState.for_params(state.parameters(), lr=cfg.lr)
    return state


def evaluate_objective(state: TrainingState, Y, masks=None, rng=None) -> tuple[LossBreakdown, object]:
    cfg = state.config
    ctrl = compute_controller(state.eta, state.patch_sizes, cfg.controller)
    loss = total_objective(Y, state.S, state.mixer, state.branches, state.specs, ctrl, cfg.weights,
                           state.center_gap(), rng=state.rng if rng is None else rng,
                           masks=masks, mask_ratio=cfg.mask_ratio)
    return loss, ctrl


def _first_nonfinite(loss: LossBreakdown) -> str | None:
    for name in ("rec", "str", "sep", "smooth", "ent", "gap", "total"):
        if not math.isfinite(getattr(loss, name).item()):
            return name
    return None


def train_step(state: TrainingState, Y, references=None) -> tuple[TrainingState, DiagnosticsRecord]:
    """One iteration: forward all terms, single backward pass, clip, Adam update."""
    cfg = state.config
    it = state.iteration + 1
    params = state.parameters()
    for p in params:
        p.zero_grad()
    try:
        loss, ctrl = evaluate_objective(state, Y)
    except NonFiniteError as exc:
        raise TrainingAborted(f"iteration {it}: {exc}", it) from exc
    bad = _first_nonfinite(loss)
    if bad is not None:
        raise TrainingAborted(f"iteration {it}: loss term '{bad}' is not finite", it)
    loss.total.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if not all(np.isfinite(g).all() for g in grads):
        raise TrainingAborted(f"iteration {it}: non-finite gradient", it)
    if cfg.clip_norm is not None:
        grads, norm = nx.clip_by_global_norm(grads, cfg.clip_norm)
    else:
        norm = nx.global_norm(grads)
    nx.adam_step(params, grads, state.adam, lr=learning_rate(cfg, state.iteration))
    for p in params:
        p.zero_grad()
    state.iteration = it

    values = loss.values()
    record = DiagnosticsRecord(
        iteration=it,
        losses=values,
        branch_str=[b.item() for b in loss.structural.per_branch],
        expected_scale=ctrl.expected_scale.data.tolist(),
        centers=ctrl.centers.data.tolist(),
        alpha=ctrl.alpha.data.tolist(),
        grad_norm=norm,
    )
    if references is not None:
        attach_match(record, state.S.data, references)
    return state, record


def attach_match(record: DiagnosticsRecord, S_hat: np.ndarray, references) -> None:
    res = match_sources(S_hat, references)
    record.mac = res.mac
    record.matched_index = list(res.permutation)
    record.branch_corr = [float(res.corr[k, j]) for k, j in enumerate(res.permutation)]


def train(Y, cfg: TrainConfig | None = None, references=None, state: TrainingState | None = None,
          log_path: str | Path | None = None,
          callback: Callable[[DiagnosticsRecord], None] | None = None
          ) -> tuple[TrainingState, list[dict]]:
    """Run until ``cfg.max_iters`` total iterations; resumes from ``state`` if given.

    Records are logged every ``diagnostics_every`` iterations (starting with the
    first) and at the final iteration. With ``log_path`` each record is
    appended as it is produced, so a partial log survives an abort.
    """
    Y = np.asarray(Y, float)
    if state is None:
        state = init_state(Y, cfg or TrainConfig())
    cfg = state.config
    refs = None if references is None else np.asarray(references, float)
    history: list[dict] = []
    while state.iteration < cfg.max_iters:
        it = state.iteration + 1
        logged = (it - 1) % cfg.diagnostics_every == 0 or it == cfg.max_iters
        state, rec = train_step(state, Y, refs if logged else None)
        if not logged:
            continue
        row = rec.to_json()
        history.append(row)
        if log_path is not None:
            append_diagnostics(row, log_path)
        if callback is not None:
            callback(rec)
        log.debug("iter %d total %.6g rec %.4g str %.4g mac %s", it, rec.losses["total"],
                  rec.losses["rec"], rec.losses["str"], rec.mac)
    return state, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainingState, path) -> None:
    named = state.named_parameters()
    arrays = [(f"param/{n}", t.data) for n, t in named]
    arrays += [(f"adam_m/{n}", m) for (n, _), m in zip(named, state.adam.m)]
    arrays += [(f"adam_v/{n}", v) for (n, _), v in zip(named, state.adam.v)]
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "iteration": state.iteration,
        "patch_sizes": list(state.patch_sizes),
        "n_channels": state.mixer.n_channels,
        "length": state.S.shape[0],
        "config": state.config.to_dict(),
        "adam": {"t": state.adam.t, "lr": state.adam.lr, "beta1": state.adam.beta1,
                 "beta2": state.adam.beta2, "eps": state.adam.eps},
        "rng": state.rng.bit_generator.state,
    }
    write_checkpoint_blobs(path, arrays, meta)


def load_checkpoint(path) -> TrainingState:
    from .io import CheckpointFormatError

    arrays, meta = read_checkpoint_blobs(path)
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointFormatError(f"{path}: unsupported schema {meta.get('schema')}")
    cfg = TrainConfig.from_dict(meta["config"])
    cfg_for_init = dataclasses.replace(cfg, patch_sizes=tuple(meta["patch_sizes"]))
    skeleton = init_state(np.zeros((meta["length"], meta["n_channels"])), cfg_for_init)
    skeleton.config = cfg
    named = skeleton.named_parameters()
    try:
        for n, t in named:
            arr = arrays[f"param/{n}"]
            if arr.shape != t.shape:
                raise CheckpointFormatError(f"{path}: shape mismatch for {n}")
            t.data = arr
        skeleton.adam = AdamState(**meta["adam"])
        skeleton.adam.m = [arrays[f"adam_m/{n}"] for n, _ in named]
        skeleton.adam.v = [arrays[f"adam_v/{n}"] for n, _ in named]
    except KeyError as exc:
        raise CheckpointFormatError(f"{path}: missing blob {exc}") from None
    skeleton.iteration = int(meta["iteration"])
    skeleton.rng.bit_generator.state = meta["rng"]
    return skeleton
