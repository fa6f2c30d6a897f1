"""Per-source, per-scale locality-biased Transformer branches.

Each branch embeds the overlapping patches of one source trajectory, swaps a
random subset of tokens for a learned mask token, runs a small pre-norm
encoder whose attention logits are penalised by ``alpha * |i - j|``, and
scores the trajectory by how well the masked patches are reconstructed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .patching import MaskSet, PatchSpec, extract_patches, sample_mask


@dataclass
class ArchConfig:
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64

    def validate(self) -> None:
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 0 or self.d_ff < 1:
            raise ValueError("architecture sizes must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


BLOCK_FIELDS = ("ln1_g", "ln1_b", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
                "ln2_g", "ln2_b", "w_1", "b_1", "w_2", "b_2")


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f) for f in BLOCK_FIELDS]


@dataclass
class BranchParams:
    patch_size: int
    n_heads: int
    w_in: Tensor
    b_in: Tensor
    mask_token: Tensor
    blocks: list[BlockParams]
    w_out: Tensor
    b_out: Tensor

    @property
    def d_model(self) -> int:
        return self.w_in.shape[1]

    def tensors(self) -> list[Tensor]:
        out = [self.w_in, self.b_in, self.mask_token]
        for b in self.blocks:
            out.extend(b.tensors())
        out.extend([self.w_out, self.b_out])
        return out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        named = [("w_in", self.w_in), ("b_in", self.b_in), ("mask_token", self.mask_token)]
        for i, b in enumerate(self.blocks):
            named.extend((f"block{i}.{f}", getattr(b, f)) for f in BLOCK_FIELDS)
        named.extend([("w_out", self.w_out), ("b_out", self.b_out)])
        return named


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def _const(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, value, dtype=float), requires_grad=True)


def init_branch(patch_size: int, arch: ArchConfig, rng: np.random.Generator) -> BranchParams:
    arch.validate()
    d, f = arch.d_model, arch.d_ff
    blocks = []
    for _ in range(arch.n_layers):
        blocks.append(BlockParams(
            ln1_g=_const(d, 1.0), ln1_b=_const(d, 0.0),
            w_q=_xavier(rng, d, d), b_q=_const(d, 0.0),
            w_k=_xavier(rng, d, d), b_k=_const(d, 0.0),
            w_v=_xavier(rng, d, d), b_v=_const(d, 0.0),
            w_o=_xavier(rng, d, d), b_o=_const(d, 0.0),
            ln2_g=_const(d, 1.0), ln2_b=_const(d, 0.0),
            w_1=_xavier(rng, d, f), b_1=_const(f, 0.0),
            w_2=_xavier(rng, f, d), b_2=_const(d, 0.0),
        ))
    return BranchParams(
        patch_size=patch_size,
        n_heads=arch.n_heads,
        w_in=_xavier(rng, patch_size, d),
        b_in=_const(d, 0.0),
        mask_token=Tensor(rng.normal(0.0, 0.02, size=d), requires_grad=True),
        blocks=blocks,
        w_out=_xavier(rng, d, patch_size),
        b_out=_const(patch_size, 0.0),
    )


@lru_cache(maxsize=64)
def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)
    return pe


@lru_cache(maxsize=64)
def distance_matrix(n: int) -> np.ndarray:
    idx = np.arange(n)
    dist = np.abs(idx[:, None] - idx[None, :]).astype(float)
    dist.setflags(write=False)
    return dist


@dataclass
class TokenSequence:
    tokens: Tensor            # N x d_model
    mask: MaskSet | None = None


def embed_patches(patches, params: BranchParams, mask: MaskSet | None,
                  positions: np.ndarray | None = None) -> TokenSequence:
    u = patches.patches if hasattr(patches, "patches") else nx.tensor(patches)
    n, p = u.shape
    if p != params.w_in.shape[0]:
        raise nx.ShapeError(f"patch width {p} != embedding input width {params.w_in.shape[0]}")
    pe = sinusoidal_positions(n, params.d_model) if positions is None else positions
    content = nx.add(nx.matmul(u, params.w_in), params.b_in)
    if mask is not None and len(mask):
        idx = mask.as_array()
        if idx.min() < 0 or idx.max() >= n:
            raise IndexError(f"mask index out of range for {n} patches")
        keep = np.ones((n, 1))
        keep[idx] = 0.0
        # masked rows: content * 0 + mask_token * 1
        content = nx.add(nx.mul(content, keep),
                         nx.mul(nx.reshape(params.mask_token, (1, -1)), 1.0 - keep))
    return TokenSequence(nx.add(content, pe), mask)


def attention_weights(q: Tensor, k: Tensor, alpha, d_head: int,
                      validity_bias: np.ndarray | None = None) -> Tensor:
    """Row-stochastic attention for (..., N, d_head) queries and keys."""
    n = q.shape[-2]
    alpha = nx.tensor(alpha)
    if alpha.data.size != 1 or float(alpha.data.reshape(())) < 0:
        raise ValueError("locality slope must be a nonnegative scalar")
    logits = nx.matmul(q, nx.swapaxes(k, -1, -2))
    return nx.biased_softmax(logits, alpha, distance_matrix(n), scale=1.0 / np.sqrt(d_head),
                             bias=validity_bias)


def locality_attention(x: Tensor, block: BlockParams, alpha, n_heads: int,
                       validity_bias: np.ndarray | None = None,
                       return_weights: bool = False):
    n, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (n, n_heads, dh)), (1, 0, 2))

    q = heads(nx.add(nx.matmul(x, block.w_q), block.b_q))
    k = heads(nx.add(nx.matmul(x, block.w_k), block.b_k))
    v = heads(nx.add(nx.matmul(x, block.w_v), block.b_v))
    attn = attention_weights(q, k, alpha, dh, validity_bias)
    ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (1, 0, 2)), (n, d))
    out = nx.add(nx.matmul(ctx, block.w_o), block.b_o)
    return (out, attn) if return_weights else out


def encode(tokens: TokenSequence | Tensor, alpha, params: BranchParams,
           validity_bias: np.ndarray | None = None) -> TokenSequence:
    x = tokens.tokens if isinstance(tokens, TokenSequence) else tokens
    for blk in params.blocks:
        h = nx.layer_norm(x, blk.ln1_g, blk.ln1_b)
        x = nx.add(x, locality_attention(h, blk, alpha, params.n_heads, validity_bias))
        h = nx.layer_norm(x, blk.ln2_g, blk.ln2_b)
        h = nx.add(nx.matmul(nx.gelu(nx.add(nx.matmul(h, blk.w_1), blk.b_1)), blk.w_2), blk.b_2)
        x = nx.add(x, h)
    mask = tokens.mask if isinstance(tokens, TokenSequence) else None
    return TokenSequence(x, mask)


def masked_patch_energy(s_k, params: BranchParams, spec: PatchSpec, alpha,
                        rng: np.random.Generator | None = None, mask: MaskSet | None = None,
                        mask_ratio: float = 0.3) -> Tensor:
    """Mean squared reconstruction error over the masked patches of one trajectory."""
    patches = extract_patches(s_k, spec)
    if mask is None:
        if rng is None:
            raise ValueError("need either a mask or an rng to sample one")
        mask = sample_mask(patches.num_patches, mask_ratio, rng)
    tokens = embed_patches(patches, params, mask)
    hidden = encode(tokens, alpha, params)
    idx = mask.as_array()
    h_masked = nx.getitem(hidden.tokens, idx)
    pred = nx.add(nx.matmul(h_masked, params.w_out), params.b_out)
    target = nx.getitem(patches.patches, idx)
    resid = nx.sub(pred, target)
    return nx.mul(nx.tsum(nx.square(resid)), 1.0 / (len(idx) * spec.patch_size))


@dataclass
class StructuralResult:
    total: Tensor                       # L_str
    per_branch: list[Tensor]            # L_str^(k) = sum_r pi_kr l_kr
    energies: dict[tuple[int, int], Tensor] = field(default_factory=dict)
    masks: dict[tuple[int, int], MaskSet] = field(default_factory=dict)


def structural_loss(S: Tensor, weights: Tensor, alpha: Tensor,
                    branches: Mapping[tuple[int, int], BranchParams],
                    specs: list[PatchSpec], rng: np.random.Generator | None = None,
                    masks: Mapping[tuple[int, int], MaskSet] | None = None,
                    mask_ratio: float = 0.3) -> StructuralResult:
    """Weighted multi-scale masked-patch energy averaged over source branches.

    Masks are drawn per (source, scale) pair in row-major order unless given.
    Sums use correctly rounded accumulation so permuting branches is exact.
    """
    n_src = S.shape[1]
    per_branch, energies, used = [], {}, {}
    for k in range(n_src):
        s_k = S[:, k]
        a_k = alpha[k]
        terms = []
        for r, spec in enumerate(specs):
            mask = None if masks is None else masks.get((k, r))
            if mask is None:
                n_r = spec.num_patches(S.shape[0])
                mask = sample_mask(n_r, mask_ratio, rng)
            e = masked_patch_energy(s_k, branches[(k, r)], spec, a_k, mask=mask)
            energies[(k, r)] = e
            used[(k, r)] = mask
            terms.append(nx.mul(weights[k, r], e))
        per_branch.append(nx.fsum(terms))
    total = nx.mul(nx.fsum(per_branch), 1.0 / n_src)
    return StructuralResult(total, per_branch, energies, used)
