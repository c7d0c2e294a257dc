"""Semantic cross attention over a short stack of modality vectors.

Multi-head attention whose pre-softmax logit maps (``[H, N, N]``, heads as
channels) pass through one 3x3 convolution shared by every head, and whose
post-softmax maps are mixed pairwise across (even, odd) heads by learnable
2x2 matrices. Output is group-normalised after the output projection.

Also home to the fusion blocks used by the attention ablations: vanilla
multi-head attention, per-target cross attention and concatenation + MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import IndexOutOfRange, NonFiniteLogit, OddHeadCount, ShapeMismatch

MASK_VALUE = -1e9
CHC_MODES = ("shared", "per_head", "none")


@dataclass(frozen=True)
class SCAConfig:
    model_dim: int = 256
    num_heads: int = 4
    # "shared": one 3x3 kernel for all heads; "per_head": one kernel per head
    chc: str = "shared"
    smc: bool = True
    causal: bool = True
    groupnorm: bool = True
    groupnorm_groups: int | None = None
    chc_kernel: int = 3
    init_noise: float = 0.01

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.smc and self.num_heads % 2:
            raise OddHeadCount(f"head mixing pairs even/odd heads; got H={self.num_heads}")
        if self.chc not in CHC_MODES:
            raise ValueError(f"chc must be one of {CHC_MODES}")
        if self.chc_kernel % 2 != 1:
            raise ValueError("chc_kernel must be odd")
        if self.groupnorm_groups is None:
            object.__setattr__(self, "groupnorm_groups", self.num_heads)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class AttentionTrace:
    """Attention maps from one forward pass, ``[..., H, N, N]`` (detached)."""

    A: torch.Tensor
    A_mixed: torch.Tensor
    causal: bool

    @property
    def num_sources(self) -> int:
        return self.A.shape[-1]

    def contribution(self) -> torch.Tensor:
        """Mean mass each key position receives, ``[..., N]``."""
        return torch.stack([_contribution(self, j) for j in range(self.num_sources)], dim=-1)

    def to_json(self) -> dict:
        # head-major, row-major nesting straight from the tensor layout
        return {
            "causal": self.causal,
            "A": self.A.tolist(),
            "A_mixed": self.A_mixed.tolist(),
        }


def causal_mask(n: int, device=None) -> torch.Tensor:
    """Boolean ``[n, n]``; True where key index exceeds query index."""
    return torch.ones(n, n, dtype=torch.bool, device=device).triu(1)


def chc_apply(logits: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Same-size 2-D convolution of each head's ``[N, N]`` logit map.

    ``kernel`` is ``[k, k]`` (shared by all heads) or ``[H, k, k]`` (one per
    head); ``bias`` is a scalar-like ``[1]`` or ``[H]``. Zero padding.
    """
    if logits.dim() < 3 or logits.shape[-1] != logits.shape[-2]:
        raise ShapeMismatch(f"expected [..., H, N, N] logits, got {tuple(logits.shape)}")
    H, N = logits.shape[-3], logits.shape[-1]
    k = kernel.shape[-1]
    if kernel.shape[-2] != k or kernel.dim() not in (2, 3):
        raise ShapeMismatch(f"kernel must be [k, k] or [H, k, k], got {tuple(kernel.shape)}")
    lead = logits.shape[:-3]
    weight = kernel.expand(H, k, k).unsqueeze(1)
    out = F.conv2d(logits.reshape(-1, H, N, N), weight, bias.expand(H), padding=(k - 1) // 2, groups=H)
    return out.reshape(*lead, H, N, N)


def smc_mix(A: torch.Tensor, mixers: torch.Tensor) -> torch.Tensor:
    """Mix head pairs: ``(A'[2i], A'[2i+1]) = M_i @ (A[2i], A[2i+1])`` entrywise."""
    H = A.shape[-3]
    if H % 2:
        raise OddHeadCount(f"head mixing needs an even head count, got {H}")
    if tuple(mixers.shape) != (H // 2, 2, 2):
        raise ShapeMismatch(f"expected mixers [{H // 2}, 2, 2], got {tuple(mixers.shape)}")
    N = A.shape[-1]
    pairs = A.reshape(*A.shape[:-3], H // 2, 2, N, N)
    mixed = torch.einsum("pij,...pjnm->...pinm", mixers, pairs)
    return mixed.reshape(A.shape)


def _contribution(trace: AttentionTrace, j: int) -> torch.Tensor:
    col = trace.A_mixed[..., j]  # [..., H, N(query)]
    if trace.causal:
        col = col[..., j:]  # only queries i >= j may see key j
    return col.mean(dim=(-1, -2))


def extract_contribution(trace: AttentionTrace, source_index: int):
    """Mean attention (after head mixing) paid to one source position.

    Averages over heads and over the query positions allowed to see the
    source. Returns a float for an unbatched trace, else an array over the
    leading batch dimensions.
    """
    if not 0 <= source_index < trace.num_sources:
        raise IndexOutOfRange(f"source_index {source_index} outside [0, {trace.num_sources})")
    out = _contribution(trace, source_index).detach().cpu().numpy()
    return float(out) if out.ndim == 0 else out


def _split_heads(x: torch.Tensor, H: int) -> torch.Tensor:
    B, N, D = x.shape
    return x.reshape(B, N, H, D // H).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    B, H, N, dh = x.shape
    return x.transpose(1, 2).reshape(B, N, H * dh)


class _NormMixin:
    def _norm(self, y: torch.Tensor) -> torch.Tensor:
        if self.gn is None:
            return y
        B, N, D = y.shape
        # per-token normalisation over channel groups
        return self.gn(y.reshape(B * N, D)).reshape(B, N, D)


class SCA(_NormMixin, nn.Module):
    def __init__(self, cfg: SCAConfig = SCAConfig()):
        super().__init__()
        self.cfg = cfg
        D, H, k = cfg.model_dim, cfg.num_heads, cfg.chc_kernel
        self.q_proj = nn.Linear(D, D, bias=False)
        self.k_proj = nn.Linear(D, D, bias=False)
        self.v_proj = nn.Linear(D, D, bias=False)
        self.out_proj = nn.Linear(D, D)
        self.chc_kernel = self.chc_bias = None
        if cfg.chc != "none":
            n_kernels = 1 if cfg.chc == "shared" else H
            delta = torch.zeros(n_kernels, k, k)
            delta[:, k // 2, k // 2] = 1.0
            kernel = delta + cfg.init_noise * torch.randn(n_kernels, k, k)
            self.chc_kernel = nn.Parameter(kernel[0] if cfg.chc == "shared" else kernel)
            self.chc_bias = nn.Parameter(torch.zeros(n_kernels))
        self.smc_mixers = None
        if cfg.smc:
            eye = torch.eye(2).expand(H // 2, 2, 2)
            self.smc_mixers = nn.Parameter(eye + cfg.init_noise * torch.randn(H // 2, 2, 2))
        self.gn = nn.GroupNorm(cfg.groupnorm_groups, D) if cfg.groupnorm else None

    def attention_logits(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.cfg.head_dim)
        if self.chc_kernel is not None:
            logits = chc_apply(logits, self.chc_kernel, self.chc_bias)
        return logits

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, AttentionTrace]:
        if z.dim() != 3 or z.shape[-1] != self.cfg.model_dim:
            raise ShapeMismatch(f"expected [B, N, {self.cfg.model_dim}], got {tuple(z.shape)}")
        H = self.cfg.num_heads
        q = _split_heads(self.q_proj(z), H)
        k = _split_heads(self.k_proj(z), H)
        v = _split_heads(self.v_proj(z), H)
        logits = self.attention_logits(q, k)
        if not torch.isfinite(logits).all():
            raise NonFiniteLogit("attention logits overflowed before softmax")
        A = _masked_softmax(logits, self.cfg.causal)
        A_mixed = smc_mix(A, self.smc_mixers) if self.smc_mixers is not None else A
        y = self.out_proj(_merge_heads(A_mixed @ v))
        trace = AttentionTrace(A.detach(), A_mixed.detach(), self.cfg.causal)
        return self._norm(y), trace

    def attention_flops(self, n: int) -> int:
        """Multiply-adds (x2) of the score, convolution and value products for one sample."""
        H, dh = self.cfg.num_heads, self.cfg.head_dim
        flops = 2 * 2 * H * n * n * dh
        if self.chc_kernel is not None:
            flops += 2 * H * n * n * self.cfg.chc_kernel ** 2
        if self.smc_mixers is not None:
            flops += 2 * H * n * n * 2
        return flops


def _masked_softmax(logits: torch.Tensor, causal: bool) -> torch.Tensor:
    if not causal:
        return torch.softmax(logits, dim=-1)
    mask = causal_mask(logits.shape[-1], logits.device)
    A = torch.softmax(logits.masked_fill(mask, MASK_VALUE), dim=-1)
    return A.masked_fill(mask, 0.0)


class MultiHeadSelfAttention(_NormMixin, nn.Module):
    """Vanilla multi-head self-attention (biased Q/K/V), followed by the same group norm."""

    def __init__(self, cfg: SCAConfig = SCAConfig()):
        super().__init__()
        self.cfg = cfg
        D = cfg.model_dim
        self.q_proj = nn.Linear(D, D)
        self.k_proj = nn.Linear(D, D)
        self.v_proj = nn.Linear(D, D)
        self.out_proj = nn.Linear(D, D)
        self.gn = nn.GroupNorm(cfg.groupnorm_groups, D) if cfg.groupnorm else None

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, AttentionTrace]:
        H = self.cfg.num_heads
        q = _split_heads(self.q_proj(z), H)
        k = _split_heads(self.k_proj(z), H)
        v = _split_heads(self.v_proj(z), H)
        A = _masked_softmax(q @ k.transpose(-1, -2) / math.sqrt(self.cfg.head_dim), self.cfg.causal)
        y = self.out_proj(_merge_heads(A @ v))
        return self._norm(y), AttentionTrace(A.detach(), A.detach(), self.cfg.causal)

    def attention_flops(self, n: int) -> int:
        return 2 * 2 * self.cfg.num_heads * n * n * self.cfg.head_dim


class CrossAttentionFusion(_NormMixin, nn.Module):
    """Each source attends to all *other* sources through its own attention block.

    ``y_i = GN(z_i + MHA_i(query=z_i, keys/values=z_{-i}))``. Needs N >= 2.
    """

    def __init__(self, cfg: SCAConfig, num_sources: int):
        super().__init__()
        if num_sources < 2:
            raise ShapeMismatch("cross attention needs at least two sources")
        self.cfg = cfg
        self.num_sources = num_sources
        D = cfg.model_dim
        self.blocks = nn.ModuleList(
            nn.MultiheadAttention(D, cfg.num_heads, batch_first=True) for _ in range(num_sources)
        )
        self.gn = nn.GroupNorm(cfg.groupnorm_groups, D) if cfg.groupnorm else None

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, None]:
        if z.shape[1] != self.num_sources:
            raise ShapeMismatch(f"expected {self.num_sources} sources, got {z.shape[1]}")
        outs = []
        for i, block in enumerate(self.blocks):
            others = torch.cat([z[:, :i], z[:, i + 1:]], dim=1)
            att, _ = block(z[:, i:i + 1], others, others, need_weights=False)
            outs.append(z[:, i:i + 1] + att)
        return self._norm(torch.cat(outs, dim=1)), None

    def attention_flops(self, n: int) -> int:
        return n * 2 * 2 * self.cfg.num_heads * (n - 1) * self.cfg.head_dim


class ConcatFusion(nn.Module):
    """Flatten the stacked sources and fuse with a two-layer MLP into one ``[1, D]`` row."""

    def __init__(self, cfg: SCAConfig, num_sources: int):
        super().__init__()
        self.cfg = cfg
        self.num_sources = num_sources
        D = cfg.model_dim
        self.mlp = nn.Sequential(nn.Linear(num_sources * D, D), nn.ReLU(), nn.Linear(D, D))

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, None]:
        if z.shape[1] != self.num_sources:
            raise ShapeMismatch(f"expected {self.num_sources} sources, got {z.shape[1]}")
        return self.mlp(z.flatten(1)).unsqueeze(1), None

    def attention_flops(self, n: int) -> int:
        return 0


# -- closed-form parameter counts -------------------------------------------


def sca_param_count(cfg: SCAConfig) -> int:
    D, H = cfg.model_dim, cfg.num_heads
    n = 3 * H * D * cfg.head_dim + D * D + D
    if cfg.chc == "shared":
        n += cfg.chc_kernel ** 2 + 1
    elif cfg.chc == "per_head":
        n += H * (cfg.chc_kernel ** 2 + 1)
    if cfg.smc:
        n += (H // 2) * 4
    if cfg.groupnorm:
        n += 2 * D
    return n


def std_attn_param_count(cfg: SCAConfig) -> int:
    D = cfg.model_dim
    return 4 * D * D + 4 * D + (2 * D if cfg.groupnorm else 0)


def cross_attn_param_count(cfg: SCAConfig, num_sources: int) -> int:
    D = cfg.model_dim
    return num_sources * (4 * D * D + 4 * D) + (2 * D if cfg.groupnorm else 0)


def concat_param_count(cfg: SCAConfig, num_sources: int) -> int:
    D = cfg.model_dim
    return num_sources * D * D + D + D * D + D

