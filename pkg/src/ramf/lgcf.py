"""Local-global context fusion: compress a ``[L, D_in]`` sequence to one ``[D]`` vector.

A per-step MLP lifts features to the unified width; a convolutional local
channel (conv over time, then max over time) and a global channel (mean over
time) are blended by a learned sigmoid gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch

FUSION_MODES = ("gated", "mean", "local", "global")


@dataclass(frozen=True)
class LGCFConfig:
    in_dim: int
    hidden_dim: int = 512
    unified_dim: int = 256
    conv_kernel: int = 3
    conv_padding: int | None = None
    depthwise: bool = True
    # "gated" is the full module; the others are ablations:
    # mean of both channels, local channel only, global channel only
    mode: str = "gated"
    # "mlp" = two affine layers with ReLU; "linear" = one affine map
    encoder: str = "mlp"

    def __post_init__(self):
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")
        if self.conv_padding is None:
            object.__setattr__(self, "conv_padding", (self.conv_kernel - 1) // 2)
        if self.conv_padding != (self.conv_kernel - 1) // 2:
            raise ValueError("conv_padding must be (conv_kernel - 1) / 2 to preserve length")
        if self.mode not in FUSION_MODES:
            raise ValueError(f"mode must be one of {FUSION_MODES}")
        if self.encoder not in ("mlp", "linear"):
            raise ValueError("encoder must be 'mlp' or 'linear'")

    @property
    def uses_conv(self) -> bool:
        return self.mode != "global"

    @property
    def uses_gate(self) -> bool:
        return self.mode == "gated"


def lgcf_project(x: torch.Tensor, mlp: nn.Module) -> torch.Tensor:
    """Apply the per-step projection; ``x`` is ``[..., L, D_in]``."""
    return mlp(x)


def lgcf_local(h: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None, groups: int = 1) -> torch.Tensor:
    """Conv over the time axis of ``h`` (``[..., L, D]``), then max over time -> ``[..., D]``."""
    lead = h.shape[:-2]
    L, D = h.shape[-2:]
    if L < 1:
        raise ShapeMismatch("sequence must have at least one step")
    k = weight.shape[-1]
    y = F.conv1d(h.reshape(-1, L, D).transpose(1, 2), weight, bias, padding=(k - 1) // 2, groups=groups)
    return y.amax(dim=-1).reshape(*lead, -1)


def lgcf_global(h: torch.Tensor) -> torch.Tensor:
    """Mean over the time axis of ``[..., L, D]``."""
    if h.shape[-2] < 1:
        raise ShapeMismatch("sequence must have at least one step")
    return h.mean(dim=-2)


def lgcf_fuse(v_local: torch.Tensor, v_global: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """``g * v_local + (1 - g) * v_global`` with ``g = sigmoid(W [v_local, v_global] + b)``."""
    if v_local.shape != v_global.shape:
        raise ShapeMismatch(f"local {tuple(v_local.shape)} vs global {tuple(v_global.shape)}")
    g = torch.sigmoid(F.linear(torch.cat([v_local, v_global], dim=-1), weight, bias))
    return g * v_local + (1 - g) * v_global


class LGCF(nn.Module):
    def __init__(self, cfg: LGCFConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.unified_dim
        if cfg.encoder == "mlp":
            self.mlp = nn.Sequential(nn.Linear(cfg.in_dim, cfg.hidden_dim), nn.ReLU(), nn.Linear(cfg.hidden_dim, D))
        else:
            self.mlp = nn.Linear(cfg.in_dim, D)
        self.conv = None
        if cfg.uses_conv:
            self.conv = nn.Conv1d(D, D, cfg.conv_kernel, padding=cfg.conv_padding, groups=D if cfg.depthwise else 1)
        self.gate = nn.Linear(2 * D, D) if cfg.uses_gate else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.cfg.in_dim:
            raise ShapeMismatch(f"expected feature width {self.cfg.in_dim}, got {x.shape[-1]}")
        h = lgcf_project(x, self.mlp)
        mode = self.cfg.mode
        if mode == "global":
            return lgcf_global(h)
        v_local = lgcf_local(h, self.conv.weight, self.conv.bias, self.conv.groups)
        if mode == "local":
            return v_local
        v_global = lgcf_global(h)
        if mode == "mean":
            return 0.5 * (v_local + v_global)
        return lgcf_fuse(v_local, v_global, self.gate.weight, self.gate.bias)


def lgcf_param_count(cfg: LGCFConfig) -> int:
    D = cfg.unified_dim
    if cfg.encoder == "mlp":
        n = cfg.in_dim * cfg.hidden_dim + cfg.hidden_dim + cfg.hidden_dim * D + D
    else:
        n = cfg.in_dim * D + D
    if cfg.uses_conv:
        n += (cfg.conv_kernel if cfg.depthwise else cfg.conv_kernel * D) * D + D
    if cfg.uses_gate:
        n += 2 * D * D + D
    return n
