"""RAMF assembly, the MF baseline, ablation variants and checkpoints.

Data flow for the full model (``variant="RAMF"``)::

    text, audio, video, obj_desc --LGCF--> [4, D] --SCA--> Y1 --mean--> [D]
    hate_inf, nonhate_inf --MLP, mean over time--> [D] each
    [Y1, hate, nonhate] --SCA--> Y2 --mean--> classifier {128, 64, 2}

MF drops the reasoning inputs and classifies the pooled first-layer output.
Each ablation tag removes or substitutes exactly one mechanism; see
``VARIANT_HELP``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .errors import CorruptPayload, MissingModality, UnknownVariant
from .feature_io import FeatureBundle, ModalitySpec, full_specs
from .lgcf import LGCF, LGCFConfig, lgcf_param_count
from .sca import (
    SCA,
    ConcatFusion,
    CrossAttentionFusion,
    MultiHeadSelfAttention,
    SCAConfig,
    concat_param_count,
    cross_attn_param_count,
    sca_param_count,
    std_attn_param_count,
)

CHECKPOINT_VERSION = 1
Y1 = "Y1"

VARIANT_HELP = {
    "RAMF": "full model: LGCF + two SCA layers with adversarial reasoning",
    "MF": "first layer only over text/audio/video, no reasoning inputs",
    "no_hier": "all six sources fused in a single SCA layer (N=6)",
    "no_objdesc": "objective description dropped from layer 1",
    "no_assumption": "hate/non-hate inferences dropped; classify on Y1",
    "objdesc_layer2": "objective description fused in layer 2 instead of layer 1",
    "mf_cot": "MF plus a single chain-of-thought text fused in layer 2",
    "no_chc": "no convolution over attention logits",
    "no_smc": "no head mixing after softmax",
    "concat_fusion": "SCA replaced by concatenation + MLP",
    "mta_style": "one 3x3 logit kernel per head instead of one shared kernel",
    "std_attn": "SCA replaced by vanilla multi-head self-attention",
    "cross_attn": "SCA replaced by per-source cross attention",
    "lstm_lgcf": "LGCF replaced by an LSTM with last-state readout",
    "no_gate": "LGCF gate replaced by a plain average of both channels",
    "no_gtc": "LGCF without the global (mean) channel",
    "no_ltc": "LGCF without the local (conv + max) channel",
    "no_mlp": "LGCF per-step MLP replaced by a single linear map",
}
VARIANTS = tuple(VARIANT_HELP)
BASES = ("RAMF", "MF")
# tags that restructure the reasoning inputs and only make sense on one base
_STRUCTURE_BASE = {
    "no_hier": "RAMF",
    "no_objdesc": "RAMF",
    "no_assumption": "RAMF",
    "objdesc_layer2": "RAMF",
    "mf_cot": "MF",
}
_LGCF_MODES = {"no_gate": "mean", "no_gtc": "local", "no_ltc": "global"}
# "w/o X" tags must strictly shrink the model; the rest are substitutions
REMOVAL_TAGS = ("no_hier", "no_objdesc", "no_assumption", "no_chc", "no_smc", "no_gate", "no_gtc", "no_ltc", "no_mlp")


@dataclass(frozen=True)
class Layout:
    lgcf_sources: tuple[str, ...]
    pooled_sources: tuple[str, ...]
    layer1: tuple[str, ...]
    layer2: tuple[str, ...] | None

    @property
    def required(self) -> tuple[str, ...]:
        return self.lgcf_sources + self.pooled_sources


@dataclass
class ModelConfig:
    """Everything needed to build a model; determines the parameter count exactly.

    ``base`` only matters for module-level ablation tags (e.g. ``no_chc`` on
    top of MF or RAMF); structural tags pin their own base.
    """

    input_dims: dict[str, int]
    variant: str = "RAMF"
    base: str = "RAMF"
    hidden_dims: dict[str, int] = field(default_factory=dict)
    default_hidden: int = 512
    unified_dim: int = 256
    conv_kernel: int = 3
    depthwise_conv: bool = True
    num_heads: int = 4
    causal: bool = True
    groupnorm: bool = True
    classifier_dims: tuple[int, ...] = (128, 64, 2)
    reasoning_mlp_dims: tuple[int, ...] = (512, 256)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UnknownVariant(f"unknown variant {self.variant!r}; known: {', '.join(VARIANTS)}")
        if self.base not in BASES:
            raise UnknownVariant(f"base must be RAMF or MF, got {self.base!r}")
        if self.variant in BASES:
            self.base = self.variant
        elif self.variant in _STRUCTURE_BASE:
            self.base = _STRUCTURE_BASE[self.variant]
        if self.classifier_dims[-1] != 2:
            raise ValueError("classifier must end in 2 logits")
        if self.reasoning_mlp_dims[-1] != self.unified_dim:
            raise ValueError("reasoning MLP must end at unified_dim")
        self.classifier_dims = tuple(self.classifier_dims)
        self.reasoning_mlp_dims = tuple(self.reasoning_mlp_dims)

    def hidden(self, source: str) -> int:
        return self.hidden_dims.get(source, self.default_hidden)

    @property
    def sca(self) -> SCAConfig:
        chc = {"no_chc": "none", "mta_style": "per_head"}.get(self.variant, "shared")
        return SCAConfig(
            model_dim=self.unified_dim,
            num_heads=self.num_heads,
            chc=chc,
            smc=self.variant != "no_smc",
            causal=self.causal,
            groupnorm=self.groupnorm,
        )

    def lgcf(self, source: str) -> LGCFConfig:
        return LGCFConfig(
            in_dim=self.input_dims[source],
            hidden_dim=self.hidden(source),
            unified_dim=self.unified_dim,
            conv_kernel=self.conv_kernel,
            depthwise=self.depthwise_conv,
            mode=_LGCF_MODES.get(self.variant, "gated"),
            encoder="linear" if self.variant == "no_mlp" else "mlp",
        )

    @property
    def layout(self) -> Layout:
        v = self.variant
        tav = ("text", "audio", "video")
        if v == "no_hier":
            return Layout(tav + ("obj_desc",), ("hate_inf", "nonhate_inf"),
                          tav + ("obj_desc", "hate_inf", "nonhate_inf"), None)
        if v == "no_objdesc":
            return Layout(tav, ("hate_inf", "nonhate_inf"), tav, (Y1, "hate_inf", "nonhate_inf"))
        if v == "no_assumption":
            return Layout(tav + ("obj_desc",), (), tav + ("obj_desc",), None)
        if v == "objdesc_layer2":
            pooled = ("obj_desc", "hate_inf", "nonhate_inf")
            return Layout(tav, pooled, tav, (Y1,) + pooled)
        if v == "mf_cot":
            return Layout(tav, ("cot",), tav, (Y1, "cot"))
        if self.base == "MF":
            return Layout(tav, (), tav, None)
        return Layout(tav + ("obj_desc",), ("hate_inf", "nonhate_inf"),
                      tav + ("obj_desc",), (Y1, "hate_inf", "nonhate_inf"))

    def with_variant(self, variant: str, base: str | None = None) -> "ModelConfig":
        return replace(self, variant=variant, base=base or self.base)

    def to_json(self) -> dict:
        d = asdict(self)
        d["classifier_dims"] = list(self.classifier_dims)
        d["reasoning_mlp_dims"] = list(self.reasoning_mlp_dims)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["classifier_dims"] = tuple(d["classifier_dims"])
        d["reasoning_mlp_dims"] = tuple(d["reasoning_mlp_dims"])
        return cls(**d)

    @classmethod
    def for_specs(cls, specs: list[ModalitySpec], **kw) -> "ModelConfig":
        return cls(input_dims={s.name: s.feat_dim for s in specs}, **kw)


def full_config(features: str = "T1", dataset: str = "hatemm", variant: str = "RAMF", **kw) -> ModelConfig:
    """Published widths: D=256, MLP {512/128, 256}, reasoning MLP {512, 256}."""
    specs = full_specs(features, dataset)
    hidden = {s.name: 128 for s in specs if s.encoder_tag == "mfcc"}
    dims = {s.name: s.feat_dim for s in specs}
    dims["cot"] = 768
    return ModelConfig(input_dims=dims, variant=variant, hidden_dims=hidden, **kw)


def desk_config(feat_dim: int = 32, width: int = 64, variant: str = "RAMF", num_heads: int = 4, **kw) -> ModelConfig:
    """Narrow model for laptop-scale runs on ``desk_specs`` data."""
    from .feature_io import MODALITY_TAGS

    return ModelConfig(
        input_dims={name: feat_dim for name in MODALITY_TAGS},
        variant=variant,
        default_hidden=width,
        unified_dim=width,
        num_heads=num_heads,
        reasoning_mlp_dims=(width, width),
        **kw,
    )


class LSTMEncoder(nn.Module):
    """Sequence -> last hidden state; stands in for LGCF in the ``lstm_lgcf`` ablation."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.lstm = nn.LSTM(in_dim, out_dim, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, (h, _) = self.lstm(x)
        return h[-1]


class PooledMLP(nn.Module):
    """Per-step MLP followed by a mean over time (reasoning-text path)."""

    def __init__(self, in_dim: int, dims: tuple[int, ...]):
        super().__init__()
        self.mlp = _mlp(in_dim, dims)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(x).mean(dim=-2)


def _mlp(in_dim: int, dims: tuple[int, ...]) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = in_dim
    for i, d in enumerate(dims):
        layers.append(nn.Linear(prev, d))
        if i < len(dims) - 1:
            layers.append(nn.ReLU())
        prev = d
    return nn.Sequential(*layers)


def _fusion_block(cfg: ModelConfig, n: int) -> nn.Module:
    if cfg.variant == "std_attn":
        return MultiHeadSelfAttention(cfg.sca)
    if cfg.variant == "cross_attn":
        return CrossAttentionFusion(cfg.sca, n)
    if cfg.variant == "concat_fusion":
        return ConcatFusion(cfg.sca, n)
    return SCA(cfg.sca)


class RAMFModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        lay = cfg.layout
        missing = [s for s in lay.required if s not in cfg.input_dims]
        if missing:
            raise MissingModality(f"variant {cfg.variant} needs input widths for {missing}")
        self.encoders = nn.ModuleDict()
        for s in lay.lgcf_sources:
            if cfg.variant == "lstm_lgcf":
                self.encoders[s] = LSTMEncoder(cfg.input_dims[s], cfg.unified_dim)
            else:
                self.encoders[s] = LGCF(cfg.lgcf(s))
        for s in lay.pooled_sources:
            self.encoders[s] = PooledMLP(cfg.input_dims[s], cfg.reasoning_mlp_dims)
        self.layer1 = _fusion_block(cfg, len(lay.layer1))
        self.layer2 = _fusion_block(cfg, len(lay.layer2)) if lay.layer2 else None
        self.classifier = _mlp(cfg.unified_dim, cfg.classifier_dims)

    @property
    def layout(self) -> Layout:
        return self.cfg.layout

    def encode(self, inputs: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        out = {}
        for s, enc in self.encoders.items():
            if s not in inputs:
                raise MissingModality(f"variant {self.cfg.variant} requires {s!r} features")
            out[s] = enc(inputs[s])
        return out

    def forward(self, inputs: Mapping[str, torch.Tensor]) -> tuple[torch.Tensor, dict]:
        """``inputs[name]`` is ``[B, L, D_name]``; returns ``([B, 2] logits, traces)``."""
        z = self.encode(inputs)
        lay = self.layout
        y1, trace1 = self.layer1(torch.stack([z[s] for s in lay.layer1], dim=1))
        traces = {"layer1": trace1}
        pooled = y1.mean(dim=1)
        if self.layer2 is not None:
            z[Y1] = pooled
            y2, trace2 = self.layer2(torch.stack([z[s] for s in lay.layer2], dim=1))
            traces["layer2"] = trace2
            pooled = y2.mean(dim=1)
        traces["pooled"] = pooled
        return self.classifier(pooled), traces


def build_model(cfg: ModelConfig, seed: int = 2021, dtype: torch.dtype = torch.float32) -> RAMFModel:
    """Deterministic initialisation from ``seed`` without touching global RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = RAMFModel(cfg)
    return model.to(dtype)


def make_variant(tag: str, base_config: ModelConfig | None = None, base: str | None = None, seed: int = 2021) -> RAMFModel:
    base_config = base_config or full_config()
    if tag not in VARIANTS:
        raise UnknownVariant(f"unknown variant {tag!r}; known: {', '.join(VARIANTS)}")
    return build_model(base_config.with_variant(tag, base), seed)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, independent of module traversal."""
    lay = cfg.layout
    D = cfg.unified_dim
    n = 0
    for s in lay.lgcf_sources:
        if cfg.variant == "lstm_lgcf":
            n += 4 * (cfg.input_dims[s] * D + D * D + 2 * D)
        else:
            n += lgcf_param_count(cfg.lgcf(s))
    for s in lay.pooled_sources:
        prev = cfg.input_dims[s]
        for d in cfg.reasoning_mlp_dims:
            n += prev * d + d
            prev = d
    for sources in (lay.layer1, lay.layer2):
        if not sources:
            continue
        if cfg.variant == "std_attn":
            n += std_attn_param_count(cfg.sca)
        elif cfg.variant == "cross_attn":
            n += cross_attn_param_count(cfg.sca, len(sources))
        elif cfg.variant == "concat_fusion":
            n += concat_param_count(cfg.sca, len(sources))
        else:
            n += sca_param_count(cfg.sca)
    prev = D
    for d in cfg.classifier_dims:
        n += prev * d + d
        prev = d
    return n


# -- prediction on single bundles --------------------------------------------


@dataclass
class Prediction:
    logits: np.ndarray
    prob_hate: float
    y_hat: int


def bundle_inputs(bundle: FeatureBundle, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    return {k: torch.as_tensor(v, dtype=dtype).unsqueeze(0) for k, v in bundle.features.items()}


def _predict(model: RAMFModel, bundle: FeatureBundle) -> tuple[Prediction, dict]:
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        logits, traces = model(bundle_inputs(bundle, dtype))
    logits = logits[0]
    pred = Prediction(
        logits=logits.cpu().numpy(),
        prob_hate=float(torch.softmax(logits, dim=-1)[1]),
        y_hat=int(torch.argmax(logits)),
    )
    return pred, traces


def forward_ramf(bundle: FeatureBundle, model: RAMFModel) -> tuple[Prediction, dict]:
    if model.cfg.base != "RAMF":
        raise UnknownVariant(f"{model.cfg.variant} is not a RAMF-family model")
    return _predict(model, bundle)


def forward_mf(bundle: FeatureBundle, model: RAMFModel) -> tuple[Prediction, dict]:
    if model.cfg.base != "MF":
        raise UnknownVariant(f"{model.cfg.variant} is not an MF-family model")
    return _predict(model, bundle)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: RAMFModel, directory: str | os.PathLike, extra: Mapping | None = None) -> Path:
    """Write ``checkpoint.json`` (config + tensor index) and ``weights.bin`` (LE float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size * 4
    (directory / "weights.bin").write_bytes(b"".join(chunks))
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_json(),
        "payload": "weights.bin",
        "payload_bytes": offset,
        "tensors": index,
        "extra": dict(extra or {}),
    }
    path = directory / "checkpoint.json"
    path.write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return path


def load_checkpoint(directory: str | os.PathLike) -> RAMFModel:
    directory = Path(directory)
    meta = json.loads((directory / "checkpoint.json").read_text(encoding="utf-8"))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CorruptPayload(f"unsupported checkpoint format_version {meta.get('format_version')}")
    payload = (directory / meta["payload"]).read_bytes()
    if len(payload) != meta["payload_bytes"]:
        raise CorruptPayload(f"weights.bin has {len(payload)} bytes, index says {meta['payload_bytes']}")
    model = build_model(ModelConfig.from_json(meta["config"]))
    state = {}
    for t in meta["tensors"]:
        arr = np.frombuffer(payload, dtype="<f4", count=t["count"], offset=t["offset"])
        state[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).copy())
    model.load_state_dict(state)
    return model
