"""On-disk feature bundles, manifests, length fitting and synthetic data.

Bundle file layout (all little-endian)::

    b"RAMFFEAT"                      8-byte magic
    u32 version
    repeated per modality:
        u32 name_tag  u32 seq_len  u32 feat_dim
        seq_len * feat_dim float32, row-major
    u8 label

The modality blocks carry no count; a reader consumes blocks until exactly
one byte (the label) remains.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CorruptPayload,
    InvalidTarget,
    MissingModality,
    MissingRecord,
    NonFiniteValue,
    ShapeMismatch,
    TooFewSamples,
)

MAGIC = b"RAMFFEAT"
BUNDLE_VERSION = 1
MANIFEST_VERSION = 1

# Stable on-disk name tags; append only.
MODALITY_TAGS = {
    "text": 0,
    "audio": 1,
    "video": 2,
    "obj_desc": 3,
    "hate_inf": 4,
    "nonhate_inf": 5,
    "cot": 6,
}
TAG_NAMES = {v: k for k, v in MODALITY_TAGS.items()}

SIGNAL_MODALITIES = ("text", "audio", "video")
REASONING_MODALITIES = ("obj_desc", "hate_inf", "nonhate_inf")

_HEADER = struct.Struct("<8sI")
_BLOCK = struct.Struct("<III")
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    seq_len: int
    feat_dim: int
    encoder_tag: str = ""

    def __post_init__(self):
        if self.name not in MODALITY_TAGS:
            raise ValueError(f"unknown modality {self.name!r}")
        if self.seq_len <= 0 or self.feat_dim <= 0:
            raise ValueError(f"{self.name}: seq_len and feat_dim must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.seq_len, self.feat_dim)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "seq_len": self.seq_len,
            "feat_dim": self.feat_dim,
            "encoder_tag": self.encoder_tag,
        }


def full_specs(features: str = "T1", dataset: str = "hatemm") -> list[ModalitySpec]:
    """Modality specs matching the published encoder settings.

    ``features`` selects the encoder trio: ``"T1"`` is BERT/MFCC/ViT and
    ``"T2"`` is HXP/CLAP/CLIP. ``dataset="mhc"`` samples 32 video frames
    instead of 100 (ViViT replaces ViT for T1).
    """
    video_len = 32 if dataset == "mhc" else 100
    if features == "T1":
        trio = [
            ModalitySpec("text", 100, 768, "mbert" if dataset == "mhc" else "bert"),
            ModalitySpec("audio", 100, 40, "mfcc"),
            ModalitySpec("video", video_len, 768, "vivit" if dataset == "mhc" else "vit"),
        ]
    elif features == "T2":
        trio = [
            ModalitySpec("text", 100, 768, "hxp"),
            ModalitySpec("audio", 100, 512, "clap"),
            ModalitySpec("video", video_len, 512, "clip"),
        ]
    else:
        raise ValueError(f"features must be 'T1' or 'T2', got {features!r}")
    text_tag = trio[0].encoder_tag
    return trio + [ModalitySpec(name, 100, 768, text_tag) for name in REASONING_MODALITIES]


def desk_specs(seq_len: int = 100, feat_dim: int = 32, with_cot: bool = False) -> list[ModalitySpec]:
    """Small, uniform-width specs for laptop-scale experiments."""
    names = list(SIGNAL_MODALITIES + REASONING_MODALITIES)
    if with_cot:
        names.append("cot")
    return [ModalitySpec(name, seq_len, feat_dim, "synthetic") for name in names]


@dataclass
class FeatureBundle:
    video_id: str
    features: dict[str, np.ndarray]
    label: int
    mask: dict[str, np.ndarray] | None = None

    def validate(self, specs: Iterable[ModalitySpec]) -> "FeatureBundle":
        if self.label not in (0, 1):
            raise ValueError(f"{self.video_id}: label must be 0 or 1, got {self.label}")
        for spec in specs:
            if spec.name not in self.features:
                raise MissingModality(f"{self.video_id}: modality {spec.name!r} absent")
            arr = self.features[spec.name]
            if tuple(arr.shape) != spec.shape:
                raise ShapeMismatch(
                    f"{self.video_id}: {spec.name!r} expected {list(spec.shape)}, "
                    f"found {list(arr.shape)}"
                )
            if not np.all(np.isfinite(arr)):
                raise NonFiniteValue(f"{self.video_id}: {spec.name!r} contains NaN/Inf")
        return self

    def __eq__(self, other):
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        if (self.video_id, self.label) != (other.video_id, other.label):
            return False
        if self.features.keys() != other.features.keys():
            return False
        for k, v in self.features.items():
            w = other.features[k]
            if v.dtype != w.dtype or v.shape != w.shape or v.tobytes() != w.tobytes():
                return False
        mine, theirs = self.mask or {}, other.mask or {}
        if mine.keys() != theirs.keys():
            return False
        return all(np.array_equal(mine[k], theirs[k]) for k in mine)


@dataclass
class Record:
    video_id: str
    path: str
    label: int
    valid_lengths: dict[str, int] | None = None

    def to_json(self) -> dict:
        out = {"video_id": self.video_id, "path": self.path, "label": self.label}
        if self.valid_lengths:
            out["valid_lengths"] = dict(self.valid_lengths)
        return out


@dataclass
class DatasetManifest:
    dataset_name: str
    modality_specs: list[ModalitySpec]
    records: list[Record]
    format_version: int = MANIFEST_VERSION
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.video_id in seen:
                raise ValueError(f"duplicate video_id {r.video_id!r}")
            seen.add(r.video_id)
        self._index = {r.video_id: r for r in self.records}

    @property
    def ids(self) -> list[str]:
        return [r.video_id for r in self.records]

    @property
    def labels(self) -> list[int]:
        return [r.label for r in self.records]

    def spec(self, name: str) -> ModalitySpec:
        for s in self.modality_specs:
            if s.name == name:
                return s
        raise MissingModality(f"dataset {self.dataset_name!r} has no {name!r} features")

    def record(self, video_id: str) -> Record:
        try:
            return self._index[video_id]
        except KeyError:
            raise MissingRecord(f"video_id {video_id!r} not in manifest") from None

    def to_json(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "format_version": self.format_version,
            "modality_specs": [s.to_json() for s in self.modality_specs],
            "records": [r.to_json() for r in self.records],
        }

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        if raw.get("format_version") != MANIFEST_VERSION:
            raise CorruptPayload(f"unsupported manifest format_version {raw.get('format_version')}")
        return cls(
            dataset_name=raw["dataset_name"],
            modality_specs=[ModalitySpec(**s) for s in raw["modality_specs"]],
            records=[Record(**r) for r in raw["records"]],
            format_version=raw["format_version"],
            root=path.parent,
        )


# -- binary bundle I/O -------------------------------------------------------


def encode_bundle(features: Mapping[str, np.ndarray], label: int, order: Sequence[str] | None = None) -> bytes:
    order = list(order) if order is not None else list(features)
    parts = [_HEADER.pack(MAGIC, BUNDLE_VERSION)]
    for name in order:
        arr = np.ascontiguousarray(features[name], dtype=_F32)
        if arr.ndim != 2:
            raise ShapeMismatch(f"{name!r}: expected a 2-D matrix, got shape {arr.shape}")
        parts.append(_BLOCK.pack(MODALITY_TAGS[name], *arr.shape))
        parts.append(arr.tobytes())
    parts.append(struct.pack("<B", int(label)))
    return b"".join(parts)


def decode_bundle(buf: bytes) -> tuple[dict[str, np.ndarray], int]:
    if len(buf) < _HEADER.size + 1:
        raise CorruptPayload(f"payload too short ({len(buf)} bytes)")
    magic, version = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptPayload(f"bad magic {magic!r}")
    if version != BUNDLE_VERSION:
        raise CorruptPayload(f"unsupported bundle version {version}")
    pos = _HEADER.size
    features: dict[str, np.ndarray] = {}
    while len(buf) - pos > 1:
        if len(buf) - pos < _BLOCK.size:
            raise CorruptPayload(f"truncated block header at byte {pos}")
        tag, seq_len, feat_dim = _BLOCK.unpack_from(buf, pos)
        pos += _BLOCK.size
        if tag not in TAG_NAMES:
            raise CorruptPayload(f"unknown modality tag {tag} at byte {pos - _BLOCK.size}")
        name = TAG_NAMES[tag]
        if name in features:
            raise CorruptPayload(f"modality {name!r} appears twice")
        nbytes = seq_len * feat_dim * _F32.itemsize
        # the block must leave room for at least the label byte
        if len(buf) - pos < nbytes + 1:
            raise CorruptPayload(
                f"{name!r}: header declares {seq_len}x{feat_dim} ({nbytes} bytes) "
                f"but only {len(buf) - pos - 1} remain"
            )
        arr = np.frombuffer(buf, dtype=_F32, count=seq_len * feat_dim, offset=pos)
        features[name] = arr.reshape(seq_len, feat_dim).astype(np.float32)
        pos += nbytes
    if len(buf) - pos != 1:
        raise CorruptPayload("missing trailing label byte")
    label = buf[pos]
    if label not in (0, 1):
        raise CorruptPayload(f"label byte must be 0 or 1, got {label}")
    return features, label


def save_bundle(bundle: FeatureBundle, path: str | os.PathLike, order: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_bundle(bundle.features, bundle.label, order))
    return path


def _masks_from_lengths(lengths: Mapping[str, int] | None, specs) -> dict[str, np.ndarray] | None:
    if not lengths:
        return None
    masks = {}
    for s in specs:
        if s.name in lengths:
            m = np.zeros(s.seq_len, dtype=bool)
            m[lengths[s.name]:] = True  # True marks padded steps
            masks[s.name] = m
    return masks


def load_bundle(manifest: DatasetManifest, video_id: str) -> FeatureBundle:
    """Read and validate one bundle; violations raise, nothing is repaired."""
    rec = manifest.record(video_id)
    features, label = decode_bundle((manifest.root / rec.path).read_bytes())
    if label != rec.label:
        raise CorruptPayload(f"{video_id}: file label {label} != manifest label {rec.label}")
    bundle = FeatureBundle(
        video_id=video_id,
        features={s.name: features[s.name] for s in manifest.modality_specs if s.name in features},
        label=label,
        mask=_masks_from_lengths(rec.valid_lengths, manifest.modality_specs),
    )
    return bundle.validate(manifest.modality_specs)


def write_dataset(
    bundles: Iterable[FeatureBundle],
    specs: Sequence[ModalitySpec],
    out_dir: str | os.PathLike,
    dataset_name: str,
) -> DatasetManifest:
    """Validate and write bundles plus ``manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    order = [s.name for s in specs]
    records = []
    for b in bundles:
        b.validate(specs)
        rel = f"bundles/{b.video_id}.bin"
        save_bundle(b, out_dir / rel, order)
        lengths = None
        if b.mask:
            lengths = {k: int((~m).sum()) for k, m in b.mask.items()}
        records.append(Record(b.video_id, rel, int(b.label), lengths))
    manifest = DatasetManifest(dataset_name, list(specs), records, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


# -- sequence length handling ------------------------------------------------


def fit_length(seq: np.ndarray, target_len: int, mode: str = "zero_pad_or_truncate") -> np.ndarray:
    """Pad with zero rows or shorten a ``[L', D]`` sequence to ``target_len`` rows.

    ``zero_pad_or_truncate`` keeps the head of long sequences;
    ``stride_downsample`` picks rows ``round(i * L' / L)`` (half rounds up).
    Shorter inputs are zero-padded in both modes.
    """
    if target_len <= 0:
        raise InvalidTarget(f"target length must be positive, got {target_len}")
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ShapeMismatch(f"expected a non-empty [L, D] matrix, got shape {seq.shape}")
    n = seq.shape[0]
    if n == target_len:
        return seq.copy()
    if n < target_len:
        out = np.zeros((target_len, seq.shape[1]), dtype=seq.dtype)
        out[:n] = seq
        return out
    if mode == "zero_pad_or_truncate":
        return seq[:target_len].copy()
    if mode == "stride_downsample":
        idx = np.floor(np.arange(target_len) * n / target_len + 0.5).astype(np.int64)
        return seq[np.minimum(idx, n - 1)]
    raise ValueError(f"unknown mode {mode!r}")


# -- synthetic data ----------------------------------------------------------


def synthetic_bundles(n: int, specs: Sequence[ModalitySpec], signal_strength: float, seed: int):
    """Yield ``n`` bundles with a planted, label-dependent direction per modality.

    The stream comes from numpy's PCG64 bit generator seeded with ``seed``;
    draw order is fixed (directions, labels, then per-sample matrices in spec
    order followed by one window start per signal modality), so output is
    reproducible wherever numpy's ``Generator`` stream is.
    """
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n}")
    if signal_strength < 0:
        raise ValueError("signal_strength must be non-negative")
    rng = np.random.Generator(np.random.PCG64(seed))
    directions = {}
    for s in specs:
        u = rng.standard_normal(s.feat_dim)
        directions[s.name] = u / np.linalg.norm(u)
    labels = rng.permutation(np.array([1] * (n // 2) + [0] * (n - n // 2)))
    width = max(5, len(str(n - 1)))
    for i in range(n):
        label = int(labels[i])
        feats = {s.name: rng.standard_normal(s.shape) for s in specs}
        for s in specs:
            if s.name not in SIGNAL_MODALITIES:
                continue
            w = max(1, int(round(0.1 * s.seq_len)))
            start = int(rng.integers(0, s.seq_len - w + 1))
            if label == 1:
                feats[s.name][start:start + w] += signal_strength * directions[s.name]
        shifted = "hate_inf" if label == 1 else "nonhate_inf"
        if shifted in feats:
            feats[shifted] += signal_strength * directions[shifted]
        yield FeatureBundle(
            video_id=f"syn{i:0{width}d}",
            features={k: v.astype(np.float32) for k, v in feats.items()},
            label=label,
        )


def generate_synthetic(
    n: int,
    specs: Sequence[ModalitySpec],
    signal_strength: float,
    seed: int,
    out_dir: str | os.PathLike,
    dataset_name: str = "synthetic",
) -> DatasetManifest:
    bundles = synthetic_bundles(n, specs, signal_strength, seed)
    return write_dataset(bundles, specs, out_dir, dataset_name)


# -- in-memory table for training ---------------------------------------------


@dataclass
class FeatureTable:
    """All bundles of a dataset stacked per modality: ``features[name]`` is ``[n, L, D]``."""

    ids: list[str]
    labels: np.ndarray
    features: dict[str, np.ndarray]

    def __post_init__(self):
        self._pos = {vid: i for i, vid in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def positions(self, ids: Iterable[str]) -> np.ndarray:
        try:
            return np.array([self._pos[i] for i in ids], dtype=np.int64)
        except KeyError as e:
            raise MissingRecord(f"video_id {e.args[0]!r} not in table") from None

    def take(self, ids: Sequence[str]) -> "FeatureTable":
        pos = self.positions(ids)
        return FeatureTable(
            [self.ids[p] for p in pos],
            self.labels[pos],
            {k: v[pos] for k, v in self.features.items()},
        )

    @classmethod
    def from_bundles(cls, bundles: Sequence[FeatureBundle]) -> "FeatureTable":
        names = list(bundles[0].features)
        return cls(
            [b.video_id for b in bundles],
            np.array([b.label for b in bundles], dtype=np.int64),
            {k: np.stack([b.features[k] for b in bundles]) for k in names},
        )


def load_table(manifest: DatasetManifest, ids: Sequence[str] | None = None) -> FeatureTable:
    ids = manifest.ids if ids is None else list(ids)
    return FeatureTable.from_bundles([load_bundle(manifest, i) for i in ids])
