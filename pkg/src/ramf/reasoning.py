"""Three-stage adversarial reasoning with a VLM, plus zero-shot and CoT prompting.

For every video the backend is asked, in order, for an objective description,
an inference that assumes the content is hateful and one that assumes it is
not. Prompt bodies live in ``templates/*.txt`` (first line ``#version N``)
and are rendered with ``str.format``-style placeholders.

Responses are cached on disk under a content hash of the inputs, the
template versions and the backend tag, so reruns issue no requests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .errors import (
    BackendUnavailable,
    CacheCorruption,
    EmptyResponse,
    MissingPlaceholder,
    UnparseableVerdict,
    WrongFrameCount,
)
from .feature_io import fit_length

log = logging.getLogger(__name__)

STAGES = ("objective", "hate_assumed", "nonhate_assumed", "zero_shot_text", "zero_shot_multimodal", "cot")
TRIPLE_STAGES = ("objective", "hate_assumed", "nonhate_assumed")
ZERO_SHOT_FRAMES = 5
REASONING_FRAMES = 16


# -- templates --------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    stage: str
    body: str
    version: int = 1

    @property
    def placeholders(self) -> set[str]:
        return {f for _, f, _, _ in string.Formatter().parse(self.body) if f}

    @classmethod
    def load(cls, stage: str, directory: str | os.PathLike | None = None) -> "PromptTemplate":
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        if directory is None:
            raw = resources.files("ramf").joinpath("templates", f"{stage}.txt").read_text(encoding="utf-8")
        else:
            raw = (Path(directory) / f"{stage}.txt").read_text(encoding="utf-8")
        first, _, body = raw.partition("\n")
        m = re.fullmatch(r"#version\s+(\d+)", first.strip())
        if not m:
            raise ValueError(f"template {stage!r} must start with '#version N'")
        return cls(stage, body.rstrip("\n"), int(m.group(1)))


def load_templates(directory: str | os.PathLike | None = None) -> dict[str, PromptTemplate]:
    return {s: PromptTemplate.load(s, directory) for s in STAGES}


def _frames_field(frame_refs: Sequence[str]) -> str:
    return ", ".join(frame_refs) if frame_refs else "(none)"


def render_prompt(template: PromptTemplate, transcript: str, frame_refs: Sequence[str] = (), **extra) -> str:
    """Fill ``{text}``, ``{frames}``, ``{frame_count}`` and any ``extra`` fields."""
    values = {"text": transcript, "frames": _frames_field(frame_refs), "frame_count": len(frame_refs)}
    values.update(extra)
    missing = template.placeholders - values.keys()
    if missing:
        raise MissingPlaceholder(f"template {template.stage!r} needs {sorted(missing)}")
    return template.body.format(**values)


# -- backends ---------------------------------------------------------------


@dataclass(frozen=True)
class Request:
    stage: str
    prompt: str
    images: tuple[str, ...] = ()
    max_new_tokens: int = 2048
    temperature: float = 0.7
    top_p: float = 0.9
    do_sample: bool = True

    def to_json(self) -> dict:
        return {
            "prompt": self.prompt,
            "images": list(self.images),
            "max_new_tokens": self.max_new_tokens,
            "temperature": self.temperature,
            "top_p": self.top_p,
        }

    def to_bytes(self) -> bytes:
        d = self.to_json()
        d["stage"] = self.stage
        return json.dumps(d, sort_keys=True, ensure_ascii=False).encode("utf-8")


class Backend(Protocol):
    tag: str

    def complete(self, request: Request) -> str: ...


_MOCK_PREFIX = {
    "objective": "MOCK-OBJ",
    "hate_assumed": "MOCK-HATE",
    "nonhate_assumed": "MOCK-NONHATE",
    "cot": "MOCK-COT",
}


class MockBackend:
    """In-process stand-in: the reply is a pure function of the request bytes.

    Reasoning stages answer ``"<PREFIX>:<first 16 hex of sha256(request)>"``;
    zero-shot stages answer ``verdict`` if given, else the parity of the hash.
    """

    def __init__(self, verdict: str | int | None = None, tag: str = "mock"):
        self.verdict = None if verdict is None else str(verdict)
        self.tag = tag

    def complete(self, request: Request) -> str:
        digest = hashlib.sha256(request.to_bytes()).hexdigest()
        if request.stage.startswith("zero_shot"):
            return self.verdict if self.verdict is not None else str(int(digest[0], 16) % 2)
        return f"{_MOCK_PREFIX[request.stage]}:{digest[:16]}"


class CountingBackend:
    """Proxy that counts requests forwarded to the wrapped backend."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.tag = inner.tag
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, request: Request) -> str:
        with self._lock:
            self.calls += 1
        return self.inner.complete(request)


class HttpBackend:
    """POSTs ``{prompt, images, max_new_tokens, temperature, top_p}``; expects ``{"text": ...}``."""

    def __init__(self, endpoint: str, api_key: str | None = None, timeout: float = 120.0, tag: str | None = None):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self.tag = tag or f"http:{endpoint}"

    def complete(self, request: Request) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(
            self.endpoint, data=json.dumps(request.to_json()).encode("utf-8"), headers=headers, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as e:
            if e.code >= 500 or e.code == 429:
                raise BackendUnavailable(f"{self.endpoint}: HTTP {e.code}") from e
            raise
        except (urllib.error.URLError, TimeoutError, ConnectionError) as e:
            raise BackendUnavailable(f"{self.endpoint}: {e}") from e
        if not isinstance(body, dict) or "text" not in body:
            raise BackendUnavailable(f"{self.endpoint}: response lacks a 'text' field")
        return body["text"]


@dataclass
class BackendSpec:
    kind: str = "mock"
    endpoint: str | None = None
    api_key: str | None = None
    max_new_tokens: int = 2048
    temperature: float = 0.7
    top_p: float = 0.9
    sampling: bool = True

    def build(self) -> Backend:
        if self.kind == "mock":
            return MockBackend()
        if self.kind == "http":
            if not self.endpoint:
                raise ValueError("http backend needs an endpoint")
            return HttpBackend(self.endpoint, self.api_key)
        raise ValueError(f"unknown backend kind {self.kind!r}")

    def request(self, stage: str, prompt: str, images: Sequence[str] = ()) -> Request:
        return Request(stage, prompt, tuple(images), self.max_new_tokens, self.temperature, self.top_p, self.sampling)


def call_with_retry(
    backend: Backend,
    request: Request,
    max_retries: int = 3,
    backoff: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[str, int]:
    """Return ``(reply, retries_used)``; waits ``backoff * 2**k`` before retry ``k``."""
    for attempt in range(max_retries + 1):
        try:
            reply = backend.complete(request)
        except BackendUnavailable:
            if attempt == max_retries:
                raise
            log.warning("backend %s unavailable for %s, retry %d", backend.tag, request.stage, attempt + 1)
            sleep(backoff * 2 ** attempt)
            continue
        if attempt:
            log.info("stage %s succeeded after %d retries", request.stage, attempt)
        return reply, attempt
    raise AssertionError("unreachable")


# -- cache ------------------------------------------------------------------


class ResponseCache:
    """Content-addressed JSON files: ``<dir>/<key[:2]>/<key>.json``.

    Each file stores the key and a sha256 of its payload; a mismatch on read
    raises ``CacheCorruption``. Writes go through a temp file and an atomic
    rename under a lock, so concurrent readers never see partial files.
    """

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self._lock = threading.Lock()

    @staticmethod
    def key(**parts) -> str:
        return hashlib.sha256(json.dumps(parts, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
            payload = entry["payload"]
            ok = entry["key"] == key and entry["checksum"] == _checksum(payload)
        except (ValueError, KeyError, TypeError) as e:
            raise CacheCorruption(f"{path}: unreadable cache entry ({e})") from e
        if not ok:
            raise CacheCorruption(f"{path}: key or checksum mismatch")
        return payload

    def put(self, key: str, payload: dict) -> None:
        path = self._path(key)
        entry = {"key": key, "checksum": _checksum(payload), "payload": payload}
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".tmp{threading.get_ident()}")
            tmp.write_text(json.dumps(entry, ensure_ascii=False), encoding="utf-8")
            os.replace(tmp, path)


def _checksum(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()


# -- pipeline ---------------------------------------------------------------


@dataclass
class ReasoningTriple:
    video_id: str
    objective: str
    hate_assumed: str
    nonhate_assumed: str
    backend_tag: str
    frame_count: int
    created_at: str
    retries: int = 0

    def texts(self) -> dict[str, str]:
        return {"obj_desc": self.objective, "hate_inf": self.hate_assumed, "nonhate_inf": self.nonhate_assumed}


@dataclass
class ReasoningPipeline:
    backend: Backend
    cache: ResponseCache | None = None
    spec: BackendSpec = field(default_factory=BackendSpec)
    templates: dict[str, PromptTemplate] = field(default_factory=load_templates)
    max_retries: int = 3
    backoff: float = 1.0
    sleep: Callable[[float], None] = time.sleep

    def _ask(self, stage: str, transcript: str, frame_refs: Sequence[str], images: Sequence[str]) -> tuple[str, int]:
        prompt = render_prompt(self.templates[stage], transcript, frame_refs)
        reply, retries = call_with_retry(
            self.backend, self.spec.request(stage, prompt, images), self.max_retries, self.backoff, self.sleep
        )
        if not reply or not reply.strip():
            raise EmptyResponse(f"stage {stage!r} returned an empty reply")
        return reply, retries

    def _cache_key(self, kind: str, video_id: str, transcript: str, frame_refs: Sequence[str], stages) -> str:
        return ResponseCache.key(
            kind=kind,
            video_id=video_id,
            transcript=transcript,
            frames=list(frame_refs),
            templates={s: self.templates[s].version for s in stages},
            template_bodies=hashlib.sha256("".join(self.templates[s].body for s in stages).encode()).hexdigest(),
            backend=self.backend.tag,
        )

    def generate_triple(self, video_id: str, transcript: str, frame_refs: Sequence[str]) -> ReasoningTriple:
        key = self._cache_key("triple", video_id, transcript, frame_refs, TRIPLE_STAGES)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return ReasoningTriple(**hit)
        texts, retries = {}, 0
        for stage in TRIPLE_STAGES:
            texts[stage], r = self._ask(stage, transcript, frame_refs, frame_refs)
            retries += r
        triple = ReasoningTriple(
            video_id=video_id,
            objective=texts["objective"],
            hate_assumed=texts["hate_assumed"],
            nonhate_assumed=texts["nonhate_assumed"],
            backend_tag=self.backend.tag,
            frame_count=len(frame_refs),
            created_at=datetime.now(timezone.utc).isoformat(),
            retries=retries,
        )
        if retries:
            log.info("%s: triple produced after %d retries", video_id, retries)
        if self.cache is not None:
            self.cache.put(key, asdict(triple))
        return triple

    def generate_triples(self, items: Iterable[tuple[str, str, Sequence[str]]], max_inflight: int = 4) -> list[ReasoningTriple]:
        """Run ``generate_triple`` over ``(video_id, transcript, frame_refs)`` items, in input order."""
        items = list(items)
        with ThreadPoolExecutor(max_workers=max(1, max_inflight)) as pool:
            return list(pool.map(lambda it: self.generate_triple(*it), items))

    def generate_cot(self, video_id: str, transcript: str, frame_refs: Sequence[str]) -> str:
        key = self._cache_key("cot", video_id, transcript, frame_refs, ("cot",))
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit["text"]
        text, _ = self._ask("cot", transcript, frame_refs, frame_refs)
        if self.cache is not None:
            self.cache.put(key, {"text": text})
        return text

    def run_zero_shot(
        self,
        transcript: str,
        frame_refs: Sequence[str] | None = None,
        mode: str = "text_only",
        language: str = "English",
    ) -> int:
        if mode == "multimodal":
            frame_refs = list(frame_refs or ())
            if len(frame_refs) != ZERO_SHOT_FRAMES:
                raise WrongFrameCount(f"multimodal zero-shot takes exactly {ZERO_SHOT_FRAMES} frames, got {len(frame_refs)}")
            stage, images = "zero_shot_multimodal", frame_refs
        elif mode == "text_only":
            stage, images = "zero_shot_text", ()
        else:
            raise ValueError(f"mode must be 'text_only' or 'multimodal', got {mode!r}")
        prompt = render_prompt(self.templates[stage], transcript, images, language=language)
        reply, _ = call_with_retry(
            self.backend, self.spec.request(stage, prompt, images), self.max_retries, self.backoff, self.sleep
        )
        return parse_verdict(reply)


def parse_verdict(reply: str) -> int:
    """Accept only a reply that is exactly ``0`` or ``1`` after stripping whitespace."""
    s = reply.strip() if isinstance(reply, str) else reply
    if s == "0":
        return 0
    if s == "1":
        return 1
    raise UnparseableVerdict(reply)


def generate_triple(video_id: str, transcript: str, frame_refs: Sequence[str], backend: Backend,
                    cache: ResponseCache | None = None, **kw) -> ReasoningTriple:
    return ReasoningPipeline(backend, cache, **kw).generate_triple(video_id, transcript, frame_refs)


def generate_cot(video_id: str, transcript: str, frame_refs: Sequence[str], backend: Backend,
                 cache: ResponseCache | None = None, **kw) -> str:
    return ReasoningPipeline(backend, cache, **kw).generate_cot(video_id, transcript, frame_refs)


def run_zero_shot(transcript: str, backend: Backend, frame_refs: Sequence[str] | None = None,
                  mode: str = "text_only", **kw) -> int:
    return ReasoningPipeline(backend).run_zero_shot(transcript, frame_refs, mode, **kw)


def uniform_frame_refs(video_id: str, count: int = REASONING_FRAMES) -> list[str]:
    """Opaque frame handles ``<video_id>/frame_<i>`` for pipelines without real media."""
    return [f"{video_id}/frame_{i:02d}" for i in range(count)]


# -- storage and toy embedding ----------------------------------------------


def save_triples(triples: Sequence[ReasoningTriple], directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t in triples:
        (directory / f"{t.video_id}.json").write_text(json.dumps(asdict(t), ensure_ascii=False, indent=1), encoding="utf-8")
    manifest = {
        "count": len(triples),
        "backends": sorted({t.backend_tag for t in triples}),
        "video_ids": [t.video_id for t in triples],
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def load_triples(directory: str | os.PathLike) -> list[ReasoningTriple]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    return [
        ReasoningTriple(**json.loads((directory / f"{vid}.json").read_text(encoding="utf-8")))
        for vid in manifest["video_ids"]
    ]


def embed_text(text: str, seq_len: int = 100, dim: int = 768, seed: int = 0) -> np.ndarray:
    """Toy token embedder: each lower-cased whitespace token maps to a fixed
    Gaussian vector seeded by ``sha256(token)`` and ``seed``; the sequence is
    zero-padded or truncated to ``seq_len``. No pretrained weights involved.
    """
    tokens = text.lower().split()
    if not tokens:
        return np.zeros((seq_len, dim), dtype=np.float32)
    rows = []
    for tok in tokens[:seq_len]:
        h = int.from_bytes(hashlib.sha256(tok.encode("utf-8")).digest()[:8], "little")
        rng = np.random.Generator(np.random.PCG64([seed, h]))
        rows.append(rng.standard_normal(dim) / np.sqrt(dim))
    return fit_length(np.asarray(rows, dtype=np.float32), seq_len)
