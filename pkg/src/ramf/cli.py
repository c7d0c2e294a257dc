"""``ramf`` command line: synth | reason | run | ablate | profile | contrib.

Options can also come from a TOML file (``--config``), either at top level or
under a table named after the command; ``--set key=value`` overrides both.
Every command writes ``config.json`` (the resolved options) and
``artifacts.json`` (sha256 of each produced file) into its output directory.

Exit codes: 0 success, 2 invalid arguments or unmet preconditions,
1 I/O or backend failures. Errors print as ``ErrorName: message`` on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import errors
from .feature_io import (
    REASONING_MODALITIES,
    SIGNAL_MODALITIES,
    DatasetManifest,
    FeatureBundle,
    desk_specs,
    generate_synthetic,
    load_bundle,
    load_table,
    full_specs,
    write_dataset,
)
from .model import VARIANTS, ModelConfig, build_model, expected_param_count, load_checkpoint, full_config, save_checkpoint
from .reasoning import (
    ZERO_SHOT_FRAMES,
    BackendSpec,
    CountingBackend,
    MockBackend,
    ReasoningPipeline,
    ResponseCache,
    embed_text,
    save_triples,
    uniform_frame_refs,
)
from .train_eval import (
    CVResult,
    TrainConfig,
    contribution_trend,
    cross_validate,
    dummy_inputs,
    format_summary,
    plan_folds,
    profile,
    to_tensors,
    train,
)

log = logging.getLogger("ramf")

EXIT_OK, EXIT_IO, EXIT_USAGE = 0, 1, 2

# raised for bad inputs or unmet preconditions -> exit 2
_USAGE_ERRORS = (
    errors.TooFewSamples,
    errors.MissingModality,
    errors.MissingRecord,
    errors.MissingPlaceholder,
    errors.UnknownVariant,
    errors.WrongFrameCount,
    errors.InvalidTarget,
    errors.OddHeadCount,
    errors.VariantWithoutLayer2,
    errors.EmptyTestSet,
    errors.ShapeMismatch,
)
# data or environment trouble -> exit 1
_IO_ERRORS = (
    OSError,
    errors.BackendUnavailable,
    errors.CorruptPayload,
    errors.CacheCorruption,
    errors.NonFiniteValue,
    errors.DivergedLoss,
    errors.EmptyResponse,
    errors.UnparseableVerdict,
)


class FoldFailure(RuntimeError):
    def __init__(self, fold: int, cause: BaseException):
        super().__init__(f"fold {fold}: {type(cause).__name__}: {cause}")
        self.fold = fold
        self.cause = cause


# -- helpers ------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True), encoding="utf-8")
    return path


def _finish_run(out: Path, args: argparse.Namespace, produced: Sequence[Path]) -> None:
    """Write the resolved-config snapshot and the artifact manifest."""
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "set")}
    _write_json(out / "config.json", resolved)
    entries = []
    for p in sorted(set(Path(x) for x in produced)):
        if p.is_file():
            entries.append({"path": os.path.relpath(p, out), "sha256": _sha256(p), "bytes": p.stat().st_size})
    _write_json(out / "artifacts.json", {"command": args.command, "seed": getattr(args, "seed", None), "files": entries})


def _manifest_path(data: str) -> Path:
    p = Path(data)
    return p / "manifest.json" if p.is_dir() else p


def _model_config(manifest: DatasetManifest, variant: str, width: int | None, heads: int) -> ModelConfig:
    """Widths follow the data: published widths for real encoders, ``width`` otherwise."""
    dims = {s.name: s.feat_dim for s in manifest.modality_specs}
    synthetic = all(s.encoder_tag == "synthetic" for s in manifest.modality_specs)
    if width is None and not synthetic:
        hidden = {s.name: 128 for s in manifest.modality_specs if s.encoder_tag == "mfcc"}
        return ModelConfig(input_dims=dims, variant=variant, hidden_dims=hidden, num_heads=heads)
    w = width or 64
    return ModelConfig(
        input_dims=dims, variant=variant, default_hidden=w, unified_dim=w,
        num_heads=heads, reasoning_mlp_dims=(w, w),
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)


def _cross_validate(cfg: ModelConfig, plan, tcfg: TrainConfig, table, folds) -> CVResult:
    merged = None
    for k in folds:
        try:
            res = cross_validate(cfg, plan, tcfg, table, folds=[k])
        except (errors.MissingModality, errors.UnknownVariant):
            raise
        except Exception as e:  # abort the whole run, naming the fold
            raise FoldFailure(k, e) from e
        merged = res if merged is None else CVResult(res.variant, merged.folds + res.folds)
    return merged


def _experiment_setup(args):
    manifest = DatasetManifest.load(_manifest_path(args.data))
    table = load_table(manifest)
    plan = plan_folds(table.ids, table.labels.tolist(), seed=args.seed, n_folds=args.n_folds)
    folds = list(range(args.n_folds)) if not args.folds else [int(k) for k in str(args.folds).split(",")]
    return manifest, table, plan, folds


# -- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.preset == "full":
        specs = full_specs(args.features, args.dataset)
    else:
        specs = desk_specs(args.seq_len, args.feat_dim)
    if args.no_reasoning:
        specs = [s for s in specs if s.name in SIGNAL_MODALITIES]
    out = Path(args.out)
    manifest = generate_synthetic(args.n, specs, args.signal, args.seed, out, args.name)
    path = out / "manifest.json"
    _finish_run(out, args, [path] + [out / r.path for r in manifest.records])
    print(path)
    return EXIT_OK


def _build_backend(args):
    kind = "mock" if args.mock else args.backend
    spec = BackendSpec(kind=kind, endpoint=args.endpoint,
                       api_key=os.environ.get(args.api_key_env) if args.api_key_env else None)
    inner = MockBackend(verdict=args.mock_verdict) if kind == "mock" else spec.build()
    return spec, CountingBackend(inner)


def cmd_reason(args) -> int:
    manifest = DatasetManifest.load(_manifest_path(args.data))
    out = Path(args.out)
    transcripts = {}
    if args.transcripts:
        transcripts = json.loads(Path(args.transcripts).read_text(encoding="utf-8"))
    cache_dir = args.cache_dir or os.environ.get("RAMF_CACHE_DIR") or str(out / "cache")
    spec, backend = _build_backend(args)
    pipeline = ReasoningPipeline(backend, ResponseCache(cache_dir), spec, backoff=args.backoff)
    produced = []

    if args.zero_shot:
        frames = ZERO_SHOT_FRAMES if args.frames is None else args.frames
        verdicts = {}
        for vid in manifest.ids:
            refs = uniform_frame_refs(vid, frames)
            verdicts[vid] = pipeline.run_zero_shot(transcripts.get(vid, ""), refs, args.zero_shot_mode, args.language)
        produced.append(_write_json(out / "zero_shot.json", verdicts))
    else:
        frames = 16 if args.frames is None else args.frames
        items = [(vid, transcripts.get(vid, ""), uniform_frame_refs(vid, frames)) for vid in manifest.ids]
        triples = pipeline.generate_triples(items, max_inflight=args.max_inflight)
        tdir = out / "triples"
        produced.append(save_triples(triples, tdir))
        produced += [tdir / f"{t.video_id}.json" for t in triples]
        if args.cot:
            cots = {vid: pipeline.generate_cot(vid, text, refs) for vid, text, refs in items}
            produced.append(_write_json(out / "cot.json", cots))
        if args.embed_out:
            produced += _attach_reasoning(manifest, triples, Path(args.embed_out), args.seed)

    _finish_run(out, args, produced)
    print(f"requests: {backend.calls}")
    print(out)
    return EXIT_OK


def _attach_reasoning(manifest: DatasetManifest, triples, out_dir: Path, seed: int) -> list[Path]:
    """Write a copy of the dataset whose reasoning channels are toy embeddings of the triples."""
    ref = next((s for s in manifest.modality_specs if s.name in REASONING_MODALITIES), None)
    text_spec = ref or manifest.spec("text")
    from .feature_io import ModalitySpec

    specs = [s for s in manifest.modality_specs if s.name not in REASONING_MODALITIES]
    specs += [ModalitySpec(n, text_spec.seq_len, text_spec.feat_dim, "hash") for n in REASONING_MODALITIES]
    by_id = {t.video_id: t for t in triples}

    def bundles():
        for vid in manifest.ids:
            b = load_bundle(manifest, vid)
            feats = {k: v for k, v in b.features.items() if k not in REASONING_MODALITIES}
            for name, text in by_id[vid].texts().items():
                feats[name] = embed_text(text, text_spec.seq_len, text_spec.feat_dim, seed)
            yield FeatureBundle(vid, feats, b.label)

    new = write_dataset(bundles(), specs, out_dir, manifest.dataset_name + "+reasoning")
    return [out_dir / "manifest.json"] + [out_dir / r.path for r in new.records]


def _run_variant(args, variant: str, base: str | None, setup) -> CVResult:
    manifest, table, plan, folds = setup
    cfg = _model_config(manifest, variant, args.width, args.heads)
    if base and variant not in ("RAMF", "MF"):
        cfg = cfg.with_variant(variant, base)
    build_model(cfg)  # surfaces structural errors before any training
    for s in cfg.layout.required:
        if s not in table.features:
            raise errors.MissingModality(f"variant {variant} needs {s!r} features, absent from {args.data}")
    return _cross_validate(cfg, plan, _train_config(args), table, folds)


def cmd_run(args) -> int:
    setup = _experiment_setup(args)
    out = Path(args.out)
    res = _run_variant(args, args.variant, None, setup)
    produced = [_write_json(out / "folds.json", setup[2].to_json()), _write_json(out / "results.json", res.to_json())]
    _finish_run(out, args, produced)
    print(format_summary(args.variant, res.summary))
    return EXIT_OK


def cmd_ablate(args) -> int:
    tags = [t.strip() for t in args.tags.split(",") if t.strip()]
    unknown = [t for t in tags if t not in VARIANTS]
    if unknown:
        raise errors.UnknownVariant(f"unknown tags {unknown}; known: {', '.join(VARIANTS)}")
    setup = _experiment_setup(args)
    out = Path(args.out)
    produced = [_write_json(out / "folds.json", setup[2].to_json())]
    rows = []
    for tag in tags:
        res = _run_variant(args, tag, args.base, setup)
        produced.append(_write_json(out / f"{tag}.json", res.to_json()))
        rows.append(format_summary(tag, res.summary))
    _finish_run(out, args, produced)
    print("\n".join(rows))
    return EXIT_OK


def cmd_profile(args) -> int:
    out = Path(args.out)
    rows = {}
    for tag in [t.strip() for t in args.variants.split(",") if t.strip()]:
        if args.preset == "full":
            cfg = full_config(args.features, args.dataset, variant=tag)
        else:
            from .model import desk_config

            cfg = desk_config(variant=tag)
        model = build_model(cfg, seed=args.seed)
        rep = profile(model, dummy_inputs(model, args.seq_len), runs=args.runs, warmup=min(10, args.runs))
        rows[tag] = {
            "params": rep.param_count,
            "expected_params": expected_param_count(cfg),
            "flops": rep.flops_per_forward,
            "latency_ms": rep.latency_per_sample * 1e3,
        }
        print(f"{tag:16s} params {rep.param_count / 1e6:7.3f}M  FLOPs {rep.flops_per_forward / 1e6:9.2f}M  "
              f"latency {rep.latency_per_sample * 1e3:8.3f} ms")
    _finish_run(out, args, [_write_json(out / "profile.json", rows)])
    return EXIT_OK


def cmd_contrib(args) -> int:
    manifest, table, plan, _ = _experiment_setup(args)
    out = Path(args.out)
    produced = []
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        cfg = _model_config(manifest, args.variant, args.width, args.heads)
        model = build_model(cfg, seed=args.seed)
        to_tensors(model, table)  # fail early on missing channels
        model = train(model, plan, args.fold, _train_config(args), table).model
        produced.append(save_checkpoint(model, out / "checkpoint", {"fold": args.fold, "seed": args.seed}))
        produced.append(out / "checkpoint" / "weights.bin")
    sub = table.take(plan.folds[args.fold].test) if args.split == "test" else table
    series = contribution_trend(model, sub)
    produced.append(series.write_csv(out / "contributions.csv"))
    if args.dump_traces:
        ids = sub.ids[: args.dump_traces]
        _, traces = model(to_tensors(model, sub.take(ids)))
        dump = {k: traces[k].to_json() for k in ("layer1", "layer2") if traces.get(k) is not None}
        dump["video_ids"] = ids
        produced.append(_write_json(out / "traces.json", dump))
    labels = np.asarray(series.labels)
    for lab, name in ((1, "hate"), (0, "non-hate")):
        sel = labels == lab
        if sel.any():
            print(f"{name:8s} samples: hate-source {series.hate[sel].mean():.4f}  "
                  f"non-hate-source {series.nonhate[sel].mean():.4f}")
    _finish_run(out, args, produced)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset manifest.json or its directory")
    p.add_argument("--out", default=None, help="run directory (default runs/<command>)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=2021)
    p.add_argument("--n-folds", type=int, default=5)
    p.add_argument("--folds", default=None, help="comma-separated subset of fold indices")
    p.add_argument("--width", type=int, default=None,
                   help="unified/hidden width; default 64 for synthetic data, published widths otherwise")
    p.add_argument("--heads", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ramf", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="TOML file with option values")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override an option")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a planted-signal synthetic dataset")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--signal", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=2021)
    p.add_argument("--out", default=None)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--features", choices=("T1", "T2"), default="T1")
    p.add_argument("--dataset", choices=("hatemm", "mhc"), default="hatemm")
    p.add_argument("--seq-len", type=int, default=100)
    p.add_argument("--feat-dim", type=int, default=32)
    p.add_argument("--no-reasoning", action="store_true", help="only text/audio/video channels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reason", help="generate reasoning triples (or zero-shot verdicts) per video")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--backend", choices=("mock", "http"), default="mock")
    p.add_argument("--mock", action="store_true", help="force the in-process mock backend")
    p.add_argument("--mock-verdict", default=None, help="fixed zero-shot reply of the mock backend")
    p.add_argument("--endpoint", default=None)
    p.add_argument("--api-key-env", default=None, help="environment variable holding the API key")
    p.add_argument("--frames", type=int, default=None, help="frame refs per video (16 for triples, 5 for zero-shot)")
    p.add_argument("--cache-dir", default=None, help="default $RAMF_CACHE_DIR, else <out>/cache")
    p.add_argument("--max-inflight", type=int, default=4)
    p.add_argument("--backoff", type=float, default=1.0, help="base retry delay in seconds")
    p.add_argument("--transcripts", default=None, help="JSON object video_id -> transcript")
    p.add_argument("--zero-shot", action="store_true")
    p.add_argument("--zero-shot-mode", choices=("text_only", "multimodal"), default="multimodal")
    p.add_argument("--language", default="English")
    p.add_argument("--cot", action="store_true", help="also generate chain-of-thought texts")
    p.add_argument("--embed-out", default=None, help="write a dataset copy with embedded reasoning channels")
    p.add_argument("--seed", type=int, default=0, help="toy embedder seed")
    p.set_defaults(func=cmd_reason)

    p = sub.add_parser("run", help="5-fold cross-validation of one variant")
    _add_experiment_args(p)
    p.add_argument("--variant", default="RAMF", choices=VARIANTS)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="cross-validate several variants on the same folds")
    _add_experiment_args(p)
    p.add_argument("--tags", required=True, help="comma-separated variant tags")
    p.add_argument("--base", choices=("RAMF", "MF"), default="RAMF", help="base for module-level tags")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("profile", help="parameters, FLOPs and latency per variant")
    p.add_argument("--variants", default="RAMF,MF")
    p.add_argument("--preset", choices=("full", "desk"), default="full")
    p.add_argument("--features", choices=("T1", "T2"), default="T1")
    p.add_argument("--dataset", choices=("hatemm", "mhc"), default="hatemm")
    p.add_argument("--seq-len", type=int, default=100)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--seed", type=int, default=2021)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("contrib", help="layer-2 attention paid to the hate / non-hate inferences")
    _add_experiment_args(p)
    p.add_argument("--variant", default="RAMF", choices=VARIANTS)
    p.add_argument("--checkpoint", default=None, help="use a saved model instead of training one")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--split", choices=("test", "all"), default="all")
    p.add_argument("--dump-traces", type=int, default=0, metavar="N", help="write attention maps of N samples")
    p.set_defaults(func=cmd_contrib)
    return parser


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def _resolve(parser: argparse.ArgumentParser, argv: Sequence[str] | None) -> argparse.Namespace:
    """CLI flags beat ``--set`` overrides, which beat the TOML file, which beats defaults."""
    args = parser.parse_args(argv)
    layered = {}
    if args.config:
        raw = tomllib.loads(Path(args.config).read_text(encoding="utf-8"))
        layered.update({k: v for k, v in raw.items() if not isinstance(v, dict)})
        layered.update(raw.get(args.command, {}))
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            parser.error(f"--set expects KEY=VALUE, got {item!r}")
        layered[key.strip()] = _parse_value(val.strip())
    layered = {k.replace("-", "_"): v for k, v in layered.items()}
    unknown = sorted(set(layered) - set(vars(args)))
    if unknown:
        parser.error(f"unknown option(s) for {args.command}: {', '.join(unknown)}")
    # re-parse so explicit flags still win over the layered values
    defaults = vars(parser.parse_args([args.command] + _required_stub(args)))
    for k, v in layered.items():
        if getattr(args, k) == defaults.get(k):
            setattr(args, k, v)
    if args.out is None:
        args.out = str(Path("runs") / args.command)
    return args


def _required_stub(args) -> list[str]:
    stub = []
    for flag in ("data", "tags"):
        if hasattr(args, flag):
            stub += [f"--{flag}", str(getattr(args, flag))]
    return stub


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = _resolve(parser, argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FoldFailure as e:
        code = EXIT_USAGE if isinstance(e.cause, _USAGE_ERRORS) else EXIT_IO
        print(f"{type(e.cause).__name__}: fold {e.fold} aborted: {e.cause}", file=sys.stderr)
        return code
    except _USAGE_ERRORS as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except _IO_ERRORS as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
