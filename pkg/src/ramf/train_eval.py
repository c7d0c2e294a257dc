"""Experiment protocol: folds, training, metrics, profiling and attention contributions."""

from __future__ import annotations

import copy
import csv
import itertools
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DivergedLoss, EmptyTestSet, MissingModality, NonFiniteLogit, TooFewSamples, VariantWithoutLayer2
from .feature_io import FeatureTable
from .lgcf import LGCF
from .model import ModelConfig, RAMFModel, build_model, param_count
from .sca import SCA, ConcatFusion, MultiHeadSelfAttention, extract_contribution

log = logging.getLogger(__name__)

METRIC_NAMES = ("macro_f1", "f1_hate", "accuracy", "precision_hate", "recall_hate")


# -- folds ------------------------------------------------------------------


@dataclass
class Fold:
    train: list[str]
    val: list[str]
    test: list[str]


@dataclass
class FoldPlan:
    folds: list[Fold]
    seed: int

    def to_json(self) -> dict:
        return {"seed": self.seed, "folds": [asdict(f) for f in self.folds]}

    @classmethod
    def from_json(cls, d: Mapping) -> "FoldPlan":
        return cls([Fold(**f) for f in d["folds"]], d["seed"])


def _largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    raw = np.asarray(weights, dtype=float) * total / max(sum(weights), 1e-12)
    base = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - base), kind="stable")[: total - base.sum()]:
        base[i] += 1
    return base.tolist()


def plan_folds(
    ids: Sequence[str],
    labels: Sequence[int],
    seed: int = 2021,
    n_folds: int = 5,
    val_fraction: float = 0.1,
) -> FoldPlan:
    """Label-stratified k-fold plan with pairwise-disjoint test sets.

    Ids are shuffled per class and dealt round-robin (class 0 first, then
    class 1) onto the folds, so test sizes differ by at most one and each
    class is spread evenly. Within a fold, ``round(val_fraction * n)`` of the
    remaining ids go to validation (split across classes by largest
    remainder) after a fold-seeded shuffle; the rest train.
    """
    ids = list(ids)
    labels = [int(y) for y in labels]
    if len(ids) != len(labels):
        raise ValueError("ids and labels differ in length")
    if len(ids) < 10:
        raise TooFewSamples(f"need at least 10 ids for {n_folds}-fold planning, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    rng = np.random.Generator(np.random.PCG64(seed))
    classes = sorted(set(labels))
    by_class = {c: [i for i, y in zip(ids, labels) if y == c] for c in classes}
    dealt = []
    for c in classes:
        members = by_class[c]
        dealt.extend(members[j] for j in rng.permutation(len(members)))
    test_sets = [dealt[k::n_folds] for k in range(n_folds)]
    label_of = dict(zip(ids, labels))
    n_val = int(round(val_fraction * len(ids)))
    folds = []
    for k, test in enumerate(test_sets):
        test_set = set(test)
        rest = [i for i in ids if i not in test_set]
        frng = np.random.Generator(np.random.PCG64([seed, k]))
        rest = [rest[j] for j in frng.permutation(len(rest))]
        rest_by_class = {c: [i for i in rest if label_of[i] == c] for c in classes}
        quotas = _largest_remainder(n_val, [len(rest_by_class[c]) for c in classes])
        val = set()
        for c, q in zip(classes, quotas):
            val.update(rest_by_class[c][:q])
        folds.append(Fold(
            train=[i for i in rest if i not in val],
            val=[i for i in rest if i in val],
            test=list(test),
        ))
    return FoldPlan(folds, seed)


# -- metrics ----------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    f1_hate: float
    precision_hate: float
    recall_hate: float
    confusion: list[list[int]] = field(default_factory=list)  # [[tn, fp], [fn, tp]]

    def as_row(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRIC_NAMES}


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def _f1(p: float, r: float) -> float:
    return _safe_div(2 * p * r, p + r)


def compute_metrics(y_true: Sequence[int], y_pred: Sequence[int]) -> MetricsReport:
    """Binary metrics from one confusion matrix; zero denominators give 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise EmptyTestSet("no samples to evaluate")
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    tn = int(np.sum((y_pred == 0) & (y_true == 0)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    p1, r1 = _safe_div(tp, tp + fp), _safe_div(tp, tp + fn)
    p0, r0 = _safe_div(tn, tn + fn), _safe_div(tn, tn + fp)
    f1_hate = _f1(p1, r1)
    return MetricsReport(
        accuracy=(tp + tn) / y_true.size,
        macro_f1=(f1_hate + _f1(p0, r0)) / 2,
        f1_hate=f1_hate,
        precision_hate=p1,
        recall_hate=r1,
        confusion=[[tn, fp], [fn, tp]],
    )


def aggregate(reports: Sequence[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and (population) std of each metric across folds."""
    return {
        m: (float(np.mean([getattr(r, m) for r in reports])), float(np.std([getattr(r, m) for r in reports])))
        for m in METRIC_NAMES
    }


def format_summary(name: str, agg: Mapping[str, tuple[float, float]]) -> str:
    """One table row: MF1 (F1), Acc, P(H), R(H) with mean±std."""
    def cell(m):
        mean, std = agg[m]
        return f"{mean:.4f}±{std:.4f}"

    return (f"{name:<16} MF1 {cell('macro_f1')} (F1 {cell('f1_hate')})  Acc {cell('accuracy')}  "
            f"P(H) {cell('precision_hate')}  R(H) {cell('recall_hate')}")


# -- training ---------------------------------------------------------------


TRAIN_PRESETS = {
    "MF-HateMM": (60, 64),
    "MF-MHC": (20, 32),
    "RAMF": (20, 16),
}


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 2021
    eval_batch_size: int = 256

    @classmethod
    def preset(cls, name: str, **kw) -> "TrainConfig":
        epochs, batch = TRAIN_PRESETS[name]
        return cls(epochs=epochs, batch_size=batch, **kw)


@dataclass
class TrainResult:
    model: RAMFModel  # holds the best-epoch weights
    best_epoch: int
    best_val_macro_f1: float
    history: list[dict]


def to_tensors(model: RAMFModel, data: FeatureTable) -> dict[str, torch.Tensor]:
    dtype = next(model.parameters()).dtype
    out = {}
    for s in model.layout.required:
        if s not in data.features:
            raise MissingModality(f"variant {model.cfg.variant} needs {s!r} features, absent from data")
        out[s] = torch.as_tensor(data.features[s], dtype=dtype)
    return out


def predict_logits(model: RAMFModel, data: FeatureTable, batch_size: int = 256) -> torch.Tensor:
    inputs = to_tensors(model, data)
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            batch = {k: v[start:start + batch_size] for k, v in inputs.items()}
            chunks.append(model(batch)[0])
    return torch.cat(chunks) if chunks else torch.empty(0, 2)


def evaluate(model: RAMFModel, test_ids: Sequence[str], data: FeatureTable, batch_size: int = 256) -> MetricsReport:
    if not test_ids:
        raise EmptyTestSet("test id list is empty")
    sub = data.take(test_ids)
    y_pred = predict_logits(model, sub, batch_size).argmax(dim=-1).numpy()
    return compute_metrics(sub.labels, y_pred)


def train(
    model: RAMFModel,
    plan: FoldPlan,
    fold_index: int,
    config: TrainConfig,
    data: FeatureTable,
) -> TrainResult:
    """Adam + cross-entropy; keeps the epoch with the best validation macro-F1.

    Batches are reshuffled each epoch from a generator seeded by
    ``(config.seed, fold_index)``. Ties in validation macro-F1 keep the
    earlier epoch.
    """
    fold = plan.folds[fold_index]
    train_data = data.take(fold.train)
    val_data = data.take(fold.val)
    inputs = to_tensors(model, train_data)
    targets = torch.as_tensor(train_data.labels)
    n = len(train_data)

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    loss_fn = nn.CrossEntropyLoss()
    gen = torch.Generator().manual_seed(config.seed * 1000 + fold_index)

    best_state = copy.deepcopy(model.state_dict())
    best_epoch, best_f1 = 0, -1.0
    history = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                logits, _ = model({k: v[idx] for k, v in inputs.items()})
            except NonFiniteLogit as e:
                raise DivergedLoss(f"fold {fold_index} epoch {epoch} batch {b}: {e}") from e
            loss = loss_fn(logits, targets[idx])
            if not torch.isfinite(loss):
                raise DivergedLoss(f"fold {fold_index} epoch {epoch} batch {b}: loss={loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        val = evaluate(model, fold.val, val_data) if fold.val else None
        val_f1 = val.macro_f1 if val else 0.0
        history.append({
            "epoch": epoch,
            "train_loss": total / max(seen, 1),
            "val_macro_f1": val_f1,
            "val_accuracy": val.accuracy if val else None,
        })
        if val_f1 > best_f1:
            best_f1, best_epoch = val_f1, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.debug("fold %d epoch %d loss %.4f val MF1 %.4f", fold_index, epoch, history[-1]["train_loss"], val_f1)
    model.load_state_dict(best_state)
    return TrainResult(model, best_epoch, best_f1, history)


@dataclass
class FoldOutcome:
    fold: int
    best_epoch: int
    test: MetricsReport
    history: list[dict]
    model: RAMFModel | None = None


@dataclass
class CVResult:
    variant: str
    folds: list[FoldOutcome]

    @property
    def summary(self) -> dict[str, tuple[float, float]]:
        return aggregate([f.test for f in self.folds])

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "summary": {k: {"mean": m, "std": s} for k, (m, s) in self.summary.items()},
            "folds": [
                {"fold": f.fold, "best_epoch": f.best_epoch, "test": asdict(f.test), "history": f.history}
                for f in self.folds
            ],
        }


def cross_validate(
    model_cfg: ModelConfig,
    plan: FoldPlan,
    train_cfg: TrainConfig,
    data: FeatureTable,
    folds: Iterable[int] | None = None,
    keep_models: bool = False,
) -> CVResult:
    """Train a freshly initialised model per fold and test it on that fold's test set."""
    outcomes = []
    for k in folds if folds is not None else range(len(plan.folds)):
        model = build_model(model_cfg, seed=train_cfg.seed)
        res = train(model, plan, k, train_cfg, data)
        report = evaluate(res.model, plan.folds[k].test, data)
        outcomes.append(FoldOutcome(k, res.best_epoch, report, res.history, res.model if keep_models else None))
    return CVResult(model_cfg.variant, outcomes)


def sweep(
    base_cfg: ModelConfig,
    grid: Mapping[str, Sequence],
    plan: FoldPlan,
    train_cfg: TrainConfig,
    data: FeatureTable,
    folds: Iterable[int] | None = None,
) -> list[dict]:
    """Cross-validate every combination of ``ModelConfig`` field values in ``grid``."""
    from dataclasses import replace

    keys = list(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cfg = replace(base_cfg, **dict(zip(keys, values)))
        res = cross_validate(cfg, plan, train_cfg, data, folds)
        row = dict(zip(keys, values))
        row.update({m: mean for m, (mean, _) in res.summary.items()})
        rows.append(row)
    return rows


# -- profiling --------------------------------------------------------------


@dataclass
class EfficiencyReport:
    param_count: int
    flops_per_forward: int
    latency_per_sample: float
    runs: int


def _linear_flops(mod: nn.Linear, inp, out) -> int:
    x = inp[0]
    return 2 * mod.in_features * mod.out_features * (x.numel() // mod.in_features)


def _conv1d_flops(mod: nn.Conv1d, inp, out) -> int:
    B, C_out, L_out = out.shape
    return 2 * mod.kernel_size[0] * (mod.in_channels // mod.groups) * C_out * L_out * B


def _lstm_flops(mod: nn.LSTM, inp, out) -> int:
    x = inp[0]
    B, L = x.shape[0], x.shape[1]
    h = mod.hidden_size
    return 2 * 4 * (mod.input_size * h + h * h) * L * B


def _mha_flops(mod: nn.MultiheadAttention, inp, out) -> int:
    q, k = inp[0], inp[1]
    B, Lq, D = q.shape
    Lk = k.shape[1]
    proj = 2 * D * D * (Lq + 2 * Lk + Lq)
    att = 2 * 2 * Lq * Lk * D
    return B * (proj + att)


def count_flops(model: nn.Module, inputs: Mapping[str, torch.Tensor] | torch.Tensor) -> int:
    """FLOPs of one forward pass; a multiply-accumulate counts as 2, biases and norms are ignored.

    Dense layers contribute ``2 * in * out`` per row, convolutions
    ``2 * k * C_in/groups * C_out * L``, attention blocks their score and
    value products.
    """
    total = 0

    def hook(fn):
        def _h(mod, inp, out):
            nonlocal total
            total += fn(mod, inp, out)
        return _h

    def fusion_hook(mod, inp, out):
        nonlocal total
        z = inp[0]
        total += z.shape[0] * mod.attention_flops(z.shape[1])

    def lgcf_hook(mod, inp, out):
        # conv and gate run through the functional API, invisible to the Linear/Conv1d hooks
        nonlocal total
        x = inp[0]
        L, B = x.shape[-2], x.numel() // (x.shape[-2] * x.shape[-1])
        D = mod.cfg.unified_dim
        if mod.conv is not None:
            total += B * 2 * mod.cfg.conv_kernel * (D // mod.conv.groups) * D * L
        if mod.gate is not None:
            total += B * 2 * 2 * D * D

    handles = []
    for mod in model.modules():
        if isinstance(mod, LGCF):
            handles.append(mod.register_forward_hook(lgcf_hook))
        if isinstance(mod, nn.MultiheadAttention):
            handles.append(mod.register_forward_hook(hook(_mha_flops)))
        elif isinstance(mod, nn.Linear) and not isinstance(mod, nn.modules.linear.NonDynamicallyQuantizableLinear):
            handles.append(mod.register_forward_hook(hook(_linear_flops)))
        elif isinstance(mod, nn.Conv1d):
            handles.append(mod.register_forward_hook(hook(_conv1d_flops)))
        elif isinstance(mod, nn.LSTM):
            handles.append(mod.register_forward_hook(hook(_lstm_flops)))
        elif isinstance(mod, (SCA, MultiHeadSelfAttention, ConcatFusion)):
            handles.append(mod.register_forward_hook(fusion_hook))
    try:
        with torch.no_grad():
            model(inputs)
    finally:
        for h in handles:
            h.remove()
    return total


def dummy_inputs(model: RAMFModel, seq_lens: Mapping[str, int] | int = 100, batch: int = 1, seed: int = 0) -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    out = {}
    for s in model.layout.required:
        L = seq_lens if isinstance(seq_lens, int) else seq_lens[s]
        out[s] = torch.randn(batch, L, model.cfg.input_dims[s], generator=gen).to(dtype)
    return out


def profile(
    model: nn.Module,
    inputs: Mapping[str, torch.Tensor] | torch.Tensor | None = None,
    runs: int = 1000,
    warmup: int = 10,
) -> EfficiencyReport:
    """Parameter count, per-sample FLOPs and mean wall-clock latency per sample.

    ``inputs`` is a modality dict for full models or a ``[B, ...]`` tensor
    for bare layers; it defaults to one random sample of length 100.
    """
    inputs = inputs if inputs is not None else dummy_inputs(model)
    first = inputs if isinstance(inputs, torch.Tensor) else next(iter(inputs.values()))
    batch = first.shape[0]
    flops = count_flops(model, inputs) // batch
    model.eval()
    with torch.no_grad():
        for _ in range(warmup):
            model(inputs)
        t0 = time.perf_counter()
        for _ in range(runs):
            model(inputs)
        elapsed = time.perf_counter() - t0
    return EfficiencyReport(param_count(model), flops, elapsed / (runs * batch), runs)


# -- reasoning contribution --------------------------------------------------


@dataclass
class ContributionSeries:
    ids: list[str]
    labels: list[int]
    hate: np.ndarray
    nonhate: np.ndarray

    def write_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["video_id", "label", "hate_contrib", "nonhate_contrib"])
            for row in zip(self.ids, self.labels, self.hate.tolist(), self.nonhate.tolist()):
                w.writerow(row)
        return path


def contribution_trend(model: RAMFModel, data: FeatureTable, batch_size: int = 256) -> ContributionSeries:
    """Layer-2 attention paid to the hate and non-hate inference sources.

    Samples are ordered non-hate first, then hate (stable within class).
    """
    lay = model.layout
    if lay.layer2 is None or not isinstance(model.layer2, (SCA, MultiHeadSelfAttention)):
        raise VariantWithoutLayer2(f"variant {model.cfg.variant} has no layer-2 attention trace")
    if "hate_inf" not in lay.layer2 or "nonhate_inf" not in lay.layer2:
        raise VariantWithoutLayer2(f"variant {model.cfg.variant} does not fuse both inferences in layer 2")
    h_idx, n_idx = lay.layer2.index("hate_inf"), lay.layer2.index("nonhate_inf")
    order = np.argsort(data.labels, kind="stable")
    sub = data.take([data.ids[i] for i in order])
    inputs = to_tensors(model, sub)
    model.eval()
    hate, nonhate = [], []
    with torch.no_grad():
        for start in range(0, len(sub), batch_size):
            _, traces = model({k: v[start:start + batch_size] for k, v in inputs.items()})
            hate.append(extract_contribution(traces["layer2"], h_idx))
            nonhate.append(extract_contribution(traces["layer2"], n_idx))
    return ContributionSeries(list(sub.ids), sub.labels.tolist(), np.concatenate(hate), np.concatenate(nonhate))
