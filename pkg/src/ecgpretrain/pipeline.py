"""Pre-training, fine-tuning and model-based evaluation loops.

Randomness layout, all derived from the config seed:

* ``Rng(seed).fork(0)`` initializes parameters (``fork(1)`` for a task head),
* ``Rng(seed).fork(1).fork(step)`` drives one training step,
* ``Rng(seed).fork(2).fork(epoch)`` orders examples within an epoch.

Two runs with the same config therefore produce identical loss traces.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Literal

import numpy as np

from . import augment
from .augment import RlmConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ContractError, DataError, NumericError
from .evaluation import EvalReport, GalleryProbe, ScoreMatrix, cinc_score, identify_top1, labels_to_multihot, similarity_matrix
from .losses import ArcFaceConfig, ContrastiveConfig, arcface, bce_multilabel, combined, global_contrastive, local_contrastive
from .model import EcgModel, ModelConfig, pool_global
from .numerics import Adam, Rng, Tensor, backward, no_grad
from .signal import SEGMENT, EcgRecord, LeadCombo, crop_windows, load_dataset, pair_array, reduce_leads

Task = Literal["classification", "identification"]
DEFAULT_FINETUNE_LR = {"classification": 5e-5, "identification": 3e-5}


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    dataset: str = ""
    batch_size: int = 4
    steps: int = 300
    lr: float = 5e-5
    rlm: RlmConfig | None = field(default_factory=RlmConfig)
    augmentations: list[str] = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    seed: int = 0
    split: str = "train"
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractError("pre-training needs at least 2 pairs per batch")
        if self.steps < 1:
            raise ContractError("steps must be at least 1")
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if self.lr_schedule != "constant":
            raise ContractError(f"unsupported lr schedule {self.lr_schedule!r}")
        for spec in self.augmentations:
            augment.resolve(spec)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["rlm"] = asdict(self.rlm) if self.rlm else None
        d["augmentations"] = list(self.augmentations)
        d["model"] = self.model.to_dict()
        d["contrastive"] = asdict(self.contrastive)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        _reject_unknown(cls, d)
        if "rlm" in d:
            d["rlm"] = RlmConfig(**d["rlm"]) if d["rlm"] is not None else None
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "contrastive" in d:
            d["contrastive"] = ContrastiveConfig(**d["contrastive"])
        return cls(**d)


@dataclass
class FinetuneConfig:
    dataset: str = ""
    task: Task = "classification"
    lead_combo: str = "full12"
    lr: float | None = None
    arcface: ArcFaceConfig = field(default_factory=ArcFaceConfig)
    freeze_encoder: bool = False
    steps: int = 100
    batch_size: int = 16
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.task not in DEFAULT_FINETUNE_LR:
            raise ContractError(f"unknown task {self.task!r}")
        self.lead_combo = LeadCombo.parse(self.lead_combo).key
        if self.lr is None:
            self.lr = DEFAULT_FINETUNE_LR[self.task]
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ContractError("steps and batch_size must be at least 1")

    @property
    def combo(self) -> LeadCombo:
        return LeadCombo.parse(self.lead_combo)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["arcface"] = asdict(self.arcface)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        d = dict(d)
        _reject_unknown(cls, d)
        if "arcface" in d:
            d["arcface"] = ArcFaceConfig(**d["arcface"])
        return cls(**d)


def _reject_unknown(cls, d: dict) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ContractError(f"unknown {cls.__name__} fields: {', '.join(sorted(unknown))}")


def set_dotted(d: dict, path: str, value) -> dict:
    """Set ``d["a"]["b"] = value`` for ``path="a.b"``, creating levels as needed."""
    keys = path.split(".")
    node = d
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ContractError(f"cannot descend into {key!r} while setting {path}")
    node[keys[-1]] = value
    return d


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def epoch_batches(n_items: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless index batches: a fresh permutation per epoch, incomplete tail dropped."""
    if n_items < batch_size:
        raise DataError(f"{n_items} examples cannot fill a batch of {batch_size}")
    epoch = 0
    while True:
        order = Rng(seed).fork(2).fork(epoch).permutation(n_items)
        for start in range(0, n_items - batch_size + 1, batch_size):
            yield order[start : start + batch_size]
        epoch += 1


def record_segments(record: EcgRecord) -> np.ndarray:
    """All non-overlapping 5 s segments of a record's 10 s windows: (n, 12, 2500)."""
    windows = crop_windows(record)
    return windows.reshape(windows.shape[0], windows.shape[1], 2, SEGMENT).transpose(0, 2, 1, 3).reshape(-1, windows.shape[1], SEGMENT)


def _grads_by_name(model: EcgModel, grads: dict[Tensor, np.ndarray], trainable: set[str]) -> dict[str, np.ndarray]:
    out = {}
    for name, t in model.params.items():
        if name in trainable and t in grads:
            g = grads[t]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            out[name] = g
    return out


class MetricsLog:
    """Collects per-step metric dicts and mirrors them to a JSON-lines file."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[dict] = []
        self._fh = open(path, "w") if path else None

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh:
            self._fh.write(json.dumps(row) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    model: EcgModel
    metrics: list[dict]
    seconds: float

    def checkpoint(self, cfg: PretrainConfig) -> Checkpoint:
        steps = len(self.metrics)
        return Checkpoint(
            self.model.state_dict(),
            {"kind": "pretrain", "model": cfg.model.to_dict(), "pretrain": cfg.to_dict()},
            steps,
            Rng(cfg.seed).fork(1).fork(steps).state(),
        )


def pretrain_augmenter(cfg: PretrainConfig) -> Callable[[np.ndarray, Rng], np.ndarray]:
    specs = ([f"rlm:{cfg.rlm.p!r}"] if cfg.rlm is not None else []) + list(cfg.augmentations)
    return augment.compose(specs)


def pretrain_step(model: EcgModel, opt: Adam, pairs: np.ndarray, step: int, cfg: PretrainConfig,
                  aug: Callable[[np.ndarray, Rng], np.ndarray]) -> dict:
    """One W2V + CMSC update on a (N, 2, 12, L) batch of adjacent segment pairs."""
    rng = Rng(cfg.seed).fork(1).fork(step)
    n, _, leads, length = pairs.shape
    x = pairs.reshape(2 * n, leads, length)  # row 2i and 2i+1 form pair i
    aug_rng = rng.fork(0)
    x = np.stack([aug(seg, aug_rng.fork(i)) for i, seg in enumerate(x)])
    tau_q = cfg.model.quantizer.temperature(step)
    out = model.pretrain_forward(x, tau_q, rng.fork(1))
    local = local_contrastive(out.c_proj, out.q, out.mask, cfg.contrastive, rng.fork(2))
    l_global = global_contrastive(out.g, cfg.contrastive.tau_global)
    total = combined(local.loss, l_global)
    grads = backward(total)
    opt.step(_grads_by_name(model, grads, set(model.params)))
    return {
        "step": step,
        "l_local": float(local.loss.item()),
        "l_global": float(l_global.item()),
        "l_total": float(total.item()),
        "ctr_top1": local.top1,
    }


def pretrain_on_pairs(pairs: np.ndarray, cfg: PretrainConfig, metrics_path: str | Path | None = None,
                      model: EcgModel | None = None, on_step: Callable[[dict], None] | None = None) -> PretrainResult:
    """Pre-train on an array of segment pairs. Only waveforms reach this loop, never labels."""
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 4 or pairs.shape[1] != 2:
        raise ContractError(f"expected (n_pairs, 2, 12, L) pairs, got {pairs.shape}")
    model = model or EcgModel.init(cfg.model, Rng(cfg.seed).fork(0))
    opt = Adam(model.params, cfg.lr)
    aug = pretrain_augmenter(cfg)
    log = MetricsLog(metrics_path)
    t0 = time.perf_counter()
    try:
        batches = epoch_batches(len(pairs), cfg.batch_size, cfg.seed)
        for step in range(cfg.steps):
            row = pretrain_step(model, opt, pairs[next(batches)], step, cfg, aug)
            log.append(row)
            if on_step:
                on_step(row)
    finally:
        log.close()
    return PretrainResult(model, log.rows, time.perf_counter() - t0)


def pretrain(cfg: PretrainConfig, metrics_path: str | Path | None = None, **kwargs) -> PretrainResult:
    dataset = load_dataset(cfg.dataset)
    records = dataset.split(cfg.split)
    if not records:
        raise DataError(f"dataset split {cfg.split!r} is empty")
    return pretrain_on_pairs(pair_array(records), cfg, metrics_path, **kwargs)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    model: EcgModel
    metrics: list[dict]
    classes: list[str]  # patient ids (identification) or class names (classification)
    seconds: float

    def checkpoint(self, cfg: FinetuneConfig) -> Checkpoint:
        return Checkpoint(
            self.model.state_dict(),
            {"kind": "finetune", "model": self.model.config.to_dict(), "finetune": cfg.to_dict()},
            len(self.metrics),
            Rng(cfg.seed).fork(1).fork(len(self.metrics)).state(),
            {"classes": self.classes},
        )


def model_from_checkpoint(ckpt: Checkpoint, expect: ModelConfig | None = None) -> EcgModel:
    config = ModelConfig.from_dict(ckpt.config.get("model", {}))
    if expect is not None and expect.to_dict() != config.to_dict():
        raise CheckpointError("checkpoint was written for a different model configuration")
    return EcgModel.from_state(config, ckpt.params)


def _finetune_examples(records: list[EcgRecord], cfg: FinetuneConfig, n_classes: int):
    segs, targets, classes = [], [], []
    if cfg.task == "identification":
        classes = sorted({r.patient_id for r in records})
        index = {pid: i for i, pid in enumerate(classes)}
    for r in records:
        s = record_segments(r)
        segs.append(s)
        if cfg.task == "identification":
            targets.append(np.full(len(s), index[r.patient_id]))
        else:
            targets.append(np.repeat(labels_to_multihot([r.labels], n_classes), len(s), axis=0))
    return np.concatenate(segs), np.concatenate(targets), classes


def finetune_on_records(records: list[EcgRecord], cfg: FinetuneConfig, model: EcgModel, n_classes: int,
                        metrics_path: str | Path | None = None,
                        on_step: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Fine-tune ``model`` in place. Inputs see only ``reduce_leads``; no masking or noise."""
    if not records:
        raise DataError("no records to fine-tune on")
    segs, targets, classes = _finetune_examples(records, cfg, n_classes)
    segs = reduce_leads(segs, cfg.combo)
    head_rng = Rng(cfg.seed).fork(1)
    if cfg.task == "identification":
        model.add_head("identification", len(classes), head_rng)
    else:
        model.add_head("classification", n_classes, head_rng)
        classes = list(range(n_classes))
    frozen = {n for n in model.params if n.startswith("conv.")} if cfg.freeze_encoder else set()
    trainable = {n for n in model.params if n not in frozen and n.startswith(("conv.", "tf.", "head."))}
    opt = Adam({n: model.params[n] for n in sorted(trainable)}, cfg.lr)
    batches = epoch_batches(len(segs), min(cfg.batch_size, len(segs)), cfg.seed)
    log = MetricsLog(metrics_path)
    t0 = time.perf_counter()
    try:
        for step in range(cfg.steps):
            idx = next(batches)
            loss = finetune_loss(model, segs[idx], targets[idx], cfg, frozen_encoder=bool(frozen))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite fine-tuning loss at step {step}")
            opt.step(_grads_by_name(model, backward(loss), trainable))
            row = {"step": step, "loss": float(value)}
            log.append(row)
            if on_step:
                on_step(row)
    finally:
        log.close()
    return FinetuneResult(model, log.rows, [str(c) for c in classes], time.perf_counter() - t0)


def finetune_loss(model: EcgModel, x: np.ndarray, targets: np.ndarray, cfg: FinetuneConfig,
                  frozen_encoder: bool = False) -> Tensor:
    if frozen_encoder:
        with no_grad():
            z = model.conv_encode(x).detach()
    else:
        z = model.conv_encode(x)
    g = pool_global(model.transform(z))
    if cfg.task == "identification":
        return arcface(g, model.params["head.id.weight"], targets, cfg.arcface)
    return bce_multilabel(model.forward_heads(g, "classification"), targets)


def finetune(cfg: FinetuneConfig, ckpt: Checkpoint, metrics_path: str | Path | None = None,
             expect_model: ModelConfig | None = None, **kwargs) -> FinetuneResult:
    model = model_from_checkpoint(ckpt, expect_model)
    dataset = load_dataset(cfg.dataset)
    return finetune_on_records(dataset.split(cfg.split), cfg, model, dataset.n_classes, metrics_path, **kwargs)


# ---------------------------------------------------------------------------
# evaluation with a model
# ---------------------------------------------------------------------------

def embed_records(model: EcgModel, records: list[EcgRecord], combo: LeadCombo | str = LeadCombo.FULL12,
                  batch: int = 16) -> np.ndarray:
    """One vector per record: the mean pooled global over its 5 s segments."""
    combo = LeadCombo.parse(combo)
    out = []
    with no_grad():
        for r in records:
            segs = reduce_leads(record_segments(r), combo)
            g = np.concatenate([model.embed(segs[i : i + batch]).data for i in range(0, len(segs), batch)])
            out.append(g.mean(axis=0))
    return np.stack(out)


def identification_report(model: EcgModel, gallery: list[EcgRecord], probe: list[EcgRecord],
                          combo: LeadCombo | str = LeadCombo.FULL12) -> EvalReport:
    combo = LeadCombo.parse(combo)
    gp = GalleryProbe(
        [r.patient_id for r in gallery], embed_records(model, gallery, combo),
        [r.patient_id for r in probe], embed_records(model, probe, combo),
    )
    acc = identify_top1(similarity_matrix(gp), gp)
    return EvalReport("identification", combo.key, "top1_accuracy", acc, len(probe))


def classification_report(model: EcgModel, records: list[EcgRecord], weights: ScoreMatrix,
                          combo: LeadCombo | str = LeadCombo.FULL12, threshold: float = 0.5) -> EvalReport:
    """CinC score of thresholded sigmoid outputs averaged over each record's segments."""
    combo = LeadCombo.parse(combo)
    if "head.cls.weight" not in model.params:
        raise CheckpointError("model has no classification head")
    probs = []
    with no_grad():
        for r in records:
            segs = reduce_leads(record_segments(r), combo)
            logits = model.forward_heads(model.embed(segs), "classification").data
            probs.append((1.0 / (1.0 + np.exp(-logits))).mean(axis=0))
    preds = np.stack(probs) >= threshold
    truths = labels_to_multihot([r.labels for r in records], weights.n_classes)
    return EvalReport("classification", combo.key, "cinc_score", cinc_score(truths, preds, weights), len(records))


__all__ = [
    "FinetuneConfig",
    "FinetuneResult",
    "PretrainConfig",
    "PretrainResult",
    "classification_report",
    "embed_records",
    "epoch_batches",
    "finetune",
    "finetune_on_records",
    "identification_report",
    "load_checkpoint",
    "model_from_checkpoint",
    "pretrain",
    "pretrain_on_pairs",
    "pretrain_step",
    "record_segments",
    "save_checkpoint",
    "set_dotted",
]
