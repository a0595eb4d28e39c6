"""Weighted multi-label scoring and gallery/probe identification metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError
from .signal import CLASS_NAMES, NORMAL

# pairs of synthetic classes that share symptoms and earn half credit
RELATED_CLASSES = ((1, 3), (3, 4), (2, 5))


@dataclass
class ScoreMatrix:
    weights: np.ndarray
    class_names: tuple[str, ...]
    normal_class: int = NORMAL

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = len(self.class_names)
        if self.weights.shape != (n, n):
            raise ContractError(f"weights must be {n} x {n}, got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ContractError("score weights must be finite")
        if not np.all(np.diag(self.weights) == 1.0):
            raise ContractError("score weights need a unit diagonal")
        if not 0 <= self.normal_class < n:
            raise ContractError("normal class index out of range")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @classmethod
    def default(cls, n_classes: int = len(CLASS_NAMES)) -> "ScoreMatrix":
        w = np.eye(n_classes)
        for i, j in RELATED_CLASSES:
            if max(i, j) < n_classes:
                w[i, j] = w[j, i] = 0.5
        return cls(w, tuple(CLASS_NAMES[:n_classes]))

    @classmethod
    def from_csv(cls, path: str | Path, normal: str | None = None) -> "ScoreMatrix":
        """Header row and first column carry class names; the body is the weight grid."""
        try:
            with open(path, newline="") as fh:
                rows = [r for r in csv.reader(fh) if r]
            names = tuple(n.strip() for n in rows[0][1:])
            if tuple(r[0].strip() for r in rows[1:]) != names:
                raise DataError("row and column class names differ")
            weights = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        except (OSError, IndexError, ValueError) as exc:
            raise DataError(f"cannot read score matrix {path}: {exc}") from exc
        normal = normal or (CLASS_NAMES[NORMAL] if CLASS_NAMES[NORMAL] in names else names[0])
        return cls(weights, names, names.index(normal))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + list(self.class_names))
            for name, row in zip(self.class_names, self.weights):
                w.writerow([name] + [repr(float(v)) for v in row])


def confusion(truths: np.ndarray, preds: np.ndarray, normal_class: int) -> np.ndarray:
    """Multi-label confusion matrix, each recording spreading unit mass over true x predicted."""
    truths = np.asarray(truths, dtype=bool)
    preds = np.asarray(preds, dtype=bool).copy()
    if truths.shape != preds.shape or truths.ndim != 2:
        raise ContractError(f"truths {truths.shape} and preds {preds.shape} must be equal B x n matrices")
    if not truths.any(axis=1).all():
        raise ContractError("every recording needs at least one true class")
    preds[~preds.any(axis=1), normal_class] = True
    nu = (truths | preds).sum(axis=1).astype(np.float64)
    return np.einsum("bi,bj,b->ij", truths.astype(np.float64), preds.astype(np.float64), 1.0 / nu)


def cinc_score(truths: np.ndarray, preds: np.ndarray, w: ScoreMatrix) -> float:
    """Normalized weighted accuracy: 1 for a perfect classifier, 0 for always-normal."""
    truths = np.asarray(truths, dtype=bool)
    if truths.ndim != 2 or truths.shape[1] != w.n_classes:
        raise ContractError(f"expected B x {w.n_classes} label matrices")
    always_normal = np.zeros_like(truths)
    always_normal[:, w.normal_class] = True
    observed = float((w.weights * confusion(truths, preds, w.normal_class)).sum())
    correct = float((w.weights * confusion(truths, truths, w.normal_class)).sum())
    inactive = float((w.weights * confusion(truths, always_normal, w.normal_class)).sum())
    if correct == inactive:
        raise ContractError("degenerate evaluation set: a perfect and an always-normal classifier score alike")
    return (observed - inactive) / (correct - inactive)


@dataclass
class GalleryProbe:
    gallery_ids: list[str]
    gallery: np.ndarray  # (n, d)
    probe_ids: list[str]
    probe: np.ndarray  # (n, d)

    def __post_init__(self):
        self.gallery = np.asarray(self.gallery, dtype=np.float64)
        self.probe = np.asarray(self.probe, dtype=np.float64)
        if len(set(self.gallery_ids)) != len(self.gallery_ids) or len(set(self.probe_ids)) != len(self.probe_ids):
            raise ContractError("one entry per patient on each side")
        if set(self.gallery_ids) != set(self.probe_ids):
            raise ContractError("gallery and probe must share the same patients")
        if self.gallery.shape[0] != len(self.gallery_ids) or self.probe.shape[0] != len(self.probe_ids):
            raise ContractError("embedding rows must match patient ids")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norm == 0.0):
        raise ContractError("zero embedding has no direction")
    return x / norm


def similarity_matrix(gp: GalleryProbe) -> np.ndarray:
    """(n_probe, n_gallery) cosine similarities."""
    return np.clip(_unit_rows(gp.probe) @ _unit_rows(gp.gallery).T, -1.0, 1.0)


def identify_top1(sim: np.ndarray, gp: GalleryProbe) -> float:
    """Fraction of probes whose most similar gallery entry (lowest index on ties) is the same patient."""
    sim = np.asarray(sim)
    if sim.shape != (len(gp.probe_ids), len(gp.gallery_ids)):
        raise ContractError(f"similarity matrix {sim.shape} does not match the gallery/probe sizes")
    if not gp.probe_ids:
        return 0.0
    best = np.argmax(sim, axis=1)  # first maximum wins
    hits = [gp.gallery_ids[j] == pid for j, pid in zip(best, gp.probe_ids)]
    return float(np.mean(hits))


@dataclass
class EvalReport:
    task: str
    combo: str
    metric: str
    value: float
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def labels_to_multihot(label_sets: Sequence[Sequence[int]], n_classes: int) -> np.ndarray:
    out = np.zeros((len(label_sets), n_classes), dtype=bool)
    for row, labels in enumerate(label_sets):
        out[row, list(labels)] = True
    return out
