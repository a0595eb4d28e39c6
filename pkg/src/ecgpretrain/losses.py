"""Contrastive, metric-learning and multi-label objectives on Tensors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .numerics import Rng, Tensor
from .numerics import ops

# padding offset for absent distractor slots; exp() of it underflows to exactly 0
_ABSENT = -1e30
ARCFACE_EPS = 1e-7


@dataclass(frozen=True)
class ContrastiveConfig:
    tau_local: float = 0.1
    tau_global: float = 0.1
    n_distractors: int = 20

    def __post_init__(self):
        if self.tau_local <= 0 or self.tau_global <= 0:
            raise ContractError("contrastive temperatures must be positive")
        if self.n_distractors < 0:
            raise ContractError("number of distractors must be non-negative")


@dataclass(frozen=True)
class ArcFaceConfig:
    s: float = 192.0
    m: float = 1.0

    def __post_init__(self):
        if self.s <= 0:
            raise ContractError("ArcFace scale must be positive")
        if not 0.0 <= self.m < math.pi:
            raise ContractError("ArcFace margin must lie in [0, pi)")


def info_nce(sims: Tensor, tau: float, valid: np.ndarray | None = None) -> Tensor:
    """Per-row -log softmax(sims / tau)[0]; column 0 holds the positive.

    ``valid`` marks which candidate slots exist; missing ones drop out of the
    denominator exactly.
    """
    logits = ops.as_tensor(sims) * (1.0 / tau)
    if valid is not None:
        logits = logits + np.where(valid, 0.0, _ABSENT)
    return -ops.log_softmax(logits, axis=-1)[:, 0]


@dataclass
class LocalLoss:
    loss: Tensor
    top1: float
    n_targets: int


def _draw_candidates(mask: np.ndarray, k: int, rng: Rng):
    """Flat indices (n, 1 + k) of positive then distractors per masked step, plus a validity mask."""
    B, T = mask.shape
    rows, valid = [], []
    for b in range(B):
        steps = np.nonzero(mask[b])[0]
        m = steps.size
        if m == 0:
            continue
        kb = min(k, m - 1)
        keys = rng.random((m, m))
        np.fill_diagonal(keys, np.inf)
        picks = steps[np.argsort(keys, axis=1, kind="stable")[:, :kb]]
        cand = np.zeros((m, k + 1), dtype=np.int64)
        cand[:, 0] = steps
        cand[:, 1 : kb + 1] = picks
        cand[:, kb + 1 :] = steps[:, None]  # placeholders, masked out below
        ok = np.zeros((m, k + 1), dtype=bool)
        ok[:, : kb + 1] = True
        rows.append(b * T + cand)
        valid.append(ok)
    return np.concatenate(rows), np.concatenate(valid)


def local_contrastive(c: Tensor, q: Tensor, mask: np.ndarray, cfg: ContrastiveConfig, rng: Rng) -> LocalLoss:
    """Masked-step InfoNCE between contextual and quantized features.

    ``c`` and ``q`` are (B, T, d) projections; ``mask`` is (B, T) bool. Each
    masked step t scores its own q_t against K distractors drawn without
    replacement from the other masked steps of the same sample.
    """
    mask = np.asarray(mask, dtype=bool)
    c, q = ops.as_tensor(c), ops.as_tensor(q)
    if c.shape != q.shape or c.shape[:2] != mask.shape:
        raise ContractError(f"shape mismatch: c {c.shape}, q {q.shape}, mask {mask.shape}")
    if not mask.any():
        raise ContractError("local contrastive loss needs at least one masked step")
    B, T, d = c.shape
    cand, valid = _draw_candidates(mask, cfg.n_distractors, rng)
    anchors = cand[:, 0]
    cn = ops.l2_normalize(c.reshape(B * T, d))[anchors]  # (n, d)
    qn = ops.l2_normalize(q.reshape(B * T, d))[cand]  # (n, 1+k, d)
    sims = (qn * cn.reshape(len(anchors), 1, d)).sum(axis=-1)
    per_step = info_nce(sims, cfg.tau_local, valid)
    s = np.where(valid, sims.data, -np.inf)
    top1 = float(np.mean(s[:, 0] > s[:, 1:].max(axis=1, initial=-np.inf)))
    return LocalLoss(per_step.mean(), top1, len(anchors))


def adjacent_partners(n_segments: int) -> np.ndarray:
    """Partner index of each row when pairs are interleaved (0,1), (2,3), ..."""
    if n_segments % 2:
        raise ContractError("segments must come in adjacent pairs")
    return np.arange(n_segments) ^ 1


def global_terms(g: Tensor, tau: float, partners: np.ndarray | None = None) -> Tensor:
    """Per-row terms L_{i, partner(i)} of the CMSC loss over pooled globals (2N, d)."""
    g = ops.as_tensor(g)
    if g.ndim != 2:
        raise ContractError("globals must be a (2N, d) matrix")
    n = g.shape[0]
    partners = adjacent_partners(n) if partners is None else np.asarray(partners, dtype=np.int64)
    if partners.shape != (n,) or np.any(partners == np.arange(n)):
        raise ContractError("every segment needs a distinct positive partner")
    gn = ops.l2_normalize(g)
    sims = gn @ ops.swap_last(gn)  # (2N, 2N)
    # candidates for row i: partner first, then every other k != i
    others = np.array([[partners[i]] + [k for k in range(n) if k not in (i, partners[i])] for i in range(n)])
    rows = np.arange(n)[:, None]
    return info_nce(sims[rows, others], tau)


def global_contrastive(g: Tensor, tau: float, partners: np.ndarray | None = None) -> Tensor:
    """CMSC loss averaged over both directions of every adjacent pair."""
    return global_terms(g, tau, partners).mean()


def combined(l_local: Tensor, l_global: Tensor) -> Tensor:
    """Unweighted sum of the two objectives."""
    l_local, l_global = ops.as_tensor(l_local), ops.as_tensor(l_global)
    if not (np.all(np.isfinite(l_local.data)) and np.all(np.isfinite(l_global.data))):
        raise NumericError(f"non-finite loss component: local={l_local.data}, global={l_global.data}")
    return l_local + l_global


def arcface(embeddings: Tensor, weights: Tensor, labels, cfg: ArcFaceConfig) -> Tensor:
    """Additive angular margin loss; labels index rows of ``weights`` (0-based)."""
    e = ops.l2_normalize(embeddings, axis=-1)
    w = ops.l2_normalize(weights, axis=-1)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = w.shape[0]
    if labels.shape != (e.shape[0],):
        raise ContractError("need exactly one label per embedding")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    cosines = ops.clip(e @ ops.swap_last(w), -1.0 + ARCFACE_EPS, 1.0 - ARCFACE_EPS)
    onehot = np.eye(n_classes)[labels]
    margin = ops.cos(ops.arccos(cosines) + cfg.m)
    logits = (cosines * (1.0 - onehot) + margin * onehot) * cfg.s
    return -(ops.log_softmax(logits, axis=-1) * onehot).sum(axis=-1).mean()


def bce_multilabel(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid cross-entropy, written as softplus(x) - x * y."""
    logits = ops.as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ContractError(f"targets {y.shape} do not match logits {logits.shape}")
    return (ops.softplus(logits) - logits * y).mean()
