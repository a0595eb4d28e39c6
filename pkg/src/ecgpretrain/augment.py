"""Random lead masking and additive physiological noise for 12-lead segments.

Each noise op draws its parameters once per lead from ``rng`` and adds a
signal that does not depend on the input. Any drawn parameter can be pinned
through keyword arguments, which the tests use to hit degenerate cases.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .numerics import Rng
from .signal import LEAD_NAMES, N_LEADS, SAMPLE_RATE


@dataclass(frozen=True)
class RlmConfig:
    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ContractError("masking probability must lie in [0, 1]")


def _check(seg: np.ndarray) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.float64)
    if seg.ndim != 2 or seg.shape[0] != N_LEADS:
        raise ContractError(f"expected a 12 x n segment, got {seg.shape}")
    return seg


def _seconds(n: int) -> np.ndarray:
    return np.arange(n) / SAMPLE_RATE


def _per_lead(value, default: np.ndarray) -> np.ndarray:
    return default if value is None else np.broadcast_to(np.asarray(value, dtype=np.float64), default.shape)


def random_lead_mask(seg: np.ndarray, cfg: RlmConfig, rng: Rng) -> np.ndarray:
    """Zero each lead independently with probability ``cfg.p``."""
    seg = _check(seg)
    keep = rng.random(N_LEADS) >= cfg.p
    return np.where(keep[:, None], seg, 0.0)


def powerline_noise(seg: np.ndarray, rng: Rng, amplitude=None, phase=None, freq: float = 50.0, harmonics: int = 1) -> np.ndarray:
    """Add sum_k a_k cos(2 pi t k f_n + phi), a_k ~ U(0, 0.5), phi ~ U(0, 2 pi)."""
    seg = _check(seg)
    a = _per_lead(amplitude, rng.uniform(0.0, 0.5, size=(N_LEADS, harmonics)))
    phi = _per_lead(phase, rng.uniform(0.0, 2 * math.pi, size=(N_LEADS, 1)))
    t = _seconds(seg.shape[1])
    k = np.arange(1, harmonics + 1)
    waves = np.cos(2 * math.pi * t[None, None, :] * (k * freq)[None, :, None] + phi[:, :, None])
    return seg + (a[:, :, None] * waves).sum(axis=1)


def emg_noise(seg: np.ndarray, rng: Rng, amplitude=None) -> np.ndarray:
    """Add white Gaussian noise with per-lead std ``a ~ U(0, 0.5)``."""
    seg = _check(seg)
    a = _per_lead(amplitude, rng.uniform(0.0, 0.5, size=N_LEADS))
    z = rng.normal(0.0, 1.0, size=seg.shape)
    return seg + a[:, None] * z


def baseline_wander(seg: np.ndarray, rng: Rng, scale=None, amplitude=None, delta_f=None, phase=None, harmonics: int = 3) -> np.ndarray:
    """Add C sum_k a_k cos(2 pi t k df + phi_k) with C ~ N(1, 0.5^2), a_k ~ U(0, 0.5), df ~ U(0.01, 0.2) Hz."""
    seg = _check(seg)
    c = _per_lead(scale, rng.normal(1.0, 0.5, size=(N_LEADS, 1)))
    a = _per_lead(amplitude, rng.uniform(0.0, 0.5, size=(N_LEADS, harmonics)))
    df = _per_lead(delta_f, rng.uniform(0.01, 0.2, size=(N_LEADS, 1)))
    phi = _per_lead(phase, rng.uniform(0.0, 2 * math.pi, size=(N_LEADS, harmonics)))
    t = _seconds(seg.shape[1])
    k = np.arange(1, harmonics + 1)[None, :, None]
    waves = np.cos(2 * math.pi * t[None, None, :] * k * df[:, :, None] + phi[:, :, None])
    return seg + c * (a[:, :, None] * waves).sum(axis=1)


def baseline_shift(seg: np.ndarray, rng: Rng, shift=None, start=None, length=None) -> np.ndarray:
    """Add a constant n ~ U(-0.5, 0.5) on one random span [start, start + length) per lead."""
    seg = _check(seg)
    n = seg.shape[1]
    offsets = _per_lead(shift, rng.uniform(-0.5, 0.5, size=N_LEADS))
    starts = np.asarray(start if start is not None else rng.integers(0, n, size=N_LEADS)).astype(np.int64)
    starts = np.broadcast_to(starts, (N_LEADS,))
    if length is None:
        lengths = np.array([rng.integers(1, n - s + 1) for s in starts])
    else:
        lengths = np.broadcast_to(np.asarray(length, dtype=np.int64), (N_LEADS,))
    t = np.arange(n)
    inside = (t[None, :] >= starts[:, None]) & (t[None, :] < (starts + lengths)[:, None])
    return seg + np.where(inside, offsets[:, None], 0.0)


Augmentation = Callable[[np.ndarray, Rng], np.ndarray]

NOISE_OPS: dict[str, Augmentation] = {
    "powerline": powerline_noise,
    "emg": emg_noise,
    "wander": baseline_wander,
    "shift": baseline_shift,
}
AUGMENTATION_NAMES = ("rlm",) + tuple(NOISE_OPS)


def resolve(spec: str | Augmentation, rlm: RlmConfig | None = None) -> Augmentation:
    """Turn a name like ``"rlm"``, ``"rlm:0.3"`` or ``"emg"`` into a callable."""
    if callable(spec):
        return spec
    name, _, arg = str(spec).partition(":")
    if name == "rlm":
        cfg = RlmConfig(float(arg)) if arg else (rlm or RlmConfig())
        return lambda seg, rng: random_lead_mask(seg, cfg, rng)
    if name in NOISE_OPS:
        return NOISE_OPS[name]
    raise ContractError(f"unknown augmentation {spec!r}; choose from {', '.join(AUGMENTATION_NAMES)}")


def compose(specs: Sequence[str | Augmentation]) -> Augmentation:
    """Apply augmentations left to right, the i-th one on stream ``rng.fork(i)``."""
    fns = [resolve(s) for s in specs]

    def apply(seg: np.ndarray, rng: Rng) -> np.ndarray:
        out = _check(seg)
        for i, fn in enumerate(fns):
            out = fn(out, rng.fork(i))
        return out

    return apply


def write_preview_csv(path: str | Path, original: np.ndarray, augmented: np.ndarray) -> None:
    """Long-format CSV with columns lead, t, original, augmented (t in samples)."""
    original, augmented = _check(original), _check(augmented)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lead", "t", "original", "augmented"])
        for li, name in enumerate(LEAD_NAMES):
            for t in range(original.shape[1]):
                w.writerow([name, t, repr(float(original[li, t])), repr(float(augmented[li, t]))])
