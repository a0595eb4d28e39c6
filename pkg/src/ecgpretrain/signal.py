"""ECG records, segmentation, reduced-lead views and a synthetic 12-lead generator.

Lead rows always follow ``LEAD_NAMES``. Records are sampled at 500 Hz; a
pre-training example is a 10 s window split into two adjacent 5 s segments.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError
from .numerics import Rng

LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
N_LEADS = 12
SAMPLE_RATE = 500
WINDOW = 5000
SEGMENT = 2500

CLASS_NAMES = ("normal", "irregular_rhythm", "wide_qrs", "tachycardia", "bradycardia", "long_pr")
NORMAL = 0


class LeadCombo(enum.Enum):
    FULL12 = ("full12", LEAD_NAMES)
    LIMB6 = ("limb6", ("I", "II", "III", "aVF", "aVL", "aVR"))
    THREE = ("three", ("I", "II", "V2"))
    TWO = ("two", ("I", "II"))
    ONE = ("one", ("I",))

    def __init__(self, key: str, leads: tuple[str, ...]):
        self.key = key
        self.leads = leads

    @property
    def mask(self) -> np.ndarray:
        return np.array([name in self.leads for name in LEAD_NAMES])

    @classmethod
    def parse(cls, value: "str | LeadCombo") -> "LeadCombo":
        if isinstance(value, LeadCombo):
            return value
        aliases = {"12": "full12", "6": "limb6", "3": "three", "2": "two", "1": "one"}
        key = aliases.get(str(value).lower(), str(value).lower())
        for combo in cls:
            if combo.key == key:
                return combo
        raise ContractError(f"unknown lead combination {value!r}")


@dataclass
class EcgRecord:
    leads: np.ndarray
    patient_id: str
    session_id: int = 0
    labels: tuple[int, ...] = (NORMAL,)
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.leads = np.asarray(self.leads, dtype=np.float64)
        if self.leads.ndim != 2 or self.leads.shape[0] != N_LEADS:
            raise ContractError(f"record must be 12 x n, got {self.leads.shape}")
        if self.leads.shape[1] < WINDOW:
            raise ContractError(f"record has {self.leads.shape[1]} samples, needs at least {WINDOW}")
        if self.sample_rate != SAMPLE_RATE:
            raise ContractError("only 500 Hz records are supported")
        self.labels = tuple(sorted(set(int(c) for c in self.labels)))

    @property
    def record_id(self) -> str:
        return f"{self.patient_id}_s{self.session_id:02d}"

    @property
    def n_samples(self) -> int:
        return self.leads.shape[1]


@dataclass
class Segment:
    leads: np.ndarray
    record_id: str = ""
    offset: int = 0

    def __post_init__(self):
        if self.leads.shape != (N_LEADS, SEGMENT):
            raise ContractError(f"segment must be 12 x {SEGMENT}, got {self.leads.shape}")


@dataclass
class SegmentPair:
    first: Segment
    second: Segment

    def __post_init__(self):
        if self.second.offset != self.first.offset + SEGMENT or self.first.record_id != self.second.record_id:
            raise ContractError("segments of a pair must be adjacent crops of one record")


def crop_windows(record: EcgRecord | np.ndarray) -> np.ndarray:
    """Non-overlapping 10 s windows from offset 0, shape (n_windows, 12, 5000).

    The trailing remainder shorter than a window is dropped.
    """
    leads = record.leads if isinstance(record, EcgRecord) else np.asarray(record, dtype=np.float64)
    n = leads.shape[-1]
    if n < WINDOW:
        raise ContractError(f"need at least {WINDOW} samples for one window, got {n}")
    count = n // WINDOW
    return leads[:, : count * WINDOW].reshape(N_LEADS, count, WINDOW).transpose(1, 0, 2).copy()


def split_pair(window: np.ndarray, record_id: str = "", offset: int = 0) -> SegmentPair:
    window = np.asarray(window)
    if window.shape != (N_LEADS, WINDOW):
        raise ContractError(f"window must be 12 x {WINDOW}, got {window.shape}")
    return SegmentPair(
        Segment(window[:, :SEGMENT].copy(), record_id, offset),
        Segment(window[:, SEGMENT:].copy(), record_id, offset + SEGMENT),
    )


def segment_pairs(record: EcgRecord) -> list[SegmentPair]:
    return [
        split_pair(w, record.record_id, i * WINDOW) for i, w in enumerate(crop_windows(record))
    ]


def pair_array(records: Iterable[EcgRecord]) -> np.ndarray:
    """All adjacent pairs of the given records as an array (n_pairs, 2, 12, 2500).

    Only waveforms are returned: nothing about patients or labels survives,
    which is what pre-training is allowed to see.
    """
    windows = [crop_windows(r) for r in records]
    if not windows:
        raise DataError("no records to segment")
    w = np.concatenate(windows, axis=0)
    return w.reshape(len(w), N_LEADS, 2, SEGMENT).transpose(0, 2, 1, 3).copy()


def reduce_leads(seg, combo: LeadCombo | str):
    """Zero every lead row not in ``combo``; works on Segments and (..., 12, L) arrays."""
    combo = LeadCombo.parse(combo)
    if isinstance(seg, Segment):
        return Segment(reduce_leads(seg.leads, combo), seg.record_id, seg.offset)
    arr = np.asarray(seg)
    if arr.shape[-2] != N_LEADS:
        raise ContractError("lead axis must have 12 rows")
    return arr * combo.mask[:, None].astype(arr.dtype)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

# per wave: offset from the R peak (s), gaussian width (s), amplitude (mV), direction (x left, y inferior, z anterior)
_WAVES = {
    "P": (-0.16, 0.022, 0.18, (0.45, 0.85, 0.25)),
    "Q": (-0.028, 0.008, 0.15, (-0.55, -0.35, 0.75)),
    "R": (0.0, 0.010, 1.25, (0.55, 0.75, -0.35)),
    "S": (0.03, 0.010, 0.40, (-0.35, -0.45, 0.82)),
    "T": (0.26, 0.055, 0.32, (0.55, 0.6, 0.55)),
}
_LEAD_I = np.array([1.0, 0.0, 0.0])
_LEAD_II = np.array([0.5, math.sqrt(3) / 2, 0.0])
# precordial electrodes sweep the horizontal plane from right-anterior to left-lateral
_PRECORDIAL_ANGLES = np.deg2rad([105.0, 85.0, 65.0, 45.0, 22.0, 0.0])


def _precordial_rows() -> np.ndarray:
    a = _PRECORDIAL_ANGLES
    rows = np.stack([np.cos(a), np.full_like(a, 0.15), np.sin(a)], axis=1)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def projection_matrix() -> np.ndarray:
    """12 x 3 map from the cardiac dipole to lead voltages.

    Limb rows are linear combinations of leads I and II, which is what makes
    III = II - I, aVR = -(I + II) / 2, aVL = I - II / 2 and aVF = II - I / 2.
    """
    i, ii = _LEAD_I, _LEAD_II
    limb = np.stack([i, ii, ii - i, -(i + ii) / 2, i - ii / 2, ii - i / 2])
    return np.concatenate([limb, _precordial_rows()], axis=0)


def _rotation(angles: np.ndarray) -> np.ndarray:
    a, b, c = angles
    rx = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    ry = np.array([[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]])
    rz = np.array([[math.cos(c), -math.sin(c), 0], [math.sin(c), math.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass
class PatientProfile:
    """Latent identity of a synthetic patient; persists across sessions."""

    patient_id: str
    labels: tuple[int, ...]
    heart_rate: float
    gain: float
    axis: np.ndarray
    waves: dict[str, tuple[float, float, float, np.ndarray]] = field(repr=False)


def _draw_labels(rng: Rng, n_classes: int, class_profile: Sequence[float]) -> tuple[int, ...]:
    labels = [c for c in range(1, n_classes) if rng.random() < class_profile[c - 1]]
    if 3 in labels and 4 in labels:
        labels.remove(4)
    return tuple(labels) or (NORMAL,)


def make_patient(patient_id: str, rng: Rng, n_classes: int = 6, class_profile: Sequence[float] | None = None) -> PatientProfile:
    if class_profile is None:
        class_profile = [0.2] * (n_classes - 1)
    labels = _draw_labels(rng.fork(0), n_classes, class_profile)
    r = rng.fork(1)
    axis = r.normal(0.0, 0.35, size=3)
    rot = _rotation(axis)
    waves = {}
    for name, (offset, width, amp, direction) in _WAVES.items():
        d = rot @ (np.asarray(direction) + r.normal(0.0, 0.18, size=3))
        d /= np.linalg.norm(d)
        waves[name] = (
            offset + r.normal(0.0, 0.006),
            width * math.exp(r.normal(0.0, 0.12)),
            amp * math.exp(r.normal(0.0, 0.25)),
            d,
        )
    hr = r.uniform(55.0, 90.0)
    if 3 in labels:
        hr = r.uniform(105.0, 130.0)
    elif 4 in labels:
        hr = r.uniform(40.0, 52.0)
    if 2 in labels:
        for name in ("Q", "R", "S"):
            off, width, amp, d = waves[name]
            waves[name] = (off * 1.8, width * 2.2, amp * (1.4 if name == "S" else 1.0), d)
    if 5 in labels:
        off, width, amp, d = waves["P"]
        waves["P"] = (off - 0.14, width, amp, d)
    if 1 in labels:
        off, width, amp, d = waves["P"]
        waves["P"] = (off, width, 0.0, d)
    return PatientProfile(patient_id, labels, hr, math.exp(r.normal(0.0, 0.2)), axis, waves)


def _beat_times(duration: float, rr: float, irregular: bool, rng: Rng) -> np.ndarray:
    t = -rr * rng.random()
    times = []
    while t < duration + 1.0:
        times.append(t)
        jitter = rng.uniform(-0.25, 0.25) if irregular else rng.normal(0.0, 0.02)
        t += rr * (1.0 + jitter)
    return np.asarray(times)


def generate_record(profile: PatientProfile, session_id: int, seconds: float, rng: Rng) -> EcgRecord:
    """Render one session of ``profile`` by projecting a dipole trajectory onto 12 leads."""
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    hr = profile.heart_rate * (1.0 + rng.normal(0.0, 0.03))
    gain = profile.gain * (1.0 + rng.normal(0.0, 0.04))
    rr = 60.0 / hr
    beats = _beat_times(n / SAMPLE_RATE, rr, 1 in profile.labels, rng.fork(0))

    dipole = np.zeros((n, 3))
    for name, (offset, width, amp, direction) in profile.waves.items():
        if amp == 0.0:
            continue
        if name == "T":
            offset = offset * math.sqrt(rr / 0.8)
        centers = beats + offset
        near = np.abs(t[:, None] - centers[None, :]) < 6.0 * width
        rows, cols = np.nonzero(near)
        bump = np.zeros(n)
        np.add.at(bump, rows, np.exp(-0.5 * ((t[rows] - centers[cols]) / width) ** 2))
        dipole += (gain * amp) * bump[:, None] * direction[None, :]
    if 1 in profile.labels:
        f = rng.fork(1)
        p_dir = profile.waves["P"][3]
        dipole += 0.04 * np.sin(2 * np.pi * f.uniform(5.0, 7.0) * t + f.uniform(0, 2 * np.pi))[:, None] * p_dir

    noise = rng.fork(2)
    proj = projection_matrix()
    lead_i = dipole @ proj[0] + noise.normal(0.0, 0.012, size=n)
    lead_ii = dipole @ proj[1] + noise.normal(0.0, 0.012, size=n)
    precordial = dipole @ proj[6:].T + noise.normal(0.0, 0.012, size=(n, 6))
    drift = 0.04 * np.sin(2 * np.pi * noise.uniform(0.1, 0.3) * t + noise.uniform(0, 2 * np.pi))
    lead_i = lead_i + drift
    lead_ii = lead_ii + drift * 0.5

    leads = np.empty((N_LEADS, n))
    leads[0], leads[1] = lead_i, lead_ii
    leads[2], leads[3], leads[4], leads[5] = limb_leads(lead_i, lead_ii)
    leads[6:] = precordial.T
    return EcgRecord(leads, profile.patient_id, session_id, profile.labels)


def limb_leads(lead_i: np.ndarray, lead_ii: np.ndarray) -> tuple[np.ndarray, ...]:
    """(III, aVR, aVL, aVF) from leads I and II."""
    return lead_ii - lead_i, -(lead_i + lead_ii) / 2, lead_i - lead_ii / 2, lead_ii - lead_i / 2


def patient_id(index: int) -> str:
    return f"P{index:04d}"


def synth_dataset(
    n_patients: int,
    sessions_per_patient: int = 2,
    record_seconds: float = 20.0,
    class_profile: Sequence[float] | None = None,
    seed: int = 0,
    n_classes: int = 6,
) -> list[EcgRecord]:
    """Synthetic records ordered patient-major, session-minor.

    The stream for (seed, patient, session) does not depend on how many
    other patients or sessions are generated.
    """
    if n_patients < 1 or sessions_per_patient < 1:
        raise ContractError("need at least one patient and one session")
    if record_seconds < WINDOW / SAMPLE_RATE:
        raise ContractError("records must be at least 10 s long")
    if not 2 <= n_classes <= len(CLASS_NAMES):
        raise ContractError(f"n_classes must be in [2, {len(CLASS_NAMES)}]")
    if class_profile is not None and len(class_profile) != n_classes - 1:
        raise ContractError("class_profile needs one prevalence per abnormal class")
    root = Rng(seed)
    records = []
    for p in range(n_patients):
        prng = root.fork(p)
        profile = make_patient(patient_id(p), prng.fork(0), n_classes, class_profile)
        for s in range(sessions_per_patient):
            records.append(generate_record(profile, s, record_seconds, prng.fork(1).fork(s)))
    return records


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_record(directory: str | Path, record: EcgRecord) -> str:
    directory = Path(directory)
    rid = record.record_id
    header = {
        "patient_id": record.patient_id,
        "session_id": record.session_id,
        "sample_rate": record.sample_rate,
        "n_samples": record.n_samples,
        "labels": list(record.labels),
        "lead_order": list(LEAD_NAMES),
    }
    _dump_json(header, directory / f"{rid}.json")
    (directory / f"{rid}.bin").write_bytes(record.leads.astype("<f4").tobytes(order="C"))
    return rid


def read_record(directory: str | Path, record_id: str) -> EcgRecord:
    directory = Path(directory)
    try:
        header = json.loads((directory / f"{record_id}.json").read_text())
        blob = (directory / f"{record_id}.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read record {record_id}: {exc}") from exc
    if header.get("lead_order") != list(LEAD_NAMES):
        raise DataError(f"record {record_id} has unexpected lead order")
    n = int(header["n_samples"])
    if len(blob) != N_LEADS * n * 4:
        raise DataError(f"record {record_id}: binary size {len(blob)} does not match header")
    leads = np.frombuffer(blob, dtype="<f4").reshape(N_LEADS, n).astype(np.float64)
    try:
        return EcgRecord(leads, header["patient_id"], int(header["session_id"]), tuple(header["labels"]), int(header["sample_rate"]))
    except ContractError as exc:
        raise DataError(f"record {record_id}: {exc}") from exc


def assign_splits(records: Sequence[EcgRecord], seed: int) -> dict[str, list[str]]:
    """8:1:1 train/valid/test over patients, plus gallery/probe over test patients.

    Splitting by patient keeps every session of a patient on one side, so the
    identification gallery and probe contain patients never trained on. Test
    patients with at least two sessions contribute their two lowest sessions.
    """
    patients = sorted({r.patient_id for r in records})
    order = [patients[i] for i in Rng(seed).fork(0xD5).permutation(len(patients))]
    n = len(order)
    n_valid = n // 10 if n >= 10 else (1 if n >= 3 else 0)
    n_test = n_valid
    side = {}
    for i, pid in enumerate(order):
        side[pid] = "valid" if i < n_valid else "test" if i < n_valid + n_test else "train"
    splits: dict[str, list[str]] = {k: [] for k in ("train", "valid", "test", "gallery", "probe")}
    by_patient: dict[str, list[EcgRecord]] = {}
    for r in records:
        splits[side[r.patient_id]].append(r.record_id)
        by_patient.setdefault(r.patient_id, []).append(r)
    for pid in patients:
        sessions = sorted(by_patient[pid], key=lambda r: r.session_id)
        if side[pid] == "test" and len(sessions) >= 2:
            splits["gallery"].append(sessions[0].record_id)
            splits["probe"].append(sessions[1].record_id)
    return splits


def write_dataset(directory: str | Path, records: Sequence[EcgRecord], n_classes: int, seed: int) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = [write_record(directory, r) for r in records]
    manifest = {
        "format": "ecg-records/1",
        "sample_rate": SAMPLE_RATE,
        "n_classes": n_classes,
        "class_names": list(CLASS_NAMES[:n_classes]),
        "records": ids,
        "splits": assign_splits(records, seed),
    }
    _dump_json(manifest, directory / MANIFEST)
    return manifest


@dataclass
class Dataset:
    root: Path
    manifest: dict
    records: dict[str, EcgRecord]

    @property
    def n_classes(self) -> int:
        return int(self.manifest["n_classes"])

    def split(self, name: str) -> list[EcgRecord]:
        return [self.records[rid] for rid in self.manifest["splits"].get(name, [])]


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest in {directory}: {exc}") from exc
    records = {rid: read_record(directory, rid) for rid in manifest.get("records", [])}
    return Dataset(directory, manifest, records)
