"""Shared data model, the bundled 64-channel montage and the dataset directory format.

A dataset directory holds three files:

``meta.json``
    format tag, version, sampling rate, shape, electrode layout, bad channels.
``data.f32le``
    channel-major little-endian float32 samples (one row per channel, in
    the label order of ``meta.json``).
``events.csv``
    ``sample,code,condition,bin,angle_deg,hit,rt_ms``; missing RTs are empty.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_NAME = "saber-eeg-dataset"
FORMAT_VERSION = 1
EVENTS_HEADER = ["sample", "code", "condition", "bin", "angle_deg", "hit", "rt_ms"]

N_BINS = 6
BIN_CENTERS_DEG = tuple(30.0 + 60.0 * b for b in range(N_BINS))
MAX_JITTER_DEG = 10.0

LEFT_ROI = ("PO3", "PO7", "O1")
RIGHT_ROI = ("PO4", "PO8", "O2")
ERP_PAIRS = (("PO7", "PO8"), ("P7", "P8"))
MASTOIDS = ("M1", "M2")
EOG_CHANNELS = ("Fp1", "Fp2")
REQUIRED_CHANNELS = ("PO3", "PO7", "O1", "PO4", "PO8", "O2", "P7", "P8")


class Condition(str, Enum):
    STATIC_SINGLE = "StaticSingle"
    STATIC_MULTIPLE = "StaticMultiple"
    DYNAMIC_SINGLE = "DynamicSingle"
    DYNAMIC_MULTIPLE = "DynamicMultiple"

    @property
    def short(self) -> str:
        return _SHORT[self]

    @property
    def is_static(self) -> bool:
        return self in (Condition.STATIC_SINGLE, Condition.STATIC_MULTIPLE)

    @property
    def has_distractors(self) -> bool:
        return self in (Condition.STATIC_MULTIPLE, Condition.DYNAMIC_MULTIPLE)

    @classmethod
    def parse(cls, text: str) -> "Condition":
        for cond in cls:
            if text in (cond.value, cond.short, cond.name):
                return cond
        raise ValueError(f"unknown condition {text!r}")


_SHORT = {
    Condition.STATIC_SINGLE: "SS",
    Condition.STATIC_MULTIPLE: "SM",
    Condition.DYNAMIC_SINGLE: "DS",
    Condition.DYNAMIC_MULTIPLE: "DM",
}

STATIC_PAIR = (Condition.STATIC_SINGLE, Condition.STATIC_MULTIPLE)
DYNAMIC_PAIR = (Condition.DYNAMIC_SINGLE, Condition.DYNAMIC_MULTIPLE)


def bin_center(bin_index: int) -> float:
    return BIN_CENTERS_DEG[bin_index]


def angle_diff_deg(a, b):
    """Wrapped difference ``a - b`` in (-180, 180]."""
    d = np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), 360.0)
    d = np.where(d > 180.0, d - 360.0, d)
    return d if np.ndim(d) else float(d)


class DatasetError(Exception):
    """Base class for dataset directory problems."""


class MissingFileError(DatasetError):
    pass


class SizeMismatchError(DatasetError):
    pass


class UnknownVersionError(DatasetError):
    pass


# --------------------------------------------------------------------------
# Electrode layout

# sagittal angle (deg, anterior positive) per row prefix
_ROW_ANGLE = {
    "Fp": 72.0, "AF": 54.0, "F": 36.0, "FC": 18.0, "FT": 18.0, "C": 0.0,
    "T": 0.0, "CP": -18.0, "TP": -18.0, "P": -36.0, "PO": -54.0, "O": -72.0,
    "I": -90.0,
}

STANDARD_64 = (
    "Fp1", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8",
    "F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8",
    "FT9", "FT7", "FC5", "FC3", "FC1", "FC2", "FC4", "FC6", "FT8", "FT10",
    "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8",
    "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8",
    "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8",
    "PO7", "PO3", "POz", "PO4", "PO8", "O1", "Oz", "O2", "Iz",
    "M1", "M2",
)


def _split_label(label: str) -> tuple[str, str]:
    i = len(label)
    while i > 0 and (label[i - 1].isdigit() or label[i - 1] == "z"):
        i -= 1
    return label[:i], label[i:]


def _standard_position(label: str) -> tuple[float, float, float]:
    if label in MASTOIDS:
        a, b = -30.0, (-110.0 if label == "M1" else 110.0)
    else:
        row, col = _split_label(label)
        a = _ROW_ANGLE[row]
        if col == "z":
            b = 0.0
        else:
            k = int(col)
            b = 18.0 * ((k + 1) // 2)
            if k % 2 == 1:
                b = -b
    a, b = math.radians(a), math.radians(b)
    return (math.sin(b) * math.cos(a), math.sin(a), math.cos(b) * math.cos(a))


def hemisphere_of_label(label: str) -> str:
    if label == "M1":
        return "left"
    if label == "M2":
        return "right"
    _, col = _split_label(label)
    if col == "z":
        return "midline"
    return "left" if int(col) % 2 == 1 else "right"


@dataclass(frozen=True)
class ElectrodeLayout:
    labels: tuple[str, ...]
    positions: np.ndarray
    hemisphere: tuple[str, ...]
    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "hemisphere", tuple(self.hemisphere))
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        pos = np.array(self.positions, dtype=float)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if len(set(labels)) != len(labels):
            raise ValueError("electrode labels must be unique")
        if pos.shape != (len(labels), 3):
            raise ValueError(f"positions must be {len(labels)} x 3, got {pos.shape}")
        norms = np.linalg.norm(pos, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("electrode positions must lie on the unit sphere")
        if len(self.hemisphere) != len(labels):
            raise ValueError("one hemisphere tag per channel required")
        index = {lab: i for i, lab in enumerate(labels)}
        for left, right in self.pairs:
            if left not in index or right not in index:
                raise ValueError(f"pair ({left}, {right}) references unknown channel")
            if (self.hemisphere[index[left]], self.hemisphere[index[right]]) != ("left", "right"):
                raise ValueError(f"pair ({left}, {right}) is not a left/right pair")
        missing = [c for c in REQUIRED_CHANNELS if c not in index]
        if missing:
            raise ValueError(f"layout lacks analysis channels {missing}")

    @property
    def n_channels(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown channel {label!r}") from None

    def indices(self, labels: Iterable[str]) -> list[int]:
        return [self.index(lab) for lab in labels]

    def subset(self, labels: Sequence[str]) -> "ElectrodeLayout":
        """Layout restricted to ``labels`` (in that order); pairs kept where both members survive."""
        idx = self.indices(labels)
        keep = set(labels)
        pairs = [p for p in self.pairs if p[0] in keep and p[1] in keep]
        return ElectrodeLayout(tuple(labels), self.positions[idx],
                               tuple(self.hemisphere[i] for i in idx), pairs)

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "positions": self.positions.tolist(),
            "hemisphere": list(self.hemisphere),
            "pairs": [list(p) for p in self.pairs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ElectrodeLayout":
        return cls(d["labels"], np.asarray(d["positions"], dtype=float),
                   d["hemisphere"], [tuple(p) for p in d["pairs"]])


def standard_layout() -> ElectrodeLayout:
    """The bundled 64-channel 10-20 montage (62 scalp sites plus both mastoids)."""
    labels = STANDARD_64
    positions = np.array([_standard_position(lab) for lab in labels])
    positions /= np.linalg.norm(positions, axis=1, keepdims=True)
    hemis = [hemisphere_of_label(lab) for lab in labels]
    pairs = []
    for lab in labels:
        if lab == "M1":
            pairs.append(("M1", "M2"))
            continue
        if lab in MASTOIDS:
            continue
        row, col = _split_label(lab)
        if col != "z" and int(col) % 2 == 1:
            mate = f"{row}{int(col) + 1}"
            if mate in labels:
                pairs.append((lab, mate))
    return ElectrodeLayout(labels, positions, hemis, pairs)


def posterior_labels(layout: ElectrodeLayout) -> list[str]:
    """Parietal, parieto-occipital and occipital channels (including Iz)."""
    out = []
    for lab in layout.labels:
        if lab in MASTOIDS:
            continue
        row, _ = _split_label(lab)
        if row in ("P", "PO", "O", "I"):
            out.append(lab)
    return out


# --------------------------------------------------------------------------
# Events and containers

@dataclass(frozen=True)
class Event:
    sample_index: int
    code: int
    condition: Condition
    bin_index: int
    angle_deg: float
    hit: bool = True
    rt_ms: float | None = None

    def __post_init__(self):
        if not 0 <= self.bin_index < N_BINS:
            raise ValueError(f"bin_index {self.bin_index} outside 0..{N_BINS - 1}")
        if abs(angle_diff_deg(self.angle_deg, bin_center(self.bin_index))) > MAX_JITTER_DEG + 1e-9:
            raise ValueError(
                f"angle {self.angle_deg} is more than {MAX_JITTER_DEG} deg from bin "
                f"{self.bin_index} center")


def event_code(condition: Condition, bin_index: int) -> int:
    return 10 * (list(Condition).index(condition) + 1) + bin_index + 1


@dataclass(frozen=True)
class RawRecording:
    data: np.ndarray
    rate_hz: float
    layout: ElectrodeLayout
    events: tuple[Event, ...] = ()
    bad_channels: frozenset[str] = frozenset()
    stage: str = "raw"

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("data must be channels x samples")
        if data.shape[0] != self.layout.n_channels:
            raise ValueError(
                f"data has {data.shape[0]} rows but layout has {self.layout.n_channels} channels")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        events = tuple(self.events)
        if any(a.sample_index > b.sample_index for a, b in zip(events, events[1:])):
            raise ValueError("events must be sorted by sample_index")
        for ev in events:
            if not 0 <= ev.sample_index < data.shape[1]:
                raise ValueError(f"event at sample {ev.sample_index} outside recording")
        object.__setattr__(self, "events", events)
        bad = frozenset(self.bad_channels)
        unknown = bad - set(self.layout.labels)
        if unknown:
            raise ValueError(f"unknown bad channels {sorted(unknown)}")
        object.__setattr__(self, "bad_channels", bad)
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def replace(self, **changes) -> "RawRecording":
        return replace(self, **changes)


@dataclass(frozen=True)
class EpochSet:
    """Trials x channels x samples, with one metadata Event per trial."""

    data: np.ndarray
    rate_hz: float
    t0_offset_s: float
    meta: tuple[Event, ...]
    layout: ElectrodeLayout
    bad_channels: frozenset[str] = frozenset()

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError("data must be trials x channels x samples")
        if data.shape[1] != self.layout.n_channels:
            raise ValueError("channel axis does not match layout")
        meta = tuple(self.meta)
        if len(meta) != data.shape[0]:
            raise ValueError(f"{len(meta)} metadata rows for {data.shape[0]} trials")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "meta", meta)
        object.__setattr__(self, "bad_channels", frozenset(self.bad_channels))

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.t0_offset_s + np.arange(self.n_samples) / self.rate_hz

    @property
    def bins(self) -> np.ndarray:
        return np.array([ev.bin_index for ev in self.meta], dtype=int)

    @property
    def conditions(self) -> list[Condition]:
        return [ev.condition for ev in self.meta]

    def select(self, trial_idx) -> "EpochSet":
        trial_idx = np.asarray(trial_idx, dtype=int)
        return replace(self, data=self.data[trial_idx],
                       meta=tuple(self.meta[i] for i in trial_idx))

    def by_condition(self, condition: Condition) -> "EpochSet":
        return self.select([i for i, ev in enumerate(self.meta) if ev.condition == condition])

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class BandPowerSet(EpochSet):
    """Instantaneous band power (uV^2), same layout as the epochs it came from."""

    def __post_init__(self):
        super().__post_init__()
        if np.any(self.data < 0):
            raise ValueError("band power must be non-negative")


# --------------------------------------------------------------------------
# Dataset directory IO

def _format_float(x: float) -> str:
    return repr(float(x))


def write_dataset(recording: RawRecording, path, extra_meta: dict | None = None) -> None:
    """Write ``recording`` as a dataset directory at ``path``."""
    path = Path(path)
    data = recording.data
    finite = np.isfinite(data)
    if not finite.all():
        ch, idx = np.argwhere(~finite)[0]
        raise ValueError(
            f"non-finite sample in channel {recording.layout.labels[ch]} at index {idx}")
    path.mkdir(parents=True, exist_ok=True)
    meta = dataset_meta(recording.layout, recording.rate_hz, data.shape[1],
                        recording.bad_channels, recording.stage, extra_meta)
    _write_file(path / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    try:
        data.astype("<f4").tofile(path / "data.f32le")
    except OSError as exc:
        raise OSError(f"failed writing {path / 'data.f32le'}: {exc}") from exc
    write_events(recording.events, path / "events.csv")


def dataset_meta(layout: ElectrodeLayout, rate_hz: float, n_samples: int,
                 bad_channels=(), stage: str = "raw", extra: dict | None = None) -> dict:
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "rate_hz": float(rate_hz),
        "n_channels": layout.n_channels,
        "n_samples": int(n_samples),
        "layout": layout.to_dict(),
        "bad_channels": sorted(bad_channels),
        "stage": stage,
    }
    if extra:
        meta.update(extra)
    return meta


def _write_file(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def write_events(events: Sequence[Event], path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVENTS_HEADER)
            for ev in events:
                w.writerow([
                    ev.sample_index, ev.code, ev.condition.value, ev.bin_index,
                    _format_float(ev.angle_deg), int(ev.hit),
                    "" if ev.rt_ms is None else _format_float(ev.rt_ms),
                ])
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def read_events(path) -> list[Event]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != EVENTS_HEADER:
            raise DatasetError(f"{path}: header must be {','.join(EVENTS_HEADER)}")
        events = []
        for row in reader:
            events.append(Event(
                sample_index=int(row["sample"]),
                code=int(row["code"]),
                condition=Condition.parse(row["condition"]),
                bin_index=int(row["bin"]),
                angle_deg=float(row["angle_deg"]),
                hit=row["hit"].strip().lower() in ("1", "true"),
                rt_ms=float(row["rt_ms"]) if row["rt_ms"].strip() else None,
            ))
    return events


def read_meta(path) -> dict:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise MissingFileError(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format") != FORMAT_NAME or meta.get("version") != FORMAT_VERSION:
        raise UnknownVersionError(
            f"{meta_path}: unsupported format {meta.get('format')!r} version {meta.get('version')!r}")
    return meta


def read_dataset(path) -> RawRecording:
    """Load a dataset directory; events are re-sorted (with a warning) if needed."""
    path = Path(path)
    meta = read_meta(path)
    data_path = path / "data.f32le"
    if not data_path.exists():
        raise MissingFileError(f"missing {data_path}")
    n_ch, n_samp = int(meta["n_channels"]), int(meta["n_samples"])
    n_bytes = data_path.stat().st_size
    if n_bytes != n_ch * n_samp * 4:
        raise SizeMismatchError(
            f"{data_path}: {n_bytes} bytes, expected {n_ch} x {n_samp} x 4 = {n_ch * n_samp * 4}")
    data = np.fromfile(data_path, dtype="<f4").reshape(n_ch, n_samp).astype(np.float64)
    events = read_events(path / "events.csv")
    keys = [ev.sample_index for ev in events]
    if keys != sorted(keys):
        warnings.warn(f"{path / 'events.csv'}: events not sorted; re-sorting", stacklevel=2)
        events = sorted(events, key=lambda ev: ev.sample_index)
    layout = ElectrodeLayout.from_dict(meta["layout"])
    return RawRecording(data, float(meta["rate_hz"]), layout, tuple(events),
                        frozenset(meta.get("bad_channels", [])), meta.get("stage", "raw"))


def dataset_digest(path) -> str:
    """SHA-256 over the three dataset files, in a fixed order."""
    import hashlib

    h = hashlib.sha256()
    for name in ("meta.json", "data.f32le", "events.csv"):
        with open(Path(path) / name, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()
