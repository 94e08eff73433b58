"""Cleaning chain from continuous recordings to artifact-free epochs and alpha power.

Continuous stage (``clean_continuous``): event-lag correction, decimation,
average-mastoid re-reference, 0.1-30 Hz Butterworth filtering, adaptive
ocular regression, bad-channel detection and interpolation.

Epoch stage: ``epoch`` (window, baseline, failed strikes dropped),
``reject_epochs`` (amplitude threshold), ``alpha_power`` (band-pass,
Hilbert, squared magnitude) and ``equalize_bins``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numba import njit
from scipy import signal

from .core import (
    EOG_CHANNELS, MASTOIDS, N_BINS, BandPowerSet, Condition, EpochSet, Event,
    RawRecording,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    lag_ms: float = 25.56
    target_rate_hz: float = 250.0
    hp_hz: float = 0.1
    lp_hz: float = 30.0
    epoch_window_s: tuple[float, float] = (-0.5, 2.0)
    baseline_window_s: tuple[float, float] = (-0.2, 0.0)
    reject_uv: float = 150.0
    flatline_s: float = 5.0
    sd_criterion: float = 4.0
    corr_criterion: float = 0.85
    alpha_band_hz: tuple[float, float] = (8.0, 12.0)
    butter_order: int = 3
    clean_filter_order: int = 3
    alpha_pad_samples: int = 125
    reference_labels: tuple[str, ...] = MASTOIDS
    eog_labels: tuple[str, ...] = EOG_CHANNELS
    rls_order: int = 3
    rls_forgetting: float = 0.9999
    interpolate_neighbors: int = 4

    def __post_init__(self):
        for name in ("epoch_window_s", "baseline_window_s", "alpha_band_hz",
                     "reference_labels", "eog_labels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        e0, e1 = self.epoch_window_s
        b0, b1 = self.baseline_window_s
        if not e0 < e1:
            raise ConfigError(f"epoch window {self.epoch_window_s} is not ordered")
        if not (b0 < b1 and e0 <= b0 and b1 <= e1):
            raise ConfigError(f"baseline window {self.baseline_window_s} must be ordered and inside the epoch")
        lo, hi = self.alpha_band_hz
        if not 0 < lo < hi < self.target_rate_hz / 2:
            raise ConfigError(f"alpha band {self.alpha_band_hz} must satisfy 0 < low < high < rate/2")
        if not 0 < self.hp_hz < self.lp_hz < self.target_rate_hz / 2:
            raise ConfigError("cleaning band must satisfy 0 < hp < lp < rate/2")
        if self.reject_uv <= 0:
            raise ConfigError("reject_uv must be positive")
        if not 0.9 < self.rls_forgetting <= 1.0:
            raise ConfigError(f"RLS forgetting factor {self.rls_forgetting} outside (0.9, 1]")
        if self.butter_order < 1 or self.rls_order < 1:
            raise ConfigError("filter orders must be >= 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown preprocess fields {sorted(unknown)}")
        return cls(**d)


FLAG_FLATLINE = "flatline"
FLAG_AMPLITUDE = "amplitude_sd"
FLAG_CORRELATION = "low_correlation"


@dataclass(frozen=True)
class ChannelReport:
    """Per-channel artifact flags. ``interpolated`` lists channels that were replaced."""

    flags: dict = field(default_factory=dict)
    interpolated: frozenset = frozenset()
    correlation: dict = field(default_factory=dict)

    def __post_init__(self):
        stray = set(self.interpolated) - set(self.flagged)
        if stray:
            raise ValueError(f"interpolated channels without a flag: {sorted(stray)}")

    @property
    def flagged(self) -> list[str]:
        return [lab for lab, f in self.flags.items() if f]

    def to_dict(self) -> dict:
        return {
            "channels": {
                lab: {
                    FLAG_FLATLINE: FLAG_FLATLINE in f,
                    FLAG_AMPLITUDE: FLAG_AMPLITUDE in f,
                    FLAG_CORRELATION: FLAG_CORRELATION in f,
                    "interpolated": lab in self.interpolated,
                }
                for lab, f in self.flags.items()
            },
            "flagged": self.flagged,
        }


# --------------------------------------------------------------------------
# Events, rate and reference

def correct_event_lag(events, lag_ms: float, rate_hz: float, n_samples: int | None = None) -> list[Event]:
    """Shift every event by ``round(lag_ms / 1000 * rate_hz)`` samples."""
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    shift = int(round(lag_ms / 1000.0 * rate_hz))
    out, dropped = [], 0
    for ev in events:
        s = ev.sample_index + shift
        if n_samples is not None and not 0 <= s < n_samples:
            dropped += 1
            continue
        out.append(replace(ev, sample_index=s))
    if dropped:
        warnings.warn(f"{dropped} events shifted beyond the recording were dropped", stacklevel=2)
    return out


def decimation_factor(rate_hz: float, target_rate_hz: float) -> int:
    q = rate_hz / target_rate_hz
    if q < 1 or abs(q - round(q)) > 1e-9:
        raise ValueError(
            f"cannot decimate {rate_hz} Hz to {target_rate_hz} Hz: factor {q} is not an integer >= 1")
    return int(round(q))


def downsample(rec: RawRecording, target_rate_hz: float) -> RawRecording:
    """Anti-alias (zero-phase FIR) then keep every q-th sample; event indices floor-divided."""
    q = decimation_factor(rec.rate_hz, target_rate_hz)
    if q == 1:
        return rec
    data = signal.decimate(rec.data, q, ftype="fir", zero_phase=True, axis=-1)
    n_new = data.shape[1]
    events = tuple(replace(ev, sample_index=min(ev.sample_index // q, n_new - 1)) for ev in rec.events)
    return rec.replace(data=data, rate_hz=rec.rate_hz / q, events=events)


def rereference(rec: RawRecording, reference_labels) -> RawRecording:
    idx = rec.layout.indices(reference_labels)
    ref = rec.data[idx].mean(axis=0)
    return rec.replace(data=rec.data - ref)


# --------------------------------------------------------------------------
# Butterworth filtering

def design_butterworth(order: int, cutoff, btype: str, rate_hz: float) -> np.ndarray:
    """Digital Butterworth in second-order sections (bilinear transform, pre-warped edges)."""
    cutoff = np.atleast_1d(np.asarray(cutoff, dtype=float))
    nyq = rate_hz / 2
    if np.any(cutoff <= 0) or np.any(cutoff >= nyq) or np.any(np.diff(cutoff) <= 0):
        raise ValueError(f"cutoff {cutoff.tolist()} must be increasing and inside (0, {nyq})")
    sos = signal.butter(order, cutoff if cutoff.size > 1 else cutoff[0], btype=btype,
                        fs=rate_hz, output="sos")
    _, poles, _ = signal.sos2zpk(sos)
    if np.any(np.abs(poles) >= 1.0):
        raise ValueError(f"unstable Butterworth design: max pole magnitude {np.abs(poles).max():.6f}")
    return sos


def _apply_sos(sos, x, zero_phase: bool, pad: int | None):
    x = np.asarray(x, dtype=float)
    if pad:
        if x.shape[-1] <= pad:
            raise ValueError(f"signal of {x.shape[-1]} samples too short for {pad}-sample padding")
        widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
        xp = np.pad(x, widths, mode="reflect")
        y = signal.sosfiltfilt(sos, xp, axis=-1, padtype=None) if zero_phase else signal.sosfilt(sos, xp, axis=-1)
        return y[..., pad:-pad]
    if zero_phase:
        return signal.sosfiltfilt(sos, x, axis=-1)
    return signal.sosfilt(sos, x, axis=-1)


def butterworth_bandpass(x, low_hz: float, high_hz: float, order: int, rate_hz: float,
                         zero_phase: bool = True, pad: int | None = None) -> np.ndarray:
    """Band-pass along the last axis; forward-backward when ``zero_phase``.

    With ``pad`` the input is reflection-padded by that many samples per side
    and trimmed afterwards.
    """
    if not 0 < low_hz < high_hz < rate_hz / 2:
        raise ValueError(f"band ({low_hz}, {high_hz}) must satisfy 0 < low < high < {rate_hz / 2}")
    sos = design_butterworth(order, (low_hz, high_hz), "bandpass", rate_hz)
    return _apply_sos(sos, x, zero_phase, pad)


def butterworth_filter(x, cutoff_hz: float, btype: str, order: int, rate_hz: float,
                       zero_phase: bool = True) -> np.ndarray:
    sos = design_butterworth(order, cutoff_hz, btype, rate_hz)
    return _apply_sos(sos, x, zero_phase, None)


def filter_recording(rec: RawRecording, cfg: PreprocessConfig) -> RawRecording:
    """0.1 Hz high-pass then 30 Hz low-pass, both zero-phase."""
    x = butterworth_filter(rec.data, cfg.hp_hz, "highpass", cfg.clean_filter_order, rec.rate_hz)
    x = butterworth_filter(x, cfg.lp_hz, "lowpass", cfg.clean_filter_order, rec.rate_hz)
    return rec.replace(data=x)


# --------------------------------------------------------------------------
# Hilbert power

def analytic_power(x) -> np.ndarray:
    """Squared magnitude of the analytic signal along the last axis."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 8:
        raise ValueError(f"epoch of {x.shape[-1]} samples is shorter than 8")
    return np.abs(signal.hilbert(x, axis=-1)) ** 2


def hilbert_power(ep: EpochSet) -> BandPowerSet:
    return BandPowerSet(analytic_power(ep.data), ep.rate_hz, ep.t0_offset_s, ep.meta,
                        ep.layout, ep.bad_channels)


def alpha_power(ep: EpochSet, cfg: PreprocessConfig, channels=None) -> BandPowerSet:
    """Alpha band-pass (padded, zero-phase), Hilbert transform and squaring.

    The Hilbert transform runs on the padded filtered segment before trimming.
    ``channels`` restricts the output to a subset of labels.
    """
    if channels is not None:
        idx = ep.layout.indices(channels)
        layout = ep.layout.subset(list(channels))
        data = ep.data[:, idx, :]
    else:
        layout, data = ep.layout, ep.data
    lo, hi = cfg.alpha_band_hz
    sos = design_butterworth(cfg.butter_order, (lo, hi), "bandpass", ep.rate_hz)
    pad = cfg.alpha_pad_samples
    out = np.empty(data.shape)
    # trial batches bound the temporary padded copies
    for start in range(0, data.shape[0], 256):
        chunk = data[start:start + 256]
        xp = np.pad(chunk, [(0, 0), (0, 0), (pad, pad)], mode="reflect") if pad else chunk
        y = signal.sosfiltfilt(sos, xp, axis=-1, padtype=None if pad else "odd")
        p = analytic_power(y)
        out[start:start + 256] = p[..., pad:p.shape[-1] - pad] if pad else p
    bad = frozenset(b for b in ep.bad_channels if b in layout.labels)
    return BandPowerSet(out, ep.rate_hz, ep.t0_offset_s, ep.meta, layout, bad)


# --------------------------------------------------------------------------
# Bad channels

def _longest_flat_run(x: np.ndarray, tol: float = 1e-8) -> int:
    """Length in samples of the longest constant stretch (|diff| < tol)."""
    small = np.abs(np.diff(x)) < tol
    if not small.any():
        return 1
    padded = np.concatenate([[False], small, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    runs = edges[1::2] - edges[0::2]
    return int(runs.max()) + 1


def _prediction_correlation(data: np.ndarray, usable: np.ndarray, max_samples: int = 50000) -> np.ndarray:
    """Pearson r between each channel and its least-squares prediction from the usable others."""
    n_ch, n = data.shape
    step = max(1, n // max_samples)
    x = data[:, ::step]
    x = x - x.mean(axis=1, keepdims=True)
    cov = x @ x.T / x.shape[1]
    r = np.zeros(n_ch)
    for i in range(n_ch):
        others = np.flatnonzero(usable & (np.arange(n_ch) != i))
        if cov[i, i] <= 0 or others.size == 0:
            continue
        beta = np.linalg.lstsq(cov[np.ix_(others, others)], cov[others, i], rcond=None)[0]
        explained = float(cov[i, others] @ beta)
        r[i] = np.sqrt(np.clip(explained / cov[i, i], 0.0, 1.0))
    return r


def detect_bad_channels(rec: RawRecording, cfg: PreprocessConfig) -> ChannelReport:
    n_ch = rec.layout.n_channels
    if n_ch < 8:
        raise ValueError("bad-channel detection needs at least 8 channels")
    flags = {lab: set() for lab in rec.layout.labels}
    min_run = cfg.flatline_s * rec.rate_hz
    for i, lab in enumerate(rec.layout.labels):
        if _longest_flat_run(rec.data[i]) > min_run:
            flags[lab].add(FLAG_FLATLINE)
    sd = rec.data.std(axis=1)
    med = np.median(sd)
    for i, lab in enumerate(rec.layout.labels):
        if sd[i] > cfg.sd_criterion * med:
            flags[lab].add(FLAG_AMPLITUDE)
    usable = np.array([not flags[lab] for lab in rec.layout.labels])
    r = _prediction_correlation(rec.data, usable)
    for i, lab in enumerate(rec.layout.labels):
        if FLAG_FLATLINE in flags[lab]:
            continue
        if r[i] < cfg.corr_criterion:
            flags[lab].add(FLAG_CORRELATION)
    return ChannelReport({lab: frozenset(f) for lab, f in flags.items()},
                         correlation={lab: float(r[i]) for i, lab in enumerate(rec.layout.labels)})


def great_circle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.arccos(np.clip(a @ b.T, -1.0, 1.0))


def interpolate_channels(rec: RawRecording, report: ChannelReport, k: int = 4,
                         exclude=MASTOIDS) -> RawRecording:
    """Replace flagged channels by inverse-great-circle-distance weighted k nearest good channels."""
    flagged = report.flagged
    if not flagged:
        return rec
    if len(flagged) >= 0.25 * rec.layout.n_channels:
        raise ValueError(
            f"{len(flagged)} of {rec.layout.n_channels} channels flagged (>= 25%); dataset unusable")
    labels = rec.layout.labels
    bad_idx = rec.layout.indices(flagged)
    good_idx = [i for i, lab in enumerate(labels) if lab not in flagged and lab not in exclude]
    pos = rec.layout.positions
    dist = great_circle(pos[bad_idx], pos[good_idx])
    data = np.array(rec.data)
    for row, b in enumerate(bad_idx):
        order = np.argsort(dist[row], kind="stable")[:k]
        d = dist[row, order]
        if d[0] < 1e-12:
            data[b] = rec.data[good_idx[order[0]]]
            continue
        w = 1.0 / d
        w /= w.sum()
        data[b] = w @ rec.data[[good_idx[j] for j in order]]
    return rec.replace(data=data, bad_channels=rec.bad_channels | frozenset(flagged))


# --------------------------------------------------------------------------
# Ocular regression

@njit(cache=True)
def _rls_filter(refs, targets, order, lam, p0):
    n_ref, n = refs.shape
    n_tgt = targets.shape[0]
    dim = n_ref * order
    P = np.eye(dim) * p0
    W = np.zeros((n_tgt, dim))
    x = np.zeros(dim)
    out = np.empty_like(targets)
    px = np.zeros(dim)
    for t in range(n):
        for r in range(n_ref):
            for k in range(order):
                x[r * order + k] = refs[r, t - k] if t - k >= 0 else 0.0
        for a in range(dim):
            s = 0.0
            for b in range(dim):
                s += P[a, b] * x[b]
            px[a] = s
        denom = lam
        for a in range(dim):
            denom += x[a] * px[a]
        for c in range(n_tgt):
            e = targets[c, t]
            for a in range(dim):
                e -= W[c, a] * x[a]
            out[c, t] = e
            for a in range(dim):
                W[c, a] += px[a] / denom * e
        for a in range(dim):
            for b in range(dim):
                P[a, b] = (P[a, b] - px[a] * px[b] / denom) / lam
    return out


def remove_ocular(rec: RawRecording, eog_labels=EOG_CHANNELS, order: int = 3,
                  forgetting: float = 0.9999) -> RawRecording:
    """Adaptive (RLS) regression of the EOG references out of every other channel."""
    if not 0.9 < forgetting <= 1.0:
        raise ConfigError(f"RLS forgetting factor {forgetting} outside (0.9, 1]")
    eog_idx = rec.layout.indices(eog_labels)
    tgt_idx = [i for i in range(rec.layout.n_channels) if i not in eog_idx]
    refs = np.ascontiguousarray(rec.data[eog_idx])
    power = float(np.mean(refs ** 2))
    if power == 0.0:
        return rec
    cleaned = _rls_filter(refs, np.ascontiguousarray(rec.data[tgt_idx]), order, forgetting, 100.0 / power)
    data = np.array(rec.data)
    data[tgt_idx] = cleaned
    return rec.replace(data=data)


# --------------------------------------------------------------------------
# Continuous chain

def clean_continuous(rec: RawRecording, cfg: PreprocessConfig, ocular: bool = True):
    """Run the continuous cleaning chain. Returns the cleaned recording and a report dict."""
    report = {"input_rate_hz": rec.rate_hz, "n_events_in": len(rec.events)}
    if rec.stage == "raw":
        events = correct_event_lag(rec.events, cfg.lag_ms, rec.rate_hz, rec.n_samples)
        report["lag_shift_samples"] = int(round(cfg.lag_ms / 1000.0 * rec.rate_hz))
        rec = rec.replace(events=tuple(events))
    rec = downsample(rec, cfg.target_rate_hz)
    rec = rereference(rec, cfg.reference_labels)
    rec = filter_recording(rec, cfg)
    if ocular:
        rec = remove_ocular(rec, cfg.eog_labels, cfg.rls_order, cfg.rls_forgetting)
    chan = detect_bad_channels(rec, cfg)
    rec = interpolate_channels(rec, chan, k=cfg.interpolate_neighbors)
    chan = replace(chan, interpolated=frozenset(chan.flagged))
    report["channels"] = chan.to_dict()
    report["n_bad_channels"] = len(chan.flagged)
    report["rate_hz"] = rec.rate_hz
    return rec.replace(stage="cleaned"), report


# --------------------------------------------------------------------------
# Epochs

def epoch_samples(cfg: PreprocessConfig, rate_hz: float) -> tuple[int, int]:
    """(offset of first sample relative to onset, number of samples)."""
    e0, e1 = cfg.epoch_window_s
    return int(round(e0 * rate_hz)), int(round((e1 - e0) * rate_hz))


def epoch_with_counts(rec: RawRecording, cfg: PreprocessConfig):
    if not rec.events:
        raise ValueError("recording has no events")
    off, n = epoch_samples(cfg, rec.rate_hz)
    b0 = int(round((cfg.baseline_window_s[0] - cfg.epoch_window_s[0]) * rec.rate_hz))
    b1 = int(round((cfg.baseline_window_s[1] - cfg.epoch_window_s[0]) * rec.rate_hz))
    kept, starts = [], []
    n_miss = n_edge = 0
    for ev in rec.events:
        if not ev.hit:
            n_miss += 1
            continue
        start = ev.sample_index + off
        if start < 0 or start + n > rec.n_samples:
            n_edge += 1
            continue
        kept.append(ev)
        starts.append(start)
    if n_edge:
        warnings.warn(f"{n_edge} trials too close to the recording edge were dropped", stacklevel=2)
    data = np.empty((len(kept), rec.layout.n_channels, n))
    for i, s in enumerate(starts):
        data[i] = rec.data[:, s:s + n]
    data -= data[:, :, b0:b1].mean(axis=2, keepdims=True)
    ep = EpochSet(data, rec.rate_hz, off / rec.rate_hz, tuple(kept), rec.layout, rec.bad_channels)
    return ep, {"n_missed": n_miss, "n_edge": n_edge, "n_epochs": len(kept)}


def epoch(rec: RawRecording, cfg: PreprocessConfig) -> EpochSet:
    """Cut [onset + start, onset + end) windows, subtract the baseline mean, drop failed strikes."""
    return epoch_with_counts(rec, cfg)[0]


def reject_epochs(ep: EpochSet, threshold_uv: float, exclude=EOG_CHANNELS + MASTOIDS,
                  return_report: bool = False):
    """Drop epochs where any retained channel leaves +/- ``threshold_uv``.

    Retained channels are those not marked bad and not in ``exclude``.
    """
    if threshold_uv <= 0:
        raise ValueError("threshold must be positive")
    keep_ch = [i for i, lab in enumerate(ep.layout.labels)
               if lab not in ep.bad_channels and lab not in exclude]
    peak = np.abs(ep.data[:, keep_ch, :]).max(axis=(1, 2)) if ep.n_trials else np.zeros(0)
    keep = np.flatnonzero(peak <= threshold_uv)
    if ep.n_trials and keep.size == 0:
        raise ValueError(f"all {ep.n_trials} epochs exceed +/- {threshold_uv} uV")
    out = ep.select(keep)
    if not return_report:
        return out
    conds = ep.conditions
    kept = set(keep.tolist())
    fractions = {}
    for cond in Condition:
        idx = [i for i, c in enumerate(conds) if c == cond]
        if idx:
            fractions[cond.value] = sum(i not in kept for i in idx) / len(idx)
    return out, fractions


def equalize_bins(ep: EpochSet, seed: int) -> EpochSet:
    """Within each condition, subsample every bin to n - 1 trials (n = smallest bin count)."""
    rng = np.random.default_rng(seed)
    bins = ep.bins
    conds = ep.conditions
    selected = []
    for cond in Condition:
        in_cond = np.array([c == cond for c in conds])
        if not in_cond.any():
            continue
        members = [np.flatnonzero(in_cond & (bins == b)) for b in range(N_BINS)]
        for b, m in enumerate(members):
            if m.size < 2:
                raise ValueError(f"{cond.value} bin {b} has {m.size} trials; at least 2 required")
        n_keep = min(m.size for m in members) - 1
        for m in members:
            selected.append(np.sort(rng.choice(m, size=n_keep, replace=False)))
    return ep.select(np.sort(np.concatenate(selected)))
