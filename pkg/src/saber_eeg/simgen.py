"""Forward-model simulator and trial-plan generator.

Each trial adds a location-tuned 10 Hz oscillation whose electrode amplitudes
are ``W_true @ c(theta)`` (``c`` being the six cos^7 channel responses), scaled
by a condition-specific modulation profile and given a random phase. On top
come spatially smooth pink noise and background alpha (independent sources
mixed through a Gaussian kernel over electrode distance), white sensor noise,
and for static conditions an optional contralateral negativity near 200 ms.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (
    BIN_CENTERS_DEG, MAX_JITTER_DEG, N_BINS, Condition, ElectrodeLayout, EpochSet, Event,
    RawRecording, dataset_meta, event_code, posterior_labels, write_events,
)
from .erp import Hemifield, hemifield_of
from .iem import basis_matrix

TRUTH_SCHEMA_VERSION = 1

COUNTERBALANCE_ORDERS = (
    (Condition.STATIC_SINGLE, Condition.STATIC_MULTIPLE, Condition.DYNAMIC_SINGLE, Condition.DYNAMIC_MULTIPLE),
    (Condition.STATIC_MULTIPLE, Condition.STATIC_SINGLE, Condition.DYNAMIC_MULTIPLE, Condition.DYNAMIC_SINGLE),
    (Condition.DYNAMIC_SINGLE, Condition.DYNAMIC_MULTIPLE, Condition.STATIC_SINGLE, Condition.STATIC_MULTIPLE),
    (Condition.DYNAMIC_MULTIPLE, Condition.DYNAMIC_SINGLE, Condition.STATIC_MULTIPLE, Condition.STATIC_SINGLE),
)


class PlanError(ValueError):
    pass


# --------------------------------------------------------------------------
# Trial plans

@dataclass(frozen=True)
class PlanEntry:
    condition: Condition
    block: int
    bin_index: int
    angle_deg: float
    onset_s: float


@dataclass(frozen=True)
class TrialPlan:
    entries: tuple
    condition_order: tuple
    blocks: int = 6
    trials_per_block: int = 102
    isi_s: float = 2.5
    lead_s: float = 1.0
    tail_s: float = 1.0
    seed: int = 0

    @property
    def duration_s(self) -> float:
        n_blocks = self.blocks * len(self.condition_order)
        return n_blocks * self.block_duration_s

    @property
    def block_duration_s(self) -> float:
        return self.lead_s + self.trials_per_block * self.isi_s + self.tail_s

    def block_entries(self):
        """Yield (block ordinal, block start time, entries) in session order."""
        n_per_block = self.trials_per_block
        for k in range(len(self.entries) // n_per_block):
            yield k, k * self.block_duration_s, self.entries[k * n_per_block:(k + 1) * n_per_block]

    def summary(self) -> dict:
        out = {}
        for cond in self.condition_order:
            counts = [0] * N_BINS
            for e in self.entries:
                if e.condition == cond:
                    counts[e.bin_index] += 1
            out[cond.value] = {"trials": sum(counts), "per_bin": counts}
        return out


def _bin_sequence(n: int, n_bins: int, rng) -> list[int]:
    """Random sequence with equal (+-1) bin counts and no immediate repeats."""
    if n > 1 and n_bins < 2:
        raise PlanError(f"{n} trials cannot avoid repeats with {n_bins} bin(s)")
    base, extra = divmod(n, n_bins)
    counts = np.full(n_bins, base)
    counts[rng.choice(n_bins, size=extra, replace=False)] += 1
    counts = counts.tolist()
    seq, prev = [], -1
    for remaining in range(n, 0, -1):
        after = remaining - 1
        candidates = []
        for b in range(n_bins):
            if b == prev or counts[b] == 0:
                continue
            # what remains must be arrangeable with a first element != b
            others = max((counts[o] for o in range(n_bins) if o != b), default=0)
            if max(others, counts[b] - 1) <= (after + 1) // 2 and counts[b] - 1 <= after // 2:
                candidates.append(b)
        if not candidates:
            raise PlanError("bin constraints unsatisfiable")
        # draw a candidate with probability proportional to its remaining count
        u = rng.random() * sum(counts[c] for c in candidates)
        for b in candidates:
            u -= counts[b]
            if u < 0:
                break
        seq.append(b)
        counts[b] -= 1
        prev = b
    return seq


def generate_trial_plan(seed: int, blocks: int = 6, trials_per_block: int = 102, isi_s: float = 2.5,
                        order_index: int | None = None, conditions=None, n_bins: int = N_BINS,
                        lead_s: float = 1.0, tail_s: float = 1.0) -> TrialPlan:
    """Pseudo-random session schedule: no repeated bin on consecutive trials, balanced bins per block."""
    if n_bins != N_BINS:
        # only validation of the sequencing constraints is meaningful for other bin counts
        _bin_sequence(trials_per_block, n_bins, np.random.default_rng(seed))
        raise PlanError(f"plans use {N_BINS} location bins")
    if blocks < 1 or trials_per_block < 1:
        raise PlanError("blocks and trials_per_block must be positive")
    if isi_s < 2.5:
        raise PlanError("isi_s must cover the 2.5 s epoch")
    rng = np.random.default_rng([seed, 100])
    if order_index is None:
        order_index = int(rng.integers(len(COUNTERBALANCE_ORDERS)))
    order = COUNTERBALANCE_ORDERS[order_index]
    if conditions is not None:
        keep = {Condition.parse(c) if isinstance(c, str) else c for c in conditions}
        order = tuple(c for c in order if c in keep)
    entries = []
    block_dur = lead_s + trials_per_block * isi_s + tail_s
    k = 0
    for cond in order:
        for blk in range(blocks):
            start = k * block_dur + lead_s
            bins = _bin_sequence(trials_per_block, N_BINS, rng)
            jitter = rng.uniform(-MAX_JITTER_DEG, MAX_JITTER_DEG, size=trials_per_block)
            for i, (b, j) in enumerate(zip(bins, jitter)):
                angle = float(np.mod(BIN_CENTERS_DEG[b] + j, 360.0))
                entries.append(PlanEntry(cond, blk, b, angle, start + i * isi_s))
            k += 1
    return TrialPlan(tuple(entries), order, blocks, trials_per_block, isi_s, lead_s, tail_s, seed)


def plan_violations(bins_by_block: dict) -> list[str]:
    """Constraint check for per-block bin sequences keyed by a block label."""
    out = []
    for key, seq in bins_by_block.items():
        for i in range(1, len(seq)):
            if seq[i] == seq[i - 1]:
                out.append(f"{key}: bin {seq[i]} repeated at trials {i - 1} and {i}")
        counts = np.bincount(seq, minlength=N_BINS)
        if counts.max() - counts.min() > 1:
            out.append(f"{key}: unequal bin counts {counts.tolist()}")
    return out


# --------------------------------------------------------------------------
# Ground truth

@dataclass(frozen=True)
class NoiseParams:
    alpha_background_uv: float = 3.0
    pink_uv: float = 6.0
    pink_exponent: float = 1.0
    white_sd_uv: float = 0.5
    spatial_width_rad: float = 0.45


@dataclass(frozen=True)
class ModulationParams:
    ramp_s: float = 1.25
    distractor_delay_s: float = 0.25
    dip_start_s: float = 1.0
    dip_end_s: float = 1.4
    dip_depth: float = 0.5
    taper_start_s: float = 1.8
    taper_end_s: float = 2.0


@dataclass(frozen=True)
class SimGroundTruth:
    W_true: np.ndarray
    tuning_exponent: int = 7
    alpha_amp_uv: float = 5.5
    alpha_freq_hz: float = 10.0
    modulation: ModulationParams = field(default_factory=ModulationParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    evoked_uv: float = 3.0
    evoked_latency_s: float = 0.2
    evoked_width_s: float = 0.03
    marker_lag_ms: float = 25.56
    miss_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        W = np.array(self.W_true, dtype=float)
        W.setflags(write=False)
        object.__setattr__(self, "W_true", W)
        if W.ndim != 2 or W.shape[1] != N_BINS:
            raise ValueError("W_true must be electrodes x 6")
        if np.linalg.matrix_rank(W) < N_BINS:
            raise ValueError("W_true must have full column rank")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["W_true"] = self.W_true.tolist()
        d["schema_version"] = TRUTH_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimGroundTruth":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != TRUTH_SCHEMA_VERSION:
            raise ValueError(f"unsupported truth schema version {version!r}")
        d["W_true"] = np.asarray(d["W_true"], dtype=float)
        d["modulation"] = ModulationParams(**d["modulation"])
        d["noise"] = NoiseParams(**d["noise"])
        return cls(**d)


def posterior_gain(layout: ElectrodeLayout) -> np.ndarray:
    y = layout.positions[:, 1]
    g = np.clip(-y + 0.1, 0.0, 1.0) ** 1.5
    for i, lab in enumerate(layout.labels):
        if lab in ("M1", "M2"):
            g[i] = 0.0
    return g


def smoothing_kernel(layout: ElectrodeLayout, width_rad: float) -> np.ndarray:
    """Row-normalized Gaussian kernel over great-circle distance (electrodes x sources)."""
    pos = layout.positions
    d = np.arccos(np.clip(pos @ pos.T, -1.0, 1.0))
    K = np.exp(-0.5 * (d / width_rad) ** 2)
    return K / np.linalg.norm(K, axis=1, keepdims=True)


def default_weights(layout: ElectrodeLayout, seed: int, lateral: float = 0.8, vertical: float = 0.5,
                    random_scale: float = 0.5, width_rad: float = 0.45) -> np.ndarray:
    """Posterior-weighted mixing matrix with ipsilateral lateral bias and smooth random structure.

    Normalized so the mean squared posterior amplitude at bin centers is 1.
    """
    rng = np.random.default_rng([seed, 200])
    g = posterior_gain(layout)
    x = layout.positions[:, 0]
    z = layout.positions[:, 2]
    centers = np.deg2rad(BIN_CENTERS_DEG)
    K = smoothing_kernel(layout, width_rad)
    fields = K @ rng.standard_normal((layout.n_channels, N_BINS))
    fields /= fields.std(axis=0, keepdims=True)
    W = g[:, None] * (1.0 + lateral * x[:, None] * np.cos(centers)[None, :]
                      + vertical * (z[:, None] - z.mean()) * np.sin(centers)[None, :]
                      + random_scale * fields)
    post = layout.indices(posterior_labels(layout))
    amp = W[post] @ basis_matrix(BIN_CENTERS_DEG)
    return W / np.sqrt(np.mean(amp ** 2))


def make_ground_truth(layout: ElectrodeLayout, seed: int, **overrides) -> SimGroundTruth:
    W = overrides.pop("W_true", None)
    if W is None:
        W = default_weights(layout, seed)
    if isinstance(overrides.get("noise"), dict):
        overrides["noise"] = NoiseParams(**overrides["noise"])
    if isinstance(overrides.get("modulation"), dict):
        overrides["modulation"] = ModulationParams(**overrides["modulation"])
    return SimGroundTruth(W_true=W, seed=seed, **overrides)


def modulation_profile(t, condition: Condition, params: ModulationParams) -> np.ndarray:
    """Tuning depth in [0, 1] at times ``t`` (s from onset)."""
    t = np.asarray(t, dtype=float)
    delay = params.distractor_delay_s if condition.has_distractors else 0.0
    if condition.is_static:
        m = (t >= delay).astype(float)
    else:
        m = np.clip((t - delay) / params.ramp_s, 0.0, 1.0)
    if condition.has_distractors:
        dip = (t >= params.dip_start_s) & (t < params.dip_end_s)
        m = np.where(dip, m * (1.0 - params.dip_depth), m)
    span = params.taper_end_s - params.taper_start_s
    taper = np.clip((params.taper_end_s - t) / span, 0.0, 1.0)
    taper = 0.5 - 0.5 * np.cos(np.pi * taper)
    return m * taper


def _noise_std(amp: np.ndarray) -> float:
    # expected sample variance of irfft(a * complex normal) with real DC/Nyquist
    n_r = amp.size
    n = 2 * (n_r - 1)
    full = amp[0] ** 2 + 4 * np.sum(amp[1:-1] ** 2) + amp[-1] ** 2
    return float(np.sqrt(full) / n)


def colored_noise(n_sources: int, n: int, rate_hz: float, rng, pink_uv: float, exponent: float,
                  alpha_uv: float, alpha_hz: float = 10.0, alpha_width_hz: float = 1.0) -> np.ndarray:
    """Independent sources: 1/f^exponent noise plus a narrowband alpha component, each at its RMS."""
    n_even = n + (n % 2)
    f = np.fft.rfftfreq(n_even, 1.0 / rate_hz)
    pink = np.zeros_like(f)
    pink[1:] = f[1:] ** (-exponent / 2.0)
    alpha = np.exp(-0.5 * ((f - alpha_hz) / alpha_width_hz) ** 2)
    spectrum = np.zeros_like(f)
    if pink_uv:
        spectrum = spectrum + pink * (pink_uv / _noise_std(pink))
    if alpha_uv:
        spectrum = spectrum + alpha * (alpha_uv / _noise_std(alpha))
    z = rng.standard_normal((n_sources, f.size)) + 1j * rng.standard_normal((n_sources, f.size))
    z[:, 0] = z[:, 0].real
    z[:, -1] = z[:, -1].real
    # components share phases, so their powers add only approximately; fine for a simulator
    return np.fft.irfft(z * spectrum, n=n_even, axis=1)[:, :n]


class ForwardModel:
    """Precomputed electrode-space quantities for one (truth, layout) pair."""

    def __init__(self, truth: SimGroundTruth, layout: ElectrodeLayout):
        if truth.W_true.shape[0] != layout.n_channels:
            raise ValueError("W_true rows must match the layout")
        self.truth = truth
        self.layout = layout
        self.K = smoothing_kernel(layout, truth.noise.spatial_width_rad)
        post = set(posterior_labels(layout))
        self.hemi = np.array(layout.hemisphere)
        self.is_post = np.array([lab in post for lab in layout.labels])

    def noise(self, n: int, rate_hz: float, rng) -> np.ndarray:
        nz = self.truth.noise
        src = colored_noise(self.layout.n_channels, n, rate_hz, rng, nz.pink_uv, nz.pink_exponent,
                            nz.alpha_background_uv, self.truth.alpha_freq_hz)
        out = self.K @ src
        if nz.white_sd_uv:
            out += nz.white_sd_uv * rng.standard_normal(out.shape)
        return out

    def evoked_weights(self, bin_index: int) -> np.ndarray:
        side = hemifield_of(BIN_CENTERS_DEG[bin_index])
        if side == Hemifield.MIDLINE:
            return np.zeros(self.layout.n_channels)
        contra = "left" if side == Hemifield.RIGHT else "right"
        return ((self.hemi == contra) & self.is_post).astype(float)

    def trial_signal(self, entry: PlanEntry, t: np.ndarray, rng) -> np.ndarray:
        """Tuned alpha plus evoked response; ``t`` in seconds relative to onset."""
        tr = self.truth
        c = basis_matrix([entry.angle_deg], tr.tuning_exponent)[:, 0]
        amp = tr.W_true @ c
        phase = rng.uniform(0.0, 2.0 * np.pi)
        m = modulation_profile(t, entry.condition, tr.modulation)
        osc = tr.alpha_amp_uv * m * np.sin(2.0 * np.pi * tr.alpha_freq_hz * t + phase)
        sig = amp[:, None] * osc[None, :]
        if entry.condition.is_static and tr.evoked_uv:
            bump = np.exp(-0.5 * ((t - tr.evoked_latency_s) / tr.evoked_width_s) ** 2)
            sig -= tr.evoked_uv * self.evoked_weights(entry.bin_index)[:, None] * bump[None, :]
        return sig

    def behaviour(self, entry: PlanEntry, rng) -> tuple[bool, float | None]:
        hit = bool(rng.uniform() >= self.truth.miss_rate)
        if not hit:
            return False, None
        base = 450.0 if entry.condition.is_static else self.truth.modulation.ramp_s * 1000.0
        if entry.condition.has_distractors:
            base += 120.0
        return True, round(float(base + rng.normal(0.0, 60.0)), 3)


def synthesize_epochs(entries, truth: SimGroundTruth, layout: ElectrodeLayout, rate_hz: float,
                      window_s=(-0.5, 2.0), seed_offset: int = 0) -> np.ndarray:
    """Trials x channels x samples drawn directly in epoch form (no continuous recording)."""
    model = ForwardModel(truth, layout)
    n = int(round((window_s[1] - window_s[0]) * rate_hz))
    t = window_s[0] + np.arange(n) / rate_hz
    out = np.empty((len(entries), layout.n_channels, n))
    for i, entry in enumerate(entries):
        rng = np.random.default_rng([truth.seed, 2, seed_offset + i])
        out[i] = model.noise(n, rate_hz, rng) + model.trial_signal(entry, t, rng)
    return out


def simulate_epochs(entries, truth: SimGroundTruth, layout: ElectrodeLayout, rate_hz: float,
                    window_s=(-0.5, 2.0), channels=None, baseline_s=(-0.2, 0.0),
                    batch: int = 256) -> EpochSet:
    """Epoch-form simulation wrapped as an EpochSet, optionally keeping only ``channels``.

    Trials are drawn in batches so only the retained channels are held for the
    whole set. ``baseline_s`` (or None) sets the baseline-subtraction window.
    """
    entries = list(entries)
    keep = layout.indices(channels) if channels is not None else list(range(layout.n_channels))
    out_layout = layout.subset(list(channels)) if channels is not None else layout
    n = int(round((window_s[1] - window_s[0]) * rate_hz))
    data = np.empty((len(entries), len(keep), n))
    if baseline_s is not None:
        t = window_s[0] + np.arange(n) / rate_hz
        base = (t >= baseline_s[0]) & (t < baseline_s[1])
    for start in range(0, len(entries), batch):
        chunk = synthesize_epochs(entries[start:start + batch], truth, layout, rate_hz, window_s,
                                  seed_offset=start)[:, keep]
        if baseline_s is not None:
            chunk -= chunk[:, :, base].mean(axis=2, keepdims=True)
        data[start:start + len(chunk)] = chunk
    meta = [Event(int(round(e.onset_s * rate_hz)), event_code(e.condition, e.bin_index), e.condition,
                  e.bin_index, e.angle_deg) for e in entries]
    return EpochSet(data, rate_hz, window_s[0], meta, out_layout)


def _synthesize_block(model: ForwardModel, plan: TrialPlan, k: int, block_start: float, entries,
                      rate_hz: float):
    n = int(round(plan.block_duration_s * rate_hz))
    rng = np.random.default_rng([model.truth.seed, 3, k])
    data = model.noise(n, rate_hz, rng)
    events = []
    win = int(round(plan.isi_s * rate_hz))
    t_rel = np.arange(win) / rate_hz
    lag_s = model.truth.marker_lag_ms / 1000.0
    for i, entry in enumerate(entries):
        trng = np.random.default_rng([model.truth.seed, 4, k, i])
        onset = int(round((entry.onset_s - block_start) * rate_hz))
        stop = min(n, onset + win)
        data[:, onset:stop] += model.trial_signal(entry, t_rel[:stop - onset], trng)
        hit, rt = model.behaviour(entry, trng)
        marker = int(round((entry.onset_s - lag_s) * rate_hz))
        events.append(Event(marker, event_code(entry.condition, entry.bin_index), entry.condition,
                            entry.bin_index, entry.angle_deg, hit, rt))
    return data, events


def synthesize_recording(plan: TrialPlan, truth: SimGroundTruth, layout: ElectrodeLayout,
                         rate_hz: float = 1000.0):
    """Continuous recording for a whole plan, block by block. Returns (recording, truth)."""
    if rate_hz < 250:
        raise ValueError("simulation rate must be >= 250 Hz")
    model = ForwardModel(truth, layout)
    blocks, events = [], []
    for k, start, entries in plan.block_entries():
        data, evs = _synthesize_block(model, plan, k, start, entries, rate_hz)
        blocks.append(data)
        events.extend(evs)
    data = np.concatenate(blocks, axis=1)
    return RawRecording(data, rate_hz, layout, tuple(events)), truth


def write_simulated_dataset(plan: TrialPlan, truth: SimGroundTruth, layout: ElectrodeLayout,
                            rate_hz: float, path) -> int:
    """Stream a simulated recording to a dataset directory one block at a time.

    Produces the same bytes as ``write_dataset(synthesize_recording(...)[0])``.
    Returns the number of events written.
    """
    if rate_hz < 250:
        raise ValueError("simulation rate must be >= 250 Hz")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    model = ForwardModel(truth, layout)
    n_block = int(round(plan.block_duration_s * rate_hz))
    n_blocks = len(plan.entries) // plan.trials_per_block
    total = n_block * n_blocks
    mm = np.memmap(path / "data.f32le", dtype="<f4", mode="w+", shape=(layout.n_channels, total))
    events = []
    for k, start, entries in plan.block_entries():
        data, evs = _synthesize_block(model, plan, k, start, entries, rate_hz)
        if not np.isfinite(data).all():
            raise ValueError(f"non-finite samples generated in block {k}")
        mm[:, k * n_block:(k + 1) * n_block] = data.astype("<f4")
        events.extend(evs)
    mm.flush()
    del mm
    meta = dataset_meta(layout, rate_hz, total)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_events(events, path / "events.csv")
    return len(events)


def export_ground_truth(truth: SimGroundTruth, path) -> None:
    Path(path).write_text(json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_ground_truth(path) -> SimGroundTruth:
    return SimGroundTruth.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def with_noise(truth: SimGroundTruth, **changes) -> SimGroundTruth:
    return replace(truth, noise=replace(truth.noise, **changes))
