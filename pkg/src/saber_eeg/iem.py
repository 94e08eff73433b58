"""Inverted encoding model for spatial location from alpha power topographies.

Each timepoint gets its own encoding model. Training data ``B1`` (electrodes x
inputs) is modeled as ``W @ C1`` where ``C1`` holds the responses of six
location channels (``cos(d/2) ** 7`` around 30, 90, ..., 330 deg). ``W`` is the
ordinary least-squares solution and test channel responses are recovered with
the left pseudo-inverse of ``W``. Channel response functions (CRFs) are
re-centered on the true bin, averaged, folded and summarized by a slope.

All routines accept an optional leading batch axis (time) so a whole epoch is
solved in one call; each batch element is computed independently.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import BIN_CENTERS_DEG, N_BINS, BandPowerSet, Condition, angle_diff_deg, posterior_labels

OFFSETS_DEG = (-120, -60, 0, 60, 120, 180)
FOLDED_OFFSETS_DEG = (0, 60, 120, 180)
SLOPE_X = np.array([3.0, 2.0, 1.0, 0.0])
MAX_CONDITION = 1e10
TIME_CHUNK = 32


class IemError(ValueError):
    pass


@dataclass(frozen=True)
class IemConfig:
    n_averaged_per_bin: int = 3
    n_trialset_iterations: int = 10
    n_perm_labelsets: int = 10
    n_perm_repeats: int = 5
    exponent: int = 7
    electrodes: tuple | None = None
    jittered_training: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.electrodes is not None:
            object.__setattr__(self, "electrodes", tuple(self.electrodes))
        if self.n_averaged_per_bin < 2:
            raise IemError("n_averaged_per_bin must be >= 2")
        if self.n_trialset_iterations < 1 or self.n_perm_labelsets < 0 or self.n_perm_repeats < 0:
            raise IemError("iteration counts must be positive")
        if self.exponent < 1:
            raise IemError("basis exponent must be >= 1")

    @property
    def n_permutations(self) -> int:
        return self.n_perm_labelsets * self.n_perm_repeats

    def to_dict(self) -> dict:
        d = asdict(self)
        d["electrodes"] = None if self.electrodes is None else list(self.electrodes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IemConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise IemError(f"unknown iem fields {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# Basis

def basis_response(theta_deg, center_deg, exponent: int = 7):
    """Half-sinusoid channel response ``cos(d / 2) ** exponent``; exactly 0 at 180 deg."""
    if exponent < 1:
        raise IemError("exponent must be >= 1")
    d = np.deg2rad(angle_diff_deg(theta_deg, center_deg))
    r = np.clip(np.cos(d / 2.0), 0.0, 1.0) ** exponent
    r = np.where(np.abs(np.abs(d) - np.pi) < 1e-12, 0.0, r)
    return r if np.ndim(r) else float(r)


def basis_matrix(angles_deg, exponent: int = 7) -> np.ndarray:
    """Channels x trials responses of the six location channels."""
    angles = np.asarray(angles_deg, dtype=float)
    return np.stack([basis_response(angles, c, exponent) for c in BIN_CENTERS_DEG]).reshape(N_BINS, -1)


# --------------------------------------------------------------------------
# Averaged inputs

@dataclass
class AveragedTrials:
    """Inputs built by averaging random thirds of each bin.

    ``data`` is inputs x electrodes (x time); ``basis`` is channels x inputs,
    the mean basis response of the trials behind each input.
    """

    data: np.ndarray
    bins: np.ndarray
    folds: np.ndarray
    basis: np.ndarray
    weights: np.ndarray = field(repr=False, default=None)


def partition_trials(bins, n_sets: int, rng) -> list[tuple[int, int, np.ndarray]]:
    """Random near-equal split of every bin into ``n_sets`` groups: (bin, set, trial indices)."""
    bins = np.asarray(bins)
    groups = []
    for b in range(N_BINS):
        members = np.flatnonzero(bins == b)
        if members.size < n_sets:
            raise IemError(f"bin {b} has {members.size} trials; need at least {n_sets}")
        shuffled = rng.permutation(members)
        for s, part in enumerate(np.array_split(shuffled, n_sets)):
            groups.append((b, s, np.sort(part)))
    return groups


def _averaging(groups, n_trials: int, angles, exponent: int):
    A = np.zeros((len(groups), n_trials))
    for k, (_, _, idx) in enumerate(groups):
        A[k, idx] = 1.0 / idx.size
    trial_basis = basis_matrix(angles, exponent)
    return A, trial_basis @ A.T


def make_averaged_trials(power, bins, cfg: IemConfig, seed=None, angles=None, rng=None) -> AveragedTrials:
    """Average random disjoint subsets of each bin into ``n_averaged_per_bin`` inputs.

    ``power`` is trials x electrodes or trials x electrodes x time. ``angles``
    (per-trial degrees) feed the basis; bin centers are used when omitted.
    """
    power = np.asarray(power, dtype=float)
    bins = np.asarray(bins, dtype=int)
    if rng is None:
        rng = np.random.default_rng(seed)
    if angles is None:
        angles = np.array(BIN_CENTERS_DEG)[bins]
    groups = partition_trials(bins, cfg.n_averaged_per_bin, rng)
    A, C = _averaging(groups, power.shape[0], angles, cfg.exponent)
    data = (A @ power.reshape(power.shape[0], -1)).reshape((len(groups),) + power.shape[1:])
    return AveragedTrials(data, np.array([g[0] for g in groups]), np.array([g[1] for g in groups]), C, A)


# --------------------------------------------------------------------------
# Estimation

def _check_condition(M, what: str):
    cond = np.linalg.cond(M)
    worst = float(np.max(cond)) if np.ndim(cond) else float(cond)
    if not np.isfinite(worst) or worst >= MAX_CONDITION:
        raise IemError(f"{what} is singular or ill-conditioned (condition number {worst:.3g})")


def train_weights(B1, C1) -> np.ndarray:
    """Least-squares weights ``W = B1 C1^T (C1 C1^T)^-1`` (electrodes x channels)."""
    B1 = np.asarray(B1, dtype=float)
    C1 = np.asarray(C1, dtype=float)
    G = C1 @ C1.T
    _check_condition(G, "C1 C1^T")
    # W G = B1 C1^T, G symmetric
    rhs = B1 @ C1.T
    return np.swapaxes(np.linalg.solve(G, np.swapaxes(rhs, -1, -2)), -1, -2)


def invert(W, B2) -> np.ndarray:
    """Channel responses ``(W^T W)^-1 W^T B2`` (channels x test inputs)."""
    W = np.asarray(W, dtype=float)
    Wt = np.swapaxes(W, -1, -2)
    G = Wt @ W
    _check_condition(G, "W^T W")
    return np.linalg.solve(G, Wt @ np.asarray(B2, dtype=float))


def center_responses(C2, bins) -> np.ndarray:
    """Re-index channel responses by offset from each input's bin; offsets follow ``OFFSETS_DEG``."""
    bins = np.asarray(bins, dtype=int)
    shifts = np.array(OFFSETS_DEG) // 60
    idx = (bins[None, :] + shifts[:, None]) % N_BINS
    idx = np.broadcast_to(idx, C2.shape[:-2] + idx.shape)
    return np.take_along_axis(C2, idx, axis=-2)


def _crossvalidate(groups, k: int) -> list[np.ndarray]:
    """Fixed-model cross-validation over several conditions.

    ``groups`` are AveragedTrials whose ``data`` is time x electrodes x inputs.
    Each fold trains on the other folds of every group and tests each group on
    its own held-out fold. Returns one centered CRF (time x 6) per group.
    """
    T = groups[0].data.shape[0]
    sums = [np.zeros((T, N_BINS)) for _ in groups]
    counts = [0] * len(groups)
    for f in range(k):
        train_B, train_C = [], []
        for g in groups:
            tr = g.folds != f
            train_B.append(g.data[:, :, tr])
            train_C.append(g.basis[:, tr])
        W = train_weights(np.concatenate(train_B, axis=-1), np.concatenate(train_C, axis=-1))
        for gi, g in enumerate(groups):
            te = np.flatnonzero(g.folds == f)
            if sorted(g.bins[te].tolist()) != list(range(N_BINS)):
                raise IemError(f"fold {f} does not hold exactly one input per bin")
            C2 = invert(W, g.data[:, :, te])
            sums[gi] += center_responses(C2, g.bins[te]).sum(axis=-1)
            counts[gi] += te.size
    return [s / c for s, c in zip(sums, counts)]


def crossvalidate_timepoint(inputs: AveragedTrials, cfg: IemConfig) -> np.ndarray:
    """Leave-one-fold-out centered CRF; ``inputs.data`` is inputs x electrodes (x time).

    Returns values at ``OFFSETS_DEG`` (shape 6, or time x 6).
    """
    data = inputs.data
    single = data.ndim == 2
    batched = data[..., None] if single else data
    g = AveragedTrials(np.ascontiguousarray(np.transpose(batched, (2, 1, 0))), inputs.bins, inputs.folds,
                       inputs.basis)
    crf = _crossvalidate([g], cfg.n_averaged_per_bin)[0]
    return crf[0] if single else crf


# --------------------------------------------------------------------------
# Summaries

def fold_crf(crf, offsets=OFFSETS_DEG) -> np.ndarray:
    """Average mirror offsets: [0, mean(+-60), mean(+-120), 180] along the first axis."""
    if tuple(int(o) for o in offsets) != OFFSETS_DEG:
        raise IemError(f"CRF offsets must be {OFFSETS_DEG}, got {tuple(offsets)}")
    crf = np.asarray(crf, dtype=float)
    return np.stack([crf[2], (crf[1] + crf[3]) / 2.0, (crf[0] + crf[4]) / 2.0, crf[5]])


def crf_slope(folded) -> np.ndarray:
    """OLS slope against x = [3, 2, 1, 0] so a CRF peaked at 0 deg gives a positive slope."""
    folded = np.asarray(folded, dtype=float)
    xc = SLOPE_X - SLOPE_X.mean()
    return np.tensordot(xc, folded, axes=(0, 0)) / (xc @ xc)


# --------------------------------------------------------------------------
# Full timecourses

@dataclass(frozen=True)
class CrfTimecourse:
    time_s: np.ndarray
    crf: dict
    folded: dict
    slope: dict
    slope_perm: dict
    crf_perm: dict
    electrodes: tuple
    manifest: dict

    def crf_at(self, condition: str, offset: int) -> np.ndarray:
        return self.crf[condition][OFFSETS_DEG.index(offset)]

    def slope_perm_p95(self, condition: str) -> np.ndarray:
        perm = self.slope_perm.get(condition)
        if perm is None or perm.shape[0] == 0:
            return np.full(self.time_s.shape, np.nan)
        return np.percentile(perm, 95, axis=0)


def iem_electrodes(bp: BandPowerSet, cfg: IemConfig) -> list[str]:
    labels = list(cfg.electrodes) if cfg.electrodes is not None else posterior_labels(bp.layout)
    keep = [lab for lab in labels if lab in bp.layout.labels and lab not in bp.bad_channels]
    if len(keep) < N_BINS:
        raise IemError(f"{len(keep)} usable electrodes; at least {N_BINS} required")
    return keep


def _balanced_trials(bins, conds, present, rng) -> dict:
    """Per condition, trial indices with equal per-bin counts across conditions."""
    per_bin = {}
    for b in range(N_BINS):
        per_bin[b] = min(int(np.sum((bins == b) & (conds == c))) for c in present)
    out = {}
    for c in present:
        chosen = []
        for b in range(N_BINS):
            members = np.flatnonzero((bins == b) & (conds == c))
            chosen.append(np.sort(rng.choice(members, size=per_bin[b], replace=False)))
        out[c] = np.sort(np.concatenate(chosen))
    return out


def _time_chunks(T: int, size: int = TIME_CHUNK) -> list[slice]:
    # chunk boundaries never depend on the worker count, so results are bit-identical
    return [slice(a, min(T, a + size)) for a in range(0, T, size)]


def _run_pass(power, plans, k: int, workers: int) -> list[np.ndarray]:
    """One model pass; ``plans`` is a list of (A, C, bins, folds) per condition."""
    T = power.shape[2]
    n_trials, m = power.shape[0], power.shape[1]

    def chunk(sl: slice):
        block = power[:, :, sl].reshape(n_trials, -1)
        groups = []
        for A, C, bins, folds in plans:
            avg = (A @ block).reshape(A.shape[0], m, sl.stop - sl.start)
            groups.append(AveragedTrials(np.ascontiguousarray(np.transpose(avg, (2, 1, 0))), bins, folds, C))
        return _crossvalidate(groups, k)

    slices = _time_chunks(T)
    if workers <= 1 or len(slices) == 1:
        parts = [chunk(sl) for sl in slices]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, len(slices))) as pool:
            parts = list(pool.map(chunk, slices))
    return [np.concatenate([p[i] for p in parts], axis=0).T for i in range(len(plans))]


def _plan(trial_idx, bins, angles, cfg, rng, n_total):
    groups = partition_trials(bins[trial_idx], cfg.n_averaged_per_bin, rng)
    groups = [(b, s, trial_idx[idx]) for b, s, idx in groups]
    A, C = _averaging(groups, n_total, angles, cfg.exponent)
    return A, C, np.array([g[0] for g in groups]), np.array([g[1] for g in groups])


def run_iem_timecourse(bp: BandPowerSet, cfg: IemConfig, seed: int, permutations: bool = True) -> CrfTimecourse:
    """Cross-validated, centered CRFs and slopes at every timepoint.

    All conditions in ``bp`` share one fixed encoding model per fold (trained on
    equal trial counts from each). With ``permutations`` the same pipeline is
    rerun on shuffled bin labels ``n_perm_labelsets x n_perm_repeats`` times.
    """
    electrodes = iem_electrodes(bp, cfg)
    power = np.ascontiguousarray(bp.data[:, bp.layout.indices(electrodes), :])
    bins = bp.bins
    conds = np.array([c.value for c in bp.conditions])
    present = [c.value for c in Condition if c.value in set(conds)]
    for c in present:
        if len(set(bins[conds == c].tolist())) < N_BINS:
            raise IemError(f"condition {c} does not cover all {N_BINS} bins")
    if cfg.jittered_training:
        angles = np.array([ev.angle_deg for ev in bp.meta])
    else:
        angles = np.array(BIN_CENTERS_DEG)[bins]
    k = cfg.n_averaged_per_bin
    balanced = _balanced_trials(bins, conds, present, np.random.default_rng([seed, 7]))
    n_total = power.shape[0]

    crf_sum = {c: np.zeros((N_BINS, bp.n_samples)) for c in present}
    for it in range(cfg.n_trialset_iterations):
        rng = np.random.default_rng([seed, 0, it])
        plans = [_plan(balanced[c], bins, angles, cfg, rng, n_total) for c in present]
        for c, crf in zip(present, _run_pass(power, plans, k, cfg.workers)):
            crf_sum[c] += crf
    crf = {c: s / cfg.n_trialset_iterations for c, s in crf_sum.items()}

    slope_perm = {c: np.zeros((0, bp.n_samples)) for c in present}
    crf_perm = {}
    if permutations and cfg.n_permutations:
        perm_slopes = {c: [] for c in present}
        perm_sum = {c: np.zeros((N_BINS, bp.n_samples)) for c in present}
        for rep in range(cfg.n_perm_repeats):
            for lab in range(cfg.n_perm_labelsets):
                rng = np.random.default_rng([seed, 1, rep, lab])
                shuffled = bins.copy()
                for c in present:
                    idx = balanced[c]
                    shuffled[idx] = rng.permutation(bins[idx])
                perm_angles = np.array(BIN_CENTERS_DEG)[shuffled]
                plans = [_plan(balanced[c], shuffled, perm_angles, cfg, rng, n_total) for c in present]
                for c, pc in zip(present, _run_pass(power, plans, k, cfg.workers)):
                    perm_sum[c] += pc
                    perm_slopes[c].append(crf_slope(fold_crf(pc)))
        slope_perm = {c: np.array(v) for c, v in perm_slopes.items()}
        crf_perm = {c: s / cfg.n_permutations for c, s in perm_sum.items()}

    folded = {c: fold_crf(v) for c, v in crf.items()}
    slope = {c: crf_slope(v) for c, v in folded.items()}
    manifest = {
        "seed": seed,
        "electrodes": electrodes,
        "fold_count": k,
        "n_trialset_iterations": cfg.n_trialset_iterations,
        "n_permutations": cfg.n_permutations if permutations else 0,
        "trials_per_condition": {c: int(balanced[c].size) for c in present},
        "exponent": cfg.exponent,
    }
    return CrfTimecourse(bp.times, crf, folded, slope, slope_perm, crf_perm, tuple(electrodes), manifest)


def run_permuted_iem(bp: BandPowerSet, cfg: IemConfig, seed: int) -> dict:
    """Permuted-label slopes (permutations x time) per condition."""
    return run_iem_timecourse(bp, cfg, seed, permutations=True).slope_perm


def write_iem_csvs(res: CrfTimecourse, crf_path, slope_path, perm_path=None) -> None:
    with open(crf_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "condition", "offset_deg", "crf_power"])
        for cond, arr in res.crf.items():
            for ti, t in enumerate(res.time_s):
                for oi, off in enumerate(OFFSETS_DEG):
                    w.writerow([f"{t:.6f}", cond, off, f"{arr[oi, ti]:.9g}"])
    with open(slope_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "condition", "slope", "slope_perm_p95"])
        for cond, s in res.slope.items():
            p95 = res.slope_perm_p95(cond)
            for ti, t in enumerate(res.time_s):
                w.writerow([f"{t:.6f}", cond, f"{s[ti]:.9g}", "" if np.isnan(p95[ti]) else f"{p95[ti]:.9g}"])
    if perm_path is not None:
        with open(perm_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "condition", "iteration", "slope"])
            for cond, perm in res.slope_perm.items():
                for it in range(perm.shape[0]):
                    for ti, t in enumerate(res.time_s):
                        w.writerow([f"{t:.6f}", cond, it, f"{perm[it, ti]:.9g}"])
