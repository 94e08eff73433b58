"""Contralateral / ipsilateral ERPs for lateralized targets."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import ERP_PAIRS, Condition, EpochSet

EPS = 1e-9
MEAN_KEY = "mean"


class Hemifield(str, Enum):
    LEFT = "Left"
    RIGHT = "Right"
    MIDLINE = "Midline"


def hemifield_of(angle_deg: float) -> Hemifield:
    """Side of fixation for an angle measured counterclockwise from rightward horizontal."""
    c = np.cos(np.deg2rad(angle_deg))
    if c > EPS:
        return Hemifield.RIGHT
    if c < -EPS:
        return Hemifield.LEFT
    return Hemifield.MIDLINE


def trial_hemifields(ep: EpochSet) -> list[Hemifield]:
    """Hemifield per trial, taken from the bin center (jitter never crosses the meridian)."""
    from .core import bin_center

    return [hemifield_of(bin_center(ev.bin_index)) for ev in ep.meta]


@dataclass(frozen=True)
class ErpResult:
    time_s: np.ndarray
    contra: dict
    ipsi: dict
    diff: dict
    n_trials: dict

    def pairs(self, condition: str) -> list[str]:
        return list(self.contra[condition])


def pair_key(pair) -> str:
    return f"{pair[0]}/{pair[1]}"


def average_erp(ep: EpochSet, pairs=ERP_PAIRS, hemifields=None) -> ErpResult:
    """Trial-averaged contra/ipsi waveforms per condition and electrode pair.

    A left-hemifield target makes the right member of each pair contralateral.
    Midline trials are skipped. ``hemifields`` overrides the per-trial labels.
    """
    if hemifields is None:
        hemifields = trial_hemifields(ep)
    if len(hemifields) != ep.n_trials:
        raise ValueError("one hemifield label per trial required")
    li = np.array(ep.layout.indices(p[0] for p in pairs))
    ri = np.array(ep.layout.indices(p[1] for p in pairs))
    conds = ep.conditions
    present = [c for c in Condition if c in conds]
    contra, ipsi, diff, counts = {}, {}, {}, {}
    for cond in present:
        left_t = [i for i, (c, h) in enumerate(zip(conds, hemifields)) if c == cond and h == Hemifield.LEFT]
        right_t = [i for i, (c, h) in enumerate(zip(conds, hemifields)) if c == cond and h == Hemifield.RIGHT]
        n = len(left_t) + len(right_t)
        if n == 0:
            raise ValueError(f"no lateral trials in condition {cond.value}")
        # per-side sums added last, so swapping the labels swaps contra and ipsi bit for bit
        l_sum_l = ep.data[left_t][:, li].sum(axis=0)
        l_sum_r = ep.data[left_t][:, ri].sum(axis=0)
        r_sum_l = ep.data[right_t][:, li].sum(axis=0)
        r_sum_r = ep.data[right_t][:, ri].sum(axis=0)
        c_avg = (l_sum_r + r_sum_l) / n
        i_avg = (l_sum_l + r_sum_r) / n
        contra[cond.value] = {pair_key(p): c_avg[k] for k, p in enumerate(pairs)}
        ipsi[cond.value] = {pair_key(p): i_avg[k] for k, p in enumerate(pairs)}
        contra[cond.value][MEAN_KEY] = c_avg.mean(axis=0)
        ipsi[cond.value][MEAN_KEY] = i_avg.mean(axis=0)
        diff[cond.value] = {k: contra[cond.value][k] - ipsi[cond.value][k] for k in contra[cond.value]}
        counts[cond.value] = n
    return ErpResult(ep.times, contra, ipsi, diff, counts)


def _window_mask(time_s: np.ndarray, window_s) -> np.ndarray:
    t0, t1 = window_s
    mask = (time_s >= t0) & (time_s < t1)
    if not mask.any():
        raise ValueError(f"window {window_s} contains no samples")
    return mask


def mean_amplitude(erp: ErpResult, window_s, pair: str = MEAN_KEY) -> dict:
    """Time-averaged (contra, ipsi) amplitude over ``window_s`` for each condition."""
    if window_s[0] < erp.time_s[0] or window_s[1] > erp.time_s[-1] + (erp.time_s[1] - erp.time_s[0]):
        raise ValueError(f"window {window_s} extends outside the epoch")
    mask = _window_mask(erp.time_s, window_s)
    return {cond: (float(erp.contra[cond][pair][mask].mean()), float(erp.ipsi[cond][pair][mask].mean()))
            for cond in erp.contra}


def write_erp_csv(erp: ErpResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "condition", "pair", "contra_uv", "ipsi_uv", "diff_uv"])
        for cond in erp.contra:
            for pair in erp.contra[cond]:
                c, i, d = erp.contra[cond][pair], erp.ipsi[cond][pair], erp.diff[cond][pair]
                for k, t in enumerate(erp.time_s):
                    w.writerow([f"{t:.6f}", cond, pair, f"{c[k]:.9g}", f"{i[k]:.9g}", f"{d[k]:.9g}"])
