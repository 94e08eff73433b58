"""Time-resolved alpha lateralization index over posterior ROIs."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import LEFT_ROI, RIGHT_ROI, BandPowerSet, Condition
from .erp import Hemifield, trial_hemifields


@dataclass(frozen=True)
class LateralizationTimecourse:
    time_s: np.ndarray
    index: dict
    n_trials: dict
    roi_left: tuple
    roi_right: tuple


def roi_power(bp: BandPowerSet, roi) -> np.ndarray:
    """Mean power across ``roi`` channels, trials x samples."""
    roi = list(roi)
    if not roi:
        raise ValueError("empty ROI")
    return bp.data[:, bp.layout.indices(roi), :].mean(axis=1)


def lateralization_index(ipsi, contra):
    """(ipsi - contra) / (ipsi + contra); NaN where both powers are zero."""
    ipsi = np.asarray(ipsi, dtype=float)
    contra = np.asarray(contra, dtype=float)
    total = ipsi + contra
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, (ipsi - contra) / np.where(total > 0, total, 1.0), np.nan)
    return out if out.ndim else float(out)


def _lateral_trials(conds, hemis, cond):
    left = [i for i, (c, h) in enumerate(zip(conds, hemis)) if c == cond and h == Hemifield.LEFT]
    right = [i for i, (c, h) in enumerate(zip(conds, hemis)) if c == cond and h == Hemifield.RIGHT]
    return left, right


def _index_from_roi(left_p, right_p, left_t, right_t):
    # left target: ipsilateral is the left ROI
    ipsi = np.concatenate([left_p[left_t], right_p[right_t]]).mean(axis=0)
    contra = np.concatenate([right_p[left_t], left_p[right_t]]).mean(axis=0)
    return lateralization_index(ipsi, contra)


def lateralization_timecourse(bp: BandPowerSet, roi_left=LEFT_ROI, roi_right=RIGHT_ROI,
                              hemifields=None) -> LateralizationTimecourse:
    """ROI powers are averaged over trials first; the index is formed per timepoint."""
    if hemifields is None:
        hemifields = trial_hemifields(bp)
    left_p = roi_power(bp, roi_left)
    right_p = roi_power(bp, roi_right)
    conds = bp.conditions
    index, counts = {}, {}
    for cond in Condition:
        if cond not in conds:
            continue
        lt, rt = _lateral_trials(conds, hemifields, cond)
        if not lt and not rt:
            continue
        index[cond.value] = _index_from_roi(left_p, right_p, lt, rt)
        counts[cond.value] = len(lt) + len(rt)
    if not index:
        raise ValueError("no lateral trials")
    return LateralizationTimecourse(bp.times, index, counts, tuple(roi_left), tuple(roi_right))


def lateralization_null(bp: BandPowerSet, n_perm: int, seed: int, roi_left=LEFT_ROI,
                        roi_right=RIGHT_ROI) -> dict:
    """Index timecourses with hemifield labels shuffled across lateral trials (n_perm x samples)."""
    rng = np.random.default_rng(seed)
    hemis = trial_hemifields(bp)
    left_p = roi_power(bp, roi_left)
    right_p = roi_power(bp, roi_right)
    conds = bp.conditions
    out = {}
    for cond in Condition:
        lt, rt = _lateral_trials(conds, hemis, cond)
        if not lt and not rt:
            continue
        trials = np.array(lt + rt)
        is_left = np.array([True] * len(lt) + [False] * len(rt))
        null = np.empty((n_perm, bp.n_samples))
        for k in range(n_perm):
            perm = rng.permutation(is_left)
            null[k] = _index_from_roi(left_p, right_p, trials[perm], trials[~perm])
        out[cond.value] = null
    return out


def write_lateralization_csv(lat: LateralizationTimecourse, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "condition", "index", "n_trials"])
        for cond, idx in lat.index.items():
            for t, v in zip(lat.time_s, idx):
                w.writerow([f"{t:.6f}", cond, "" if np.isnan(v) else f"{v:.9g}", lat.n_trials[cond]])
