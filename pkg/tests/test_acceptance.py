"""End-to-end acceptance checks against the forward-model simulator.

Each test prints one ``[PASS]``/``[FAIL] criterion N`` line; the session
summary lists them together.
"""
import json
import time
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.stats import spearmanr

from conftest import butter_mag2, make_epochset, record_criterion, sine_gain
from saber_eeg.cli import main
from saber_eeg.core import (BIN_CENTERS_DEG, REQUIRED_CHANNELS, Condition, RawRecording,
                            dataset_digest, posterior_labels, standard_layout)
from saber_eeg.erp import Hemifield, average_erp, trial_hemifields
from saber_eeg.iem import (OFFSETS_DEG, IemConfig, basis_matrix, basis_response, center_responses,
                           invert, make_averaged_trials, run_iem_timecourse, train_weights)
from saber_eeg.lateralization import lateralization_null, lateralization_timecourse
from saber_eeg.preprocess import (PreprocessConfig, alpha_power, design_butterworth, epoch,
                                  equalize_bins, butterworth_bandpass)
from saber_eeg.simgen import (generate_trial_plan, make_ground_truth, plan_violations,
                              simulate_epochs)
from saber_eeg.stats import find_clusters, perm_ttest_paired

GOLDEN = Path(__file__).parent / "golden"


def test_criterion_1_noiseless_roundtrip():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    W_true = rng.standard_normal((18, 6))
    train_angles = np.concatenate([c + rng.uniform(-10, 10, 20) for c in BIN_CENTERS_DEG])
    C1 = basis_matrix(train_angles)
    W = train_weights(W_true @ C1, C1)
    C2 = basis_matrix(np.repeat(BIN_CENTERS_DEG, 3))
    C2_hat = invert(W, W_true @ C2)
    rel = np.linalg.norm(C2_hat - C2) / np.linalg.norm(C2)
    centered = center_responses(C2_hat, np.repeat(np.arange(6), 3)).mean(axis=1)
    profile = basis_response(np.array(OFFSETS_DEG, dtype=float), 0.0)
    crf_err = float(np.max(np.abs(centered - profile)))
    elapsed = time.perf_counter() - start
    ok = rel < 1e-8 and crf_err < 1e-6 and elapsed < 1.0
    record_criterion(1, ok, f"relative error {rel:.2e} (< 1e-8), CRF error {crf_err:.2e} (< 1e-6), "
                            f"{elapsed:.3f} s (< 1 s)")
    assert ok


def test_criterion_2_static_recovery():
    start = time.perf_counter()
    layout = standard_layout()
    post = posterior_labels(layout)
    cfg, icfg = PreprocessConfig(), IemConfig()
    slopes, perms = [], []
    for s in range(12):
        plan = generate_trial_plan(100 + s, blocks=30, trials_per_block=60, conditions=["SS"])
        truth = make_ground_truth(layout, 100 + s)
        ep = simulate_epochs(plan.entries, truth, layout, 250.0, channels=post)
        assert np.bincount(ep.bins).tolist() == [300] * 6
        tc = run_iem_timecourse(alpha_power(ep, cfg), icfg, seed=s)
        slopes.append(tc.slope["StaticSingle"])
        perms.append(tc.slope_perm["StaticSingle"])
    t = tc.time_s
    observed = np.mean(slopes, axis=0)
    null = np.mean(perms, axis=0)            # 50 permuted group-mean timecourses
    p95 = np.percentile(null, 95, axis=0)
    clusters = find_clusters(observed > p95, t, 1)
    hits = [c for c in clusters if c[0] <= 0.3 and c[1] >= 0.0 and c[1] - c[0] >= 0.5]
    elapsed = time.perf_counter() - start
    ok = null.shape[0] == 50 and bool(hits) and elapsed < 600
    best = max(clusters, key=lambda c: c[2]) if clusters else None
    record_criterion(2, ok, f"slope above permuted p95 from {best[0]:.3f} s to {best[1]:.3f} s "
                            f"(need start <= 0.3 s, length >= 0.5 s), 12 subjects in {elapsed:.0f} s"
                     if best else "no cluster above the permuted p95")
    assert ok


def test_criterion_3_dynamic_tracking():
    start = time.perf_counter()
    layout = standard_layout()
    plan = generate_trial_plan(3, blocks=10, trials_per_block=120, conditions=["DS"])
    truth = make_ground_truth(layout, 3)
    ep = simulate_epochs(plan.entries, truth, layout, 250.0, channels=posterior_labels(layout))
    bp = alpha_power(ep, PreprocessConfig())
    lat = lateralization_timecourse(bp)
    idx, t = lat.index["DynamicSingle"], lat.time_s
    ramp = (t >= 0) & (t <= truth.modulation.ramp_s)
    rho = spearmanr(t[ramp], idx[ramp]).statistic
    null = lateralization_null(bp, 200, seed=4)["DynamicSingle"]
    bound = np.percentile(np.abs(null), 95, axis=0)
    pre = t < 0
    inside = float(np.mean(np.abs(idx[pre]) < bound[pre]))
    elapsed = time.perf_counter() - start
    ok = rho > 0.9 and inside == 1.0 and elapsed < 120
    record_criterion(3, ok, f"Spearman rho over ramp {rho:.3f} (> 0.9), pre-onset points inside null "
                            f"95% bound {inside:.0%}, {elapsed:.1f} s (< 2 min)")
    assert ok


def test_criterion_4_erp_recovery_and_antisymmetry():
    layout = standard_layout()
    A = 3.0
    # 6400 lateral trials bring the averaged background noise to about 0.1 uV
    plan = generate_trial_plan(9, blocks=16, trials_per_block=600, conditions=["SS"])
    truth = make_ground_truth(layout, 9, evoked_uv=A)
    ep = simulate_epochs(plan.entries, truth, layout, 250.0, channels=list(REQUIRED_CHANNELS))
    erp = average_erp(ep)
    diff = erp.diff["StaticSingle"]["mean"]
    at = int(np.argmin(np.abs(erp.time_s - truth.evoked_latency_s)))
    recovered = -diff[at]
    rel = abs(recovered - A) / A
    swapped = [{Hemifield.LEFT: Hemifield.RIGHT, Hemifield.RIGHT: Hemifield.LEFT}.get(h, h)
               for h in trial_hemifields(ep)]
    neg = average_erp(ep, hemifields=swapped).diff["StaticSingle"]
    exact = all(np.array_equal(neg[k], -erp.diff["StaticSingle"][k]) for k in neg)
    ok = rel < 0.10 and exact
    record_criterion(4, ok, f"diff at 0.2 s = {-recovered:.3f} uV for injected -{A} uV "
                            f"(error {rel:.1%} < 10%), label swap negates exactly: {exact}")
    assert ok


def test_criterion_5_permutation_calibration():
    runs, n_sub, n_iter = 2000, 16, 1000
    rejections, min_p = 0, 1.0
    for r in range(runs):
        rng = np.random.default_rng([5, r])
        a, b = rng.standard_normal((2, n_sub))
        res = perm_ttest_paired(a, b, n_iter=n_iter, seed=[6, r])
        rejections += res.p_null < 0.05
        min_p = min(min_p, res.p_null)
    rate = rejections / runs
    ok = 0.03 <= rate <= 0.07 and min_p > 0
    record_criterion(5, ok, f"null rejection rate {rate:.2%} over {runs} runs (in [3%, 7%]), "
                            f"smallest p {min_p:.4f} (> 0)")
    assert ok


def test_criterion_6_filter_conformance():
    fs, order, (lo, hi) = 250.0, 3, PreprocessConfig().alpha_band_hz
    sos = design_butterworth(order, (lo, hi), "bandpass", fs)
    t = np.arange(int(40 * fs)) / fs
    measured, analytic, response = {}, {}, {}
    for f in (10.0, 2.0):
        y = butterworth_bandpass(np.sin(2 * np.pi * f * t), lo, hi, order, fs)
        measured[f] = sine_gain(y, f, fs, int(10 * fs))
        analytic[f] = float(butter_mag2(f, fs, order, lo, hi))
        response[f] = float(np.abs(signal.sosfreqz(sos, worN=[f], fs=fs)[1][0]) ** 2)
    err = max(abs(measured[f] - analytic[f]) for f in measured)
    err_design = max(abs(response[f] - analytic[f]) for f in response)
    ok = abs(measured[10.0] - 1) <= 0.02 and measured[2.0] < 0.05 and err < 1e-3 and err_design < 1e-3
    record_criterion(6, ok, f"zero-phase gain 10 Hz {measured[10.0]:.4f} (within 2% of 1), "
                            f"2 Hz {measured[2.0]:.2e} (< 0.05), max deviation from analytic "
                            f"|H|^2 {max(err, err_design):.1e} (< 1e-3)")
    assert ok


def test_criterion_7_structural_counts():
    layout = standard_layout()
    cfg = PreprocessConfig()
    rng = np.random.default_rng(0)
    from conftest import make_events
    ev = make_events([Condition.STATIC_SINGLE] * 6, range(6), 300, 700)
    rec = RawRecording(rng.standard_normal((64, 5000)), 250.0, layout, ev)
    n_samples = epoch(rec, cfg).n_samples

    counts = [20, 18, 25, 19, 22, 21]
    bins = np.concatenate([[b] * c for b, c in enumerate(counts)])
    eq = equalize_bins(make_epochset(np.zeros((bins.size, 64, 2)), layout, bins=bins), seed=0)
    eq_counts = np.bincount(eq.bins).tolist()

    power = rng.random((eq.n_trials, 18))
    n_inputs = make_averaged_trials(power, eq.bins, IemConfig(), seed=1).data.shape[0]

    bad = 0
    for seed in range(1000):
        plan = generate_trial_plan(seed)
        blocks = {k: [e.bin_index for e in entries] for k, _, entries in plan.block_entries()}
        bad += bool(plan_violations(blocks)) or len(plan.entries) != 2448
    ok = n_samples == 625 and n_inputs == 18 and eq_counts == [17] * 6 and bad == 0
    record_criterion(7, ok, f"epoch {n_samples} samples (625), {n_inputs} IEM inputs (18), "
                            f"equalized bins {eq_counts} (n-1 = 17), plans violating constraints "
                            f"{bad}/1000 (0)")
    assert ok


def test_criterion_8_golden_determinism(tmp_path):
    args = json.loads((GOLDEN / "simulate_args.json").read_text())
    data = tmp_path / "seed7"
    assert main(args + ["--out", str(data)]) == 0
    same_data = dataset_digest(data) == (GOLDEN / "dataset.sha256").read_text().strip()
    reports = []
    for run, workers in (("a", 1), ("b", 1), ("c", 4)):
        out = tmp_path / run
        assert main(["run", "--config", str(GOLDEN / "config.json"), "--input", str(data),
                     "--out", str(out), "--workers", str(workers)]) == 0
        reports.append((out / "report.json").read_bytes())
    golden = (GOLDEN / "report.json").read_bytes()
    ok = same_data and all(r == golden for r in reports)
    record_criterion(8, ok, f"dataset digest matches golden: {same_data}; report.json byte-identical "
                            f"to golden for workers 1, 1, 4: {[r == golden for r in reports]}")
    assert ok
