"""Stage orchestration shared by the command-line subcommands.

A run reads each input dataset, cleans it unless it is already cleaned,
epochs, rejects, computes ERPs on the static conditions, equalizes bins,
extracts posterior alpha power and then computes lateralization and IEM
timecourses. Group statistics combine the per-subject results. Every stage
directory carries a ``manifest.json`` with the configuration hash and the
hashes of the stage inputs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import erp as erp_mod
from . import iem as iem_mod
from . import lateralization as lat_mod
from . import stats as stats_mod
from .core import (DYNAMIC_PAIR, EVENTS_HEADER, LEFT_ROI, REQUIRED_CHANNELS, RIGHT_ROI,
                   STATIC_PAIR, Condition, DatasetError, ElectrodeLayout, EpochSet, Event,
                   dataset_digest, event_code, posterior_labels, read_dataset, read_meta,
                   write_dataset)
from .iem import IemConfig, IemError
from .preprocess import (ConfigError, PreprocessConfig, alpha_power, clean_continuous,
                         epoch_with_counts, equalize_bins, reject_epochs)
from .simgen import plan_violations
from .svgplot import line_plot

SEED_ENV = "SABER_SEED"
REPORT_DIGITS = 10
# keys that never enter the configuration hash
UNHASHED = ("inputs", "output", "workers")


class PipelineError(RuntimeError):
    pass


class StageFailure(PipelineError):
    """A stage raised; ``stage`` names it and ``cause`` is the original exception."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class StatsConfig:
    alpha: float = 0.05
    n_iter: int = 1000
    min_cluster: int = 5

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha {self.alpha} outside (0, 1)")
        if self.n_iter < 1 or self.min_cluster < 1:
            raise ConfigError("n_iter and min_cluster must be >= 1")


@dataclass(frozen=True)
class StageToggles:
    erp: bool = True
    lateralization: bool = True
    iem: bool = True
    stats: bool = True


def _default_workers() -> int:
    return max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class PipelineConfig:
    inputs: tuple = ()
    output: str | None = None
    seed: int | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    iem: IemConfig = field(default_factory=IemConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    stages: StageToggles = field(default_factory=StageToggles)
    erp_windows: dict = field(default_factory=lambda: {"n1": [0.15, 0.2], "n2pc": [0.2, 0.3]})
    ocular: bool = True
    plots: bool = True
    lateralization_null_perm: int = 200
    workers: int = field(default_factory=_default_workers)

    def to_dict(self) -> dict:
        return {
            "inputs": list(self.inputs),
            "output": self.output,
            "seed": self.seed,
            "preprocess": self.preprocess.to_dict(),
            "iem": self.iem.to_dict(),
            "stats": asdict(self.stats),
            "stages": asdict(self.stages),
            "erp_windows": {k: list(v) for k, v in self.erp_windows.items()},
            "ocular": self.ocular,
            "plots": self.plots,
            "lateralization_null_perm": self.lateralization_null_perm,
            "workers": self.workers,
        }

    def validate(self, need_output: bool = True) -> "PipelineConfig":
        if self.seed is None:
            raise ConfigError(f"a seed is required (config, --seed or {SEED_ENV})")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not self.inputs:
            raise ConfigError("no input datasets")
        for p in self.inputs:
            if not (Path(p) / "meta.json").exists():
                raise ConfigError(f"input dataset {p} does not exist")
        if need_output and not self.output:
            raise ConfigError("an output directory is required")
        for name, win in self.erp_windows.items():
            if len(win) != 2 or not win[0] < win[1]:
                raise ConfigError(f"ERP window {name} must be an ordered (start, end) pair")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "erp_windows":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(d: dict) -> PipelineConfig:
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config fields {sorted(unknown)}")
    d = dict(d)
    try:
        if "preprocess" in d:
            d["preprocess"] = PreprocessConfig.from_dict(d["preprocess"])
        if "iem" in d:
            d["iem"] = IemConfig.from_dict(d["iem"])
        if "stats" in d:
            d["stats"] = StatsConfig(**d["stats"])
        if "stages" in d:
            d["stages"] = StageToggles(**d["stages"])
    except (TypeError, IemError) as exc:
        raise ConfigError(str(exc)) from exc
    if "inputs" in d:
        d["inputs"] = tuple(str(p) for p in d["inputs"])
    if d.get("workers") is None:
        d.pop("workers", None)
    return PipelineConfig(**d)


def load_config(path=None, overrides: dict | None = None, env=None) -> PipelineConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (flags).

    The seed falls back to the ``SABER_SEED`` environment variable.
    """
    env = os.environ if env is None else env
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    d = _merge(d, {k: v for k, v in (overrides or {}).items() if v is not None})
    if d.get("seed") is None and env.get(SEED_ENV):
        try:
            d["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from exc
    return config_from_dict(d)


def config_hash(cfg: PipelineConfig) -> str:
    d = {k: v for k, v in cfg.to_dict().items() if k not in UNHASHED}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def array_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def round_floats(obj, digits: int = REPORT_DIGITS):
    """Recursively round floats to ``digits`` significant digits; NaN becomes None."""
    if isinstance(obj, dict):
        return {k: round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, digits) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if not np.isfinite(x):
            return None if np.isnan(x) else ("inf" if x > 0 else "-inf")
        return float(f"{x:.{digits}g}")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return round_floats(obj.tolist(), digits)
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(round_floats(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(stage_dir, stage: str, cfg_hash: str, inputs: dict, outputs) -> None:
    write_json(Path(stage_dir) / "manifest.json", {
        "stage": stage, "config_hash": cfg_hash, "inputs": inputs, "outputs": sorted(outputs)})


def subject_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# --------------------------------------------------------------------------
# Per-subject analysis

@dataclass
class SubjectResult:
    name: str
    digest: str
    preprocess: dict = field(default_factory=dict)
    erp_time: np.ndarray | None = None
    erp_diff: dict = field(default_factory=dict)
    erp_amplitudes: dict = field(default_factory=dict)
    lat_time: np.ndarray | None = None
    lat_index: dict = field(default_factory=dict)
    lat_null_p95: dict = field(default_factory=dict)
    iem_time: np.ndarray | None = None
    slope: dict = field(default_factory=dict)
    slope_perm: dict = field(default_factory=dict)

    def save(self, path) -> None:
        arrays = {}
        for group in ("erp_diff", "lat_index", "lat_null_p95", "slope", "slope_perm"):
            for k, v in getattr(self, group).items():
                arrays[f"{group}:{k}"] = v
        for t in ("erp_time", "lat_time", "iem_time"):
            if getattr(self, t) is not None:
                arrays[t] = getattr(self, t)
        scalars = {"name": self.name, "digest": self.digest, "preprocess": self.preprocess,
                   "erp_amplitudes": self.erp_amplitudes}
        arrays["scalars"] = np.array(json.dumps(scalars, sort_keys=True))
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "SubjectResult":
        with np.load(path, allow_pickle=False) as z:
            scalars = json.loads(str(z["scalars"]))
            res = cls(scalars["name"], scalars["digest"], scalars["preprocess"],
                      erp_amplitudes=scalars["erp_amplitudes"])
            for key in z.files:
                if ":" in key:
                    group, k = key.split(":", 1)
                    getattr(res, group)[k] = z[key]
                elif key.endswith("_time"):
                    setattr(res, key, z[key])
        return res


def prepare_epochs(path, cfg: PipelineConfig):
    """Read, clean when raw, epoch and reject. Returns (epochs, preprocess summary, cleaned recording)."""
    rec = read_dataset(path)
    pp = cfg.preprocess
    summary = {"stage_in": rec.stage}
    if rec.stage == "raw":
        rec, report = clean_continuous(rec, pp, ocular=cfg.ocular)
        summary["n_bad_channels"] = report["n_bad_channels"]
        summary["bad_channels"] = report["channels"]["flagged"]
    elif rec.rate_hz != pp.target_rate_hz:
        raise PipelineError(f"cleaned dataset at {rec.rate_hz} Hz; expected {pp.target_rate_hz} Hz")
    ep, counts = epoch_with_counts(rec, pp)
    ep, fractions = reject_epochs(ep, pp.reject_uv, return_report=True)
    summary.update(counts)
    summary["rejection_rate"] = fractions
    summary["n_epochs_retained"] = ep.n_trials
    return ep, summary, rec


def compute_erp(ep: EpochSet, cfg: PipelineConfig):
    static = ep.select([i for i, c in enumerate(ep.conditions) if c.is_static])
    if static.n_trials == 0:
        return None, {}
    res = erp_mod.average_erp(static)
    amps = {}
    for name, win in cfg.erp_windows.items():
        amps[name] = {cond: {"contra_uv": a, "ipsi_uv": b, "diff_uv": a - b}
                      for cond, (a, b) in erp_mod.mean_amplitude(res, tuple(win)).items()}
    return res, amps


def alpha_channels(ep: EpochSet, cfg: PipelineConfig) -> list[str]:
    wanted = list(cfg.iem.electrodes) if cfg.iem.electrodes is not None else posterior_labels(ep.layout)
    # the lateralization ROIs always ride along with the IEM electrodes
    wanted += [c for c in LEFT_ROI + RIGHT_ROI + REQUIRED_CHANNELS if c not in wanted]
    return [c for c in ep.layout.labels if c in wanted]


def iem_pairs(bp) -> dict:
    present = set(bp.conditions)
    out = {}
    for name, pair in (("static", STATIC_PAIR), ("dynamic", DYNAMIC_PAIR)):
        conds = [c for c in pair if c in present]
        if conds:
            out[name] = conds
    return out


def analyze_subject(path, name: str, cfg: PipelineConfig, seed: int, out_dir=None,
                    cfg_hash: str = "") -> SubjectResult:
    """Full single-dataset analysis. Writes per-stage outputs below ``out_dir`` when given."""
    out = Path(out_dir) if out_dir is not None else None
    with _stage("preprocess"):
        digest = dataset_digest(path)
        ep, summary, _ = prepare_epochs(path, cfg)
        res = SubjectResult(name, digest, summary)
        ep_hash = array_digest(ep.data)
        if out is not None:
            d = _stage_dir(out, "preprocess")
            write_json(d / f"{name}_report.json", summary)
            write_manifest(d, "preprocess", cfg_hash, {name: digest}, _listing(d))

    if cfg.stages.erp:
        with _stage("erp"):
            erp_res, amps = compute_erp(ep, cfg)
            if erp_res is not None:
                res.erp_time = erp_res.time_s
                res.erp_diff = {c: v["mean"] for c, v in erp_res.diff.items()}
                res.erp_amplitudes = amps
                if out is not None:
                    d = _stage_dir(out, "erp")
                    erp_mod.write_erp_csv(erp_res, d / f"{name}_erp.csv")
                    write_json(d / f"{name}_erp_summary.json", {"n_trials": erp_res.n_trials, "windows": amps})
                    write_manifest(d, "erp", cfg_hash, {name: ep_hash}, _listing(d))

    if not (cfg.stages.lateralization or cfg.stages.iem):
        return res
    with _stage("alpha_power"):
        eq = equalize_bins(ep, seed=[seed, 1])
        bp = alpha_power(eq, cfg.preprocess, channels=alpha_channels(eq, cfg))
        bp_hash = array_digest(bp.data)
        res.preprocess["n_epochs_equalized"] = {c.value: sum(x == c for x in eq.conditions)
                                                for c in Condition if c in eq.conditions}

    if cfg.stages.lateralization:
        with _stage("lateralization"):
            lat = lat_mod.lateralization_timecourse(bp)
            null = lat_mod.lateralization_null(bp, cfg.lateralization_null_perm, [seed, 2])
            res.lat_time = lat.time_s
            res.lat_index = dict(lat.index)
            res.lat_null_p95 = {c: np.nanpercentile(np.abs(v), 95, axis=0) for c, v in null.items()}
            if out is not None:
                d = _stage_dir(out, "lateralization")
                lat_mod.write_lateralization_csv(lat, d / f"{name}_lateralization.csv")
                write_manifest(d, "lateralization", cfg_hash, {name: bp_hash}, _listing(d))

    if cfg.stages.iem:
        with _stage("iem"):
            icfg = replace(cfg.iem, workers=cfg.workers)
            for k, (pname, conds) in enumerate(iem_pairs(bp).items()):
                sub = bp.select([i for i, c in enumerate(bp.conditions) if c in conds])
                tc = iem_mod.run_iem_timecourse(sub, icfg, seed=subject_seed(seed, 3 + k))
                res.iem_time = tc.time_s
                res.slope.update(tc.slope)
                res.slope_perm.update(tc.slope_perm)
                if out is not None:
                    d = _stage_dir(out, "iem")
                    iem_mod.write_iem_csvs(tc, d / f"{name}_{pname}_crf.csv", d / f"{name}_{pname}_slope.csv")
                    write_json(d / f"{name}_{pname}_manifest.json", tc.manifest)
            if out is not None and res.slope:
                write_manifest(_stage_dir(out, "iem"), "iem", cfg_hash, {name: bp_hash}, _listing(out / "iem"))
    return res


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageFailure:
        raise
    except Exception as exc:
        raise StageFailure(name, exc) from exc


def _stage_dir(out: Path, stage: str) -> Path:
    d = out / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _listing(d: Path) -> list[str]:
    return [p.name for p in Path(d).iterdir() if p.name != "manifest.json"]


# --------------------------------------------------------------------------
# Group statistics

def _peak(time_s, values) -> dict:
    values = np.asarray(values, dtype=float)
    if not np.isfinite(values).any():
        return {"value": None, "time_s": None}
    i = int(np.nanargmax(values))
    return {"value": float(values[i]), "time_s": float(time_s[i])}


def _safe(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs), None
    except stats_mod.StatsError as exc:
        return None, str(exc)


def group_stats(results: list[SubjectResult], cfg: PipelineConfig) -> dict:
    """Group-level tests and cluster tables over per-subject results."""
    sc = cfg.stats
    n = len(results)
    out: dict = {"n_subjects": n}
    test_id = 0

    def next_seed():
        nonlocal test_id
        test_id += 1
        return [cfg.seed, 20, test_id]

    if cfg.stages.erp and all(r.erp_amplitudes for r in results):
        erp_out = {}
        for win in cfg.erp_windows:
            conds = sorted(set.intersection(*(set(r.erp_amplitudes[win]) for r in results)))
            entry = {}
            for cond in conds:
                diffs = np.array([r.erp_amplitudes[win][cond]["diff_uv"] for r in results])
                item = {"mean_diff_uv": float(diffs.mean())}
                if n >= 2:
                    t, err = _safe(stats_mod.perm_test_vs_zero, diffs, sc.n_iter, next_seed())
                    item["test"] = t.to_dict("diff_vs_zero") if t else {"error": err}
                entry[cond] = item
            if n >= 2 and len(conds) == 2:
                a = np.array([r.erp_amplitudes[win][conds[0]]["diff_uv"] for r in results])
                b = np.array([r.erp_amplitudes[win][conds[1]]["diff_uv"] for r in results])
                t, err = _safe(stats_mod.perm_ttest_paired, a, b, sc.n_iter, next_seed())
                entry["paired"] = t.to_dict(f"{conds[0]}_vs_{conds[1]}") if t else {"error": err}
            erp_out[win] = entry
        out["erp"] = erp_out

    if cfg.stages.lateralization and all(r.lat_index for r in results):
        lat_out = {}
        time_s = results[0].lat_time
        for cond in sorted(set.intersection(*(set(r.lat_index) for r in results))):
            vals = np.array([r.lat_index[cond] for r in results])
            mean = np.nanmean(vals, axis=0)
            item = {"peak": _peak(time_s, mean), "trough": _peak(time_s, -mean)}
            if item["trough"]["value"] is not None:
                item["trough"]["value"] = -item["trough"]["value"]
            if n >= 2:
                rep, err = _safe(stats_mod.timecourse_significance, vals, 0.0, time_s, sc.alpha,
                                 sc.min_cluster, sc.n_iter, next_seed())
                item["clusters"] = rep.to_list() if rep else {"error": err}
            lat_out[cond] = item
        out["lateralization"] = lat_out

    if cfg.stages.iem and all(r.slope for r in results):
        iem_out = {}
        time_s = results[0].iem_time
        for cond in sorted(set.intersection(*(set(r.slope) for r in results))):
            slopes = np.array([r.slope[cond] for r in results])
            item = {"peak": _peak(time_s, slopes.mean(axis=0))}
            perm = np.array([r.slope_perm[cond] for r in results])
            rep, err = _safe(stats_mod.slope_vs_permuted, slopes, perm, time_s, sc.alpha, sc.min_cluster)
            item["clusters_vs_permuted"] = rep.to_list() if rep else {"error": err}
            iem_out[cond] = item
        out["iem"] = iem_out
    return out


def subject_summary(r: SubjectResult) -> dict:
    keys = ("rejection_rate", "n_epochs", "n_epochs_retained", "n_missed", "n_edge",
            "n_bad_channels", "n_epochs_equalized")
    return {k: r.preprocess[k] for k in keys if k in r.preprocess}


def build_report(results, group: dict, cfg: PipelineConfig) -> dict:
    return {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "inputs": [r.digest for r in results],
        "subjects": {r.name: subject_summary(r) for r in results},
        "group": group,
    }


def write_plots(results, group: dict, out: Path) -> None:
    d = _stage_dir(out, "plots")
    if group.get("lateralization"):
        time_s = results[0].lat_time
        series = {c: np.nanmean([r.lat_index[c] for r in results], axis=0) for c in group["lateralization"]}
        clusters = {c: [(x["start_s"], x["end_s"]) for x in v.get("clusters", [])]
                    for c, v in group["lateralization"].items() if isinstance(v.get("clusters"), list)}
        (d / "lateralization.svg").write_text(
            line_plot(time_s, series, clusters, "Alpha lateralization index", "index"), encoding="utf-8")
    if group.get("iem"):
        time_s = results[0].iem_time
        for pname, pair in (("static", STATIC_PAIR), ("dynamic", DYNAMIC_PAIR)):
            conds = [c.value for c in pair if c.value in group["iem"]]
            if not conds:
                continue
            series = {c: np.mean([r.slope[c] for r in results], axis=0) for c in conds}
            clusters = {c: [(x["start_s"], x["end_s"]) for x in group["iem"][c]["clusters_vs_permuted"]]
                        for c in conds if isinstance(group["iem"][c]["clusters_vs_permuted"], list)}
            (d / f"iem_slope_{pname}.svg").write_text(
                line_plot(time_s, series, clusters, f"CRF slope ({pname})", "slope"), encoding="utf-8")


def subject_names(inputs) -> list[str]:
    return [f"sub{i + 1:02d}" for i in range(len(inputs))]


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute every enabled stage; on failure leave a ``FAILED`` marker and re-raise."""
    cfg.validate()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    write_json(out / "config.json", {k: v for k, v in cfg.to_dict().items() if k not in UNHASHED})
    try:
        results = []
        for i, (path, name) in enumerate(zip(cfg.inputs, subject_names(cfg.inputs))):
            results.append(analyze_subject(path, name, cfg, subject_seed(cfg.seed, i), out, h))
            results[-1].save(_stage_dir(out, "subjects") / f"{name}.npz")
        with _stage("stats"):
            group = group_stats(results, cfg) if cfg.stages.stats else {}
            if cfg.stages.stats:
                d = _stage_dir(out, "stats")
                write_json(d / "stats.json", group)
                write_manifest(d, "stats", h, {r.name: r.digest for r in results}, _listing(d))
        with _stage("report"):
            report = build_report(results, group, cfg)
            write_json(out / "report.json", report)
        if cfg.plots and group:
            with _stage("plots"):
                write_plots(results, group, out)
    except StageFailure as exc:
        (out / "FAILED").write_text(
            f"stage: {exc.stage}\nerror: {type(exc.cause).__name__}: {exc.cause}\n", encoding="utf-8")
        raise
    return report


def run_stats_only(result_paths, cfg: PipelineConfig, out) -> dict:
    results = [SubjectResult.load(p) for p in result_paths]
    if not results:
        raise ConfigError("no subject result files")
    group = group_stats(results, cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "stats.json", group)
    write_manifest(out, "stats", config_hash(cfg), {r.name: r.digest for r in results}, _listing(out))
    return group


def write_cleaned(path, cfg: PipelineConfig, out) -> dict:
    """Clean one raw dataset and store it as a ``cleaned`` dataset directory."""
    rec = read_dataset(path)
    if rec.stage != "raw":
        raise PipelineError(f"{path} is already cleaned")
    cleaned, report = clean_continuous(rec, cfg.preprocess, ocular=cfg.ocular)
    out = Path(out)
    write_dataset(cleaned, out)
    write_json(out / "preprocess_report.json", report)
    write_manifest(out, "preprocess", config_hash(cfg), {"dataset": dataset_digest(path)},
                   ["meta.json", "data.f32le", "events.csv", "preprocess_report.json"])
    return report


# --------------------------------------------------------------------------
# Dataset validation

def _split_blocks(events) -> dict:
    """Group events into blocks: runs of one condition split at unusually long gaps."""
    blocks, current, key = {}, [], None
    count = {}
    gaps = np.diff([ev.sample_index for ev in events])
    limit = 1.5 * float(np.median(gaps)) if gaps.size else np.inf
    for i, ev in enumerate(events):
        new = key is None or ev.condition != key or (i and gaps[i - 1] > limit)
        if new and current:
            blocks[f"{key.value} block {count[key]}"] = current
        if new:
            key = ev.condition
            count[key] = count.get(key, 0) + 1
            current = []
        current.append(ev.bin_index)
    if current:
        blocks[f"{key.value} block {count[key]}"] = current
    return blocks


def validate_dataset(path) -> list[str]:
    """Every format, event-ordering and plan-constraint violation found in ``path``."""
    path = Path(path)
    out = []
    try:
        meta = read_meta(path)
    except (DatasetError, json.JSONDecodeError) as exc:
        return [f"meta.json: {exc}"]
    try:
        layout = ElectrodeLayout.from_dict(meta["layout"])
        if layout.n_channels != int(meta["n_channels"]):
            out.append(f"meta.json: n_channels {meta['n_channels']} but layout has {layout.n_channels}")
    except (KeyError, ValueError, TypeError) as exc:
        out.append(f"meta.json: invalid layout ({exc})")
    if meta.get("stage") not in ("raw", "cleaned"):
        out.append(f"meta.json: unknown stage {meta.get('stage')!r}")
    n_ch, n_samp = int(meta.get("n_channels", 0)), int(meta.get("n_samples", 0))
    data_path = path / "data.f32le"
    if not data_path.exists():
        out.append("data.f32le: missing")
    else:
        size = data_path.stat().st_size
        if size != n_ch * n_samp * 4:
            out.append(f"data.f32le: size mismatch, {size} bytes but meta implies "
                       f"{n_ch} x {n_samp} x 4 = {n_ch * n_samp * 4}")
        else:
            mm = np.memmap(data_path, dtype="<f4", mode="r", shape=(n_ch, n_samp))
            for start in range(0, n_samp, 1 << 18):
                chunk = np.asarray(mm[:, start:start + (1 << 18)])
                bad = np.argwhere(~np.isfinite(chunk))
                if bad.size:
                    out.append(f"data.f32le: non-finite sample at channel {bad[0][0]}, "
                               f"index {start + bad[0][1]}")
                    break
            del mm
    ev_path = path / "events.csv"
    if not ev_path.exists():
        out.append("events.csv: missing")
        return out
    events = []
    with ev_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != EVENTS_HEADER:
            out.append(f"events.csv: header must be {','.join(EVENTS_HEADER)}")
            return out
        for line, row in enumerate(reader, start=2):
            try:
                ev = Event(int(row["sample"]), int(row["code"]), Condition.parse(row["condition"]),
                           int(row["bin"]), float(row["angle_deg"]),
                           row["hit"].strip().lower() in ("1", "true"),
                           float(row["rt_ms"]) if row["rt_ms"].strip() else None)
            except (ValueError, TypeError) as exc:
                out.append(f"events.csv line {line}: {exc}")
                continue
            if ev.code != event_code(ev.condition, ev.bin_index):
                out.append(f"events.csv line {line}: code {ev.code} does not match "
                           f"{ev.condition.value} bin {ev.bin_index}")
            if not 0 <= ev.sample_index < n_samp:
                out.append(f"events.csv line {line}: sample {ev.sample_index} outside recording")
            if events and ev.sample_index <= events[-1][1].sample_index:
                out.append(f"events.csv line {line}: sample {ev.sample_index} not after "
                           f"line {events[-1][0]} ({events[-1][1].sample_index})")
            events.append((line, ev))
    if events:
        out.extend(f"plan: {v}" for v in plan_violations(_split_blocks([e for _, e in events])))
    return out
