import filecmp
import json
import subprocess
import sys
from pathlib import Path

import pytest

from saber_eeg.cli import main
from saber_eeg.core import dataset_digest

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def seed7(tmp_path_factory):
    """The golden seed-7 dataset, regenerated and checked against its frozen digest."""
    out = tmp_path_factory.mktemp("golden") / "seed7"
    args = json.loads((GOLDEN / "simulate_args.json").read_text())
    assert main(args + ["--out", str(out)]) == 0
    assert dataset_digest(out) == (GOLDEN / "dataset.sha256").read_text().strip()
    return out


@pytest.fixture(scope="session")
def golden_run(seed7, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "w1"
    rc = main(["run", "--config", str(GOLDEN / "config.json"), "--input", str(seed7),
               "--out", str(out), "--workers", "1"])
    assert rc == 0
    return out


def _tree(path):
    return sorted(p.relative_to(path).as_posix() for p in Path(path).rglob("*") if p.is_file())


def test_simulate_deterministic(tmp_path, capsys):
    args = ["simulate", "--seed", "7", "--blocks", "1", "--trials-per-block", "12", "--rate", "250"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    text = capsys.readouterr().out
    assert "StaticSingle" in text and "per bin" in text
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files = _tree(tmp_path / "a")
    assert files == ["data.f32le", "events.csv", "meta.json", "truth.json"]
    for f in files:
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)


def test_simulate_requires_out():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--seed", "1"])
    assert exc.value.code == 2
    proc = subprocess.run([sys.executable, "-m", "saber_eeg.cli", "simulate", "--seed", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_simulate_seed_from_env(tmp_path, monkeypatch):
    monkeypatch.delenv("SABER_SEED", raising=False)
    args = ["simulate", "--blocks", "1", "--trials-per-block", "6", "--rate", "250", "--conditions", "SS"]
    assert main(args + ["--out", str(tmp_path / "x")]) == 2
    monkeypatch.setenv("SABER_SEED", "3")
    assert main(args + ["--out", str(tmp_path / "y")]) == 0
    assert json.loads((tmp_path / "y" / "truth.json").read_text())["seed"] == 3


def test_simulate_default_counts(tmp_path):
    assert main(["simulate", "--seed", "7", "--rate", "250", "--out", str(tmp_path / "d")]) == 0
    lines = (tmp_path / "d" / "events.csv").read_text().splitlines()
    assert len(lines) - 1 == 4 * 6 * 102 == 2448


def test_validate_clean_dataset(seed7, capsys):
    assert main(["validate", str(seed7)]) == 0
    assert capsys.readouterr().out.strip().endswith("0 violations")


def _copy_dataset(src, dst):
    dst.mkdir()
    for name in ("meta.json", "data.f32le", "events.csv"):
        (dst / name).write_bytes((src / name).read_bytes())
    return dst


def test_validate_reports_truncated_data(seed7, tmp_path, capsys):
    d = _copy_dataset(seed7, tmp_path / "d")
    raw = (d / "data.f32le").read_bytes()
    (d / "data.f32le").write_bytes(raw[:-400])
    assert main(["validate", str(d)]) == 1
    out = capsys.readouterr().out
    assert "data.f32le: size mismatch" in out


def test_validate_reports_repeated_bins(seed7, tmp_path, capsys):
    d = _copy_dataset(seed7, tmp_path / "d")
    lines = (d / "events.csv").read_text().splitlines()
    rows = [ln.split(",") for ln in lines[1:]]
    # copy trial 4's bin, angle and code onto trial 5
    rows[5][1:5] = rows[4][1:5]
    (d / "events.csv").write_text("\n".join([lines[0]] + [",".join(r) for r in rows]) + "\n")
    assert main(["validate", str(d)]) == 1
    out = capsys.readouterr().out
    assert "plan:" in out and "repeated at trials 4 and 5" in out


def test_golden_report(golden_run):
    got = (golden_run / "report.json").read_bytes()
    assert got == (GOLDEN / "report.json").read_bytes()


def test_run_outputs_and_manifests(golden_run):
    files = _tree(golden_run)
    for stage in ("preprocess", "erp", "lateralization", "iem", "stats"):
        m = json.loads((golden_run / stage / "manifest.json").read_text())
        assert m["stage"] == stage and len(m["config_hash"]) == 64 and m["inputs"]
    assert "plots/lateralization.svg" in files and "plots/iem_slope_static.svg" in files
    assert "FAILED" not in files
    report = json.loads((golden_run / "report.json").read_text())
    text = json.dumps(report)
    assert str(golden_run) not in text and "workers" not in text


def test_rerun_requires_force(golden_run):
    assert main(["run", "--config", str(GOLDEN / "config.json"), "--input", "x", "--out",
                 str(golden_run)]) == 2


def test_erp_toggle_leaves_other_outputs(seed7, golden_run, tmp_path):
    out = tmp_path / "noerp"
    assert main(["run", "--config", str(GOLDEN / "config.json"), "--input", str(seed7), "--out",
                 str(out), "--disable", "erp", "--workers", "1"]) == 0
    assert not (out / "erp").exists()
    for rel in ("lateralization/sub01_lateralization.csv", "iem/sub01_static_slope.csv",
                "iem/sub01_dynamic_crf.csv"):
        assert filecmp.cmp(out / rel, golden_run / rel, shallow=False)
    a = json.loads((out / "report.json").read_text())["group"]
    b = json.loads((golden_run / "report.json").read_text())["group"]
    assert "erp" not in a
    assert a["iem"] == b["iem"] and a["lateralization"] == b["lateralization"]


def test_missing_seed_is_config_error(seed7, tmp_path, monkeypatch):
    monkeypatch.delenv("SABER_SEED", raising=False)
    assert main(["run", "--input", str(seed7), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--seed", "1", "--input", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_stage_failure_leaves_marker(seed7, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"seed": 1, "iem": {"electrodes": ["Oz", "O1", "O2"]},
                               "stages": {"erp": False, "lateralization": False}}))
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--input", str(seed7), "--out", str(out)]) == 1
    marker = (out / "FAILED").read_text()
    assert "stage: iem" in marker and "IemError" in marker
    assert (out / "preprocess" / "sub01_report.json").exists()


def test_single_stage_and_stats_commands(seed7, tmp_path, capsys):
    out = tmp_path / "lat"
    assert main(["lateralize", str(seed7), "--seed", "7", "--out", str(out)]) == 0
    assert (out / "lateralization" / "seed7_lateralization.csv").exists()
    assert not (out / "iem").exists()
    capsys.readouterr()
    assert main(["stats", str(out / "seed7.npz"), str(out / "seed7.npz"), "--seed", "7",
                 "--out", str(tmp_path / "st")]) == 0
    group = json.loads((tmp_path / "st" / "stats.json").read_text())
    assert group["n_subjects"] == 2 and "lateralization" in group


def test_preprocess_command_writes_cleaned(seed7, tmp_path):
    from saber_eeg.core import read_meta
    out = tmp_path / "clean"
    assert main(["preprocess", str(seed7), "--seed", "7", "--out", str(out)]) == 0
    meta = read_meta(out)
    assert meta["stage"] == "cleaned" and meta["rate_hz"] == 250.0
    assert main(["validate", str(out)]) == 0
    erp_out = tmp_path / "erp"
    assert main(["erp", str(out), "--seed", "7", "--out", str(erp_out)]) == 0
    summary = json.loads((erp_out / "erp" / "clean_erp_summary.json").read_text())
    assert summary["windows"]["n1"]["StaticSingle"]["diff_uv"] < 0
