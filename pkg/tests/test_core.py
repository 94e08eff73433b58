import json
import warnings

import numpy as np
import pytest

from conftest import make_events, make_recording
from saber_eeg.core import (BIN_CENTERS_DEG, REQUIRED_CHANNELS, BandPowerSet, Condition, EpochSet,
                            Event, MissingFileError, RawRecording, SizeMismatchError,
                            UnknownVersionError, angle_diff_deg, bin_center, dataset_digest,
                            event_code, posterior_labels, read_dataset, read_events, write_dataset)


def test_standard_layout(layout):
    assert layout.n_channels == 64
    assert len(set(layout.labels)) == 64
    assert np.allclose(np.linalg.norm(layout.positions, axis=1), 1.0)
    for ch in REQUIRED_CHANNELS + ("M1", "M2", "Fp1", "Fp2"):
        assert ch in layout.labels
    assert ("PO7", "PO8") in layout.pairs and ("O1", "O2") in layout.pairs
    assert len(posterior_labels(layout)) == 18


def test_layout_rejects_duplicates(layout):
    d = layout.to_dict()
    d["labels"][1] = d["labels"][0]
    with pytest.raises(ValueError, match="unique"):
        type(layout).from_dict(d)


def test_layout_subset_keeps_pairs(layout):
    sub = layout.subset(posterior_labels(layout))
    assert sub.n_channels == 18
    assert ("PO3", "PO4") in sub.pairs


def test_condition_parsing():
    assert Condition.parse("SS") is Condition.STATIC_SINGLE
    assert Condition.parse("DynamicMultiple") is Condition.DYNAMIC_MULTIPLE
    assert Condition.STATIC_MULTIPLE.has_distractors
    assert not Condition.DYNAMIC_SINGLE.is_static
    with pytest.raises(ValueError):
        Condition.parse("XX")


def test_bins_and_angles():
    assert BIN_CENTERS_DEG == (30.0, 90.0, 150.0, 210.0, 270.0, 330.0)
    assert bin_center(5) == 330.0
    assert angle_diff_deg(350.0, 10.0) == -20.0
    assert angle_diff_deg(10.0, 190.0) == 180.0


def test_event_validation():
    Event(0, event_code(Condition.STATIC_SINGLE, 0), Condition.STATIC_SINGLE, 0, 39.5)
    with pytest.raises(ValueError, match="deg from bin"):
        Event(0, 11, Condition.STATIC_SINGLE, 0, 45.0)
    with pytest.raises(ValueError, match="outside"):
        Event(0, 11, Condition.STATIC_SINGLE, 6, 30.0)


def test_event_codes_unique():
    codes = {event_code(c, b) for c in Condition for b in range(6)}
    assert len(codes) == 24


def test_containers_read_only(layout):
    rec = make_recording(layout, 100)
    with pytest.raises(ValueError):
        rec.data[0, 0] = 1.0
    with pytest.raises(ValueError, match="sorted"):
        RawRecording(rec.data, 250.0, layout, make_events([Condition.STATIC_SINGLE] * 2, [0, 1], 50, -10))


def test_bandpower_nonnegative(layout):
    data = np.ones((1, 64, 10))
    ev = make_events([Condition.STATIC_SINGLE], [0])
    BandPowerSet(data, 250.0, 0.0, ev, layout)
    with pytest.raises(ValueError, match="non-negative"):
        BandPowerSet(-data, 250.0, 0.0, ev, layout)


def test_epochset_times_and_select(layout):
    ep = EpochSet(np.zeros((3, 64, 625)), 250.0, -0.5,
                  make_events([Condition.STATIC_SINGLE] * 3, [0, 1, 2]), layout)
    assert ep.times[0] == -0.5 and np.isclose(ep.times[-1], 1.996)
    assert ep.select([2]).bins.tolist() == [2]


def test_dataset_roundtrip(tmp_path, layout):
    ev = make_events([Condition.STATIC_SINGLE, Condition.DYNAMIC_MULTIPLE], [0, 4], 10, 100)
    rec = make_recording(layout, 500, events=ev)
    write_dataset(rec, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert np.array_equal(back.data, rec.data.astype("<f4").astype(float))
    assert back.events == rec.events
    assert back.layout.labels == layout.labels
    assert dataset_digest(tmp_path / "d") == dataset_digest(tmp_path / "d")


def test_dataset_errors(tmp_path, layout):
    rec = make_recording(layout, 200)
    d = tmp_path / "d"
    write_dataset(rec, d)
    with open(d / "data.f32le", "ab") as fh:
        fh.write(b"\0\0\0\0")
    with pytest.raises(SizeMismatchError, match="expected"):
        read_dataset(d)
    meta = json.loads((d / "meta.json").read_text())
    meta["version"] = 99
    (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(UnknownVersionError):
        read_dataset(d)
    with pytest.raises(MissingFileError):
        read_dataset(tmp_path / "nope")


def test_write_rejects_nonfinite(tmp_path, layout):
    data = np.zeros((64, 20))
    data[7, 3] = np.nan
    rec = RawRecording(data, 250.0, layout)
    with pytest.raises(ValueError, match=rf"{layout.labels[7]} at index 3"):
        write_dataset(rec, tmp_path / "d")


def test_unsorted_events_resorted(tmp_path, layout):
    ev = make_events([Condition.STATIC_SINGLE] * 3, [0, 1, 2], 10, 50)
    write_dataset(make_recording(layout, 300, events=ev), tmp_path / "d")
    lines = (tmp_path / "d" / "events.csv").read_text().splitlines()
    (tmp_path / "d" / "events.csv").write_text("\n".join([lines[0], lines[3], lines[1], lines[2]]) + "\n")
    assert [e.sample_index for e in read_events(tmp_path / "d" / "events.csv")] == [110, 10, 60]
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        rec = read_dataset(tmp_path / "d")
    assert any("re-sorting" in str(x.message) for x in w)
    assert [e.sample_index for e in rec.events] == [10, 60, 110]
