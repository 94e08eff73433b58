import numpy as np
import pytest

from conftest import make_events
from saber_eeg.core import LEFT_ROI, RIGHT_ROI, BandPowerSet, Condition
from saber_eeg.lateralization import (lateralization_index, lateralization_null,
                                      lateralization_timecourse, roi_power,
                                      write_lateralization_csv)


def test_index_formula():
    assert lateralization_index(3.0, 1.0) == 0.5
    assert lateralization_index(1.0, 3.0) == -0.5
    assert np.isnan(lateralization_index(0.0, 0.0))
    assert lateralization_index(2.0, 0.0) == 1.0


def _power(layout, bins, ipsi=2.0, contra=1.0, cond=Condition.DYNAMIC_SINGLE):
    n = len(bins)
    data = np.ones((n, 64, 100))
    for i, b in enumerate(bins):
        left_target = b in (2, 3)
        ipsi_roi, contra_roi = (LEFT_ROI, RIGHT_ROI) if left_target else (RIGHT_ROI, LEFT_ROI)
        data[i, layout.indices(ipsi_roi)] = ipsi
        data[i, layout.indices(contra_roi)] = contra
    return BandPowerSet(data, 250.0, -0.1, make_events([cond] * n, bins), layout)


def test_timecourse_sign_and_value(layout):
    bp = _power(layout, [0, 2, 3, 5, 1, 4])
    lat = lateralization_timecourse(bp)
    assert np.allclose(lat.index["DynamicSingle"], 1.0 / 3.0)
    assert lat.n_trials["DynamicSingle"] == 4


def test_roi_power(layout):
    bp = _power(layout, [0])
    assert np.allclose(roi_power(bp, RIGHT_ROI), 2.0)
    with pytest.raises(ValueError):
        roi_power(bp, [])


def test_null_is_centred(layout):
    rng = np.random.default_rng(0)
    bins = [0, 2, 3, 5] * 20
    bp = _power(layout, bins)
    noisy = bp.replace(data=bp.data * rng.uniform(0.5, 1.5, size=bp.data.shape))
    null = lateralization_null(noisy, 200, seed=3)["DynamicSingle"]
    assert null.shape == (200, 100)
    assert abs(null.mean()) < 0.05
    again = lateralization_null(noisy, 200, seed=3)["DynamicSingle"]
    assert np.array_equal(null, again)


def test_csv(tmp_path, layout):
    lat = lateralization_timecourse(_power(layout, [0, 2]))
    write_lateralization_csv(lat, tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "time_s,condition,index,n_trials"
    assert len(lines) == 101
