import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_epochset
from saber_eeg.core import angle_diff_deg, standard_layout
from saber_eeg.erp import Hemifield, hemifield_of
from saber_eeg.iem import OFFSETS_DEG, basis_response, crf_slope, fold_crf
from saber_eeg.lateralization import lateralization_index
from saber_eeg.preprocess import equalize_bins
from saber_eeg.simgen import _bin_sequence, plan_violations
from saber_eeg.stats import perm_test_vs_zero

angles = st.floats(-720, 720, allow_nan=False)
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@given(angles, angles)
def test_angle_diff_range(a, b):
    d = angle_diff_deg(a, b)
    assert -180 < d <= 180


@given(angles, angles)
def test_basis_bounded_and_symmetric(theta, center):
    r = basis_response(theta, center)
    assert 0.0 <= r <= 1.0
    mirrored = basis_response(2 * center - theta, center)
    assert abs(r - mirrored) < 1e-9


@given(st.floats(0, 1e6), st.floats(0, 1e6))
def test_lateralization_bounded(ipsi, contra):
    v = lateralization_index(ipsi, contra)
    if ipsi + contra == 0:
        assert np.isnan(v)
    else:
        assert -1.0 <= v <= 1.0


@given(arrays(float, (6, 5), elements=finite))
def test_fold_invariants(crf):
    f = fold_crf(crf, OFFSETS_DEG)
    assert np.array_equal(f[0], crf[2]) and np.array_equal(f[3], crf[5])
    assert np.array_equal(f[1], (crf[1] + crf[3]) / 2)
    assert np.array_equal(f[2], (crf[0] + crf[4]) / 2)


@given(arrays(float, (4,), elements=finite), finite)
def test_slope_shift_invariant(folded, c):
    assert abs(crf_slope(folded + c) - crf_slope(folded)) < 1e-6 * (1 + np.abs(folded).max() + abs(c))


@given(st.floats(0, 360, exclude_max=True))
def test_hemifield_mirror(theta):
    h = hemifield_of(theta)
    m = hemifield_of((180 - theta) % 360)
    if h == Hemifield.MIDLINE:
        assert m == Hemifield.MIDLINE
    else:
        assert {h, m} == {Hemifield.LEFT, Hemifield.RIGHT}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(2, 12), min_size=6, max_size=6), st.integers(0, 2 ** 31))
def test_equalize_property(counts, seed):
    layout = standard_layout()
    bins = np.concatenate([[b] * c for b, c in enumerate(counts)])
    ep = make_epochset(np.zeros((bins.size, 64, 2)), layout, bins=bins)
    out = equalize_bins(ep, seed)
    assert np.bincount(out.bins, minlength=6).tolist() == [min(counts) - 1] * 6


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 150), st.integers(0, 2 ** 32 - 1))
def test_bin_sequence_constraints(n, seed):
    seq = _bin_sequence(n, 6, np.random.default_rng(seed))
    assert len(seq) == n
    assert plan_violations({"b": seq}) == []


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.integers(3, 20), elements=st.floats(-10, 10)).filter(lambda x: np.any(x != 0)),
       st.integers(0, 1000))
def test_p_value_never_zero(x, seed):
    res = perm_test_vs_zero(x, 99, seed)
    assert 1 / 100 <= res.p_null <= 1.0
