import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crisloc.model import CrislocError, CsiFrame, SubcarrierMask, dbm_to_mw
from crisloc.preprocess import (calibrate, calibrate_batch, frame_filter, frame_filter_mask,
                                mahalanobis, subcarrier_filter)
from crisloc.synth import generate_capture

MASK = SubcarrierMask(np.r_[np.zeros(2, bool), np.ones(30, bool)])


@settings(max_examples=60, deadline=None)
@given(st.floats(-90, -20), st.floats(1e-3, 1e3), st.integers(0, 2 ** 31))
def test_calibration_power_and_gain_invariance(rss, gain, seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=32) + 1j * rng.normal(size=32)
    f = CsiFrame("a", 0.0, h, rss)
    out = calibrate(f, MASK)
    assert np.isclose(np.sum(out ** 2), dbm_to_mw(rss), rtol=1e-9)
    assert np.allclose(calibrate(f.scaled(gain), MASK), out, rtol=1e-9, atol=0)


def test_unheard_frame_calibrates_to_zero():
    f = CsiFrame("a", 0.0, np.ones(32, complex), -100.0)
    assert np.all(calibrate(f, MASK) == 0)


def test_zero_power_with_rss_is_corrupt():
    with pytest.raises(CrislocError, match="corrupt"):
        calibrate_batch(np.zeros((1, 32)), np.array([-50.0]), MASK)


def test_mahalanobis_matches_direct(rng):
    x = rng.normal(size=(200, 3)) @ np.array([[2, 0, 0], [0.5, 1, 0], [0, 0, 0.3]])
    cov = np.cov(x, rowvar=False)
    cov = cov + 1e-6 * np.trace(cov) / 3 * np.eye(3)
    d = x - x.mean(axis=0)
    want = np.sqrt(np.einsum("ij,jk,ik->i", d, np.linalg.inv(cov), d))
    assert np.allclose(mahalanobis(x), want)


def test_frame_filter_removes_planted_outliers(rng):
    x = rng.normal(1.0, 0.05, size=(200, 10))
    x[[3, 50, 120]] *= 4.0
    keep = frame_filter_mask(x)
    assert not keep[[3, 50, 120]].any()
    assert keep.sum() >= 180
    assert frame_filter(x).shape[0] == keep.sum()


def test_frame_filter_needs_enough_frames(rng):
    with pytest.raises(CrislocError, match="recollect"):
        frame_filter_mask(rng.normal(size=(10, 10)))


def test_subcarrier_filter_finds_planted_set(scenario):
    caps = [generate_capture(scenario, p, 120, stream="sc") for p in scenario.grid[::5]]
    mask = subcarrier_filter(caps)
    assert mask.removed == sorted(scenario.zero_subcarriers | scenario.unstable_subcarriers)


def test_radio_map_shapes(radio_map, scenario):
    assert len(radio_map) == len(scenario.grid)
    assert radio_map.means.shape == (100, 9, radio_map.mask.active)
