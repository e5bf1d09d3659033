import numpy as np
import pytest

from crisloc.model import CrislocError, Position
from crisloc.synth import (generate_capture, load_captures, load_scenario, make_scenario, move_ap,
                           path_loss_dbm, random_relocation, rng_for, save_captures,
                           save_scenario, true_amplitudes)


def test_same_seed_same_capture(scenario):
    a = generate_capture(scenario, scenario.grid[5], 20, stream="s")
    b = generate_capture(scenario, scenario.grid[5], 20, stream="s")
    for ap in a.ap_ids:
        assert np.array_equal(a.csi[ap], b.csi[ap])
        assert np.array_equal(a.rss_dbm[ap], b.rss_dbm[ap])


def test_streams_are_independent(scenario):
    a = generate_capture(scenario, scenario.grid[5], 20, stream="s1")
    b = generate_capture(scenario, scenario.grid[5], 20, stream="s2")
    assert not np.array_equal(a.csi["ap0"], b.csi["ap0"])


def test_received_power_follows_log_distance(scenario):
    env = scenario.env
    tx = Position(0.0, 0.0)
    for d in (1.0, 2.0, 4.0, 8.0):
        want = env.p_d0_dbm - 10 * env.n * np.log10(d / env.d0)
        assert np.isclose(path_loss_dbm(env, tx, Position(d, 0.0)), want)


def test_zero_subcarriers_are_empty(scenario):
    cap = generate_capture(scenario, scenario.grid[0], 10)
    for ap in cap.ap_ids:
        assert np.all(cap.csi[ap][:, sorted(scenario.zero_subcarriers)] == 0)


def test_move_ap_marks_altered_and_changes_field(scenario):
    ap = scenario.ap_ids[0]
    new = random_relocation(scenario, ap, 3.0, rng_for("t", 0))
    assert abs(new.distance(scenario.ap(ap).position) - 3.0) < 1e-9
    moved = move_ap(scenario, ap, new)
    assert moved.altered == {ap}
    rx = scenario.grid[40]
    before, _ = true_amplitudes(scenario, scenario.ap(ap), rx)
    after, _ = true_amplitudes(moved, moved.ap(ap), rx)
    assert not np.allclose(before, after)
    # other APs untouched
    other = scenario.ap_ids[1]
    assert np.array_equal(true_amplitudes(scenario, scenario.ap(other), rx)[0],
                          true_amplitudes(moved, moved.ap(other), rx)[0])


def test_move_ap_is_deterministic(scenario):
    p = Position(1.0, 1.0)
    a, b = move_ap(scenario, "ap1", p), move_ap(scenario, "ap1", p)
    rx = scenario.grid[3]
    assert np.array_equal(true_amplitudes(a, a.ap("ap1"), rx)[0],
                          true_amplitudes(b, b.ap("ap1"), rx)[0])


def test_capture_outside_room_rejected(scenario):
    with pytest.raises(CrislocError):
        generate_capture(scenario, Position(-50.0, 0.0), 5)


def test_scenario_round_trip(tmp_path, scenario):
    sc = move_ap(scenario, "ap2", Position(2.0, 2.0))
    save_scenario(sc, tmp_path / "s.json")
    back = load_scenario(tmp_path / "s.json")
    assert back.altered == sc.altered and back.grid == sc.grid
    rx = sc.grid[17]
    c1 = generate_capture(sc, rx, 5, stream="x")
    c2 = generate_capture(back, rx, 5, stream="x")
    assert np.allclose(c1.csi["ap2"], c2.csi["ap2"])


def test_capture_set_round_trip(tmp_path, scenario):
    caps = [generate_capture(scenario, p, 8) for p in scenario.grid[:3]]
    save_captures(caps, tmp_path / "c.npz", {"k": 1})
    back, meta = load_captures(tmp_path / "c.npz")
    assert meta == {"k": 1} and len(back) == 3
    for a, b in zip(caps, back):
        assert a.rx == b.rx
        for ap in a.ap_ids:
            assert np.allclose(np.abs(a.csi[ap]), np.abs(b.csi[ap]))
            assert np.array_equal(a.rss_dbm[ap], b.rss_dbm[ap])


def test_missing_capture_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_captures(tmp_path / "nope.npz")


def test_grid_shape():
    sc = make_scenario(seed=1, nx=4, ny=3, spacing=0.5)
    assert len(sc.grid) == 12
    assert all(sc.contains(p) for p in sc.rp_positions)
    assert set(sc.rp_positions) <= set(sc.grid)
