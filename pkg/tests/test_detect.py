import math
from itertools import combinations

import numpy as np
import pytest
from scipy.stats import gaussian_kde

from crisloc.detect import (JointResult, KdeModel, SubsetResult, adaptive_eta, auto_rho,
                            gen_subsets, joint_detect, kde_detect, kde_fit, knee_index,
                            sequential_detect, silverman_bandwidth, weighted_jenks)
from crisloc.model import CrislocError, Position, RadioMap, SubcarrierMask

APS = tuple(f"ap{i}" for i in range(9))


def test_silverman_formula(rng):
    x = rng.normal(3.0, 2.0, size=(500, 1))
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    want = 0.9 * min(sd, iqr / 1.34) * 500 ** -0.2
    assert silverman_bandwidth(x)[0] == pytest.approx(want)


def test_kde_density_matches_scipy(rng):
    x = rng.normal(size=(200, 1))
    h = silverman_bandwidth(x)
    m = KdeModel((Position(0, 0),), ("a",), {(0, "a"): x}, {(0, "a"): h})
    ref = gaussian_kde(x[:, 0], bw_method=h[0] / x[:, 0].std(ddof=1))
    grid = np.linspace(-3, 3, 7)
    assert np.allclose(m.density(0, "a", grid[:, None])[:, 0], ref(grid), rtol=1e-6)


def rp_map(samples_per_rp):
    mask = SubcarrierMask(np.ones(8, bool))
    pos = tuple(Position(float(i), 0.0) for i in range(len(samples_per_rp)))
    return RadioMap(mask, pos, tuple(samples_per_rp), 1.0, ("a", "b"))


def test_kde_detect_flags_shifted_ap(rng):
    hist = rp_map([{"a": rng.normal(1, 0.1, (200, 8)), "b": rng.normal(2, 0.1, (200, 8))}
                   for _ in range(4)])
    model = kde_fit(hist)
    fresh = [{"a": rng.normal(1, 0.1, (50, 8)), "b": rng.normal(2.5, 0.1, (50, 8))}
             for _ in range(4)]
    v = kde_detect(model, fresh, 0.05)
    assert v["b"].altered and not v["a"].altered
    assert 0 <= v["b"].p < v["a"].p <= 1


def test_kde_needs_enough_samples(rng):
    with pytest.raises(CrislocError, match="KDE"):
        kde_fit(rp_map([{"a": rng.normal(size=(5, 8)), "b": rng.normal(size=(5, 8))}]))


def test_subsets_enumerated_when_budget_allows():
    subs = gen_subsets(APS[:4], budget=60)
    assert sorted(map(sorted, subs)) == sorted(
        sorted(c) for s in (3, 4) for c in combinations(APS[:4], s))


def test_subsets_sampled_balanced_and_deterministic():
    subs = gen_subsets(APS, budget=60, rng_seed=3)
    assert len(subs) == 60 and all(3 <= len(s) <= 5 for s in subs)
    counts = [sum(a in s for s in subs) for a in APS]
    assert max(counts) - min(counts) <= 1
    assert subs == gen_subsets(APS, budget=60, rng_seed=3)


def test_subsets_need_four_aps():
    with pytest.raises(CrislocError):
        gen_subsets(APS[:3])


def test_knee_and_auto_rho():
    assert knee_index(np.array([1, 1, 1, 1, 5, 9.0])) == 3
    rng = np.random.default_rng(1)
    tight = rng.normal(0, 0.05, (40, 2))
    far = np.array([[5, 5], [-5, 5], [5, -5.0]])
    rho = auto_rho(np.vstack([tight, far]))
    assert 0 < rho < 1


def test_adaptive_eta():
    assert adaptive_eta(2.0, 1.0, 0.5) == pytest.approx(2.0)
    assert adaptive_eta(100.0, 1.0, 0.5) == pytest.approx(1.0)
    assert adaptive_eta(0.0, 1.0, 0.5) == pytest.approx(math.exp(4) + 1)


def test_weighted_jenks_picks_high_class():
    freq = {"a": 0, "b": 1, "c": 0, "d": 9, "e": 1}
    assert weighted_jenks(freq, 1.5) == {"d"}


def subset_sample(bad: set, rng):
    """Clean subsets agree near the origin; subsets with a bad AP land spread
    out on a wide ring, so the k-distance curve has one clear knee."""
    subsets = gen_subsets(APS, 60, 0)
    n_bad = sum(bool(s & bad) for s in subsets)
    out, j = [], 0
    for s in subsets:
        if s & bad:
            t = 2 * np.pi * j / n_bad
            xy = 10 * np.array([np.cos(t), np.sin(t)]) + rng.normal(0, 0.01, 2)
            j += 1
        else:
            xy = rng.normal(0, 0.05, 2)
        out.append(SubsetResult(s, Position.of(xy)))
    return out


def test_joint_detect_cluster_branch_finds_altered(rng):
    res = joint_detect(subset_sample({"ap4"}, rng), (1.0, 0.5), ap_ids=APS)
    assert res.branch == "cluster"
    assert res.alleged == {"ap4"}


def test_joint_detect_is_order_independent(rng):
    sample = subset_sample({"ap2"}, rng)
    a = joint_detect(sample, (1.0, 0.5), ap_ids=APS)
    b = joint_detect(sample[::-1], (1.0, 0.5), ap_ids=APS)
    assert a.alleged == b.alleged and a.frequencies == b.frequencies


def test_joint_detect_needs_twenty(rng):
    with pytest.raises(CrislocError):
        joint_detect(subset_sample(set(), rng)[:10], (1.0, 0.5))


def test_sequential_early_and_late_decisions():
    stream = [{"a"}, {"a", "c"}, {"a"}, {"a", "c"}, {"a"}] + [{"a", "c"}, {"a"}] * 10
    rep = sequential_detect(stream, ("a", "b", "c"), min_seq=5, max_seq=15, l0=0.8)
    assert rep.verdicts["a"].altered and rep.verdicts["a"].decided_early
    assert rep.verdicts["a"].samples_used == 5
    assert not rep.verdicts["b"].altered and rep.verdicts["b"].decided_early
    c = rep.verdicts["c"]
    assert not c.decided_early and c.samples_used == 15
    assert c.altered == (c.reliability >= 0.5)
    assert rep.altered == {"a"} or rep.altered == {"a", "c"}


def test_sequential_stream_too_short():
    with pytest.raises(CrislocError, match="stream ended"):
        sequential_detect([{"a"}] * 3, ("a",), min_seq=5)


def test_sequential_accepts_joint_results(rng):
    res = joint_detect(subset_sample({"ap4"}, rng), (1.0, 0.5), ap_ids=APS)
    assert isinstance(res, JointResult)
    rep = sequential_detect([res] * 5, APS)
    assert rep.altered == {"ap4"}
    assert rep.dispersion == pytest.approx(res.dispersion)
