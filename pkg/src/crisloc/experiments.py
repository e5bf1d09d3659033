"""Seeded simulator trials behind the acceptance suite and ``crisloc eval``.

Every trial is a pure function of its seed: scenario, alteration, query
positions and capture noise all derive from it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .detect import (JointDetector, calibrate_baseline, collect_rp_samples, kde_detect,
                     kde_fit, query_fingerprint, random_query_position, rp_history_map)
from .locate import as_database, build_portion_table, eeknn, wknn
from .model import Position, RadioMap
from .preprocess import calibrate_batch, survey
from .reconstruct import TransferParams, reconstruct_map
from .synth import (Scenario, generate_capture, make_scenario, move_ap, random_relocation,
                    rng_for)

MOVE_DISTANCE = 3.0
QUERY_FRAMES = 100


def alter(sc: Scenario, n: int, rng, distance: float = MOVE_DISTANCE
          ) -> tuple[Scenario, list[str]]:
    """Move ``n`` distinct random APs by ``distance`` meters each."""
    picked = sorted(str(a) for a in rng.choice(sc.ap_ids, n, replace=False))
    for ap in picked:
        sc = move_ap(sc, ap, random_relocation(sc, ap, distance, rng))
    return sc, picked


def corner_queries(sc: Scenario, rng, per_corner: int = 3) -> list[Position]:
    """Off-grid points within one grid cell of each corner of the survey area."""
    xy = np.array([[p.x, p.y] for p in sc.grid])
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    out = []
    for cx, sx in ((lo[0], 1), (hi[0], -1)):
        for cy, sy in ((lo[1], 1), (hi[1], -1)):
            for _ in range(per_corner):
                dx, dy = rng.uniform(0, sc.grid_spacing, 2)
                out.append(Position(cx + sx * dx, cy + sy * dy))
    return out


def query_errors(sc: Scenario, rmap: RadioMap, db, positions: Sequence[Position], key,
                 matcher: str = "eeknn", k: int = 3, k_prime: float = 1.0) -> np.ndarray:
    """Localization error of one fresh capture at each position."""
    mdb = as_database(db)
    table = build_portion_table(mdb) if matcher == "eeknn" else None
    out = []
    for t, rx in enumerate(positions):
        fp = query_fingerprint(sc, rmap, rx, QUERY_FRAMES, (key, t))
        est = eeknn(fp, mdb, k_prime, table) if matcher == "eeknn" else wknn(fp, mdb, k)
        out.append(est.distance(rx))
    return np.array(out)


# -- localization ---------------------------------------------------------------

def corner_trial(seed: int, per_corner: int = 3) -> tuple[float, float]:
    """Mean corner error of (WKNN k=3, EEKNN k'=1) on one scenario."""
    sc = make_scenario(seed=seed)
    rmap = survey(sc)
    pts = corner_queries(sc, rng_for("corners", seed), per_corner)
    # same captures for both matchers
    fps = [query_fingerprint(sc, rmap, rx, QUERY_FRAMES, ("corner", t))
           for t, rx in enumerate(pts)]
    db = as_database(rmap)
    table = build_portion_table(db)
    ew = np.mean([wknn(fp, db, 3).distance(rx) for fp, rx in zip(fps, pts)])
    ee = np.mean([eeknn(fp, db, 1.0, table).distance(rx) for fp, rx in zip(fps, pts)])
    return float(ew), float(ee)


def path_loss_correlation(seed: int, n_frames: int = 120) -> tuple[np.ndarray, np.ndarray]:
    """Per-AP Spearman correlation of mean amplitude with -distance over the
    grid, for calibrated and for raw (AGC-scaled) amplitudes."""
    sc = make_scenario(seed=seed)
    caps = [generate_capture(sc, p, n_frames, stream="pathloss") for p in sc.grid]
    rmap = survey(sc, n_frames=n_frames)
    mask = rmap.mask
    cal, raw = [], []
    for ap in sc.ap_ids:
        pos = sc.ap(ap).position
        negd = [-pos.distance(c.rx) for c in caps]
        heard = [c.rss_dbm[ap] > -100 for c in caps]
        m_cal = [calibrate_batch(c.csi[ap][h], c.rss_dbm[ap][h], mask).mean()
                 for c, h in zip(caps, heard)]
        m_raw = [np.abs(c.csi[ap][:, mask.keep]).mean() for c in caps]
        cal.append(spearmanr(m_cal, negd)[0])
        raw.append(spearmanr(m_raw, negd)[0])
    return np.array(cal), np.array(raw)


# -- detection ------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionTrial:
    truth: frozenset
    alarms: frozenset
    scores: dict


def rp_detection_trial(seed: int, n_altered: int = 1, p_value: float = 0.05,
                       history_bursts: int = 10, fresh_bursts: int = 1) -> DetectionTrial:
    sc = make_scenario(seed=seed)
    rmap = survey(sc)
    model = kde_fit(rp_history_map(sc, rmap.mask, n_bursts=history_bursts))
    sc2, truth = alter(sc, n_altered, rng_for("rp-alter", seed))
    fresh = collect_rp_samples(sc2, rmap.mask, n_bursts=fresh_bursts, key=("fresh", seed))
    verdicts = kde_detect(model, fresh, p_value)
    return DetectionTrial(frozenset(truth), frozenset(a for a, v in verdicts.items()
                                                      if v.altered),
                          {a: v.p for a, v in verdicts.items()})


def joint_detection_trial(seed: int, n_altered: int = 1, baseline_samples: int = 30,
                          **detector_kw) -> DetectionTrial:
    sc = make_scenario(seed=seed)
    rmap = survey(sc)
    base = calibrate_baseline(sc, rmap, baseline_samples, seed=seed)
    sc2, truth = alter(sc, n_altered, rng_for("joint-alter", seed))
    det = JointDetector(rmap, base, seed=seed, **detector_kw)
    rep = det.detect(sc2, key=("trial", seed))
    return DetectionTrial(frozenset(truth), rep.altered,
                          {a: v.reliability for a, v in rep.verdicts.items()})


# -- reconstruction -------------------------------------------------------------

def reconstruction_trial(seed: int, n_rp: int = 8, n_queries: int = 40,
                         params: TransferParams = TransferParams(),
                         fresh_bursts: int = 3) -> dict:
    """Mean query error with the never-altered, outdated and reconstructed maps."""
    sc = make_scenario(seed=seed)
    rmap = survey(sc)
    rng = rng_for("recon", seed)
    sc2, altered = alter(sc, 1, rng)
    rp_sc = sc2.with_rps(sc2.rp_positions[:n_rp])
    fresh = rp_history_map(rp_sc, rmap.mask, n_bursts=fresh_bursts, key=("fresh", seed))
    rec = reconstruct_map(rmap, fresh, altered, params)
    pts = [random_query_position(sc, rng) for _ in range(n_queries)]
    return {
        "altered": altered,
        "baseline": float(query_errors(sc, rmap, rmap, pts, "q").mean()),
        "outdated": float(query_errors(sc2, rmap, rmap, pts, "q").mean()),
        "reconstructed": float(query_errors(sc2, rmap, rec, pts, "q").mean()),
    }


def reconstruction_rp_sweep(seed: int, rp_counts: Sequence[int] = (1, 2, 4, 8),
                            n_queries: int = 40, fresh_bursts: int = 3) -> dict[int, float]:
    """Reconstructed-map error for each RP count on one altered scenario."""
    sc = make_scenario(seed=seed)
    rmap = survey(sc)
    rng = rng_for("recon", seed)
    sc2, altered = alter(sc, 1, rng)
    pts = [random_query_position(sc, rng) for _ in range(n_queries)]
    fresh_all = rp_history_map(sc2, rmap.mask, n_bursts=fresh_bursts, key=("fresh", seed))
    out = {}
    for n in rp_counts:
        fresh = fresh_all.with_points(fresh_all.positions[:n], fresh_all.samples[:n])
        rec = reconstruct_map(rmap, fresh, altered)
        out[n] = float(query_errors(sc2, rmap, rec, pts, "q").mean())
    return out


# -- end to end -----------------------------------------------------------------

def end_to_end_trial(seed: int, n_altered: int, n_queries: int = 40,
                     fresh_bursts: int = 3, p_value: float = 0.05) -> dict:
    """Survey, alter, detect with RPs, reconstruct what was flagged, localize.

    The number of altered APs is not given to the pipeline; only the
    detector's alarms decide what gets reconstructed.
    """
    sc = make_scenario(seed=seed)
    rmap = survey(sc)
    model = kde_fit(rp_history_map(sc, rmap.mask, n_bursts=10))
    rng = rng_for("e2e", seed)
    sc2, truth = alter(sc, n_altered, rng)
    fresh = rp_history_map(sc2, rmap.mask, n_bursts=fresh_bursts, key=("fresh", seed))
    verdicts = kde_detect(model, fresh.samples, p_value)
    alarms = sorted(a for a, v in verdicts.items() if v.altered)
    db = reconstruct_map(rmap, fresh, alarms) if alarms else rmap
    q_rng = rng_for("e2e-queries", seed)
    pts = [random_query_position(sc, q_rng) for _ in range(n_queries)]
    err = query_errors(sc2, rmap, db, pts, ("e2e", seed))
    return {"truth": truth, "alarms": alarms, "mean_error": float(err.mean())}
