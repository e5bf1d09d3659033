"""From raw captures to calibrated, filtered amplitude vectors.

Order of operations for one (position, AP) frame set:

1. drop subcarriers that are dead everywhere or unstable (``subcarrier_filter``),
2. rescale each frame so its power matches the pre-AGC RSS (``calibrate``),
3. drop abnormal frames by Mahalanobis distance (``frame_filter``).

Calibration runs before the frame filter: the per-frame gain otherwise
dominates the covariance and every frame looks alike.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import (UNHEARD_DBM, CrislocError, CsiFrame, RadioMap, SubcarrierMask,
                    dbm_to_mw)
from .synth import Capture, Scenario, generate_capture

CV_IQR_FACTOR = 3.0
COV_RIDGE = 1e-6
DROP_FRACTION = 0.05
MAX_DROP_FRACTION = 0.10
MIN_FRAMES = 30
# a jump in the sorted distances counts as a gap when it exceeds this
# fraction of the distance just below it
GAP_RATIO = 0.25


@dataclass(frozen=True)
class CvStats:
    mean: np.ndarray
    std: np.ndarray
    cv: np.ndarray


def calibrate_batch(csi: np.ndarray, rss_dbm: np.ndarray, mask: SubcarrierMask) -> np.ndarray:
    """Vectorized ``calibrate`` over frames: returns (n, active) amplitudes."""
    amp = np.abs(np.asarray(csi))[:, mask.keep]
    rss_dbm = np.asarray(rss_dbm, dtype=float)
    power = np.sum(amp ** 2, axis=1)
    heard = rss_dbm > UNHEARD_DBM
    if np.any(heard & (power <= 0)):
        raise CrislocError("frame has zero CSI power but a finite RSS; corrupt frame")
    scale = np.zeros_like(power)
    scale[heard] = np.sqrt(dbm_to_mw(rss_dbm[heard]) / power[heard])
    return amp * scale[:, None]


def calibrate(frame: CsiFrame, mask: SubcarrierMask) -> np.ndarray:
    """Cancel the frame's unknown receiver gain using its RSS reading.

    The kept subcarriers are rescaled by a single factor so their total power
    equals the RSS in mW. An unheard AP yields the zero vector.
    """
    if frame.subcarriers.shape[0] != mask.size:
        raise CrislocError(f"frame has {frame.subcarriers.shape[0]} subcarriers, "
                           f"mask expects {mask.size}")
    out = calibrate_batch(frame.subcarriers[None, :], np.array([frame.rss_dbm]), mask)
    return out[0]


def _frame_sets(raw) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    for item in raw:
        if isinstance(item, Capture):
            for ap in item.ap_ids:
                yield item.csi[ap], item.rss_dbm[ap]
        else:
            csi, rss = item
            yield np.asarray(csi), np.asarray(rss)


def cv_stats(frame_sets: Sequence[np.ndarray]) -> CvStats:
    """Per-subcarrier CV of each amplitude set, averaged over the sets."""
    means, stds, cvs = [], [], []
    for amp in frame_sets:
        m = amp.mean(axis=0)
        s = amp.std(axis=0, ddof=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            cv = np.where(m > 0, s / m, 0.0)
        means.append(m)
        stds.append(s)
        cvs.append(cv)
    return CvStats(np.mean(means, axis=0), np.mean(stds, axis=0), np.mean(cvs, axis=0))


def _half_threshold(cv: np.ndarray, kappa: float) -> float:
    q1, med, q3 = np.percentile(cv, [25, 50, 75])
    return med + kappa * (q3 - q1)


def subcarrier_filter(raw, kappa: float = CV_IQR_FACTOR) -> SubcarrierMask:
    """Mask out dead subcarriers and the ones whose CV is extreme.

    ``raw`` is an iterable of captures or ``(csi, rss_dbm)`` frame sets, one
    per survey position (and AP). The CV of each subcarrier is averaged across
    the sets; the lower and upper halves of the band get separate thresholds
    ``median + kappa * IQR``.
    """
    sets = [(c, r) for c, r in _frame_sets(raw)]
    sets = [(c[r > UNHEARD_DBM], r[r > UNHEARD_DBM]) for c, r in sets]
    sets = [(c, r) for c, r in sets if len(r)]
    if not sets:
        raise CrislocError("no heard frames to filter")
    if any(len(r) < 2 for _, r in sets):
        raise CrislocError("subcarrier filtering needs >= 2 frames per position")
    n_sub = sets[0][0].shape[1]
    alive = np.zeros(n_sub, dtype=bool)
    for c, _ in sets:
        alive |= np.any(np.abs(c) > 0, axis=0)
    if alive.sum() < 8:
        raise CrislocError("fewer than 8 live subcarriers; recollect CSI")
    provisional = SubcarrierMask(alive)
    stats = cv_stats([calibrate_batch(c, r, provisional) for c, r in sets])

    keep = alive.copy()
    live_idx = np.flatnonzero(alive)
    cv = np.zeros(n_sub)
    cv[live_idx] = stats.cv
    half = n_sub // 2
    for lo, hi in ((0, half), (half, n_sub)):
        idx = live_idx[(live_idx >= lo) & (live_idx < hi)]
        if idx.size == 0:
            continue
        thr = _half_threshold(cv[idx], kappa)
        keep[idx[cv[idx] > thr]] = False
    if keep.sum() < 8:
        raise CrislocError(f"only {int(keep.sum())} subcarriers survive filtering; "
                           "recollect CSI")
    return SubcarrierMask(keep)


def mahalanobis(frames: np.ndarray, ridge: float = COV_RIDGE) -> np.ndarray:
    """Distance of each row from the sample mean under the sample covariance."""
    x = np.asarray(frames, dtype=float)
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    dim = cov.shape[0]
    cov = cov + ridge * np.trace(cov) / dim * np.eye(dim)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CrislocError("covariance is singular after regularization") from exc
    z = np.linalg.solve(chol, (x - mu).T)
    return np.sqrt(np.sum(z ** 2, axis=0))


def frame_filter_mask(frames: np.ndarray) -> np.ndarray:
    """Boolean keep-mask for ``frame_filter``."""
    x = np.asarray(frames, dtype=float)
    n, dim = x.shape
    need = max(MIN_FRAMES, 2 * dim)
    if n < need:
        raise CrislocError(f"{n} frames are too few for a {dim}-dim covariance "
                           f"(need >= {need}); recollect CSI")
    d = mahalanobis(x)
    order = np.argsort(d, kind="stable")
    ds = d[order]
    n_top = max(1, int(math.floor(MAX_DROP_FRACTION * n)))
    # gaps just below each of the top-decile distances
    lo = n - n_top
    gaps = ds[lo:] - ds[lo - 1:-1]
    j = int(np.argmax(gaps))
    if gaps[j] > GAP_RATIO * ds[lo - 1 + j]:
        n_drop = n_top - j
    else:
        n_drop = max(1, int(math.ceil(DROP_FRACTION * n)))
    keep = np.ones(n, dtype=bool)
    keep[order[n - n_drop:]] = False
    return keep


def frame_filter(frames: np.ndarray) -> np.ndarray:
    """Remove abnormal frames: the top 5% by Mahalanobis distance, or everything
    beyond the widest gap in the top decile when there is a clear gap."""
    x = np.asarray(frames, dtype=float)
    return x[frame_filter_mask(x)]


def process_capture(cap: Capture, mask: SubcarrierMask, filter_frames: bool = True
                    ) -> dict[str, np.ndarray]:
    """Calibrated (and optionally frame-filtered) samples per AP."""
    out = {}
    for ap in cap.ap_ids:
        rss = cap.rss_dbm[ap]
        heard = rss > UNHEARD_DBM
        if not heard.any():
            out[ap] = np.zeros((0, mask.active))
            continue
        amp = calibrate_batch(cap.csi[ap][heard], rss[heard], mask)
        out[ap] = frame_filter(amp) if filter_frames else amp
    return out


def build_radio_map(captures: Sequence[Capture], grid_spacing: float,
                    mask: SubcarrierMask | None = None, ap_ids=None,
                    filter_frames: bool = True) -> RadioMap:
    """Preprocess one capture per survey point into a radio map."""
    if mask is None:
        mask = subcarrier_filter(captures)
    ap_ids = tuple(ap_ids or captures[0].ap_ids)
    samples = [process_capture(c, mask, filter_frames) for c in captures]
    return RadioMap(mask, tuple(c.rx for c in captures), tuple(samples),
                    float(grid_spacing), ap_ids)


def survey(sc: Scenario, n_frames: int = 120, positions=None, stream="survey",
           mask: SubcarrierMask | None = None) -> RadioMap:
    """Capture at every survey point of ``sc`` and build the radio map."""
    positions = sc.grid if positions is None else positions
    caps = [generate_capture(sc, p, n_frames, stream=stream) for p in positions]
    return build_radio_map(caps, sc.grid_spacing, mask, sc.ap_ids)
