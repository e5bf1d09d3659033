"""Altered-AP detection.

With reference points: a per-subcarrier Gaussian KDE of the historical
calibrated amplitudes at each RP; fresh data whose mean falls in the tails is
flagged.

Without reference points: localize one fresh capture with many AP subsets,
cluster the estimates (DBSCAN with a k-distance radius), count how often each
AP appears in the scattered estimates, split the counts with a weighted Jenks
break, and firm the per-sample verdicts up by sequential analysis.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from . import kernels
from .locate import (MatchDatabase, NeighborPortionTable, as_database, block_sq_distances,
                     build_portion_table, eeknn_from_distances)
from .model import CrislocError, Fingerprint, Position, RadioMap, fingerprint_from_samples
from .preprocess import process_capture
from .synth import Scenario, generate_capture, rng_for

OUTLIER = kernels.OUTLIER
MIN_SUBSET, MAX_SUBSET = 3, 5
DEFAULT_BUDGET = 60
DEFAULT_R0 = 2.0
DEFAULT_MIN_PTS = 4
DEFAULT_K = 3
RHO_FLOOR = 1e-3
DEFAULT_MIN_SEQ, DEFAULT_MAX_SEQ, DEFAULT_L0 = 5, 15, 0.8
DISPERSION_MULTIPLIER = 2.0
MIN_KDE_SAMPLES = 30
MIN_FRESH_SAMPLES = 10


# -- detection with reference points ---------------------------------------

def silverman_bandwidth(x: np.ndarray) -> np.ndarray:
    """Silverman's rule per column, floored so constant data stays usable."""
    n = x.shape[0]
    sd = x.std(axis=0, ddof=1)
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    spread = np.minimum(sd, (q75 - q25) / 1.34)
    spread = np.where(spread > 0, spread, sd)
    h = 0.9 * spread * n ** (-0.2)
    floor = 1e-3 * np.maximum(np.abs(x.mean(axis=0)), 1e-12)
    return np.maximum(h, floor)


@dataclass(frozen=True)
class KdeModel:
    """Per (RP, AP, subcarrier) Gaussian KDE over historical amplitudes."""

    rp_positions: tuple[Position, ...]
    ap_ids: tuple[str, ...]
    samples: Mapping[tuple[int, str], np.ndarray]
    bandwidth: Mapping[tuple[int, str], np.ndarray]

    def density(self, rp: int, ap: str, x: np.ndarray) -> np.ndarray:
        """Density of each subcarrier at ``x`` (array shaped (..., active))."""
        s, h = self.samples[rp, ap], self.bandwidth[rp, ap]
        z = (np.asarray(x)[..., None, :] - s) / h
        return np.mean(np.exp(-0.5 * z * z), axis=-2) / (h * math.sqrt(2 * math.pi))

    def cdf(self, rp: int, ap: str, x: np.ndarray) -> np.ndarray:
        s, h = self.samples[rp, ap], self.bandwidth[rp, ap]
        return np.mean(ndtr((np.asarray(x)[..., None, :] - s) / h), axis=-2)

    def tail(self, rp: int, ap: str, x: np.ndarray) -> np.ndarray:
        """Two-sided tail probability per subcarrier."""
        c = self.cdf(rp, ap, x)
        return np.clip(2.0 * np.minimum(c, 1.0 - c), 0.0, 1.0)


def kde_fit(history: RadioMap) -> KdeModel:
    """Fit one KDE per (RP, AP, subcarrier); ``history`` holds only RP points."""
    samples, bw = {}, {}
    for i, point in enumerate(history.samples):
        for ap in history.ap_ids:
            x = point[ap]
            if x.shape[0] < MIN_KDE_SAMPLES:
                raise CrislocError(f"RP {i}, AP {ap!r}: {x.shape[0]} samples, "
                                   f"need >= {MIN_KDE_SAMPLES} for KDE")
            samples[i, ap] = x
            bw[i, ap] = silverman_bandwidth(x)
    return KdeModel(history.positions, history.ap_ids, samples, bw)


@dataclass(frozen=True)
class KdeVerdict:
    altered: bool
    p: float
    per_rp: tuple[float, ...]


def kde_detect(model: KdeModel, fresh: Sequence[Mapping[str, np.ndarray]],
               p_value: float = 0.05, ap_ids: Iterable[str] | None = None
               ) -> dict[str, KdeVerdict]:
    """Flag APs whose fresh RP data is improbable under the history.

    ``fresh[r][ap]`` holds fresh calibrated samples at RP ``r``. Tail
    probabilities of the fresh mean are combined by geometric mean across
    subcarriers and by median across RPs.
    """
    if len(fresh) != len(model.rp_positions):
        raise CrislocError(f"fresh data covers {len(fresh)} RPs, model has "
                           f"{len(model.rp_positions)}")
    out = {}
    for ap in (model.ap_ids if ap_ids is None else ap_ids):
        if ap not in model.ap_ids:
            raise CrislocError(f"AP {ap!r} missing from KDE model")
        per_rp = []
        for r, batch in enumerate(fresh):
            x = np.asarray(batch[ap])
            if x.shape[0] < MIN_FRESH_SAMPLES:
                raise CrislocError(f"RP {r}, AP {ap!r}: need >= {MIN_FRESH_SAMPLES} "
                                   "fresh samples")
            t = model.tail(r, ap, x.mean(axis=0))
            per_rp.append(float(np.exp(np.mean(np.log(np.maximum(t, 1e-300))))))
        p = float(np.median(per_rp))
        out[ap] = KdeVerdict(p < p_value, p, tuple(per_rp))
    return out


# -- AP subsets --------------------------------------------------------------

def gen_subsets(aps: Sequence[str], budget: int = DEFAULT_BUDGET, rng_seed=0
                ) -> list[frozenset]:
    """AP subsets of size 3-5: all of them if they fit the budget, otherwise a
    sample in which every AP appears equally often (counts differ by <= 1)."""
    aps = list(aps)
    if len(aps) < 4:
        raise CrislocError("subset detection needs at least 4 APs")
    if budget < len(aps):
        raise CrislocError(f"budget {budget} is smaller than the AP count {len(aps)}")
    sizes = [s for s in range(MIN_SUBSET, MAX_SUBSET + 1) if s <= len(aps)]
    total = sum(math.comb(len(aps), s) for s in sizes)
    if total <= budget:
        return [frozenset(c) for s in sizes for c in itertools.combinations(aps, s)]

    rng = np.random.default_rng(rng_for("subsets", rng_seed).integers(2 ** 32))
    counts = dict.fromkeys(aps, 0)
    seen: set[frozenset] = set()
    out = []
    for t in range(budget):
        size = sizes[t % len(sizes)]
        pick = None
        for _ in range(32):
            # least-used APs first; random order among equals
            order = sorted(aps, key=lambda a: (counts[a], rng.random()))
            pick = frozenset(order[:size])
            if pick not in seen:
                break
        seen.add(pick)
        out.append(pick)
        for a in pick:
            counts[a] += 1
    return out


# -- clustering ---------------------------------------------------------------

@dataclass(frozen=True)
class ClusterLabeling:
    labels: np.ndarray
    k_distances: np.ndarray
    rho: float
    min_pts: int

    @property
    def cluster_sizes(self) -> dict[int, int]:
        ids, counts = np.unique(self.labels[self.labels != OUTLIER], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


def _xy(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return points.reshape(-1, 2).astype(float)
    return np.array([[p.x, p.y] for p in points], dtype=float).reshape(-1, 2)


def dbscan(points, rho: float, min_pts: int = DEFAULT_MIN_PTS, k: int = DEFAULT_K
           ) -> ClusterLabeling:
    """DBSCAN over 2-D points; a core point has >= min_pts points (itself
    included) within ``rho``. Points are visited in index order."""
    if min_pts < 1:
        raise CrislocError("min_pts must be >= 1")
    xy = _xy(points)
    labels = kernels.dbscan_labels(xy, float(rho), int(min_pts))
    kd = kernels.k_distances(xy, k) if len(xy) > k else np.zeros(len(xy))
    return ClusterLabeling(np.asarray(labels), np.asarray(kd), float(rho), int(min_pts))


def knee_index(sorted_values: np.ndarray) -> int:
    """Index where the sorted curve bends upward hardest (largest second difference)."""
    s = np.asarray(sorted_values, dtype=float)
    if s.size < 3:
        return s.size - 1
    d2 = s[2:] - 2 * s[1:-1] + s[:-2]
    return int(np.argmax(d2)) + 1


def auto_rho(points, k: int = DEFAULT_K) -> float:
    """DBSCAN radius from the knee of the sorted k-distance curve."""
    xy = _xy(points)
    if len(xy) <= k:
        raise CrislocError(f"need more than k={k} points to pick a radius")
    s = np.sort(kernels.k_distances(xy, k))
    rho = float(s[knee_index(s)])
    return rho if rho > RHO_FLOOR else RHO_FLOOR


# -- cluster-outlier joint approach --------------------------------------------

@dataclass(frozen=True)
class SubsetResult:
    ap_subset: frozenset
    estimate: Position

    def __post_init__(self):
        if not MIN_SUBSET <= len(self.ap_subset) <= MAX_SUBSET:
            raise CrislocError(f"subset size {len(self.ap_subset)} outside [3, 5]")


@dataclass(frozen=True)
class JointResult:
    alleged: frozenset
    frequencies: Mapping[str, float]
    dispersion: float
    eta: float
    branch: str                 # "cluster" or "outlier"
    labeling: ClusterLabeling
    low_confidence: bool = False


def outlier_weights(kd: np.ndarray) -> np.ndarray:
    """Scale k-distances to [0, 1]: the farthest outlier counts fully."""
    lo, hi = float(np.min(kd)), float(np.max(kd))
    if hi <= lo:
        return np.ones_like(kd)
    return (kd - lo) / (hi - lo)


def mean_pairwise_distance(xy: np.ndarray) -> float:
    n = len(xy)
    if n < 2:
        return 0.0
    d = kernels.pairwise_dist(xy)
    return float(d[np.triu_indices(n, 1)].mean())


def adaptive_eta(dispersion: float, a: float, sigma: float,
                 multiplier: float = DISPERSION_MULTIPLIER) -> float:
    sigma = max(sigma, 1e-12)
    return math.exp(-(dispersion - multiplier * a) / sigma) + 1.0


def weighted_jenks(freq: Mapping[str, float], eta: float) -> frozenset:
    """Upper class of the two-class split minimizing SS(lower) + eta * SS(upper)."""
    ids = list(freq)
    order = sorted(range(len(ids)), key=lambda i: (freq[ids[i]], i))
    vals = np.array([freq[ids[i]] for i in order], dtype=float)
    b = kernels.jenks_breakpoint(vals, float(eta))
    return frozenset(ids[i] for i in order[b:])


def joint_detect(sample: Sequence[SubsetResult], baseline: tuple[float, float],
                 r0: float = DEFAULT_R0, ap_ids: Sequence[str] | None = None,
                 min_pts: int = DEFAULT_MIN_PTS, k: int = DEFAULT_K,
                 multiplier: float = DISPERSION_MULTIPLIER) -> JointResult:
    """One sample's alleged altered APs from its subset localizations."""
    if len(sample) < 20:
        raise CrislocError("joint detection needs >= 20 subset results")
    # canonical order so DBSCAN's border assignment cannot depend on input order
    sample = sorted(sample, key=lambda r: (tuple(sorted(r.ap_subset)),
                                           r.estimate.x, r.estimate.y))
    if ap_ids is None:
        ap_ids = sorted(set().union(*(r.ap_subset for r in sample)))
    ap_ids = tuple(ap_ids)
    xy = _xy([r.estimate for r in sample])
    rho = auto_rho(xy, k)
    lab = dbscan(xy, rho, min_pts, k)
    sizes = sorted(lab.cluster_sizes.items(), key=lambda kv: (-kv[1], kv[0]))

    freq = dict.fromkeys(ap_ids, 0.0)
    if sizes and (len(sizes) == 1 or sizes[0][1] / sizes[1][1] > r0):
        branch = "cluster"
        gtc = sizes[0][0]
        for r, label in zip(sample, lab.labels):
            if label != gtc:
                for a in r.ap_subset:
                    freq[a] += 1.0
    else:
        branch = "outlier"
        w = outlier_weights(lab.k_distances)
        for r, label, wi in zip(sample, lab.labels, w):
            if label == OUTLIER:
                for a in r.ap_subset:
                    freq[a] += float(wi)

    a, sigma = baseline
    disp = mean_pairwise_distance(xy)
    eta = adaptive_eta(disp, a, sigma, multiplier)
    low = all(v == 0 for v in freq.values())
    if low:
        # every frequency ties at zero: blame the AP whose subsets sit farthest
        # from their neighbors rather than whichever AP happens to come first
        spread = {ap: 0.0 for ap in ap_ids}
        count = dict.fromkeys(ap_ids, 0)
        for r, kd in zip(sample, lab.k_distances):
            for ap in r.ap_subset:
                spread[ap] += float(kd)
                count[ap] += 1
        top = max(ap_ids, key=lambda ap: (spread[ap] / max(count[ap], 1), -ap_ids.index(ap)))
        alleged = frozenset([top])
    else:
        alleged = weighted_jenks(freq, eta)
    return JointResult(alleged, freq, disp, eta, branch, lab, low)


# -- sequential analysis -------------------------------------------------------

@dataclass(frozen=True)
class ApVerdict:
    altered: bool
    reliability: float
    samples_used: int
    frequency: int
    decided_early: bool


@dataclass(frozen=True)
class DetectionReport:
    verdicts: Mapping[str, ApVerdict]
    dispersion: float = float("nan")
    params: Mapping[str, float] = field(default_factory=dict)

    @property
    def altered(self) -> frozenset:
        return frozenset(ap for ap, v in self.verdicts.items() if v.altered)

    def to_dict(self) -> dict:
        return {
            "altered": sorted(self.altered),
            "dispersion": self.dispersion,
            "params": dict(self.params),
            "aps": {ap: {"altered": v.altered, "frequency": v.frequency,
                         "reliability": v.reliability, "samples_used": v.samples_used,
                         "decided_early": v.decided_early}
                    for ap, v in self.verdicts.items()},
        }


def _alleged(item) -> frozenset:
    return item.alleged if isinstance(item, JointResult) else frozenset(item)


def sequential_detect(stream: Iterable, ap_ids: Sequence[str],
                      min_seq: int = DEFAULT_MIN_SEQ, max_seq: int = DEFAULT_MAX_SEQ,
                      l0: float = DEFAULT_L0) -> DetectionReport:
    """Combine per-sample allegations until each AP's alarm ratio is decisive.

    After ``min_seq`` samples an AP is altered when its ratio l >= l0 and
    unaltered when l <= 1 - l0; otherwise more samples are drawn, up to
    ``max_seq`` in total, after which l >= 0.5 decides.
    """
    if min_seq < 1 or max_seq < min_seq or not 0.5 < l0 < 1:
        raise CrislocError("need min_seq >= 1, max_seq >= min_seq, 0.5 < l0 < 1")
    it: Iterator = iter(stream)
    alarms = dict.fromkeys(ap_ids, 0)
    pending = set(ap_ids)
    verdicts: dict[str, ApVerdict] = {}
    dispersions = []
    n = 0
    eps = 1e-12
    while pending and n < max_seq:
        try:
            item = next(it)
        except StopIteration:
            if n < min_seq:
                raise CrislocError(f"stream ended after {n} samples; need {min_seq}")
            break
        n += 1
        if isinstance(item, JointResult):
            dispersions.append(item.dispersion)
        hit = _alleged(item)
        for ap in pending:
            if ap in hit:
                alarms[ap] += 1
        if n < min_seq:
            continue
        for ap in sorted(pending):
            l = alarms[ap] / n
            if l >= l0 - eps:
                verdicts[ap] = ApVerdict(True, l, n, alarms[ap], True)
            elif l <= 1 - l0 + eps:
                verdicts[ap] = ApVerdict(False, l, n, alarms[ap], True)
        pending -= set(verdicts)
    if n < min_seq:
        raise CrislocError(f"stream ended after {n} samples; need {min_seq}")
    for ap in pending:
        l = alarms[ap] / n
        verdicts[ap] = ApVerdict(l >= 0.5, l, n, alarms[ap], False)
    disp = float(np.mean(dispersions)) if dispersions else float("nan")
    return DetectionReport({ap: verdicts[ap] for ap in ap_ids}, disp,
                           {"min_seq": min_seq, "max_seq": max_seq, "l0": l0})


# -- simulator-driven pipeline -------------------------------------------------

def subset_localizations(query: Fingerprint, db, subsets: Sequence[frozenset],
                         table: NeighborPortionTable | None = None,
                         k_prime: float = 1.0) -> list[SubsetResult]:
    """Localize ``query`` once per AP subset with EEKNN."""
    mdb = as_database(db)
    table = table or build_portion_table(mdb)
    sq = block_sq_distances(query, mdb)
    col = {ap: j for j, ap in enumerate(mdb.ap_ids)}
    out = []
    for s in subsets:
        eps = np.sqrt(sq[:, [col[a] for a in s]].sum(axis=1))
        est = eeknn_from_distances(eps, mdb.xy, table.kappa, k_prime)
        out.append(SubsetResult(s, Position.of(est)))
    return out


def query_fingerprint(sc: Scenario, rmap: RadioMap, rx: Position, n_frames: int = 100,
                      stream=0) -> Fingerprint:
    cap = generate_capture(sc, rx, n_frames, stream=stream)
    return fingerprint_from_samples(process_capture(cap, rmap.mask), rmap.ap_ids,
                                    rmap.mask.active)


def random_query_position(sc: Scenario, rng) -> Position:
    xy = np.array([[p.x, p.y] for p in sc.grid])
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    return Position.of(rng.uniform(lo, hi))


@dataclass
class JointDetector:
    """Runs the joint approach on fresh captures against one radio map."""

    rmap: RadioMap
    baseline: tuple[float, float]
    r0: float = DEFAULT_R0
    budget: int = DEFAULT_BUDGET
    seed: int = 0
    n_frames: int = 100
    multiplier: float = DISPERSION_MULTIPLIER

    def __post_init__(self):
        self.db: MatchDatabase = as_database(self.rmap)
        self.table = build_portion_table(self.db)
        self.subsets = gen_subsets(self.rmap.ap_ids, self.budget, self.seed)

    def sample(self, sc: Scenario, rx: Position, stream) -> JointResult:
        fp = query_fingerprint(sc, self.rmap, rx, self.n_frames, stream)
        return self.sample_fingerprint(fp)

    def sample_fingerprint(self, fp: Fingerprint) -> JointResult:
        results = subset_localizations(fp, self.db, self.subsets, self.table)
        return joint_detect(results, self.baseline, self.r0, self.rmap.ap_ids,
                            multiplier=self.multiplier)

    def stream(self, sc: Scenario, key) -> Iterator[JointResult]:
        """Endless samples, each at a fresh random user position."""
        rng = rng_for("joint-stream", self.seed, key)
        t = 0
        while True:
            rx = random_query_position(sc, rng)
            yield self.sample(sc, rx, ("joint", key, t))
            t += 1

    def detect(self, sc: Scenario, key=0, min_seq: int = DEFAULT_MIN_SEQ,
               max_seq: int = DEFAULT_MAX_SEQ, l0: float = DEFAULT_L0) -> DetectionReport:
        rep = sequential_detect(self.stream(sc, key), self.rmap.ap_ids, min_seq, max_seq, l0)
        params = {**rep.params, "a": self.baseline[0], "sigma": self.baseline[1],
                  "r0": self.r0}
        return DetectionReport(rep.verdicts, rep.dispersion, params)


def calibrate_baseline(sc: Scenario, rmap: RadioMap, n_samples: int = 30, seed: int = 0,
                       budget: int = DEFAULT_BUDGET, r0: float = DEFAULT_R0,
                       n_frames: int = 100) -> tuple[float, float]:
    """Mean and standard deviation of the overall dispersion with no AP altered."""
    if sc.altered:
        raise CrislocError("baseline calibration needs an unaltered scenario")
    det = JointDetector(rmap, (1.0, 1.0), r0, budget, seed, n_frames)
    rng = rng_for("baseline", seed)
    disp = []
    for t in range(n_samples):
        rx = random_query_position(sc, rng)
        fp = query_fingerprint(sc, rmap, rx, n_frames, ("baseline", seed, t))
        results = subset_localizations(fp, det.db, det.subsets, det.table)
        disp.append(mean_pairwise_distance(_xy([r.estimate for r in results])))
    return float(np.mean(disp)), float(np.std(disp, ddof=1))


# -- RP data collection ---------------------------------------------------------

def collect_rp_samples(sc: Scenario, mask, n_bursts: int = 10, frames_per_burst: int = 100,
                       key="rp-history") -> list[dict[str, np.ndarray]]:
    """Calibrated samples at every RP pooled over several capture bursts."""
    out = []
    for r, rp in enumerate(sc.rp_positions):
        pooled: dict[str, list] = {}
        for b in range(n_bursts):
            cap = generate_capture(sc, rp, frames_per_burst, stream=(key, r, b))
            for ap, x in process_capture(cap, mask).items():
                pooled.setdefault(ap, []).append(x)
        out.append({ap: np.vstack(v) for ap, v in pooled.items()})
    return out


def rp_history_map(sc: Scenario, mask, grid_spacing: float | None = None, **kw) -> RadioMap:
    samples = collect_rp_samples(sc, mask, **kw)
    return RadioMap(mask, tuple(sc.rp_positions), tuple(samples),
                    grid_spacing or sc.grid_spacing, sc.ap_ids)
