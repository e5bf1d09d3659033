"""Synthetic indoor radio environment.

The large-scale term is the log-distance model with a capped wall attenuation
factor. Small-scale structure comes from a per-AP gain profile: a smooth
random curve over subcarrier index (Gaussian process in dB) times the
magnitude of a few image-source echoes whose delays depend on the receiver
position. Every capture is AGC-distorted the way a phone reports it: one
unknown positive gain per frame, shared by all subcarriers, applied after the
RSS reading.

Everything is a pure function of the scenario seed and the call arguments.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .model import (UNHEARD_DBM, CrislocError, CsiFrame, Position, check_version,
                    dbm_to_mw, mw_to_dbm, read_json, write_json, FORMAT_VERSION)

SPEED_OF_LIGHT = 299_792_458.0
SUBCARRIER_SPACING_HZ = 312.5e3
DEFAULT_ZERO_SUBCARRIERS = (0, 28, 29, 30, 31, 32, 33, 34, 35)
DEFAULT_UNSTABLE_SUBCARRIERS = (2, 26, 37, 61, 62)
UNSTABLE_NOISE_FACTOR = 10.0
AGC_RANGE = (0.5, 8.0)
ANOMALY_FRACTION = 0.6
ANOMALY_FACTORS = (0.1, 3.0)


@dataclass(frozen=True)
class Wall:
    a: Position
    b: Position


@dataclass(frozen=True)
class EnvironmentModel:
    p_d0_dbm: float = -30.0
    d0: float = 1.0
    n: float = 2.5
    waf_db: float = 4.0
    wall_cap_C: int = 3
    walls: tuple[Wall, ...] = ()
    noise_sigma_db: float = 0.4
    # per-capture fluctuation (people moving, door states); common to a burst
    burst_sigma_db: float = 0.8

    def __post_init__(self):
        if self.n <= 0 or self.d0 <= 0 or self.waf_db < 0 or self.wall_cap_C < 0:
            raise CrislocError("environment requires n > 0, d0 > 0, WAF >= 0, C >= 0")


@dataclass(frozen=True)
class GainProfile:
    """Frequency-selective gain of one AP: smooth base curve plus echoes."""

    base_db: np.ndarray
    images: np.ndarray      # (k, 2) image-source positions
    coeffs: np.ndarray      # (k,) relative echo amplitudes
    phases: np.ndarray      # (k,) echo phase offsets


@dataclass(frozen=True)
class AccessPoint:
    id: str
    position: Position
    profile: GainProfile


@dataclass(frozen=True)
class Scenario:
    env: EnvironmentModel
    aps: tuple[AccessPoint, ...]
    grid: tuple[Position, ...]
    grid_spacing: float
    rp_positions: tuple[Position, ...]
    room: tuple[float, float, float, float]
    seed: int = 0
    agc_policy: str = "uniform"
    anomaly_rate: float = 0.02
    unstable_subcarriers: frozenset = frozenset(DEFAULT_UNSTABLE_SUBCARRIERS)
    zero_subcarriers: frozenset = frozenset(DEFAULT_ZERO_SUBCARRIERS)
    n_subcarriers: int = 64
    altered: frozenset = frozenset()

    def __post_init__(self):
        if self.unstable_subcarriers & self.zero_subcarriers:
            raise CrislocError("zero and unstable subcarrier sets must be disjoint")
        if not 0 <= self.anomaly_rate < 0.2:
            raise CrislocError("anomaly_rate must lie in [0, 0.2)")
        ids = [ap.id for ap in self.aps]
        if len(set(ids)) != len(ids) or any(not i for i in ids):
            raise CrislocError("AP ids must be nonempty and unique")
        if self.agc_policy not in ("uniform", "normalize", "none"):
            raise CrislocError(f"unknown agc_policy {self.agc_policy!r}")

    @property
    def ap_ids(self) -> tuple[str, ...]:
        return tuple(ap.id for ap in self.aps)

    def ap(self, ap_id: str) -> AccessPoint:
        for ap in self.aps:
            if ap.id == ap_id:
                return ap
        raise CrislocError(f"unknown AP id {ap_id!r}")

    def with_rps(self, rps: Sequence[Position]) -> "Scenario":
        return replace(self, rp_positions=tuple(rps))

    def contains(self, p: Position) -> bool:
        x0, y0, x1, y1 = self.room
        return x0 - 1e-9 <= p.x <= x1 + 1e-9 and y0 - 1e-9 <= p.y <= y1 + 1e-9


@dataclass(frozen=True)
class Capture:
    """A burst of frames at one receiver position, stored as arrays per AP."""

    rx: Position
    csi: Mapping[str, np.ndarray]        # (n_frames, S) complex, post-AGC
    rss_dbm: Mapping[str, np.ndarray]    # (n_frames,)
    anomalous: Mapping[str, np.ndarray] = field(default_factory=dict)
    gains: Mapping[str, np.ndarray] = field(default_factory=dict)

    @property
    def ap_ids(self) -> tuple[str, ...]:
        return tuple(self.csi)

    @property
    def n_frames(self) -> int:
        return len(next(iter(self.rss_dbm.values())))

    def frames(self, ap: str) -> list[CsiFrame]:
        return [CsiFrame(ap, k * 1e-2, self.csi[ap][k], float(self.rss_dbm[ap][k]), k)
                for k in range(len(self.rss_dbm[ap]))]

    def __getitem__(self, ap: str) -> list[CsiFrame]:
        return self.frames(ap)


# -- seeding ---------------------------------------------------------------

def _key(*parts) -> list[int]:
    """Stable entropy words for np.random.SeedSequence from mixed parts."""
    h = hashlib.sha256(repr(parts).encode()).digest()
    return [int.from_bytes(h[i:i + 4], "little") for i in range(0, 16, 4)]


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(_key(*parts))


# -- large-scale path loss -------------------------------------------------

def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def walls_crossed(env: EnvironmentModel, tx: Position, rx: Position) -> int:
    p1, p2 = (tx.x, tx.y), (rx.x, rx.y)
    return sum(_segments_cross(p1, p2, (w.a.x, w.a.y), (w.b.x, w.b.y)) for w in env.walls)


def path_loss_dbm(env: EnvironmentModel, tx: Position, rx: Position) -> float:
    """Received power under the log-distance model with capped wall losses."""
    d = max(tx.distance(rx), env.d0 / 10.0)
    n_w = walls_crossed(env, tx, rx)
    return (env.p_d0_dbm - 10.0 * env.n * np.log10(d / env.d0)
            - min(n_w, env.wall_cap_C) * env.waf_db)


# -- gain profiles ---------------------------------------------------------

def subcarrier_offsets_hz(n_subcarriers: int) -> np.ndarray:
    idx = np.arange(n_subcarriers)
    return np.where(idx < n_subcarriers // 2, idx, idx - n_subcarriers) * SUBCARRIER_SPACING_HZ


def draw_profile(rng: np.random.Generator, ap_pos: Position, n_subcarriers: int,
                 length_scale: float = 6.0, sigma_db: float = 3.0) -> GainProfile:
    idx = np.arange(n_subcarriers, dtype=float)
    cov = sigma_db ** 2 * np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / length_scale) ** 2)
    chol = np.linalg.cholesky(cov + 1e-8 * sigma_db ** 2 * np.eye(n_subcarriers))
    base_db = chol @ rng.standard_normal(n_subcarriers)
    k = int(rng.integers(3, 9))
    angle = rng.uniform(0, 2 * np.pi, k)
    radius = rng.uniform(3.0, 25.0, k)
    images = np.column_stack([ap_pos.x + radius * np.cos(angle),
                              ap_pos.y + radius * np.sin(angle)])
    coeffs = rng.uniform(0.2, 0.7, k)
    phases = rng.uniform(0, 2 * np.pi, k)
    return GainProfile(base_db, images, coeffs, phases)


def gain_shape(ap: AccessPoint, rx: Position, n_subcarriers: int,
               zero: Sequence[int] = ()) -> np.ndarray:
    """Unit-power amplitude shape of ``ap`` seen at ``rx`` (zeros on ``zero``)."""
    prof = ap.profile
    f = subcarrier_offsets_hz(n_subcarriers)
    d_los = max(ap.position.distance(rx), 0.1)
    d_img = np.hypot(prof.images[:, 0] - rx.x, prof.images[:, 1] - rx.y)
    excess = (d_img - d_los) / SPEED_OF_LIGHT
    atten = prof.coeffs * d_los / np.maximum(d_img, d_los)
    h = 1.0 + (atten[None, :] * np.exp(-1j * (2 * np.pi * f[:, None] * excess[None, :]
                                              + prof.phases[None, :]))).sum(axis=1)
    amp = 10.0 ** (prof.base_db / 20.0) * np.abs(h)
    amp[list(zero)] = 0.0
    return amp / np.sqrt(np.sum(amp ** 2))


# -- scenarios -------------------------------------------------------------

def make_grid(nx: int, ny: int, spacing: float, origin=(0.0, 0.0)) -> tuple[Position, ...]:
    return tuple(Position(origin[0] + i * spacing, origin[1] + j * spacing)
                 for j in range(ny) for i in range(nx))


def default_rps(grid: Sequence[Position], n_rp: int, nx: int, ny: int) -> tuple[Position, ...]:
    """Spread ``n_rp`` reference points over a rectangular grid."""
    if n_rp <= 0:
        return ()
    cols = int(np.ceil(np.sqrt(n_rp * nx / ny)))
    rows = int(np.ceil(n_rp / cols))
    picks = []
    for r in range(rows):
        for c in range(cols):
            i = int(round((c + 0.5) * nx / cols - 0.5))
            j = int(round((r + 0.5) * ny / rows - 0.5))
            picks.append(grid[j * nx + i])
    return tuple(picks[:n_rp])


def make_scenario(seed: int = 0, nx: int = 10, ny: int = 10, spacing: float = 0.6,
                  n_aps: int = 9, n_rp: int = 8, env: EnvironmentModel | None = None,
                  ap_positions: Sequence[Position] | None = None, **kw) -> Scenario:
    """Rectangular survey grid with APs scattered in and around the room."""
    rng = rng_for("scenario", seed)
    grid = make_grid(nx, ny, spacing)
    w, h = (nx - 1) * spacing, (ny - 1) * spacing
    margin = spacing / 2
    room = (-margin, -margin, w + margin, h + margin)
    if ap_positions is None:
        ap_positions = []
        for k in range(n_aps):
            # ring of APs around the survey area, jittered
            theta = 2 * np.pi * (k + rng.uniform(-0.3, 0.3)) / n_aps
            r = rng.uniform(0.45, 0.9) * max(w, h)
            ap_positions.append(Position(w / 2 + r * np.cos(theta), h / 2 + r * np.sin(theta)))
    n_sub = kw.get("n_subcarriers", 64)
    aps = tuple(
        AccessPoint(f"ap{k}", p, draw_profile(rng_for("profile", seed, f"ap{k}", 0), p, n_sub))
        for k, p in enumerate(ap_positions))
    rps = kw.pop("rp_positions", None)
    if rps is None:
        rps = default_rps(grid, n_rp, nx, ny)
    return Scenario(env or EnvironmentModel(), aps, grid, spacing, tuple(rps), room,
                    seed=seed, **kw)


def move_ap(sc: Scenario, ap_id: str, new_pos: Position) -> Scenario:
    """Relocate one AP; the gain profile is always redrawn."""
    sc.ap(ap_id)
    generation = sum(1 for a in sc.altered if a == ap_id) + 1
    rng = rng_for("profile", sc.seed, ap_id, generation, new_pos.x, new_pos.y)
    moved = AccessPoint(ap_id, new_pos, draw_profile(rng, new_pos, sc.n_subcarriers))
    aps = tuple(moved if a.id == ap_id else a for a in sc.aps)
    return replace(sc, aps=aps, altered=sc.altered | {ap_id})


def random_relocation(sc: Scenario, ap_id: str, distance: float, rng) -> Position:
    """A point ``distance`` meters from the AP, in a random direction."""
    p = sc.ap(ap_id).position
    theta = rng.uniform(0, 2 * np.pi)
    return Position(p.x + distance * np.cos(theta), p.y + distance * np.sin(theta))


# -- captures --------------------------------------------------------------

def true_amplitudes(sc: Scenario, ap: AccessPoint, rx: Position) -> tuple[np.ndarray, float]:
    """Noise-free pre-AGC amplitudes and received power (dBm) of one AP at rx."""
    p_dbm = path_loss_dbm(sc.env, ap.position, rx)
    shape = gain_shape(ap, rx, sc.n_subcarriers, sorted(sc.zero_subcarriers))
    return np.sqrt(dbm_to_mw(p_dbm)) * shape, p_dbm


def generate_capture(sc: Scenario, rx: Position, n_frames: int, stream=0,
                     seed: int | None = None) -> Capture:
    """Simulate ``n_frames`` frames from every AP at ``rx``.

    ``stream`` distinguishes independent bursts at the same position.
    """
    if n_frames < 1:
        raise CrislocError("n_frames must be >= 1")
    if not sc.contains(rx):
        raise CrislocError(f"receiver {rx} lies outside the room {sc.room}")
    seed = sc.seed if seed is None else seed
    env = sc.env
    S = sc.n_subcarriers
    zero = np.zeros(S, dtype=bool)
    zero[sorted(sc.zero_subcarriers)] = True
    unstable = np.zeros(S, dtype=bool)
    unstable[sorted(sc.unstable_subcarriers)] = True
    live = ~zero
    noise_sd = np.full(S, env.noise_sigma_db)
    noise_sd[unstable] *= UNSTABLE_NOISE_FACTOR

    csi, rss, anomalous, gains = {}, {}, {}, {}
    for ap in sc.aps:
        rng = rng_for("capture", seed, ap.id, rx.x, rx.y, n_frames, stream)
        base, _ = true_amplitudes(sc, ap, rx)
        burst_db = (env.burst_sigma_db * rng.standard_normal()
                    + 0.5 * env.burst_sigma_db * rng.standard_normal(S))
        noise_db = noise_sd * rng.standard_normal((n_frames, S))
        amp = base * 10.0 ** ((burst_db + noise_db) / 20.0)
        amp[:, zero] = 0.0
        power_mw = np.sum(amp ** 2, axis=1)
        with np.errstate(divide="ignore"):
            rss_dbm = mw_to_dbm(power_mw)
        heard = rss_dbm > UNHEARD_DBM
        rss_dbm = np.where(heard, np.minimum(rss_dbm, 0.0), UNHEARD_DBM)
        amp[~heard] = 0.0

        if sc.agc_policy == "uniform":
            g = rng.uniform(*AGC_RANGE, n_frames)
        elif sc.agc_policy == "normalize":
            # gain control drives every frame toward a fixed output level
            target = 1e-3
            g = np.sqrt(target / np.where(heard, power_mw, 1.0)) * rng.uniform(0.8, 1.25, n_frames)
        else:
            g = np.ones(n_frames)

        bad = rng.random(n_frames) < sc.anomaly_rate
        stored = amp * g[:, None]
        live_idx = np.flatnonzero(live)
        for k in np.flatnonzero(bad & heard):
            hit = rng.choice(live_idx, size=int(round(ANOMALY_FRACTION * live_idx.size)),
                             replace=False)
            stored[k, hit] *= rng.uniform(*ANOMALY_FACTORS, hit.size)
        phase = rng.uniform(-np.pi, np.pi, (n_frames, S))
        csi[ap.id] = stored * np.exp(1j * phase)
        rss[ap.id] = rss_dbm
        anomalous[ap.id] = bad & heard
        gains[ap.id] = g
    return Capture(rx, csi, rss, anomalous, gains)


# -- serialization ---------------------------------------------------------

def _pos(p: Position) -> list:
    return [p.x, p.y]


def scenario_to_dict(sc: Scenario) -> dict:
    e = sc.env
    return {
        "format_version": FORMAT_VERSION,
        "kind": "scenario",
        "env": {
            "p_d0_dbm": e.p_d0_dbm, "d0": e.d0, "n": e.n, "waf_db": e.waf_db,
            "wall_cap_C": e.wall_cap_C, "noise_sigma_db": e.noise_sigma_db,
            "burst_sigma_db": e.burst_sigma_db,
            "walls": [[_pos(w.a), _pos(w.b)] for w in e.walls],
        },
        "aps": [{
            "id": ap.id, "position": _pos(ap.position),
            "profile": {"base_db": ap.profile.base_db.tolist(),
                        "images": ap.profile.images.tolist(),
                        "coeffs": ap.profile.coeffs.tolist(),
                        "phases": ap.profile.phases.tolist()},
        } for ap in sc.aps],
        "grid": [_pos(p) for p in sc.grid],
        "grid_spacing": sc.grid_spacing,
        "rp_positions": [_pos(p) for p in sc.rp_positions],
        "room": list(sc.room),
        "seed": sc.seed,
        "agc_policy": sc.agc_policy,
        "anomaly_rate": sc.anomaly_rate,
        "unstable_subcarriers": sorted(sc.unstable_subcarriers),
        "zero_subcarriers": sorted(sc.zero_subcarriers),
        "n_subcarriers": sc.n_subcarriers,
        "altered": sorted(sc.altered),
    }


def scenario_from_dict(doc: Mapping) -> Scenario:
    check_version(doc, "scenario")
    e = doc["env"]
    env = EnvironmentModel(
        e["p_d0_dbm"], e["d0"], e["n"], e["waf_db"], int(e["wall_cap_C"]),
        tuple(Wall(Position.of(a), Position.of(b)) for a, b in e["walls"]),
        e["noise_sigma_db"], e.get("burst_sigma_db", 0.0))
    aps = tuple(AccessPoint(
        a["id"], Position.of(a["position"]),
        GainProfile(np.array(a["profile"]["base_db"], dtype=float),
                    np.array(a["profile"]["images"], dtype=float).reshape(-1, 2),
                    np.array(a["profile"]["coeffs"], dtype=float),
                    np.array(a["profile"]["phases"], dtype=float)))
        for a in doc["aps"])
    return Scenario(
        env, aps, tuple(Position.of(p) for p in doc["grid"]), float(doc["grid_spacing"]),
        tuple(Position.of(p) for p in doc["rp_positions"]), tuple(doc["room"]),
        seed=int(doc["seed"]), agc_policy=doc["agc_policy"],
        anomaly_rate=float(doc["anomaly_rate"]),
        unstable_subcarriers=frozenset(doc["unstable_subcarriers"]),
        zero_subcarriers=frozenset(doc["zero_subcarriers"]),
        n_subcarriers=int(doc["n_subcarriers"]),
        altered=frozenset(doc.get("altered", ())))


def save_scenario(sc: Scenario, path) -> None:
    write_json(scenario_to_dict(sc), path)


def load_scenario(path) -> Scenario:
    return scenario_from_dict(read_json(path))


def capture_to_dict(cap: Capture) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "capture",
        "rx": _pos(cap.rx),
        "aps": {ap: {"re": cap.csi[ap].real.tolist(), "im": cap.csi[ap].imag.tolist(),
                     "rss_dbm": cap.rss_dbm[ap].tolist()} for ap in cap.ap_ids},
    }


def capture_from_dict(doc: Mapping) -> Capture:
    check_version(doc, "capture")
    csi, rss = {}, {}
    for ap, d in doc["aps"].items():
        csi[ap] = np.array(d["re"], dtype=float) + 1j * np.array(d["im"], dtype=float)
        rss[ap] = np.array(d["rss_dbm"], dtype=float)
    return Capture(Position.of(doc["rx"]), csi, rss)


# Capture sets are large (frames x subcarriers x APs x points), so they go to a
# compressed numpy archive instead of JSON. Phase is not stored.

def save_captures(caps: Sequence[Capture], path, meta: Mapping | None = None) -> None:
    """Write amplitudes, RSS and ground-truth flags of a capture set."""
    if not caps:
        raise CrislocError("no captures to save")
    ap_ids = caps[0].ap_ids
    header = {"format_version": FORMAT_VERSION, "kind": "capture_set",
              "ap_ids": list(ap_ids), "meta": dict(meta or {})}
    arrays = {"header": np.array(json.dumps(header)),
              "rx": np.array([_pos(c.rx) for c in caps], dtype=float)}
    for j, ap in enumerate(ap_ids):
        arrays[f"amp_{j}"] = np.stack([np.abs(c.csi[ap]) for c in caps])
        arrays[f"rss_{j}"] = np.stack([c.rss_dbm[ap] for c in caps])
        if all(ap in c.anomalous for c in caps):
            arrays[f"anom_{j}"] = np.stack([c.anomalous[ap] for c in caps])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez_compressed(tmp, **arrays)
    tmp.replace(path)


def load_captures(path) -> tuple[list[Capture], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        check_version(header, "capture_set")
        rx = z["rx"]
        ap_ids = header["ap_ids"]
        amp = [z[f"amp_{j}"] for j in range(len(ap_ids))]
        rss = [z[f"rss_{j}"] for j in range(len(ap_ids))]
        anom = [z[f"anom_{j}"] if f"anom_{j}" in z else None for j in range(len(ap_ids))]
    caps = []
    for i, xy in enumerate(rx):
        caps.append(Capture(
            Position.of(xy),
            {ap: amp[j][i].astype(complex) for j, ap in enumerate(ap_ids)},
            {ap: rss[j][i] for j, ap in enumerate(ap_ids)},
            {ap: anom[j][i] for j, ap in enumerate(ap_ids) if anom[j] is not None}))
    return caps, header.get("meta", {})
