"""Domain types shared across the pipeline.

All containers are immutable after construction. Numeric payloads are numpy
arrays; callers must not write into them.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FORMAT_VERSION = 1
UNHEARD_DBM = -100.0
DEFAULT_SUBCARRIERS = 64
MIN_KEPT_SUBCARRIERS = 8


class CrislocError(ValueError):
    """Raised when an input violates a documented precondition."""


def dbm_to_mw(dbm):
    return np.power(10.0, np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    return 10.0 * np.log10(np.asarray(mw, dtype=float))


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise CrislocError(f"non-finite position ({self.x}, {self.y})")

    def distance(self, other: "Position") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @classmethod
    def of(cls, xy) -> "Position":
        return cls(float(xy[0]), float(xy[1]))


@dataclass(frozen=True)
class CsiFrame:
    """One overheard frame as captured, i.e. after receiver gain control."""

    ap: str
    timestamp: float
    subcarriers: np.ndarray
    rss_dbm: float
    sequence: int = 0

    @property
    def unheard(self) -> bool:
        return self.rss_dbm <= UNHEARD_DBM

    @property
    def amplitudes(self) -> np.ndarray:
        return np.abs(self.subcarriers)

    def scaled(self, gain: float) -> "CsiFrame":
        return CsiFrame(self.ap, self.timestamp, self.subcarriers * gain,
                        self.rss_dbm, self.sequence)


@dataclass(frozen=True, eq=False)
class SubcarrierMask:
    keep: np.ndarray

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool)
        object.__setattr__(self, "keep", keep)
        if keep.sum() < MIN_KEPT_SUBCARRIERS:
            raise CrislocError(
                f"only {int(keep.sum())} subcarriers survive filtering "
                f"(need >= {MIN_KEPT_SUBCARRIERS}); recollect CSI")

    def __eq__(self, other):
        if not isinstance(other, SubcarrierMask):
            return NotImplemented
        return bool(np.array_equal(self.keep, other.keep))

    def __hash__(self):
        return hash(self.keep.tobytes())

    @property
    def size(self) -> int:
        return int(self.keep.size)

    @property
    def active(self) -> int:
        return int(self.keep.sum())

    @property
    def removed(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~self.keep)]

    @classmethod
    def all_kept(cls, n: int = DEFAULT_SUBCARRIERS) -> "SubcarrierMask":
        return cls(np.ones(n, dtype=bool))


@dataclass(frozen=True)
class Fingerprint:
    """Per-AP feature blocks; ``vector`` concatenates them in ``ap_ids`` order."""

    ap_ids: tuple[str, ...]
    blocks: Mapping[str, np.ndarray]

    @cached_property
    def vector(self) -> np.ndarray:
        if not self.ap_ids:
            return np.zeros(0)
        return np.concatenate([self.blocks[a] for a in self.ap_ids])

    def restrict(self, ap_subset: Iterable[str]) -> "Fingerprint":
        subset = set(ap_subset)
        ids = tuple(a for a in self.ap_ids if a in subset)
        return Fingerprint(ids, {a: self.blocks[a] for a in ids})


@dataclass(frozen=True)
class RadioMap:
    """Survey database: calibrated amplitude samples per point and AP.

    ``samples[i][ap]`` is an ``(n, active)`` array; ``n`` may be 0 when the AP
    was unheard at that point.
    """

    mask: SubcarrierMask
    positions: tuple[Position, ...]
    samples: tuple[Mapping[str, np.ndarray], ...]
    grid_spacing: float
    ap_ids: tuple[str, ...]
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.positions) != len(self.samples):
            raise CrislocError("positions and samples differ in length")
        if len(set(self.ap_ids)) != len(self.ap_ids) or any(not a for a in self.ap_ids):
            raise CrislocError("ap_ids must be nonempty and unique")
        width = self.mask.active
        for i, point in enumerate(self.samples):
            missing = set(self.ap_ids) - set(point)
            if missing:
                raise CrislocError(f"point {i} lacks samples for {sorted(missing)}")
            for ap, arr in point.items():
                if arr.ndim != 2 or arr.shape[1] != width:
                    raise CrislocError(
                        f"point {i}, AP {ap!r}: samples shaped {arr.shape}, "
                        f"expected (n, {width})")
        xy = [(p.x, p.y) for p in self.positions]
        if len(set(xy)) != len(xy):
            raise CrislocError("training positions must be pairwise distinct")

    def __len__(self) -> int:
        return len(self.positions)

    @cached_property
    def xy(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.positions], dtype=float).reshape(-1, 2)

    @cached_property
    def means(self) -> np.ndarray:
        """Mean fingerprint tensor shaped (points, aps, active)."""
        out = np.zeros((len(self), len(self.ap_ids), self.mask.active))
        for i, point in enumerate(self.samples):
            for j, ap in enumerate(self.ap_ids):
                if len(point[ap]):
                    out[i, j] = point[ap].mean(axis=0)
        return out

    def index_of(self, pos: Position, tol: float = 1e-9) -> int:
        d = np.hypot(self.xy[:, 0] - pos.x, self.xy[:, 1] - pos.y)
        i = int(np.argmin(d))
        if d[i] > tol:
            raise CrislocError(f"{pos} is not a training point")
        return i

    def check_aps(self, ap_subset: Iterable[str]) -> tuple[str, ...]:
        subset = set(ap_subset)
        for ap in sorted(subset):
            if ap not in self.ap_ids:
                raise CrislocError(f"unknown AP id {ap!r}")
        return tuple(a for a in self.ap_ids if a in subset)

    def with_points(self, positions, samples, **meta) -> "RadioMap":
        return RadioMap(self.mask, tuple(positions), tuple(samples),
                        self.grid_spacing, self.ap_ids, {**self.meta, **meta})


def concat_fingerprint(rmap: RadioMap, point_index: int,
                       ap_subset: Iterable[str] | None = None) -> Fingerprint:
    """Per-AP sample means at one training point, restricted to ``ap_subset``.

    Unheard APs contribute a zero block.
    """
    if not 0 <= point_index < len(rmap):
        raise CrislocError(f"point index {point_index} out of range")
    ids = rmap.ap_ids if ap_subset is None else rmap.check_aps(ap_subset)
    point = rmap.samples[point_index]
    blocks = {}
    for ap in ids:
        arr = point[ap]
        blocks[ap] = arr.mean(axis=0) if len(arr) else np.zeros(rmap.mask.active)
    return Fingerprint(ids, blocks)


def fingerprint_from_samples(per_ap: Mapping[str, np.ndarray], ap_ids: Sequence[str],
                             width: int) -> Fingerprint:
    """Mean fingerprint of a fresh capture given calibrated samples per AP."""
    blocks = {}
    for ap in ap_ids:
        arr = per_ap.get(ap)
        blocks[ap] = (np.asarray(arr).mean(axis=0)
                      if arr is not None and len(arr) else np.zeros(width))
    return Fingerprint(tuple(ap_ids), blocks)


# -- serialization ---------------------------------------------------------

def encode_array(a) -> dict:
    """Row-major little-endian float64 bytes, base64 in the JSON document."""
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "f8": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(doc) -> np.ndarray:
    if isinstance(doc, dict):
        raw = base64.b64decode(doc["f8"])
        return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).astype(float)
    return np.array(doc, dtype=float)


def radio_map_to_dict(rmap: RadioMap) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "radio_map",
        "ap_ids": list(rmap.ap_ids),
        "grid_spacing": rmap.grid_spacing,
        "mask": [bool(k) for k in rmap.mask.keep],
        "points": [
            {"position": [p.x, p.y],
             "samples": {ap: encode_array(s[ap]) for ap in rmap.ap_ids}}
            for p, s in zip(rmap.positions, rmap.samples)
        ],
        "meta": dict(rmap.meta),
    }


def radio_map_from_dict(doc: Mapping) -> RadioMap:
    check_version(doc, "radio_map")
    mask = SubcarrierMask(np.array(doc["mask"], dtype=bool))
    width = mask.active
    positions, samples = [], []
    for pt in doc["points"]:
        positions.append(Position.of(pt["position"]))
        samples.append({ap: decode_array(v).reshape(-1, width)
                        for ap, v in pt["samples"].items()})
    return RadioMap(mask, tuple(positions), tuple(samples), float(doc["grid_spacing"]),
                    tuple(doc["ap_ids"]), dict(doc.get("meta", {})))


def check_version(doc: Mapping, kind: str) -> None:
    if doc.get("format_version") != FORMAT_VERSION:
        raise CrislocError(f"unsupported format_version {doc.get('format_version')!r}")
    if doc.get("kind") != kind:
        raise CrislocError(f"expected a {kind} document, got {doc.get('kind')!r}")


def write_json(doc: Mapping, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, separators=(",", ":")))
    tmp.replace(path)


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return json.loads(path.read_text())


def load_doc(path, kind: str) -> dict:
    doc = read_json(path)
    check_version(doc, kind)
    return doc


def save_radio_map(rmap: RadioMap, path) -> None:
    write_json(radio_map_to_dict(rmap), path)


def load_radio_map(path) -> RadioMap:
    return radio_map_from_dict(read_json(path))
