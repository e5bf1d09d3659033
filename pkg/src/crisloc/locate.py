"""Fingerprint matching: WKNN and the edge-enhanced EEKNN variant."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

import numpy as np

from . import kernels
from .model import CrislocError, Fingerprint, Position, RadioMap

ADJACENCY_FACTOR = 1.2
KPRIME_TOL = 1e-9


@dataclass(frozen=True)
class MatchDatabase:
    """Mean fingerprints ready for matching, one block per AP.

    ``projectors`` maps an AP to a matrix applied (``q @ P``) to the query's
    block before comparing; used for reconstructed APs.
    """

    xy: np.ndarray
    ap_ids: tuple[str, ...]
    blocks: Mapping[str, np.ndarray]
    grid_spacing: float
    projectors: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.xy.shape[0]

    @classmethod
    def from_radio_map(cls, rmap: RadioMap) -> "MatchDatabase":
        means = rmap.means
        return cls(rmap.xy, rmap.ap_ids,
                   {ap: means[:, j, :] for j, ap in enumerate(rmap.ap_ids)},
                   rmap.grid_spacing)

    def check_aps(self, ap_subset: Iterable[str] | None) -> tuple[str, ...]:
        if ap_subset is None:
            return self.ap_ids
        subset = set(ap_subset)
        for ap in sorted(subset):
            if ap not in self.ap_ids:
                raise CrislocError(f"unknown AP id {ap!r}")
        return tuple(a for a in self.ap_ids if a in subset)

    def project(self, ap: str, block: np.ndarray) -> np.ndarray:
        proj = self.projectors.get(ap)
        return block if proj is None else block @ proj


Database = Union[MatchDatabase, RadioMap]


def as_database(db: Database) -> MatchDatabase:
    if isinstance(db, MatchDatabase):
        return db
    if hasattr(db, "database"):
        # reconstructed maps build their own database
        return db.database()
    cached = getattr(db, "_match_db", None)
    if cached is None:
        cached = MatchDatabase.from_radio_map(db)
        object.__setattr__(db, "_match_db", cached)
    return cached


def block_sq_distances(query: Fingerprint, db: Database) -> np.ndarray:
    """Squared Euclidean distance per (training point, AP) block."""
    db = as_database(db)
    out = np.empty((len(db), len(db.ap_ids)))
    for j, ap in enumerate(db.ap_ids):
        q = db.project(ap, query.blocks[ap])
        diff = db.blocks[ap] - q
        out[:, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def subset_distances(sq: np.ndarray, db: Database, ap_subset=None) -> np.ndarray:
    db = as_database(db)
    ids = db.check_aps(ap_subset)
    cols = [db.ap_ids.index(a) for a in ids]
    return np.sqrt(sq[:, cols].sum(axis=1))


def _zero_hit(eps: np.ndarray, xy: np.ndarray):
    zero = eps == 0.0
    if zero.any():
        return xy[zero].mean(axis=0)
    return None


def wknn_from_distances(eps: np.ndarray, xy: np.ndarray, k: int) -> np.ndarray:
    n = eps.shape[0]
    if n == 0:
        raise CrislocError("empty radio map")
    if not 1 <= k <= n:
        raise CrislocError(f"k={k} must lie in [1, {n}]")
    hit = _zero_hit(eps, xy)
    if hit is not None:
        return hit
    nearest = np.argsort(eps, kind="stable")[:k]
    w = 1.0 / eps[nearest]
    w = w / w.sum()
    return w @ xy[nearest]


def eeknn_from_distances(eps: np.ndarray, xy: np.ndarray, kappa: np.ndarray,
                         k_prime: float = 1.0, weighting: str = "portion") -> np.ndarray:
    """EEKNN on precomputed distances.

    ``weighting="portion"`` weights neighbors by kappa / eps, so edge and corner
    points (large kappa) pull harder; ``"inverse"`` uses 1 / (eps * kappa).
    """
    n = eps.shape[0]
    if n == 0:
        raise CrislocError("empty radio map")
    if k_prime <= 0:
        raise CrislocError("k_prime must be positive")
    hit = _zero_hit(eps, xy)
    if hit is not None:
        return hit
    order = np.argsort(eps, kind="stable")
    count = kernels.portion_count(kappa[order], float(k_prime), KPRIME_TOL)
    nearest = order[:count]
    # relative portions cancel in the normalization; uniform portions give
    # exactly 1.0 and so reproduce plain WKNN bit for bit
    rel = kappa[nearest] / kappa[nearest].min()
    if weighting == "portion":
        w = (1.0 / eps[nearest]) * rel
    elif weighting == "inverse":
        w = (1.0 / eps[nearest]) / rel
    else:
        raise CrislocError(f"unknown weighting {weighting!r}")
    w = w / w.sum()
    return w @ xy[nearest]


def wknn(query: Fingerprint, db: Database, k: int = 3, ap_subset=None) -> Position:
    """Inverse-distance weighted average of the k nearest training positions."""
    mdb = as_database(db)
    if len(mdb) == 0:
        raise CrislocError("empty radio map")
    eps = subset_distances(block_sq_distances(query, mdb), mdb, ap_subset)
    return Position.of(wknn_from_distances(eps, mdb.xy, k))


@dataclass(frozen=True)
class NeighborPortionTable:
    kappa: np.ndarray
    neighbor_counts: np.ndarray


def spatial_neighbors(xy: np.ndarray, grid_spacing: float,
                      factor: float = ADJACENCY_FACTOR) -> list[np.ndarray]:
    """Indices of the training points adjacent to each point."""
    d = kernels.pairwise_dist(xy)
    radius = factor * grid_spacing
    return [np.flatnonzero((d[i] <= radius) & (np.arange(len(d)) != i))
            for i in range(len(d))]


def build_portion_table(db: Database, factor: float = ADJACENCY_FACTOR) -> NeighborPortionTable:
    """kappa_i = 1 / (number of spatially adjacent training points)."""
    db = as_database(db)
    if not db.grid_spacing > 0:
        raise CrislocError("grid_spacing must be known and positive")
    counts = np.array([len(nb) for nb in spatial_neighbors(db.xy, db.grid_spacing, factor)])
    return NeighborPortionTable(1.0 / np.maximum(counts, 1), counts)


def eeknn(query: Fingerprint, db: Database, k_prime: float = 1.0,
          table: NeighborPortionTable | None = None, ap_subset=None,
          weighting: str = "portion") -> Position:
    """Edge-enhanced KNN: take neighbors in distance order until their portions
    sum to ``k_prime``, then average their positions."""
    mdb = as_database(db)
    if len(mdb) == 0:
        raise CrislocError("empty radio map")
    table = table or build_portion_table(mdb)
    eps = subset_distances(block_sq_distances(query, mdb), mdb, ap_subset)
    return Position.of(eeknn_from_distances(eps, mdb.xy, table.kappa, k_prime, weighting))


def localize(query: Fingerprint, db: Database, matcher: str = "eeknn", k: int = 3,
             k_prime: float = 1.0, table: NeighborPortionTable | None = None,
             ap_subset=None) -> Position:
    if matcher == "wknn":
        return wknn(query, db, k, ap_subset)
    if matcher == "eeknn":
        return eeknn(query, db, k_prime, table, ap_subset)
    raise CrislocError(f"unknown matcher {matcher!r}")
