"""Fingerprint reconstruction for altered APs by subspace transfer.

For one altered AP, the outdated survey samples are the source domain and the
fresh samples at the reference points are the target domain. A transform A
(m x M) is learned so that, after projection:

* source and target means agree at the RPs (MMD term ``XMXt``),
* samples of one point stay tight (intra-class scatter ``P_s``),
* points stay apart (between-class scatter ``Q_s``, held at the identity),
* spatial neighbors stay closer than non-neighbors (``D_N`` vs ``F_N``).

The unaltered APs keep their raw blocks; the altered block of the map and of
every later query is multiplied by the learned projector before matching.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .locate import MatchDatabase, spatial_neighbors
from .model import (CrislocError, RadioMap, check_version, decode_array, encode_array,
                    radio_map_from_dict, radio_map_to_dict, read_json, write_json)

log = logging.getLogger(__name__)

DEFAULT_MU = 1.0
DEFAULT_LAMBDA = 0.1
DEFAULT_ALPHA = 0.5
MAX_SUBDIM = 10
# eigenvalues below this fraction of the largest count as zero
ZERO_EIG_RTOL = 1e-10


@dataclass(frozen=True)
class TransferParams:
    mu: float = DEFAULT_MU
    lam: float = DEFAULT_LAMBDA
    alpha: float = DEFAULT_ALPHA
    subdim: int | None = None       # None: min(10, m - 1)
    # weight of the RP mean-matching term; None puts it on the same
    # per-sample footing as the scatter terms (mean source samples per point)
    mmd_weight: float | None = None

    def __post_init__(self):
        if not (self.mu > 0 and self.lam > 0 and self.alpha > 0):
            raise CrislocError("mu, lambda and alpha must be positive")

    def dim(self, m: int) -> int:
        M = min(MAX_SUBDIM, m - 1) if self.subdim is None else int(self.subdim)
        if not 1 <= M <= m:
            raise CrislocError(f"subspace dimension {M} outside [1, {m}]")
        return M


@dataclass(frozen=True)
class TransferInputs:
    """Samples of one AP: ``source[i]`` is (n_s^i, m) at survey point i,
    ``target`` maps a survey-point index to its fresh (n_t^i, m) samples."""

    source: tuple[np.ndarray, ...]
    target: Mapping[int, np.ndarray]
    neighbors: tuple[np.ndarray, ...]
    params: TransferParams = field(default_factory=TransferParams)

    def __post_init__(self):
        c_s = len(self.source)
        if c_s == 0:
            raise CrislocError("no source points")
        if len(self.target) > c_s:
            raise CrislocError("more target points than source points")
        if len(self.neighbors) != c_s:
            raise CrislocError("need one neighbor set per source point")
        m = self.m
        for i, x in enumerate(self.source):
            if x.ndim != 2 or x.shape[1] != m:
                raise CrislocError(f"source point {i} has shape {x.shape}, expected (n, {m})")
        for i, x in self.target.items():
            if not 0 <= i < c_s:
                raise CrislocError(f"target point {i} is not a survey point")
            if x.ndim != 2 or x.shape[1] != m:
                raise CrislocError(f"target point {i} has shape {x.shape}, expected (n, {m})")
        self.params.dim(m)

    @property
    def m(self) -> int:
        return self.source[0].shape[1]

    def non_neighbors(self) -> tuple[np.ndarray, ...]:
        c_s = len(self.source)
        out = []
        for i, nb in enumerate(self.neighbors):
            far = np.ones(c_s, dtype=bool)
            far[nb] = False
            far[i] = False
            out.append(np.flatnonzero(far))
        return tuple(out)


@dataclass(frozen=True)
class TransferMatrices:
    XMXt: np.ndarray
    P_s: np.ndarray
    Q_s: np.ndarray
    D_N: np.ndarray
    F_N: np.ndarray

    mmd_weight: float = 1.0

    def B(self, mu: float, lam: float) -> np.ndarray:
        return (self.mmd_weight * self.XMXt + mu * self.P_s
                + lam * np.eye(self.XMXt.shape[0]))


class NoAdmissibleSubspace(CrislocError):
    """Every eigenvector violates the neighbor inequality."""


@dataclass(frozen=True)
class TransformMatrix:
    """Selected columns, scaled so that A^T Q_s A = I.

    ``eigenvalues`` are the generalized eigenvalues z' of Q_s a = z' B a for
    the selected columns (descending).
    """

    A: np.ndarray
    eigenvalues: np.ndarray
    indices: np.ndarray


def mmd_matrix(n_s: int, n_t: int) -> np.ndarray:
    """The (n_s + n_t) square block matrix M_i of one RP."""
    if n_s < 1 or n_t < 1:
        raise CrislocError("each RP needs source and target samples")
    M = np.empty((n_s + n_t, n_s + n_t))
    M[:n_s, :n_s] = 1.0 / n_s ** 2
    M[n_s:, n_s:] = 1.0 / n_t ** 2
    M[:n_s, n_s:] = -1.0 / (n_s * n_t)
    M[n_s:, :n_s] = -1.0 / (n_s * n_t)
    return M


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _mean_diff_scatter(means: np.ndarray, sets: Sequence[np.ndarray]) -> np.ndarray:
    m = means.shape[1]
    out = np.zeros((m, m))
    for i, nb in enumerate(sets):
        if len(nb) == 0:
            continue
        d = means[i] - means[nb]
        out += d.T @ d / len(nb)
    return _sym(out)


def build_matrices(inp: TransferInputs) -> TransferMatrices:
    m = inp.m
    for i, x in enumerate(inp.source):
        if len(x) == 0:
            raise CrislocError(f"survey point {i} has no source samples")
    means = np.array([x.mean(axis=0) for x in inp.source])

    # X M_i X^T collapses to the outer product of the mean difference
    XMXt = np.zeros((m, m))
    for i, xt in sorted(inp.target.items()):
        if len(xt) == 0:
            raise CrislocError(f"RP {i} has no target samples")
        d = means[i] - xt.mean(axis=0)
        XMXt += np.outer(d, d)

    P_s = np.zeros((m, m))
    for x, mu_i in zip(inp.source, means):
        c = x - mu_i
        P_s += c.T @ c

    counts = np.array([len(x) for x in inp.source], dtype=float)
    grand = counts @ means / counts.sum()
    c = means - grand
    Q_s = (c * counts[:, None]).T @ c

    D_N = _mean_diff_scatter(means, inp.neighbors)
    F_N = _mean_diff_scatter(means, inp.non_neighbors())
    w = inp.params.mmd_weight
    if w is None:
        w = float(counts.mean())
    return TransferMatrices(_sym(XMXt), _sym(P_s), _sym(Q_s), D_N, F_N, w)


def generalized_eigh(Q: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve Q a = z B a for symmetric Q and SPD B, eigenvalues descending.

    B = L L^T reduces the problem to the symmetric C = L^-1 Q L^-T; the
    returned vectors satisfy a^T B a = 1.
    """
    try:
        L = linalg.cholesky(B, lower=True)
    except linalg.LinAlgError as exc:
        raise CrislocError("B is not positive definite; increase lambda") from exc
    tmp = linalg.solve_triangular(L, Q, lower=True)
    C = linalg.solve_triangular(L, tmp.T, lower=True)
    z, V = linalg.eigh(_sym(C))
    a = linalg.solve_triangular(L.T, V, lower=False)
    return z[::-1], a[:, ::-1]


def neighbor_ratio_ok(A: np.ndarray, mat: TransferMatrices, alpha: float) -> bool:
    d_n = np.trace(A.T @ mat.D_N @ A)
    d_f = np.trace(A.T @ mat.F_N @ A)
    return bool(d_n <= alpha * d_f)


def solve_transform(mat: TransferMatrices, params: TransferParams = TransferParams()
                    ) -> TransformMatrix:
    m = mat.Q_s.shape[0]
    M = params.dim(m)
    z, a = generalized_eigh(mat.Q_s, mat.B(params.mu, params.lam))
    if z.size == 0 or z[0] <= 0:
        raise CrislocError("Q_s has rank 0: the survey points are indistinguishable")
    nonzero = z > ZERO_EIG_RTOL * z[0]
    # a^T B a = 1, so a^T Q a = z; rescale to a^T Q a = 1
    cols = np.zeros_like(a)
    cols[:, nonzero] = a[:, nonzero] / np.sqrt(z[nonzero])

    chosen: list[int] = []
    for j in np.flatnonzero(nonzero):
        trial = chosen + [int(j)]
        if neighbor_ratio_ok(cols[:, trial], mat, params.alpha):
            chosen = trial
            if len(chosen) == M:
                break
    if not chosen:
        raise NoAdmissibleSubspace("no eigenvector satisfies the neighbor inequality; "
                                   "raise alpha")
    if len(chosen) < M:
        warnings.warn(f"only {len(chosen)} of {M} eigenvectors satisfy the neighbor "
                      "inequality", RuntimeWarning, stacklevel=2)
    idx = np.array(chosen)
    return TransformMatrix(cols[:, idx], z[idx], idx)


def objective(A: np.ndarray, mat: TransferMatrices, params: TransferParams) -> float:
    """s_t + mu s_w + lambda ||A||_F^2."""
    return float(np.trace(A.T @ mat.B(params.mu, params.lam) @ A))


def normalize_feasible(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Rescale an arbitrary A so that A^T Q A = I."""
    G = _sym(A.T @ Q @ A)
    w, V = np.linalg.eigh(G)
    if w.min() <= 0:
        raise CrislocError("A^T Q A is singular")
    return A @ (V / np.sqrt(w)) @ V.T


# -- maps --------------------------------------------------------------------

@dataclass(frozen=True)
class ReconstructedMap:
    """The outdated map with projected blocks for the altered APs.

    ``blocks[ap]`` holds the per-point projected fingerprints and
    ``projectors[ap]`` the m x M matrix applied to query blocks (``q @ P``).
    """

    base: RadioMap
    projectors: Mapping[str, np.ndarray]
    blocks: Mapping[str, np.ndarray]
    transforms: Mapping[str, TransformMatrix] = field(default_factory=dict)
    meta: Mapping = field(default_factory=dict)

    @property
    def altered(self) -> frozenset:
        return frozenset(self.projectors)

    def database(self) -> MatchDatabase:
        cached = self.__dict__.get("_db")
        if cached is None:
            base = MatchDatabase.from_radio_map(self.base)
            blocks = dict(base.blocks)
            blocks.update(self.blocks)
            cached = MatchDatabase(base.xy, base.ap_ids, blocks, base.grid_spacing,
                                   dict(self.projectors))
            object.__setattr__(self, "_db", cached)
        return cached


def _transfer_inputs(old_map: RadioMap, fresh: RadioMap, ap: str,
                     params: TransferParams, scale: float) -> TransferInputs:
    source = tuple(s[ap] / scale for s in old_map.samples)
    target = {}
    for pos, s in zip(fresh.positions, fresh.samples):
        i = old_map.index_of(pos)
        if len(s[ap]) == 0:
            raise CrislocError(f"no fresh samples of {ap} at RP ({pos.x}, {pos.y})")
        target[i] = s[ap] / scale
    nbrs = tuple(spatial_neighbors(old_map.xy, old_map.grid_spacing))
    return TransferInputs(source, target, nbrs, params)


def reconstruct_map(old_map: RadioMap, fresh: RadioMap, altered,
                    params: TransferParams = TransferParams()) -> ReconstructedMap:
    """Learn one transform per altered AP and project the outdated map.

    ``fresh`` holds new samples at the RPs, which must be survey points of
    ``old_map``. At the RPs the projected fresh means replace the projected
    outdated ones.
    """
    altered = sorted(set(altered))
    if not altered:
        return ReconstructedMap(old_map, {}, {}, {}, {"altered": []})
    old_map.check_aps(altered)
    fresh.check_aps(altered)
    if fresh.mask != old_map.mask:
        raise CrislocError("fresh RP data uses a different subcarrier mask")
    if len(fresh) == 0:
        raise CrislocError("no fresh RP samples")

    means = old_map.means
    projectors, blocks, transforms = {}, {}, {}
    excluded: list[str] = []
    for ap in altered:
        raw = means[:, old_map.ap_ids.index(ap), :]
        # work in units of the source RMS so lambda is scale free
        scale = float(np.sqrt(np.mean(np.vstack(
            [s[ap] for s in old_map.samples if len(s[ap])]) ** 2)))
        if scale <= 0:
            raise CrislocError(f"{ap} is silent in the outdated map")
        inp = _transfer_inputs(old_map, fresh, ap, params, scale)
        try:
            tm = solve_transform(build_matrices(inp), params)
        except NoAdmissibleSubspace:
            # the stale block is known to be wrong: leave the AP out of matching
            warnings.warn(f"{ap}: no admissible subspace, excluded from matching",
                          RuntimeWarning, stacklevel=2)
            projectors[ap] = np.zeros((raw.shape[1], 0))
            blocks[ap] = np.zeros((len(old_map), 0))
            excluded.append(ap)
            continue
        # matching measures distances inside the learned subspace
        P = np.linalg.qr(tm.A)[0]
        block = raw @ P
        for pos, s in zip(fresh.positions, fresh.samples):
            block[old_map.index_of(pos)] = s[ap].mean(axis=0) @ P
        projectors[ap], blocks[ap], transforms[ap] = P, block, tm
        log.info("reconstructed %s: M=%d, top eigenvalue %.3g", ap, tm.A.shape[1],
                 tm.eigenvalues[0])
    meta = {"altered": altered, "rp_count": len(fresh), "fresh_rp_means": "replaced",
            "excluded": excluded,
            "mu": params.mu, "lambda": params.lam, "alpha": params.alpha}
    return ReconstructedMap(old_map, projectors, blocks, transforms, meta)


def reconstructed_to_dict(rec: ReconstructedMap) -> dict:
    return {
        "format_version": 1,
        "kind": "reconstructed_map",
        "radio_map": radio_map_to_dict(rec.base),
        "projected_blocks": {
            ap: {"projector": encode_array(rec.projectors[ap]),
                 "blocks": encode_array(rec.blocks[ap]),
                 "eigenvalues": (rec.transforms[ap].eigenvalues.tolist()
                                 if ap in rec.transforms else [])}
            for ap in sorted(rec.projectors)},
        "meta": dict(rec.meta),
    }


def reconstructed_from_dict(doc: Mapping) -> ReconstructedMap:
    check_version(doc, "reconstructed_map")
    base = radio_map_from_dict(doc["radio_map"])
    proj, blocks = {}, {}
    for ap, sec in doc.get("projected_blocks", {}).items():
        proj[ap] = decode_array(sec["projector"])
        blocks[ap] = decode_array(sec["blocks"])
        if blocks[ap].shape[0] != len(base):
            raise CrislocError(f"projected block of {ap} has the wrong number of points")
    return ReconstructedMap(base, proj, blocks, {}, dict(doc.get("meta", {})))


def save_reconstructed(rec: ReconstructedMap, path) -> None:
    write_json(reconstructed_to_dict(rec), path)


def load_map_any(path):
    """A plain radio map or a reconstructed one, by the document's kind."""
    doc = read_json(path)
    if doc.get("kind") == "reconstructed_map":
        return reconstructed_from_dict(doc)
    return radio_map_from_dict(doc)
