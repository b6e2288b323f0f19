"""Four-cycle consistency checks, quadruple fusion and hypergraph pruning.

Quadrifocal blocks are not estimated directly. Instead the four camera
triples of a quadruple ``(i, j, k, l)`` (one per trifocal tensor, each in its
own projective frame) are chained into the frame of the first triple. If the
chain closes, the per-camera estimates are averaged and the quadrifocal block
is computed from the fused cameras.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .geometry import (
    DegenerateAlignment,
    align_overlap,
    camera_center,
    chordal_mean,
    compose_camera,
    decompose_camera,
    relative_location_difference,
    rotation_angle_deg,
)
from .multifocal import BlockTensor, block_tensor_from_blocks, quadrifocal_from_cameras

__all__ = [
    "ChainResult",
    "CycleVerdict",
    "ViewingHypergraph",
    "PruningError",
    "chain_alignments",
    "cycle_heuristic",
    "evaluate_quadruple",
    "fuse_quadruple",
    "prune_low_density",
    "block_tensor_from_verdicts",
]

ROTATION_THRESHOLD_DEG = 3.0
LOCATION_THRESHOLD = 0.2


@dataclass
class ChainResult:
    """Four triples in the frame of the first, plus the closure cameras.

    ``aligned[t]`` holds the three cameras of triple ``t`` after alignment;
    triple ``t`` lists the quadruple cameras starting at position ``t``
    cyclically, so ``aligned[0] = (i, j, k)``, ``aligned[1] = (j, k, l)``,
    ``aligned[2] = (k, l, i)`` and ``aligned[3] = (l, i, j)``.
    """

    aligned: list[np.ndarray]
    closure: list[tuple[np.ndarray, np.ndarray]]
    residuals: list[float]
    degenerate: bool

    def estimates(self) -> list[list[np.ndarray]]:
        """All estimates of each quadruple camera, in quadruple order."""
        out = [[] for _ in range(4)]
        for t, triple in enumerate(self.aligned):
            for pos, cam in enumerate(triple):
                out[(t + pos) % 4].append(cam)
        return out


@dataclass
class CycleVerdict:
    quadruple: tuple[int, int, int, int]
    rotation_heuristic: float
    location_heuristic: float
    accepted: bool
    fused_poses: np.ndarray | None = None
    reason: str = ""


def chain_alignments(t_ijk, t_jkl, t_kli, t_lij, gap_tol: float = 1e-10) -> ChainResult:
    """Chain the four triples of a quadruple into the frame of ``t_ijk``.

    Each step aligns the next triple on the two cameras it shares with the
    previous (already aligned) one. The closure pairs compare cameras ``i``
    and ``j`` of the first triple with their estimates from the last one.
    """
    triples = [np.asarray(t, dtype=float).reshape(3, 3, 4) for t in (t_ijk, t_jkl, t_kli, t_lij)]
    aligned = [triples[0]]
    residuals = []
    degenerate = False
    for t in range(1, 4):
        prev = aligned[-1]
        al = align_overlap(triples[t][:2], prev[1:], gap_tol=gap_tol)
        residuals.append(al.residual)
        degenerate |= al.degenerate
        aligned.append(np.array([p @ al.H for p in triples[t]]))
    last = aligned[3]
    closure = [(aligned[0][0], last[1]), (aligned[0][1], last[2])]
    return ChainResult(aligned, closure, residuals, degenerate)


def cycle_heuristic(chain: ChainResult) -> tuple[float, float]:
    """Average rotation angle (degrees) and relative location gap over the closure pair.

    Locations are compared relative to the mean distance from the first-frame
    camera to the other three quadruple cameras.
    """
    centres = [camera_center(est[0]) for est in chain.estimates()]
    rots, locs = [], []
    for q, (p_first, p_last) in enumerate(chain.closure):
        _, r1, c1 = decompose_camera(p_first)
        _, r2, c2 = decompose_camera(p_last)
        rots.append(rotation_angle_deg(r1, r2))
        others = [c for m, c in enumerate(centres) if m != q]
        locs.append(relative_location_difference(c1, c2, others))
    return float(np.mean(rots)), float(np.mean(locs))


def fuse_quadruple(chain: ChainResult) -> tuple[np.ndarray, np.ndarray]:
    """Averaged cameras and their unit-norm quadrifocal block.

    Each camera's estimates are decomposed; rotations are fused by the
    chordal mean and centres by the arithmetic mean. Returns
    ``(cameras (4, 3, 4), block (3, 3, 3, 3))``.
    """
    fused = []
    for est in chain.estimates():
        parts = [decompose_camera(p) for p in est]
        rot = chordal_mean([r for _, r, _ in parts])
        centre = np.mean([c for _, _, c in parts], axis=0)
        fused.append(compose_camera(rot, centre))
    fused = np.array(fused)
    block = quadrifocal_from_cameras(*fused)
    return fused, block / np.linalg.norm(block)


def evaluate_quadruple(quad, triples: dict, rot_thresh: float = ROTATION_THRESHOLD_DEG,
                       loc_thresh: float = LOCATION_THRESHOLD) -> CycleVerdict:
    """Verdict for quadruple ``(i, j, k, l)`` from a map of camera triples.

    ``triples`` maps ordered index triples to ``(3, 3, 4)`` camera arrays. A
    triple may be stored under any ordering of its indices; it is permuted to
    the order the chain needs.
    """
    i, j, k, l = (int(x) for x in quad)
    needed = [(i, j, k), (j, k, l), (k, l, i), (l, i, j)]
    got = []
    for key in needed:
        cams = _lookup(triples, key)
        if cams is None:
            return CycleVerdict((i, j, k, l), np.inf, np.inf, False, reason=f"missing triple {key}")
        got.append(cams)
    try:
        chain = chain_alignments(*got)
        if chain.degenerate:
            return CycleVerdict((i, j, k, l), np.inf, np.inf, False, reason="degenerate overlap")
        rot, loc = cycle_heuristic(chain)
    except (DegenerateAlignment, ValueError, np.linalg.LinAlgError) as exc:
        return CycleVerdict((i, j, k, l), np.inf, np.inf, False, reason=str(exc))
    ok = bool(rot <= rot_thresh and loc <= loc_thresh)
    fused = fuse_quadruple(chain)[0] if ok else None
    return CycleVerdict((i, j, k, l), rot, loc, ok, fused,
                        "" if ok else "heuristic above threshold")


def _lookup(triples: dict, key):
    for perm in itertools.permutations(range(3)):
        cand = tuple(key[p] for p in perm)
        if cand in triples:
            cams = np.asarray(triples[cand], dtype=float)
            inv = np.argsort(perm)
            return cams[list(inv)]
    return None


def block_tensor_from_verdicts(n: int, verdicts) -> BlockTensor:
    """Normalized block quadrifocal tensor from the accepted verdicts."""
    tuples, blocks = [], []
    for v in verdicts:
        if v.accepted and v.fused_poses is not None:
            blk = quadrifocal_from_cameras(*v.fused_poses)
            tuples.append(v.quadruple)
            blocks.append(blk / np.linalg.norm(blk))
    return block_tensor_from_blocks(n, tuples, blocks, 4)


# --- viewing hypergraph -------------------------------------------------------

class PruningError(RuntimeError):
    pass


@dataclass
class ViewingHypergraph:
    n: int
    quadruples: set = field(default_factory=set)
    triples: set = field(default_factory=set)
    vertices: tuple[int, ...] | None = None

    def __post_init__(self):
        self.quadruples = {tuple(sorted(int(i) for i in q)) for q in self.quadruples}
        self.triples = {tuple(sorted(int(i) for i in t)) for t in self.triples}
        if self.vertices is None:
            self.vertices = tuple(range(self.n))

    def densities(self) -> dict[int, float]:
        """Observed quadruples through each vertex over the number possible."""
        m = len(self.vertices)
        possible = comb(m - 1, 3)
        counts = dict.fromkeys(self.vertices, 0)
        for q in self.quadruples:
            for v in q:
                counts[v] += 1
        return {v: (c / possible if possible else 0.0) for v, c in counts.items()}

    def without(self, removed) -> "ViewingHypergraph":
        removed = set(removed)
        keep = tuple(v for v in self.vertices if v not in removed)
        quads = {q for q in self.quadruples if removed.isdisjoint(q)}
        tris = {t for t in self.triples if removed.isdisjoint(t)}
        return ViewingHypergraph(self.n, quads, tris, keep)


def _prune_at(h: ViewingHypergraph, threshold: float) -> ViewingHypergraph:
    while True:
        low = [v for v, d in h.densities().items() if d < threshold]
        if not low:
            return h
        h = h.without(low)
        if not h.vertices:
            return h


def prune_low_density(h: ViewingHypergraph, thresholds=(0.05, 0.02, 0.01),
                      min_cameras: int = 4) -> ViewingHypergraph:
    """Repeatedly drop vertices whose density falls below a threshold.

    Thresholds are tried in order; the first whose survivors number at least
    ``min_cameras`` wins.
    """
    thresholds = list(thresholds)
    if any(a < b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be descending")
    for thr in thresholds:
        pruned = _prune_at(h, thr)
        if len(pruned.vertices) >= min_cameras:
            return pruned
    raise PruningError(
        f"fewer than {min_cameras} cameras survive pruning at every threshold {thresholds}")
