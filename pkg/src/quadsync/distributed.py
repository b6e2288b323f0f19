"""Cluster-wise synchronization merged through overlapping cameras.

Each cluster is synchronized on its own restricted block tensor. The results
are then chained into the frame of the first cluster in the merge order by
projective alignment on the cameras already placed.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import DegenerateAlignment, align_overlap
from .multifocal import BlockTensor
from .sync_quad import Diagnostics, QuadSyncConfig, run_quadsync

__all__ = ["ClusterPlan", "ClusterResult", "DistributedResult", "run_distributed",
           "read_cluster_plan", "write_cluster_plan"]


@dataclass
class ClusterPlan:
    clusters: list[list[int]]
    merge_order: list[int] | None = None

    def __post_init__(self):
        self.clusters = [[int(c) for c in cl] for cl in self.clusters]
        if not self.clusters:
            raise ValueError("plan has no clusters")
        if self.merge_order is None:
            self.merge_order = list(range(len(self.clusters)))
        if sorted(self.merge_order) != list(range(len(self.clusters))):
            raise ValueError("merge order must list every cluster exactly once")

    def validate(self, n: int) -> None:
        covered = set().union(*map(set, self.clusters))
        if covered != set(range(n)):
            missing = sorted(set(range(n)) - covered)
            raise ValueError(f"clusters do not cover cameras {missing}")
        placed = set(self.clusters[self.merge_order[0]])
        for c in self.merge_order[1:]:
            shared = placed & set(self.clusters[c])
            if len(shared) < 2:
                raise DegenerateAlignment(
                    f"cluster {c} shares {len(shared)} camera(s) with those merged before it")
            placed |= set(self.clusters[c])


@dataclass
class ClusterResult:
    cameras: list[int]
    estimate: np.ndarray
    diagnostics: Diagnostics
    wall_time: float


@dataclass
class DistributedResult:
    cameras: np.ndarray
    clusters: list[ClusterResult]
    merge_residuals: list[float] = field(default_factory=list)
    wall_time: float = 0.0


def _solve_cluster(q: BlockTensor, cameras, config) -> ClusterResult:
    start = time.perf_counter()
    sub = q.restrict(cameras)
    if sub.block_count == 0:
        raise ValueError(f"cluster {cameras} has no observed blocks")
    est, diag = run_quadsync(sub, config)
    return ClusterResult(list(cameras), est, diag, time.perf_counter() - start)


def run_distributed(q: BlockTensor, plan: ClusterPlan, config: QuadSyncConfig | None = None,
                    workers: int = 1) -> DistributedResult:
    """Synchronize every cluster, then merge along ``plan.merge_order``.

    The first cluster in the merge order fixes the global frame. ``workers``
    clusters are solved concurrently (numpy releases the GIL in its kernels).
    """
    config = config or QuadSyncConfig()
    plan.validate(q.n)
    start = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda cl: _solve_cluster(q, cl, config), plan.clusters))
    else:
        results = [_solve_cluster(q, cl, config) for cl in plan.clusters]

    merged = np.full((q.n, 3, 4), np.nan)
    placed: set[int] = set()
    residuals = []
    for c in plan.merge_order:
        res = results[c]
        local = dict(zip(res.cameras, res.estimate))
        if placed:
            shared = [i for i in res.cameras if i in placed]
            al = align_overlap([local[i] for i in shared], [merged[i] for i in shared])
            if al.degenerate:
                raise DegenerateAlignment(f"overlap alignment of cluster {c} is rank-deficient")
            residuals.append(al.residual)
            local = {i: p @ al.H for i, p in local.items()}
        for i, p in local.items():
            if i not in placed:
                merged[i] = p
        placed |= set(res.cameras)
    return DistributedResult(merged, results, residuals, time.perf_counter() - start)


def read_cluster_plan(path) -> ClusterPlan:
    """One cluster per line as whitespace-separated camera indices; ``#`` starts a comment."""
    clusters = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                clusters.append([int(x) for x in line.split()])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad camera index ({exc})") from None
    return ClusterPlan(clusters)


def write_cluster_plan(plan: ClusterPlan, path) -> None:
    with open(path, "w") as fh:
        for c in plan.merge_order:
            fh.write(" ".join(str(i) for i in plan.clusters[c]) + "\n")
