"""IRLS-ADMM synchronization of a block quadrifocal tensor.

The solver fits ``Lambda (.)_b Q ~ [[G_Q; C_1, C_2, C_3, C_4]]`` with the
four camera factors tied to a consensus ``B``. Each ADMM pass alternates exact
row updates of every ``C_i`` with the blockwise scale projection, then updates
``B`` and the scaled duals. IRLS reweighting wraps the ADMM passes.
"""
from __future__ import annotations

import copy
import csv
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .blocklsq import Term, balance_gauge, solve_rows, symmetrize_scales
from .geometry import unstack
from .multifocal import BlockTensor, core_q
from .tensor import leading_left_singular_vectors, flatten

__all__ = [
    "QuadSyncConfig",
    "QuadSyncState",
    "IterationRecord",
    "Diagnostics",
    "SolverDivergence",
    "initialize",
    "update_camera_factor",
    "solve_scales",
    "update_consensus",
    "update_duals",
    "update_weights",
    "augmented_objective",
    "consensus_gap",
    "run_quadsync",
    "is_connected",
]

log = logging.getLogger(__name__)


class SolverDivergence(RuntimeError):
    """Raised when the objective becomes non-finite; carries the last state."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class QuadSyncConfig:
    rho: float = 0.01
    delta: float = 1e-4
    irls_iters: int = 4
    admm_iters: int = 1
    alt_iters: int = 10
    subsample_m: int | None = None
    seed: int = 0
    # relative objective change that stops the IRLS loop early (None: fixed counts)
    tol: float | None = None
    sqrt_residual: bool = True
    divergence_factor: float = 10.0
    # rescale factors along the product-one gauge after each sweep
    balance: bool = True
    # "exact": weighted minimizer over unit-norm symmetric scales;
    # "project": per-block projection, symmetrize, normalize
    scale_step: str = "exact"
    # evaluate the augmented objective after every sub-step (costly, for tests)
    record_substeps: bool = False


@dataclass
class QuadSyncState:
    factors: list[np.ndarray]
    consensus: np.ndarray
    duals: list[np.ndarray]
    lam: np.ndarray
    weights: np.ndarray
    rho: float

    def copy(self) -> "QuadSyncState":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    irls: int
    objective: float
    weighted_objective: float
    consensus_gap: float
    wall_time: float
    rho: float


@dataclass
class Diagnostics:
    records: list[IterationRecord] = field(default_factory=list)
    substeps: list[float] = field(default_factory=list)
    residual_histogram: tuple[np.ndarray, np.ndarray] | None = None
    rho_halved: bool = False
    # seconds spent inside camera factor updates
    c_update_time: float = 0.0
    state: QuadSyncState | None = None

    def to_csv(self, path, timing: bool = True) -> None:
        """One row per iteration; ``timing=False`` writes zero wall times."""
        names = list(IterationRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(names)
            for r in self.records:
                vals = [0.0 if k == "wall_time" and not timing else getattr(r, k)
                        for k in names]
                writer.writerow([repr(v) if isinstance(v, float) else v for v in vals])


def is_connected(omega) -> bool:
    """Whether the hypergraph with one edge per observed block is connected.

    ``omega`` is one block mask or a list of masks over the same cameras.
    """
    masks = [np.asarray(m) for m in (omega if isinstance(omega, (list, tuple)) else [omega])]
    n = masks[0].shape[0]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for idx in (row for m in masks for row in np.argwhere(m)):
        roots = {find(int(i)) for i in idx}
        base = roots.pop()
        for r in roots:
            parent[r] = base
    return len({find(i) for i in range(n)}) == 1


def _term(q: BlockTensor) -> Term:
    if q.order != 4:
        raise ValueError("QuadSync needs an order-4 block tensor")
    return Term(q, core_q())


def initialize(q: BlockTensor, config: QuadSyncConfig | None = None) -> tuple[QuadSyncState, Term]:
    """HOSVD start: every ``C_i`` and ``B`` equal the leading mode-0 singular vectors."""
    config = config or QuadSyncConfig()
    if config.scale_step not in ("exact", "project"):
        raise ValueError("scale_step must be 'exact' or 'project'")
    if q.block_count == 0:
        raise ValueError("no observed blocks")
    term = _term(q)
    u, _ = leading_left_singular_vectors(flatten(term.data.data, 0), 4)
    # match the start's magnitude to unit-norm scales so no factor absorbs it
    raw = term.raw_scales([u] * 4)
    nrm = np.linalg.norm(symmetrize_scales(raw))
    if nrm > 0:
        u = u * nrm ** -0.25
    factors = [u.copy() for _ in range(4)]
    lam = term.scale_update(factors)
    w = term.weights(factors, lam, config.delta, config.sqrt_residual)
    state = QuadSyncState(
        factors=factors,
        consensus=u.copy(),
        duals=[np.zeros_like(u) for _ in range(4)],
        lam=lam,
        weights=w,
        rho=config.rho,
    )
    return state, term


def update_camera_factor(state: QuadSyncState, term: Term, mode: int,
                         subsample_m: int | None = None, rng=None) -> np.ndarray:
    """Exact (or column-subsampled) minimizer of the rows of ``C_mode``."""
    if not 0 <= mode < 4:
        raise ValueError("mode must be in 0..3")
    target = state.consensus - state.duals[mode]
    if subsample_m is None:
        lhs, rhs = term.normal_system(state.factors, mode, state.weights, state.lam)
    else:
        rng = np.random.default_rng(rng)
        lhs, rhs = term.sampled_system(state.factors, mode, state.weights, state.lam,
                                       subsample_m, rng)
    return solve_rows(lhs, rhs, target, state.rho)


def solve_scales(state: QuadSyncState, term: Term, exact: bool = True) -> np.ndarray:
    """Symmetric unit-norm scales for the current factors.

    ``exact`` minimizes the weighted data term over that set; otherwise the
    blockwise projection coefficients are symmetrized and normalized.
    """
    return term.scale_update(state.factors, state.weights if exact else None)


def update_consensus(state: QuadSyncState) -> np.ndarray:
    return sum(c + g for c, g in zip(state.factors, state.duals)) / len(state.factors)


def update_duals(state: QuadSyncState) -> list[np.ndarray]:
    return [g + c - state.consensus for c, g in zip(state.factors, state.duals)]


def update_weights(state: QuadSyncState, term: Term, delta: float = 1e-4,
                   sqrt_residual: bool = True) -> np.ndarray:
    return term.weights(state.factors, state.lam, delta, sqrt_residual)


def augmented_objective(state: QuadSyncState, term: Term) -> float:
    """Weighted data term plus the scaled-dual penalty at the current state."""
    data = term.objective(state.factors, state.lam, state.weights)
    pen = sum(np.sum((c - state.consensus + g) ** 2) for c, g in zip(state.factors, state.duals))
    return data + 0.5 * state.rho * float(pen)


def consensus_gap(state: QuadSyncState) -> float:
    b = np.linalg.norm(state.consensus)
    if b == 0:
        return float("inf")
    return max(float(np.linalg.norm(c - state.consensus)) / b for c in state.factors)


def _admm_pass(state, term, config, rng, diag):
    for _ in range(config.alt_iters):
        for i in range(4):
            t0 = time.perf_counter()
            state.factors[i] = update_camera_factor(state, term, i, config.subsample_m, rng)
            diag.c_update_time += time.perf_counter() - t0
            if config.record_substeps:
                diag.substeps.append(augmented_objective(state, term))
        state.lam = solve_scales(state, term, config.scale_step == "exact")
        if config.record_substeps:
            diag.substeps.append(augmented_objective(state, term))
        if config.balance:
            state.factors = balance_gauge(state.factors,
                                          [state.consensus - g for g in state.duals])
            if config.record_substeps:
                diag.substeps.append(augmented_objective(state, term))
    state.consensus = update_consensus(state)
    state.duals = update_duals(state)


def _check_finite(value: float, state) -> None:
    if not np.isfinite(value):
        raise SolverDivergence("objective became non-finite", state.copy())


def run_quadsync(q: BlockTensor, config: QuadSyncConfig | None = None):
    """Synchronize ``q`` and return ``(cameras, diagnostics)``.

    ``cameras`` is an ``(n, 3, 4)`` array in an arbitrary projective frame,
    taken as the average of the four camera factors.
    """
    config = config or QuadSyncConfig()
    if not is_connected(q.omega):
        warnings.warn("observed blocks do not connect all cameras", RuntimeWarning)
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()
    state, term = initialize(q, config)
    diag = Diagnostics()
    obj = term.l1_objective(state.factors, state.lam)
    _check_finite(obj, state)
    diag.records.append(IterationRecord(0, 0, obj, augmented_objective(state, term),
                                        consensus_gap(state), 0.0, state.rho))
    it = 0
    for irls in range(1, config.irls_iters + 1):
        before = obj
        snapshot = state.copy()
        while True:
            for _ in range(config.admm_iters):
                _admm_pass(state, term, config, rng, diag)
                it += 1
                obj = term.l1_objective(state.factors, state.lam)
                _check_finite(obj, state)
                diag.records.append(IterationRecord(
                    it, irls, obj, augmented_objective(state, term), consensus_gap(state),
                    time.perf_counter() - start, state.rho))
            if obj > config.divergence_factor * before and not diag.rho_halved:
                log.warning("objective grew %.3g -> %.3g; halving rho", before, obj)
                diag.rho_halved = True
                state = snapshot
                state.rho *= 0.5
                continue
            break
        state.weights = update_weights(state, term, config.delta, config.sqrt_residual)
        if config.tol is not None and before > 0 and abs(before - obj) <= config.tol * before:
            break
    res = term.mask * term.residual_norms(state.factors, state.lam)
    diag.residual_histogram = np.histogram(res[term.mask > 0], bins=10)
    cams = unstack(sum(state.factors) / 4.0)
    diag.state = state
    return cams, diag

