"""Joint IRLS-ADMM synchronization of quadrifocal, trifocal and essential blocks.

Three data terms share camera factors ``C_1..C_6`` (consensus ``B``) and
line-projection factors ``P_1..P_3`` (consensus ``D``)::

    Q ~ [[G_Q; C_1, C_2, C_3, C_4]]
    T ~ [[G_T; P_1, C_5, C_6]]
    E ~ [[G_E; P_2, P_3]]

Each term is weighted by one over its observed block count. An entity with
no observed blocks is dropped together with the variables only it uses.
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
from .geometry import line_projection_stack, unstack
from .multifocal import BlockTensor, core_e, core_q, core_t
from .sync_quad import SolverDivergence, is_connected
from .tensor import flatten, leading_left_singular_vectors

__all__ = [
    "JointConfig",
    "JointState",
    "JointRecord",
    "JointDiagnostics",
    "initialize_joint",
    "joint_weights",
    "joint_update_camera",
    "joint_update_lineproj",
    "joint_update_scales",
    "joint_update_consensus_duals",
    "joint_augmented_objective",
    "run_joint",
]

log = logging.getLogger(__name__)

# variables of each term, in mode order
_TERM_VARS = {
    "q": ("C1", "C2", "C3", "C4"),
    "t": ("P1", "C5", "C6"),
    "e": ("P2", "P3"),
}
_CAMERA_VARS = ("C1", "C2", "C3", "C4", "C5", "C6")
_LINE_VARS = ("P1", "P2", "P3")


@dataclass
class JointConfig:
    rho: float = 1e-5
    delta: float = 1e-4
    irls_iters: int = 2
    admm_iters: int = 1
    alt_iters: int = 2
    seed: int = 0
    tol: float | None = None
    sqrt_residual: bool = True
    divergence_factor: float = 10.0
    balance: bool = True
    # "exact" or "project", as for the quadrifocal solver
    scale_step: str = "exact"
    record_substeps: bool = False


@dataclass
class JointState:
    factors: dict[str, np.ndarray]
    duals: dict[str, np.ndarray]
    B: np.ndarray
    D: np.ndarray | None
    lam: dict[str, np.ndarray]
    weights: dict[str, np.ndarray]
    rho: float
    terms: dict[str, Term] = field(repr=False, default_factory=dict)

    def copy(self) -> "JointState":
        terms = self.terms
        self.terms = {}
        try:
            out = copy.deepcopy(self)
        finally:
            self.terms = terms
        out.terms = terms
        return out

    @property
    def camera_vars(self) -> list[str]:
        return [v for v in _CAMERA_VARS if v in self.factors]

    @property
    def line_vars(self) -> list[str]:
        return [v for v in _LINE_VARS if v in self.factors]

    def term_factors(self, name: str) -> list[np.ndarray]:
        return [self.factors[v] for v in _TERM_VARS[name]]

    def target(self, var: str) -> np.ndarray:
        base = self.B if var.startswith("C") else self.D
        return base - self.duals[var]


@dataclass(frozen=True)
class JointRecord:
    iteration: int
    irls: int
    objective: float
    residual_q: float
    residual_t: float
    residual_e: float
    weighted_objective: float
    consensus_gap: float
    wall_time: float
    rho: float


@dataclass
class JointDiagnostics:
    records: list[JointRecord] = field(default_factory=list)
    substeps: list[float] = field(default_factory=list)
    rho_halved: bool = False
    state: JointState | None = None

    def to_csv(self, path, timing: bool = True) -> None:
        """One row per iteration; ``timing=False`` writes zero wall times."""
        names = list(JointRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(names)
            for r in self.records:
                vals = [0.0 if k == "wall_time" and not timing else getattr(r, k)
                        for k in names]
                writer.writerow([repr(v) if isinstance(v, float) else v for v in vals])


def _active(bt: BlockTensor | None, order: int) -> bool:
    if bt is None:
        return False
    if bt.order != order:
        raise ValueError(f"expected an order-{order} block tensor, got order {bt.order}")
    return bt.block_count > 0


def _build_terms(q, t, e) -> dict[str, Term]:
    terms = {}
    if _active(q, 4):
        terms["q"] = Term(q, core_q(), 1.0 / q.block_count)
    if _active(t, 3):
        terms["t"] = Term(t, core_t(), 1.0 / t.block_count)
    if _active(e, 2):
        terms["e"] = Term(e, core_e(), 1.0 / e.block_count)
    if not terms:
        raise ValueError("no entity has observed blocks")
    if "q" not in terms and "t" not in terms:
        raise ValueError("camera recovery needs quadrifocal or trifocal blocks")
    ns = {term.n for term in terms.values()}
    if len(ns) != 1:
        raise ValueError("entities disagree on the camera count")
    return terms


def _balanced(term: Term, factors: list[np.ndarray]) -> list[np.ndarray]:
    """Scale all factors of ``term`` equally so unit-norm scales fit the start."""
    nrm = np.linalg.norm(symmetrize_scales(term.raw_scales(factors)))
    if nrm == 0:
        return factors
    s = nrm ** (-1.0 / len(factors))
    return [s * f for f in factors]


def initialize_joint(q=None, t=None, e=None, config: JointConfig | None = None) -> JointState:
    """HOSVD camera start, line projections from its exterior squares, zero duals."""
    config = config or JointConfig()
    if config.scale_step not in ("exact", "project"):
        raise ValueError("scale_step must be 'exact' or 'project'")
    terms = _build_terms(q, t, e)
    src, mode = (terms["q"].data, 0) if "q" in terms else (terms["t"].data, 1)
    u, _ = leading_left_singular_vectors(flatten(src.data, mode), 4)
    p = line_projection_stack(unstack(u))
    start = {"C": u, "P": p}
    factors = {}
    for name, term in terms.items():
        init = [start[v[0]].copy() for v in _TERM_VARS[name]]
        for v, f in zip(_TERM_VARS[name], _balanced(term, init)):
            factors[v] = f
    cams = [v for v in _CAMERA_VARS if v in factors]
    lines = [v for v in _LINE_VARS if v in factors]
    B = sum(factors[v] for v in cams) / len(cams)
    D = sum(factors[v] for v in lines) / len(lines) if lines else None
    state = JointState(
        factors=factors,
        duals={v: np.zeros_like(f) for v, f in factors.items()},
        B=B,
        D=D,
        lam={},
        weights={},
        rho=config.rho,
        terms=terms,
    )
    state.lam = joint_update_scales(state, exact=False)
    state.weights = joint_weights(state, config.delta, config.sqrt_residual)
    return state


def joint_weights(state: JointState, delta: float = 1e-4,
                  sqrt_residual: bool = True) -> dict[str, np.ndarray]:
    return {name: term.weights(state.term_factors(name), state.lam[name], delta, sqrt_residual)
            for name, term in state.terms.items()}


def _owner(var: str) -> tuple[str, int]:
    for name, vs in _TERM_VARS.items():
        if var in vs:
            return name, vs.index(var)
    raise KeyError(var)


def _update_factor(state: JointState, var: str) -> np.ndarray:
    name, mode = _owner(var)
    term = state.terms[name]
    lhs, rhs = term.normal_system(state.term_factors(name), mode, state.weights[name],
                                  state.lam[name])
    return solve_rows(lhs, rhs, state.target(var), state.rho)


def joint_update_camera(state: JointState, which: str) -> np.ndarray:
    """Row-exact update of camera factor ``which`` (``"C1"`` .. ``"C6"``)."""
    if which not in _CAMERA_VARS:
        raise ValueError(f"{which!r} is not a camera factor")
    if which not in state.factors:
        raise KeyError(f"{which} is inactive (its entity has no observed blocks)")
    return _update_factor(state, which)


def joint_update_lineproj(state: JointState, which: str) -> np.ndarray:
    """Row-exact update of line-projection factor ``which`` (``"P1"`` .. ``"P3"``)."""
    if which not in _LINE_VARS:
        raise ValueError(f"{which!r} is not a line-projection factor")
    if which not in state.factors:
        raise KeyError(f"{which} is inactive (its entity has no observed blocks)")
    return _update_factor(state, which)


def joint_update_scales(state: JointState, exact: bool = True) -> dict[str, np.ndarray]:
    """Per-entity symmetric unit-norm scales; ``exact`` needs the current weights."""
    return {name: term.scale_update(state.term_factors(name),
                                    state.weights[name] if exact else None)
            for name, term in state.terms.items()}


def joint_update_consensus_duals(state: JointState):
    """``B``, ``D`` as averages over active variables, then dual ascent."""
    cams, lines = state.camera_vars, state.line_vars
    B = sum(state.factors[v] + state.duals[v] for v in cams) / len(cams)
    D = sum(state.factors[v] + state.duals[v] for v in lines) / len(lines) if lines else None
    duals = {}
    for v in cams:
        duals[v] = state.duals[v] + state.factors[v] - B
    for v in lines:
        duals[v] = state.duals[v] + state.factors[v] - D
    return B, D, duals


def joint_augmented_objective(state: JointState) -> float:
    data = sum(term.objective(state.term_factors(name), state.lam[name], state.weights[name])
               for name, term in state.terms.items())
    pen = sum(float(np.sum((state.factors[v] - state.target(v)) ** 2)) for v in state.factors)
    return data + 0.5 * state.rho * pen


def _residuals(state: JointState) -> dict[str, float]:
    return {name: state.terms[name].l1_objective(state.term_factors(name), state.lam[name])
            if name in state.terms else 0.0 for name in ("q", "t", "e")}


def _gap(state: JointState) -> float:
    gaps = []
    for vs, base in ((state.camera_vars, state.B), (state.line_vars, state.D)):
        if base is None or not vs:
            continue
        nb = np.linalg.norm(base)
        gaps += [np.linalg.norm(state.factors[v] - base) / nb if nb > 0 else np.inf for v in vs]
    return float(max(gaps))


def _record(state, it, irls, start) -> JointRecord:
    res = _residuals(state)
    # count-weighted like the data terms; the residual columns stay unweighted
    total = sum(state.terms[k].scale * v for k, v in res.items() if k in state.terms)
    if not np.isfinite(total):
        raise SolverDivergence("objective became non-finite", state.copy())
    return JointRecord(it, irls, total, res["q"], res["t"], res["e"],
                       joint_augmented_objective(state), _gap(state),
                       time.perf_counter() - start, state.rho)


def _balance(state: JointState) -> None:
    for name in state.terms:
        vs = _TERM_VARS[name]
        new = balance_gauge([state.factors[v] for v in vs], [state.target(v) for v in vs])
        state.factors.update(zip(vs, new))


def _admm_pass(state: JointState, config: JointConfig, diag: JointDiagnostics) -> None:
    for _ in range(config.alt_iters):
        for v in state.camera_vars + state.line_vars:
            state.factors[v] = _update_factor(state, v)
            if config.record_substeps:
                diag.substeps.append(joint_augmented_objective(state))
        for name, lam in joint_update_scales(state, config.scale_step == "exact").items():
            state.lam[name] = lam
            if config.record_substeps:
                diag.substeps.append(joint_augmented_objective(state))
        if config.balance:
            _balance(state)
            if config.record_substeps:
                diag.substeps.append(joint_augmented_objective(state))
    state.B, state.D, state.duals = joint_update_consensus_duals(state)


def run_joint(q: BlockTensor | None = None, t: BlockTensor | None = None,
              e: BlockTensor | None = None, config: JointConfig | None = None):
    """Jointly synchronize the given entities; returns ``(cameras, diagnostics)``.

    Cameras are the average of ``C_1..C_4`` when quadrifocal blocks are
    present and of ``C_5, C_6`` otherwise, in an arbitrary projective frame.
    """
    config = config or JointConfig()
    start = time.perf_counter()
    state = initialize_joint(q, t, e, config)
    if not is_connected([term.data.omega for term in state.terms.values()]):
        warnings.warn("observed blocks do not connect all cameras", RuntimeWarning)
    diag = JointDiagnostics()
    rec = _record(state, 0, 0, start)
    diag.records.append(rec)
    obj, it = rec.objective, 0
    for irls in range(1, config.irls_iters + 1):
        before = obj
        snapshot = state.copy()
        while True:
            for _ in range(config.admm_iters):
                _admm_pass(state, config, diag)
                it += 1
                rec = _record(state, it, irls, start)
                diag.records.append(rec)
                obj = rec.objective
            if obj > config.divergence_factor * before and not diag.rho_halved:
                log.warning("objective grew %.3g -> %.3g; halving rho", before, obj)
                diag.rho_halved = True
                state = snapshot
                state.rho *= 0.5
                continue
            break
        state.weights = joint_weights(state, config.delta, config.sqrt_residual)
        if config.tol is not None and before > 0 and abs(before - obj) <= config.tol * before:
            break
    names = ("C1", "C2", "C3", "C4") if "q" in state.terms else ("C5", "C6")
    cams = unstack(sum(state.factors[v] for v in names) / len(names))
    diag.state = state
    return cams, diag
