"""Multifocal entities, their constant Tucker cores and block containers.

A block tensor of order ``k`` over ``n`` cameras is a dense ``(3n,)*k`` array
(see :mod:`quadsync.tensor` for the layout) plus a boolean observation mask of
shape ``(n,)*k``. Block ``(i, j, ...)`` occupies rows ``3i:3i+3`` of the first
mode, ``3j:3j+3`` of the second, and so on, so ``data.reshape(n, 3, n, 3, ...)``
gives direct block access.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import camera_center, line_projection_stack, perturb_cameras, stack, unstack
from .tensor import multi_mode_product

__all__ = [
    "levi_civita",
    "core_q",
    "core_e",
    "core_t",
    "derive_trifocal_core",
    "CoreConventionError",
    "quadrifocal_from_cameras",
    "trifocal_from_cameras",
    "essential_from_cameras",
    "SYMMETRIES",
    "BlockTensor",
    "canonical_tuples",
    "full_omega",
    "diagonal_omega",
    "symmetrize_omega",
    "omega_from_canonical",
    "build_block_tensor",
    "build_from_canonical",
    "block_tensor_from_blocks",
    "exact_block_tensor",
    "block_inner",
    "subblock_class",
    "SubblockReport",
    "extract_subblocks",
    "projection_rank",
]


def _perm_sign(perm) -> int:
    perm = list(perm)
    sign = 1
    for i in range(len(perm)):
        while perm[i] != i:
            j = perm[i]
            perm[i], perm[j] = perm[j], perm[i]
            sign = -sign
    return sign


def levi_civita(order: int) -> np.ndarray:
    """Permutation-sign tensor; entries with a repeated index are 0."""
    eps = np.zeros((order,) * order)
    for perm in itertools.permutations(range(order)):
        eps[perm] = _perm_sign(perm)
    return eps


@lru_cache(maxsize=None)
def _core_q() -> np.ndarray:
    g = levi_civita(4)
    g.flags.writeable = False
    return g


def core_q() -> np.ndarray:
    """The 4x4x4x4 quadrifocal core (24 nonzeros, fully antisymmetric)."""
    return _core_q()


@lru_cache(maxsize=None)
def _core_e() -> np.ndarray:
    g = np.zeros((6, 6))
    # pairs of complementary column pairs (12|34), (13|24), (14|23)
    for a, b, s in ((0, 5, 1.0), (1, 4, -1.0), (2, 3, 1.0)):
        g[a, b] = g[b, a] = s
    g.flags.writeable = False
    return g


def core_e() -> np.ndarray:
    """6x6 anti-diagonal core with ``E_ij = P_i @ core_e() @ P_j.T``."""
    return _core_e()


def _minor_without(p: np.ndarray, row: int) -> np.ndarray:
    return np.delete(p, row, axis=0)


def quadrifocal_from_cameras(pi, pj, pk, pl) -> np.ndarray:
    """``Q[p, q, r, s] = det([P_i[p]; P_j[q]; P_k[r]; P_l[s]])``."""
    rows = np.empty((3, 3, 3, 3, 4, 4))
    rows[..., 0, :] = np.asarray(pi)[:, None, None, None, :]
    rows[..., 1, :] = np.asarray(pj)[None, :, None, None, :]
    rows[..., 2, :] = np.asarray(pk)[None, None, :, None, :]
    rows[..., 3, :] = np.asarray(pl)[None, None, None, :, :]
    return np.linalg.det(rows)


def trifocal_from_cameras(pi, pj, pk) -> np.ndarray:
    """``T[w, q, r] = (-1)^w det([P_i without row w; P_j[q]; P_k[r]])`` (0-based ``w``)."""
    pi, pj, pk = (np.asarray(p, dtype=float) for p in (pi, pj, pk))
    rows = np.empty((3, 3, 3, 4, 4))
    for w in range(3):
        rows[w, :, :, :2, :] = _minor_without(pi, w)
    rows[..., 2, :] = pj[None, :, None, :]
    rows[..., 3, :] = pk[None, None, :, :]
    sign = np.array([1.0, -1.0, 1.0])[:, None, None]
    return sign * np.linalg.det(rows)


def essential_from_cameras(pi, pj) -> np.ndarray:
    """``E[k, l] = (-1)^(k+l) det([P_i without row k; P_j without row l])``.

    Satisfies ``x_i^T E x_j = 0`` for projections of one world point and
    equals ``exterior_square(P_i) @ core_e() @ exterior_square(P_j).T``.
    """
    pi, pj = np.asarray(pi, dtype=float), np.asarray(pj, dtype=float)
    rows = np.empty((3, 3, 4, 4))
    for k in range(3):
        for l in range(3):
            rows[k, l, :2] = _minor_without(pi, k)
            rows[k, l, 2:] = _minor_without(pj, l)
    sign = (-1.0) ** np.add.outer(np.arange(3), np.arange(3))
    return sign * np.linalg.det(rows)


class CoreConventionError(RuntimeError):
    """The least-squares trifocal core does not round to a {-1, 0, 1} tensor."""


def derive_trifocal_core(seed: int = 0, checks: int = 5) -> np.ndarray:
    """Fit the 6x4x4 trifocal core from one random block trifocal tensor.

    Solves ``vec(T) = (P kron C kron C) vec(G)`` by least squares, rounds to
    {-1, 0, 1} and verifies the rounded core reproduces ``checks`` fresh
    random instances to 1e-8 relative.
    """
    rng = np.random.default_rng(seed)
    cams = rng.standard_normal((3, 3, 4))
    t = _dense_from_cameras(cams, 3)
    design = np.kron(np.kron(line_projection_stack(cams), stack(cams)), stack(cams))
    g, *_ = np.linalg.lstsq(design, t.ravel(), rcond=None)
    rounded = np.round(g)
    if np.max(np.abs(g - rounded)) > 0.01 or np.any(np.abs(rounded) > 1):
        raise CoreConventionError("trifocal core does not round to {-1, 0, 1}")
    core = rounded.reshape(6, 4, 4)
    for _ in range(checks):
        cams = rng.standard_normal((4, 3, 4))
        t = _dense_from_cameras(cams, 3)
        recon = multi_mode_product(core, [line_projection_stack(cams), stack(cams), stack(cams)])
        if np.linalg.norm(recon - t) > 1e-8 * np.linalg.norm(t):
            raise CoreConventionError("derived trifocal core fails on a fresh instance")
    return core


@lru_cache(maxsize=None)
def _core_t() -> np.ndarray:
    g = derive_trifocal_core()
    g.flags.writeable = False
    return g


def core_t() -> np.ndarray:
    """The 6x4x4 trifocal core, ``T^n = G x_0 P x_1 C x_2 C``."""
    return _core_t()


_ENTITY = {4: quadrifocal_from_cameras, 3: trifocal_from_cameras, 2: essential_from_cameras}

# (permutation, sign) pairs under which each entity is closed:
# block at idx[perm] equals sign * block.transpose(perm).
SYMMETRIES = {
    4: tuple((p, _perm_sign(p)) for p in itertools.permutations(range(4))),
    3: (((0, 1, 2), 1), ((0, 2, 1), -1)),
    2: (((0, 1), 1), ((1, 0), 1)),
}


def _dense_from_cameras(cams: np.ndarray, order: int) -> np.ndarray:
    """Every block of the order-``order`` block tensor, entity by entity."""
    n = len(cams)
    out = np.zeros((3 * n,) * order)
    view = out.reshape((n, 3) * order)
    fn = _ENTITY[order]
    for idx in itertools.product(range(n), repeat=order):
        view[_block_index(idx)] = fn(*(cams[i] for i in idx))
    return out


def _block_index(idx):
    out = []
    for i in idx:
        out += [i, slice(None)]
    return tuple(out)


@dataclass
class BlockTensor:
    """Dense block tensor with an observation mask over blocks."""

    n: int
    data: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        self.omega = np.asarray(self.omega, dtype=bool)
        k = self.data.ndim
        if self.data.shape != (3 * self.n,) * k:
            raise ValueError(f"data shape {self.data.shape} does not match n={self.n}")
        if self.omega.shape != (self.n,) * k:
            raise ValueError("omega shape does not match the block grid")

    @property
    def order(self) -> int:
        return self.data.ndim

    def view(self) -> np.ndarray:
        """``(n, 3, n, 3, ...)`` view; block ``idx`` is ``view()[i, :, j, :, ...]``."""
        return self.data.reshape((self.n, 3) * self.order)

    def block(self, idx) -> np.ndarray:
        if not all(0 <= i < self.n for i in idx) or len(idx) != self.order:
            raise IndexError(f"block index {idx} out of range")
        return self.view()[_block_index(idx)]

    def block_norms(self) -> np.ndarray:
        return np.sqrt(block_inner(self.data, self.data, self.n))

    def observed_blocks(self) -> np.ndarray:
        """Observed block indices other than the super-diagonal, as rows."""
        mask = self.omega & ~_superdiagonal(self.n, self.order)
        return np.argwhere(mask)

    @property
    def block_count(self) -> int:
        return int(len(self.observed_blocks()))

    def normalized(self) -> "BlockTensor":
        """Copy with every nonzero observed block scaled to unit Frobenius norm."""
        norms = self.block_norms()
        scale = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 0.0)
        return self.scaled(scale)

    def scaled(self, lam: np.ndarray) -> "BlockTensor":
        """Blockwise product ``lam (.)_b data``."""
        return BlockTensor(self.n, blockwise_scale(self.data, lam, self.n), self.omega.copy())

    def masked(self, omega: np.ndarray) -> "BlockTensor":
        """Copy with every block outside ``omega`` set to exactly zero."""
        omega = np.asarray(omega, dtype=bool)
        k = self.order
        keep = _expand(omega, self.n, k)
        data = np.where(keep, self.data.reshape((self.n, 3) * k), 0.0).reshape(self.data.shape)
        return BlockTensor(self.n, data, omega)

    def restrict(self, cameras) -> "BlockTensor":
        """Sub-tensor on a subset of cameras (in the given order)."""
        cameras = np.asarray(cameras, dtype=int)
        rows = (3 * cameras[:, None] + np.arange(3)).ravel()
        data = self.data[np.ix_(*([rows] * self.order))]
        omega = self.omega[np.ix_(*([cameras] * self.order))]
        return BlockTensor(len(cameras), data, omega)

    def copy(self) -> "BlockTensor":
        return BlockTensor(self.n, self.data.copy(), self.omega.copy())


def _superdiagonal(n: int, order: int) -> np.ndarray:
    mask = np.zeros((n,) * order, dtype=bool)
    mask[(np.arange(n),) * order] = True
    return mask


def _expand(lam: np.ndarray, n: int, order: int) -> np.ndarray:
    """Block array ``(n,)*order`` broadcastable against the ``(n,3,...)`` view."""
    shape = []
    for _ in range(order):
        shape += [n, 1]
    return np.asarray(lam).reshape(shape)


def blockwise_scale(data: np.ndarray, lam: np.ndarray, n: int) -> np.ndarray:
    order = data.ndim
    out = data.reshape((n, 3) * order) * _expand(lam, n, order)
    return out.reshape(data.shape)


def block_inner(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    """Blockwise Frobenius inner products, shape ``(n,)*order``.

    Processed one leading block at a time to bound memory.
    """
    order = a.ndim
    out = np.empty((n,) * order)
    inner_axes = tuple(range(1, 2 * order - 1, 2))
    for i in range(n):
        sa = a[3 * i:3 * i + 3].reshape((3,) + (n, 3) * (order - 1))
        sb = b[3 * i:3 * i + 3].reshape((3,) + (n, 3) * (order - 1))
        prod = sa * sb
        out[i] = prod.sum(axis=(0,) + tuple(ax + 1 for ax in inner_axes))
    return out


def canonical_tuples(n: int, order: int) -> list[tuple[int, ...]]:
    """Canonical representatives of distinct-camera tuples.

    Quadruples and pairs: sorted tuples. Trifocal: ``(i, j, k)`` with ``j < k``
    and ``i`` distinct from both (the first view is special).
    """
    if order in (4, 2):
        return list(itertools.combinations(range(n), order))
    if order == 3:
        return [(i, j, k) for i in range(n) for j, k in itertools.combinations(range(n), 2)
                if i not in (j, k)]
    raise ValueError(f"unsupported order {order}")


def full_omega(n: int, order: int) -> np.ndarray:
    return np.ones((n,) * order, dtype=bool)


def diagonal_omega(n: int, order: int) -> np.ndarray:
    return _superdiagonal(n, order)


def symmetrize_omega(omega: np.ndarray) -> np.ndarray:
    """Close ``omega`` under the entity's index symmetries and add the super-diagonal."""
    omega = np.asarray(omega, dtype=bool)
    order = omega.ndim
    out = omega.copy()
    for perm, _ in SYMMETRIES[order]:
        out |= np.transpose(omega, perm)
    return out | _superdiagonal(omega.shape[0], order)


def omega_from_canonical(n: int, order: int, tuples) -> np.ndarray:
    omega = np.zeros((n,) * order, dtype=bool)
    for idx in tuples:
        omega[tuple(idx)] = True
    return symmetrize_omega(omega)


def _check_omega(omega: np.ndarray, n: int, order: int) -> np.ndarray:
    omega = np.asarray(omega, dtype=bool)
    if omega.shape != (n,) * order:
        raise ValueError(f"omega must have shape {(n,) * order}")
    return omega


def exact_block_tensor(cams: np.ndarray, order: int = 4) -> np.ndarray:
    """All blocks of the exact block tensor with unit scales.

    Uses the Tucker identity (core x C x C ...), which is the Laplace/Leibniz
    expansion of the determinant formulas, chunked over the first block index.
    """
    cams = unstack(stack(cams))
    n = len(cams)
    c = stack(cams)
    if order == 4:
        core, factors = core_q(), [c, c, c, c]
    elif order == 3:
        core, factors = core_t(), [line_projection_stack(cams), c, c]
    elif order == 2:
        p = line_projection_stack(cams)
        out = p @ core_e() @ p.T
        _zero_superdiagonal(out, n)
        return out
    else:
        raise ValueError(f"unsupported order {order}")
    # contract the trailing modes once, then the leading mode in chunks
    tail = core
    for mode in range(order - 1, 0, -1):
        tail = np.moveaxis(np.tensordot(tail, factors[mode], axes=(mode, 1)), -1, mode)
    out = np.empty((3 * n,) * order)
    flat_tail = tail.reshape(tail.shape[0], -1)
    for i in range(n):
        out[3 * i:3 * i + 3] = (factors[0][3 * i:3 * i + 3] @ flat_tail).reshape(
            (3,) + (3 * n,) * (order - 1))
    _zero_superdiagonal(out, n)
    return out


def _zero_superdiagonal(data: np.ndarray, n: int) -> None:
    """Entities of one repeated camera vanish exactly; clear rounding residue in place."""
    view = data.reshape((n, 3) * data.ndim)
    for i in range(n):
        view[_block_index((i,) * data.ndim)] = 0.0


def build_block_tensor(cams: np.ndarray, omega: np.ndarray | None = None, order: int = 4,
                       normalize: bool = False) -> BlockTensor:
    """Block tensor of exact entities on ``omega`` (default: every block)."""
    cams = unstack(stack(cams))
    n = len(cams)
    omega = full_omega(n, order) if omega is None else _check_omega(omega, n, order)
    data = exact_block_tensor(cams, order)
    bt = BlockTensor(n, data, np.ones_like(omega)).masked(omega)
    return bt.normalized() if normalize else bt


def build_from_canonical(cams: np.ndarray, tuples, order: int = 4, noise_pct: float = 0.0,
                         rng=None, normalize: bool = True) -> BlockTensor:
    """Block tensor whose canonical blocks each come from their own noisy cameras.

    For every canonical tuple the involved cameras are perturbed independently
    (fresh noise per tuple), the entity is computed, and the symmetric partners
    are filled by the index symmetries so the result stays consistent.
    """
    cams = unstack(stack(cams))
    n = len(cams)
    rng = np.random.default_rng(rng)
    tuples = [tuple(int(i) for i in t) for t in tuples]
    fn = _ENTITY[order]
    blocks = []
    for idx in tuples:
        local = perturb_cameras(cams[list(idx)], noise_pct, rng)
        blk = fn(*local)
        if normalize:
            nrm = np.linalg.norm(blk)
            blk = blk / nrm if nrm > 0 else blk
        blocks.append(blk)
    return block_tensor_from_blocks(n, tuples, blocks, order)


def block_tensor_from_blocks(n: int, tuples, blocks, order: int = 4) -> BlockTensor:
    """Scatter canonical ``blocks`` and their symmetric partners into a block tensor.

    ``blocks[t]`` sits at ``tuples[t]``; every index permutation under which
    the entity is closed is filled with the correspondingly transposed and
    signed block. The super-diagonal is always part of the mask.
    """
    tuples = [tuple(int(i) for i in t) for t in tuples]
    data = np.zeros((3 * n,) * order)
    view = data.reshape((n, 3) * order)
    omega = np.zeros((n,) * order, dtype=bool)
    if tuples:
        blocks = np.asarray(blocks, dtype=float).reshape((-1,) + (3,) * order)
        idx_arr = np.array(tuples, dtype=int).reshape(-1, order)
        for perm, sign in SYMMETRIES[order]:
            target = idx_arr[:, list(perm)]
            moved = sign * np.transpose(blocks, (0,) + tuple(p + 1 for p in perm))
            view[_scatter_index(target)] = moved
            omega[tuple(target.T)] = True
    omega |= _superdiagonal(n, order)
    return BlockTensor(n, data, omega)


def _scatter_index(target: np.ndarray):
    out = []
    for col in target.T:
        out += [col, slice(None)]
    return tuple(out)


# --- repeated-index sub-blocks ------------------------------------------------

def subblock_class(idx) -> str:
    counts = sorted((list(idx).count(i) for i in set(idx)), reverse=True)
    if counts == [4]:
        return "superdiagonal"
    if counts == [3, 1]:
        return "epipole"
    if counts == [2, 1, 1]:
        return "trifocal"
    if counts == [2, 2]:
        return "fundamental"
    return "generic"


@dataclass
class SubblockReport:
    index: tuple[int, ...]
    kind: str
    scale: float
    residual: float  # ||block - scale * expected|| / ||block||


def _canonical_perm(idx) -> tuple[int, ...]:
    """Permutation sorting ``idx`` so the most repeated camera comes first."""
    counts = {i: list(idx).count(i) for i in idx}
    return tuple(sorted(range(4), key=lambda p: (-counts[idx[p]], idx[p], p)))


def _pair_sign(p: int, q: int) -> float:
    return 1.0 if q > p else -1.0


def _expected_block(kind: str, a: int, b: int, c: int, cams) -> np.ndarray:
    """Pattern block in canonical layout built from independent entities."""
    out = np.zeros((3, 3, 3, 3))
    eps3 = levi_civita(3)
    if kind == "superdiagonal":
        return out
    if kind == "epipole":
        # (a, a, a, b): entries eps(p, q, r) times the epipole P_b c_a
        ca = np.append(camera_center(cams[a]), 1.0)
        e = cams[b] @ ca
        return np.einsum("pqr,s->pqrs", eps3, e)
    if kind == "trifocal":
        # (a, a, b, c): two rows of camera a pick trifocal slice w
        t = trifocal_from_cameras(cams[a], cams[b], cams[c])
        for p, q in itertools.permutations(range(3), 2):
            w = 3 - p - q
            out[p, q] = _pair_sign(p, q) * (-1.0) ** w * t[w]
        return out
    if kind == "fundamental":
        # (a, a, b, b): rows (p, q) of camera a, (r, s) of camera b
        f = essential_from_cameras(cams[a], cams[b])
        for p, q in itertools.permutations(range(3), 2):
            for r, s in itertools.permutations(range(3), 2):
                w, v = 3 - p - q, 3 - r - s
                out[p, q, r, s] = (_pair_sign(p, q) * _pair_sign(r, s)
                                   * (-1.0) ** (w + v) * f[w, v])
        return out
    raise ValueError(f"no pattern for {kind}")


def extract_subblocks(q: BlockTensor, cams, indices) -> list[SubblockReport]:
    """Classify repeated-index blocks and fit each to its independent entity.

    Epipole, trifocal and fundamental classes are compared against entities
    computed directly from ``cams``; the fitted scale absorbs the block scale.
    """
    cams = unstack(stack(cams))
    reports = []
    for idx in indices:
        idx = tuple(int(i) for i in idx)
        if not q.omega[idx]:
            raise KeyError(f"block {idx} is not observed")
        kind = subblock_class(idx)
        if kind == "generic":
            raise ValueError(f"block {idx} has no repeated camera")
        perm = _canonical_perm(idx)
        canon_idx = tuple(idx[p] for p in perm)
        blk = _perm_sign(perm) * np.transpose(q.block(idx), perm)
        distinct = list(dict.fromkeys(canon_idx))
        a = distinct[0]
        b = distinct[1] if len(distinct) > 1 else a
        c = distinct[2] if len(distinct) > 2 else b
        expected = _expected_block(kind, a, b, c, cams)
        nb = np.linalg.norm(blk)
        if kind == "superdiagonal" or np.linalg.norm(expected) == 0:
            reports.append(SubblockReport(idx, kind, 0.0, float(nb)))
            continue
        scale = float(np.vdot(expected, blk) / np.vdot(expected, expected))
        resid = np.linalg.norm(blk - scale * expected) / (nb if nb > 0 else 1.0)
        reports.append(SubblockReport(idx, kind, scale, float(resid)))
    return reports


# --- projection rank ----------------------------------------------------------

def projection_rank(t: np.ndarray, trials: int = 3, tol: float = 1e-8, rng=None) -> tuple:
    """Ranks of generic contractions down to matrices.

    Order 3: contract one mode with a generic vector, modes in order 0, 1, 2.
    Order 4: contract two modes with generic vectors, leaving the pairs
    ``(2,3), (1,3), (1,2), (0,3), (0,2), (0,1)``. Each entry is the most
    common rank across ``trials`` draws.
    """
    t = np.asarray(t, dtype=float)
    if t.ndim < 3:
        raise ValueError("projection rank needs order >= 3")
    rng = np.random.default_rng(rng)
    order = t.ndim
    if order == 3:
        contract_sets = [(0,), (1,), (2,)]
    elif order == 4:
        contract_sets = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    else:
        contract_sets = list(itertools.combinations(range(order), order - 2))
    result = []
    for modes in contract_sets:
        ranks = []
        for _ in range(trials):
            m = t
            for mode in sorted(modes, reverse=True):
                m = np.tensordot(m, rng.standard_normal(t.shape[mode]), axes=(mode, 0))
            s = np.linalg.svd(m, compute_uv=False)
            ranks.append(0 if s[0] == 0 else int(np.sum(s / s[0] >= tol)))
        result.append(max(set(ranks), key=ranks.count))
    return tuple(result)

