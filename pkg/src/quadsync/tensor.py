"""Dense multilinear algebra on numpy arrays.

Layout convention
-----------------
Tensors are plain C-ordered ``numpy.ndarray`` objects, so the *last* index
varies fastest. Modes are 0-based. The mode-``i`` flattening moves axis ``i``
to the front and reshapes::

    flatten(t, i) == np.moveaxis(t, i, 0).reshape(t.shape[i], -1)

Columns are therefore ordered lexicographically in the remaining indices with
the last one fastest. With this layout a Tucker product flattens as::

    flatten(G x_0 U_0 ... x_{N-1} U_{N-1}, i) == U_i @ flatten(G, i) @ kron(*others).T

where ``others`` are the factors ``U_j`` for ``j != i`` in ascending order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np

__all__ = [
    "flatten",
    "unflatten",
    "mode_product",
    "multi_mode_product",
    "kron",
    "TuckerFactorization",
    "MlRank",
    "hosvd",
    "leading_left_singular_vectors",
    "mlrank_estimate",
]


def _check_mode(ndim: int, mode: int) -> None:
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for order-{ndim} tensor")


def flatten(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization, shape ``(M_mode, prod of the other dims)``."""
    t = np.asarray(t)
    _check_mode(t.ndim, mode)
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def unflatten(m: np.ndarray, mode: int, shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`flatten` for a tensor of the given ``shape``."""
    shape = tuple(shape)
    _check_mode(len(shape), mode)
    rest = shape[:mode] + shape[mode + 1:]
    return np.moveaxis(np.asarray(m).reshape((shape[mode],) + rest), 0, mode)


def mode_product(t: np.ndarray, u: np.ndarray, mode: int) -> np.ndarray:
    """``t x_mode u``: contract axis ``mode`` of ``t`` with the columns of ``u``."""
    t = np.asarray(t)
    u = np.asarray(u)
    _check_mode(t.ndim, mode)
    if u.ndim != 2 or u.shape[1] != t.shape[mode]:
        raise ValueError(
            f"matrix with {u.shape} cannot multiply mode {mode} of extent {t.shape[mode]}"
        )
    out = np.tensordot(t, u, axes=(mode, 1))
    return np.moveaxis(out, -1, mode)


def multi_mode_product(core: np.ndarray, factors) -> np.ndarray:
    """Tucker reconstruction ``core x_0 U_0 x_1 U_1 ...``."""
    if len(factors) != np.ndim(core):
        raise ValueError("need one factor per mode")
    out = np.asarray(core)
    for i, u in enumerate(factors):
        out = mode_product(out, u, i)
    return out


def kron(*mats: np.ndarray) -> np.ndarray:
    """Kronecker product of any number of matrices, left to right."""
    if not mats:
        raise ValueError("kron needs at least one matrix")
    return reduce(np.kron, mats)


@dataclass
class TuckerFactorization:
    core: np.ndarray
    factors: list[np.ndarray]
    # singular values of each flattening, kept for diagnostics
    singular_values: list[np.ndarray] = field(default_factory=list)
    degenerate: bool = False

    def reconstruct(self) -> np.ndarray:
        return multi_mode_product(self.core, self.factors)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(u.shape[1] for u in self.factors)


@dataclass(frozen=True)
class MlRank:
    ranks: tuple[int, ...]
    # per mode sigma_{r+1} / sigma_r at the declared rank (0 when nothing follows)
    singular_gaps: tuple[float, ...]


def leading_left_singular_vectors(a: np.ndarray, r: int, method: str = "auto"):
    """Top ``r`` left singular vectors and the singular values of ``a``.

    ``method="gram"`` diagonalizes ``a @ a.T``; it is much cheaper for very wide
    matrices but only resolves singular values down to about ``1e-8 * s_max``.
    ``"auto"`` picks the Gram route when the long side exceeds ten times the
    short side.
    """
    a = np.asarray(a, dtype=float)
    rows, cols = a.shape
    if method == "auto":
        method = "gram" if cols > 10 * rows else "svd"
    if method == "gram":
        evals, evecs = np.linalg.eigh(a @ a.T)
        order = np.argsort(evals)[::-1]
        s = np.sqrt(np.clip(evals[order], 0.0, None))
        u = evecs[:, order]
    elif method == "svd":
        u, s, _ = np.linalg.svd(a, full_matrices=False)
    else:
        raise ValueError(f"unknown method {method!r}")
    return u[:, :r], s


def hosvd(t: np.ndarray, target_ranks, method: str = "auto") -> TuckerFactorization:
    """Truncated higher-order SVD.

    Factor ``i`` holds the ``target_ranks[i]`` leading left singular vectors of
    ``flatten(t, i)`` and the core is ``t x_0 U_0^T ... x_{N-1} U_{N-1}^T``.
    An all-zero tensor returns zero factors with ``degenerate=True``.
    """
    t = np.asarray(t, dtype=float)
    target_ranks = tuple(int(r) for r in target_ranks)
    if len(target_ranks) != t.ndim:
        raise ValueError("need one target rank per mode")
    for i, r in enumerate(target_ranks):
        if not 0 <= r <= t.shape[i]:
            raise ValueError(f"target rank {r} exceeds extent {t.shape[i]} of mode {i}")

    if not np.any(t):
        factors = [np.zeros((m, r)) for m, r in zip(t.shape, target_ranks)]
        core = np.zeros(target_ranks)
        svals = [np.zeros(min(m, t.size // m)) for m in t.shape]
        return TuckerFactorization(core, factors, svals, degenerate=True)

    factors, svals = [], []
    for i, r in enumerate(target_ranks):
        u, s = leading_left_singular_vectors(flatten(t, i), r, method)
        factors.append(u)
        svals.append(s)
    core = multi_mode_product(t, [u.T for u in factors])
    return TuckerFactorization(core, factors, svals)


def mlrank_estimate(t: np.ndarray, tol: float = 1e-8) -> MlRank:
    """Numerical multilinear rank.

    The rank of mode ``i`` is the number of singular values of ``flatten(t, i)``
    with ``s / s_max >= tol``. Singular values always come from a direct SVD so
    ratios near ``tol`` are trustworthy.
    """
    if not 0.0 < tol < 1.0:
        raise ValueError("tol must lie in (0, 1)")
    t = np.asarray(t, dtype=float)
    ranks, gaps = [], []
    for i in range(t.ndim):
        s = np.linalg.svd(flatten(t, i), compute_uv=False)
        if s.size == 0 or s[0] == 0.0:
            ranks.append(0)
            gaps.append(0.0)
            continue
        r = int(np.sum(s / s[0] >= tol))
        ranks.append(r)
        gaps.append(float(s[r] / s[r - 1]) if r < s.size else 0.0)
    return MlRank(tuple(ranks), tuple(gaps))
