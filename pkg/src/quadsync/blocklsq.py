"""Weighted blockwise Tucker least squares shared by the synchronization solvers.

A :class:`Term` is one data-fit term

    scale * || W (.)_b (Lambda (.)_b X  -  [[G; F_0, ..., F_{k-1}]]) ||_F^2

over a block tensor ``X`` with constant core ``G`` and factor matrices ``F_i``
(``3n x r_i``). Weights ``W`` and scales ``Lambda`` are per block, stored as
``(n,)*k`` arrays. Everything here is evaluated one leading block at a time so
the ``(3n)^k`` reconstruction is never held in memory.
"""
from __future__ import annotations

import numpy as np

from .multifocal import SYMMETRIES, BlockTensor

__all__ = ["Term", "balance_gauge", "contract_except", "solve_rows", "sphere_scales",
           "symmetrize_scales"]

_LETTERS = "abcdefgh"


def contract_except(core: np.ndarray, factors, mode: int) -> np.ndarray:
    """``core`` multiplied by every factor except ``mode``, with ``mode`` moved first.

    The result has shape ``(r_mode, M_j, ...)`` with the other modes in
    ascending order, i.e. ``flatten(core, mode) @ kron(F_j ...).T`` reshaped.
    """
    out = np.asarray(core)
    for j in range(out.ndim - 1, -1, -1):
        if j == mode:
            continue
        out = np.moveaxis(np.tensordot(out, factors[j], axes=(j, 1)), -1, j)
    return np.moveaxis(out, mode, 0)


def symmetrize_scales(lam: np.ndarray) -> np.ndarray:
    """Average ``lam`` over the index symmetries of its entity order."""
    perms = [p for p, _ in SYMMETRIES[lam.ndim]]
    return sum(np.transpose(lam, p) for p in perms) / len(perms)


class Term:
    """One weighted data term of a synchronization objective."""

    def __init__(self, data: BlockTensor, core: np.ndarray, scale: float = 1.0):
        if data.order != np.ndim(core):
            raise ValueError("core order does not match the block tensor")
        # entries outside the observed blocks never enter the objective
        data = data.masked(data.omega)
        if not np.all(np.isfinite(data.data)):
            raise ValueError("observed blocks contain non-finite entries")
        self.data = data
        self.core = np.asarray(core, dtype=float)
        self.scale = float(scale)
        self.n = data.n
        self.order = data.order
        self.mask = data.omega.astype(float)
        self.xx = data.block_norms() ** 2

    # -- blockwise statistics ------------------------------------------------

    def _chunks(self, factors):
        """Yield ``(a, recon_rows, data_rows)`` for each leading camera ``a``."""
        tail = contract_except(self.core, factors, 0)
        flat = tail.reshape(tail.shape[0], -1)
        x = self.data.data
        for a in range(self.n):
            rows = slice(3 * a, 3 * a + 3)
            yield a, factors[0][rows] @ flat, x[rows].reshape(3, -1)

    def _block_sum(self, prod_rows: np.ndarray) -> np.ndarray:
        k, n = self.order, self.n
        shaped = prod_rows.reshape((3,) + (n, 3) * (k - 1))
        axes = (0,) + tuple(range(2, 2 * k - 1, 2))
        return shaped.sum(axis=axes)

    def cross_stats(self, factors) -> tuple[np.ndarray, np.ndarray]:
        """Blockwise ``<R, X>`` and ``||R||^2`` for the current reconstruction ``R``."""
        rx = np.empty((self.n,) * self.order)
        rr = np.empty_like(rx)
        for a, r, x in self._chunks(factors):
            rx[a] = self._block_sum(r * x)
            rr[a] = self._block_sum(r * r)
        return rx, rr

    def residual_norms(self, factors, lam: np.ndarray) -> np.ndarray:
        """Blockwise ``||lam X - R||_F`` on every block (callers mask with omega)."""
        out = np.empty((self.n,) * self.order)
        lam_b = np.asarray(lam)
        k, n = self.order, self.n
        for a, r, x in self._chunks(factors):
            la = lam_b[a].reshape((1,) + sum(((n, 1) for _ in range(k - 1)), ()))
            diff = x.reshape((3,) + (n, 3) * (k - 1)) * la - r.reshape((3,) + (n, 3) * (k - 1))
            out[a] = self._block_sum(diff.reshape(3, -1) ** 2)
        return np.sqrt(out)

    def objective(self, factors, lam, weights) -> float:
        """``scale * sum_b w_b^2 ||lam_b X_b - R_b||^2``."""
        res = self.residual_norms(factors, lam)
        return self.scale * float(np.sum((weights * res) ** 2))

    def l1_objective(self, factors, lam) -> float:
        """Unsquared sum of observed block residual norms."""
        return float(np.sum(self.mask * self.residual_norms(factors, lam)))

    # -- updates -------------------------------------------------------------

    def weights(self, factors, lam, delta: float, sqrt_residual: bool = True) -> np.ndarray:
        """IRLS weights ``1 / max(delta, sqrt(residual))`` on omega, zero elsewhere."""
        res = self.residual_norms(factors, lam)
        m = np.sqrt(res) if sqrt_residual else res
        return self.mask / np.maximum(delta, m)

    def raw_scales(self, factors) -> np.ndarray:
        """Per-block minimizers ``<R, X> / ||X||^2`` (0 where ``X`` vanishes)."""
        rx, _ = self.cross_stats(factors)
        ok = (self.mask > 0) & (self.xx > 0)
        return np.where(ok, rx / np.where(ok, self.xx, 1.0), 0.0)

    def scale_update(self, factors, weights=None) -> np.ndarray:
        """Scales for fixed factors, symmetric and of unit Frobenius norm.

        Without ``weights``: per-block projection, then symmetrize, then
        normalize. With ``weights``: the exact minimizer of the weighted data
        term over symmetric unit-norm scales (see :func:`sphere_scales`).
        """
        if weights is None:
            lam = symmetrize_scales(self.raw_scales(factors))
            nrm = np.linalg.norm(lam)
            return lam / nrm if nrm > 0 else lam
        rx, _ = self.cross_stats(factors)
        w2 = np.asarray(weights) ** 2 * self.mask
        support = (self.mask > 0) & (self.xx > 0)
        return sphere_scales(w2 * self.xx, w2 * rx, support)

    def normal_system(self, factors, mode: int, weights, lam):
        """Per-camera normal matrices and right-hand sides of the data term.

        Returns ``(lhs, rhs)`` with ``lhs`` of shape ``(n, r, r)`` (shared by
        the three rows of a camera) and ``rhs`` of shape ``(3n, r)``, both
        already multiplied by ``scale``.
        """
        k, n = self.order, self.n
        kt = contract_except(self.core, factors, mode)
        r = kt.shape[0]
        kflat = kt.reshape(r, -1)
        # per block-tuple Gram matrices of K's columns
        kb = kt.reshape((r,) + (n, 3) * (k - 1))
        axes = tuple(range(1, 2 * k - 1, 2)) + (0,) + tuple(range(2, 2 * k - 1, 2))
        kb = np.transpose(kb, axes).reshape(n ** (k - 1), r, 3 ** (k - 1))
        gram = kb @ np.swapaxes(kb, 1, 2)
        w2 = np.moveaxis(np.asarray(weights) ** 2, mode, 0).reshape(n, -1)
        v = np.moveaxis(np.asarray(weights) ** 2 * lam, mode, 0)
        lhs = self.scale * np.einsum("ab,bxy->axy", w2, gram)
        xm = np.moveaxis(self.data.data, mode, 0)
        rhs = np.empty((3 * n, r))
        bshape = (1,) + sum(((n, 1) for _ in range(k - 1)), ())
        for a in range(n):
            slab = xm[3 * a:3 * a + 3].reshape((3,) + (n, 3) * (k - 1))
            weighted = (slab * v[a].reshape(bshape)).reshape(3, -1)
            rhs[3 * a:3 * a + 3] = self.scale * (weighted @ kflat.T)
        return lhs, rhs

    def sampled_system(self, factors, mode: int, weights, lam, m: int, rng):
        """Normal systems restricted to ``m`` uniformly sampled columns per row.

        Every row draws its own columns without replacement. Sums run over the
        sampled columns only, without rescaling, so the consensus penalty
        carries relatively more weight. Returns ``(lhs, rhs)`` with ``lhs`` of
        shape ``(3n, r, r)``.
        """
        k, n = self.order, self.n
        dims = (3 * n,) * (k - 1)
        total = int(np.prod(dims))
        m = min(int(m), total)
        rows = np.arange(3 * n)
        cols = np.stack([rng.choice(total, m, replace=False) for _ in rows])
        multi = np.unravel_index(cols, dims)
        others = [j for j in range(k) if j != mode]
        gathered = [factors[j][idx] for j, idx in zip(others, multi)]
        core_m = np.moveaxis(self.core, mode, 0)
        sub = "x" + _LETTERS[:k - 1]
        ops = ",".join(["RM" + _LETTERS[t] for t in range(k - 1)])
        kc = np.einsum(f"{sub},{ops}->RMx", core_m, *gathered)
        blocks = (rows[:, None] // 3,) + tuple(idx // 3 for idx in multi)
        w2 = np.moveaxis(np.asarray(weights) ** 2, mode, 0)[blocks]
        v = w2 * np.moveaxis(np.asarray(lam), mode, 0)[blocks]
        xv = np.moveaxis(self.data.data, mode, 0)[(rows[:, None],) + tuple(multi)]
        lhs = self.scale * np.einsum("am,amx,amy->axy", w2, kc, kc)
        rhs = self.scale * np.einsum("am,amx->ax", v * xv, kc)
        return lhs, rhs


def sphere_scales(a: np.ndarray, c: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Minimize ``sum(a * lam**2 - 2 * c * lam)`` over symmetric ``lam`` with unit norm.

    ``lam`` is zero off ``support`` (a symmetric mask). For symmetric ``lam``
    the stationarity condition reads ``(sym(a) - mu) lam = sym(c)``, so
    ``lam = sym(c) / (sym(a) - mu)`` with the multiplier ``mu`` below
    ``min sym(a)`` fixed by the norm constraint.
    """
    support = np.asarray(support, dtype=bool)
    if not support.any():
        return np.zeros(a.shape)
    abar = symmetrize_scales(np.asarray(a, dtype=float))[support]
    cbar = symmetrize_scales(np.asarray(c, dtype=float))[support]
    if not np.any(cbar):
        raise ValueError("scale step has no data")
    lo_a = abar.min()

    def norm2(mu):
        return float(np.sum((cbar / (abar - mu)) ** 2))

    # bracket the root of norm2(mu) = 1 on (-inf, lo_a)
    hi = lo_a
    tiny = max(abs(lo_a), 1.0) * 1e-15
    hard = norm2(hi - tiny) < 1.0
    if hard:
        # the minimum-curvature entries carry no data; they absorb the leftover norm
        mu = lo_a
        free = abar - lo_a > tiny
        lam_s = np.zeros_like(abar)
        lam_s[free] = cbar[free] / (abar[free] - mu)
        rest = max(0.0, 1.0 - float(np.sum(lam_s ** 2)))
        fill = ~free
        lam_s[fill] = np.sqrt(rest / fill.sum())
    else:
        step = max(abs(lo_a), np.abs(cbar).sum(), 1.0)
        lo = lo_a - step
        while norm2(lo) > 1.0:
            step *= 2.0
            lo = lo_a - step
        # Newton on 1/sqrt(norm2) - 1, safeguarded by the bracket [lo, hi)
        mu = lo
        for _ in range(200):
            n2 = norm2(mu)
            if abs(n2 - 1.0) < 1e-15:
                break
            if n2 < 1.0:
                lo = mu
            else:
                hi = mu
            d = np.sum(cbar ** 2 / (abar - mu) ** 3)
            phi = 1.0 / np.sqrt(n2) - 1.0
            dphi = -d / n2 ** 1.5
            cand = mu - phi / dphi
            mu = cand if lo < cand < hi else 0.5 * (lo + hi)
            if hi - lo <= 1e-15 * max(abs(lo), abs(hi), 1.0):
                break
        lam_s = cbar / (abar - mu)
        lam_s /= np.linalg.norm(lam_s)
    lam = np.zeros(a.shape)
    lam[support] = lam_s
    return lam


def solve_rows(lhs: np.ndarray, rhs: np.ndarray, target: np.ndarray, rho: float) -> np.ndarray:
    """Rows ``x`` solving ``x (rho/2 I + L) = rho/2 target + rhs``.

    ``lhs`` is either per camera ``(n, r, r)`` or per row ``(3n, r, r)``.
    """
    nrows, r = rhs.shape
    if lhs.shape[0] != nrows:
        lhs = np.repeat(lhs, 3, axis=0)
    a = lhs + 0.5 * rho * np.eye(r)
    b = 0.5 * rho * target + rhs
    x = np.linalg.solve(a, b[:, :, None])[:, :, 0]
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite factor row update")
    return x


def balance_gauge(factors, targets) -> list[np.ndarray]:
    """Rescale ``factors`` by ``alpha_i`` with ``prod(alpha) = 1`` to best match ``targets``.

    The Tucker reconstruction is unchanged, so only the consensus penalty
    ``sum ||alpha_i F_i - T_i||^2`` moves. Solved by Newton's method on
    ``log(alpha)`` restricted to zero sum.
    """
    a = np.array([np.sum(f * f) for f in factors])
    b = np.array([np.sum(f * t) for f, t in zip(factors, targets)])
    if np.any(a == 0):
        return list(factors)
    k = len(factors)
    # basis of the zero-sum subspace
    basis = np.linalg.svd(np.ones((1, k)))[2][1:].T
    y = np.zeros(k - 1)

    def cost(y):
        al = np.exp(basis @ y)
        return float(np.sum(al * al * a - 2.0 * al * b))

    for _ in range(50):
        al = np.exp(basis @ y)
        g = 2.0 * (al * al * a - al * b)
        h = np.diag(4.0 * al * al * a - 2.0 * al * b)
        grad = basis.T @ g
        hess = basis.T @ h @ basis
        try:
            step = -np.linalg.solve(hess, grad)
            if grad @ step >= 0:
                step = -grad
        except np.linalg.LinAlgError:
            step = -grad
        # keep each Newton step within a factor e^2 per scale
        step *= min(1.0, 2.0 / max(np.abs(step).max(), 1e-300))
        t, c0 = 1.0, cost(y)
        while cost(y + t * step) > c0 + 1e-4 * t * (grad @ step) and t > 1e-12:
            t *= 0.5
        y = y + t * step
        if np.linalg.norm(t * step) < 1e-14:
            break
    al = np.exp(basis @ y)
    return [x * f for x, f in zip(al, factors)]
