"""Camera matrices, synthetic scenes, projective alignment and pose metrics.

Cameras are ``(3, 4)`` arrays; a set of ``n`` cameras is an ``(n, 3, 4)``
array. :func:`stack` turns it into the ``(3n, 4)`` factor matrix used by the
block tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "stack",
    "unstack",
    "compose_camera",
    "exterior_square",
    "line_projection_stack",
    "camera_center",
    "random_rotation",
    "rotation_about_axis",
    "look_at",
    "generate_cameras",
    "perturb_cameras",
    "ProjectiveAlignment",
    "DegenerateAlignment",
    "align_overlap",
    "fit_frame_to_ground_truth",
    "apply_alignment",
    "decompose_camera",
    "rotation_angle_deg",
    "chordal_mean",
    "similarity_procrustes",
    "PoseErrors",
    "pose_errors",
    "relative_location_difference",
]

# Row and column orderings for the 2x2 minors of a 3x4 camera.
_MINOR_ROWS = ((1, 2), (0, 2), (0, 1))
_MINOR_COLS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
_ROW_SIGN = (1.0, -1.0, 1.0)


def stack(cams: np.ndarray) -> np.ndarray:
    cams = np.asarray(cams, dtype=float)
    return cams.reshape(-1, cams.shape[-1])


def unstack(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.shape[0] % 3:
        raise ValueError("stacked cameras need a multiple of 3 rows")
    return c.reshape(-1, 3, c.shape[-1])


def compose_camera(R: np.ndarray, t: np.ndarray, K: np.ndarray | None = None) -> np.ndarray:
    """``K R [I | -t]``."""
    K = np.eye(3) if K is None else K
    return K @ R @ np.hstack([np.eye(3), -np.reshape(t, (3, 1))])


def exterior_square(p: np.ndarray) -> np.ndarray:
    """Line projection matrix (3x6) built from the 2x2 minors of ``p``.

    Rows pair camera rows ``(2,3), (1,3), (1,2)`` (1-based) with the middle row
    negated; columns follow ``(1,2), (1,3), (1,4), (2,3), (2,4), (3,4)``.
    """
    p = np.asarray(p, dtype=float)
    out = np.empty((3, 6))
    for i, (ra, rb) in enumerate(_MINOR_ROWS):
        for j, (ca, cb) in enumerate(_MINOR_COLS):
            out[i, j] = _ROW_SIGN[i] * (p[ra, ca] * p[rb, cb] - p[ra, cb] * p[rb, ca])
    return out


def line_projection_stack(cams: np.ndarray) -> np.ndarray:
    """``(3n, 6)`` stack of exterior squares."""
    return np.vstack([exterior_square(p) for p in unstack(stack(cams))])


def camera_center(p: np.ndarray) -> np.ndarray:
    """Affine camera centre (right null vector of ``p``, dehomogenized)."""
    _, _, vt = np.linalg.svd(p)
    c = vt[-1]
    return c[:3] / c[3]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rotation_about_axis(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)


def look_at(center: np.ndarray, target: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """World-to-camera rotation whose optical axis points from ``center`` to ``target``."""
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    up = rng.standard_normal(3)
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.vstack([x, y, z])


def _perturbed_rotation(R: np.ndarray, max_deg: float, rng: np.random.Generator) -> np.ndarray:
    angle = np.deg2rad(rng.uniform(0.0, max_deg))
    return rotation_about_axis(rng.standard_normal(3), angle) @ R


def generate_cameras(n: int, mode: str = "generic", seed=None, spacing: float = 1.0,
                     distance: float = 6.0) -> np.ndarray:
    """Calibrated synthetic cameras (``K = I``), returned as ``(n, 3, 4)``.

    ``generic``: centres uniform in the unit ball around ``(0, 0, -4)``.
    ``collinear``: centres on a random line passing ``distance`` from the
    origin, ``spacing`` apart with 20% spacing jitter. Both modes aim each
    camera at the origin and then tilt it by up to 10 degrees.
    """
    if n < 2:
        raise ValueError("need at least 2 cameras")
    if mode not in ("generic", "collinear"):
        raise ValueError(f"unknown camera mode {mode!r}")
    rng = np.random.default_rng(seed)
    if mode == "generic":
        dirs = rng.standard_normal((n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
        centers = np.array([0.0, 0.0, -4.0]) + dirs * radii[:, None]
    else:
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        offset = rng.standard_normal(3)
        offset -= offset.dot(direction) * direction
        offset *= distance / np.linalg.norm(offset)
        steps = spacing * (1.0 + rng.uniform(-0.2, 0.2, n))
        pos = np.cumsum(steps)
        pos -= pos.mean()
        centers = offset + pos[:, None] * direction
    cams = []
    for c in centers:
        R = _perturbed_rotation(look_at(c, np.zeros(3), rng), 10.0, rng)
        cams.append(compose_camera(R, c))
    return np.array(cams)


def perturb_cameras(cams: np.ndarray, noise_pct: float, rng) -> np.ndarray:
    """Add ``noise_pct`` percent relative Frobenius Gaussian noise to each camera.

    Camera ``P`` becomes ``P + (noise_pct / 100) * ||P|| * G / ||G||`` with
    ``G`` standard normal, so each camera moves by exactly that fraction.
    """
    if noise_pct < 0:
        raise ValueError("noise_pct must be non-negative")
    cams = np.array(cams, dtype=float)
    if noise_pct == 0:
        return cams
    rng = np.random.default_rng(rng)
    g = rng.standard_normal(cams.shape)
    g_norm = np.linalg.norm(g.reshape(len(cams), -1), axis=1)
    p_norm = np.linalg.norm(cams.reshape(len(cams), -1), axis=1)
    scale = (noise_pct / 100.0) * p_norm / g_norm
    return cams + scale[:, None, None] * g


class DegenerateAlignment(ValueError):
    """The projective alignment system has no unique solution."""


@dataclass
class ProjectiveAlignment:
    H: np.ndarray
    per_camera_scales: np.ndarray
    residual: float
    degenerate: bool = False


def _whitening(stacked: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(S^T S)^(-1/2)`` and its inverse for a full-rank stack ``S``; identities otherwise."""
    evals, evecs = np.linalg.eigh(stacked.T @ stacked)
    eye = np.eye(stacked.shape[1])
    if evals[-1] <= 0 or evals[0] <= 1e-20 * evals[-1]:
        return eye, eye
    root = np.sqrt(evals)
    return (evecs / root) @ evecs.T, (evecs * root) @ evecs.T


def align_overlap(sources, targets, gap_tol: float = 1e-10) -> ProjectiveAlignment:
    """Find ``H`` (4x4) and scales ``a`` with ``sources[c] @ H ~ a[c] * targets[c]``.

    The stacked homogeneous system in ``(vec(H), a)`` is solved by its smallest
    right singular vector. Both stacks are first whitened to orthonormal
    columns, which makes the solution independent of the projective frames
    (and overall scales) of the sources and of the targets.
    ``H`` is then scaled to unit Frobenius norm with ``det(H) > 0`` when the
    determinant is nonzero. ``residual`` is the smallest singular value of
    the whitened design matrix.
    """
    sources = np.asarray(sources, dtype=float).reshape(-1, 3, 4)
    targets = np.asarray(targets, dtype=float).reshape(-1, 3, 4)
    m = len(sources)
    if m != len(targets):
        raise ValueError("sources and targets differ in length")
    if m < 2:
        raise DegenerateAlignment("need at least 2 camera correspondences")
    w_src, _ = _whitening(sources.reshape(-1, 4))
    w_tgt, w_tgt_inv = _whitening(targets.reshape(-1, 4))
    white = sources @ w_src
    targets = targets @ w_tgt
    a = np.zeros((12 * m, 16 + m))
    eye = np.eye(4)
    for c in range(m):
        a[12 * c:12 * (c + 1), :16] = np.kron(white[c], eye)
        a[12 * c:12 * (c + 1), 16 + c] = -targets[c].ravel()
    _, s, vt = np.linalg.svd(a, full_matrices=False)
    z = vt[-1]
    # sources W_s Ht = a targets W_t, so H = W_s Ht W_t^-1
    h = w_src @ z[:16].reshape(4, 4) @ w_tgt_inv
    h_norm = np.linalg.norm(h)
    degenerate = bool(h_norm == 0 or s[-2] <= gap_tol * s[0])
    if h_norm == 0:
        return ProjectiveAlignment(h, z[16:], float(s[-1]), True)
    scales = z[16:] / h_norm
    h = h / h_norm
    if np.linalg.det(h) < 0:
        h, scales = -h, -scales
    return ProjectiveAlignment(h, scales, float(s[-1]), degenerate)


def fit_frame_to_ground_truth(est: np.ndarray, gt: np.ndarray) -> ProjectiveAlignment:
    """Projective frame and per-camera scales mapping ``est`` onto ``gt``."""
    est = unstack(stack(est))
    gt = unstack(stack(gt))
    if len(est) != len(gt) or len(est) < 2:
        raise ValueError("need matching stacks of at least 2 cameras")
    if np.linalg.matrix_rank(stack(est), tol=1e-10 * np.linalg.norm(est)) < 4:
        raise DegenerateAlignment("estimated camera stack has rank < 4")
    return align_overlap(est, gt)


def apply_alignment(cams: np.ndarray, alignment: ProjectiveAlignment) -> np.ndarray:
    """``cams[c] @ H / a[c]`` for every camera."""
    cams = unstack(stack(cams))
    return np.array([p @ alignment.H / a for p, a in zip(cams, alignment.per_camera_scales)])


def decompose_camera(p: np.ndarray):
    """RQ split ``p ~ K R [I | -t]`` with positive ``diag(K)`` and ``det(R) = 1``."""
    p = np.asarray(p, dtype=float)
    m = p[:, :3]
    det = np.linalg.det(m)
    if abs(det) <= 1e-12 * np.linalg.norm(m) ** 3:
        raise ValueError("camera is not decomposable (rank-deficient left 3x3 block)")
    if det < 0:
        p, m = -p, -m
    k, r = scipy.linalg.rq(m)
    d = np.diag(np.sign(np.diag(k)))
    k, r = k @ d, d @ r
    t = -np.linalg.solve(m, p[:, 3])
    return k / k[2, 2], r, t


def rotation_angle_deg(ra: np.ndarray, rb: np.ndarray) -> float:
    """Angle of ``ra rb^T`` in degrees.

    Uses ``||ra - rb||_F = 2 sqrt(2) sin(angle / 2)``, which stays accurate for
    tiny angles where the arccos of the trace loses half the digits.
    """
    chord = np.linalg.norm(np.asarray(ra) - np.asarray(rb)) / (2.0 * np.sqrt(2.0))
    return float(np.degrees(2.0 * np.arcsin(np.clip(chord, 0.0, 1.0))))


def chordal_mean(rotations) -> np.ndarray:
    """Frobenius-nearest rotation to the arithmetic mean of ``rotations``."""
    u, _, vt = np.linalg.svd(np.sum(rotations, axis=0))
    d = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    return u @ d @ vt


def similarity_procrustes(src: np.ndarray, dst: np.ndarray):
    """Scale, rotation and translation minimizing ``||s R src + t - dst||``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var = np.sum(xs ** 2)
    if var == 0:
        return 1.0, np.eye(3), mu_d - mu_s
    u, sig, vt = np.linalg.svd(xd.T @ xs)
    d = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    rot = u @ d @ vt
    scale = float(np.sum(sig * np.diag(d)) / var)
    return scale, rot, mu_d - scale * rot @ mu_s


@dataclass
class PoseErrors:
    rotation_deg: np.ndarray
    location: np.ndarray

    @property
    def mean_rotation(self) -> float:
        return float(np.mean(self.rotation_deg))

    @property
    def median_rotation(self) -> float:
        return float(np.median(self.rotation_deg))

    @property
    def mean_location(self) -> float:
        return float(np.mean(self.location))

    @property
    def median_location(self) -> float:
        return float(np.median(self.location))

    def summary(self) -> dict[str, float]:
        return {
            "mean_et": self.mean_location,
            "med_et": self.median_location,
            "mean_er": self.mean_rotation,
            "med_er": self.median_rotation,
        }


def pose_errors(est_aligned: np.ndarray, gt: np.ndarray) -> PoseErrors:
    """Per-camera rotation (degrees) and location errors.

    ``est_aligned`` must already sit in the frame of ``gt`` (see
    :func:`fit_frame_to_ground_truth`). Centres get one more similarity
    Procrustes fit before location errors are measured.
    """
    est = unstack(stack(est_aligned))
    gt = unstack(stack(gt))
    if len(est) != len(gt):
        raise ValueError("camera counts differ")
    rot_err, c_est, c_gt = [], [], []
    for pe, pg in zip(est, gt):
        _, re, te = decompose_camera(pe)
        _, rg, tg = decompose_camera(pg)
        rot_err.append(rotation_angle_deg(re, rg))
        c_est.append(te)
        c_gt.append(tg)
    c_est, c_gt = np.array(c_est), np.array(c_gt)
    s, rot, t = similarity_procrustes(c_est, c_gt)
    loc = np.linalg.norm(s * c_est @ rot.T + t - c_gt, axis=1)
    return PoseErrors(np.array(rot_err), loc)


def relative_location_difference(c_m: np.ndarray, c_n: np.ndarray, others) -> float:
    """``||c_m - c_n||`` over the mean distance from ``c_m`` to the other centres."""
    ref = np.mean([np.linalg.norm(c_m - c) for c in others])
    return float(np.linalg.norm(c_m - c_n) / ref) if ref > 0 else float("inf")
