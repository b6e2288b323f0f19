import numpy as np
import pytest

from quadsync.geometry import generate_cameras


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def generic_cams():
    return generate_cameras(6, "generic", seed=3)


@pytest.fixture
def collinear_cams():
    return generate_cameras(6, "collinear", seed=3)


def principal_angle_sin(a: np.ndarray, b: np.ndarray) -> float:
    """Sine of the largest principal angle between the column spaces of ``a`` and ``b``."""
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    # residual of b after projecting onto a; accurate for tiny angles
    return float(np.linalg.norm(qb - qa @ (qa.T @ qb), 2))


def random_invertible(rng, k: int = 4) -> np.ndarray:
    while True:
        h = rng.standard_normal((k, k))
        if abs(np.linalg.det(h)) > 0.1:
            return h


def max_pose_error(est: np.ndarray, gt: np.ndarray) -> float:
    """Largest of the four pose-error statistics after fitting the frame."""
    from quadsync.geometry import apply_alignment, fit_frame_to_ground_truth, pose_errors

    al = fit_frame_to_ground_truth(est, gt)
    return max(pose_errors(apply_alignment(est, al), gt).summary().values())
