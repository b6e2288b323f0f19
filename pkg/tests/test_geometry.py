import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadsync.geometry import (DegenerateAlignment, align_overlap, apply_alignment,
                               camera_center, chordal_mean, compose_camera, decompose_camera,
                               exterior_square, fit_frame_to_ground_truth, generate_cameras,
                               line_projection_stack, perturb_cameras, pose_errors,
                               random_rotation, relative_location_difference,
                               rotation_about_axis, rotation_angle_deg, similarity_procrustes,
                               stack, unstack)
from quadsync.multifocal import build_block_tensor
from quadsync.tensor import mlrank_estimate

from conftest import random_invertible


def _plucker(x, y):
    """Line through homogeneous points ``x`` and ``y``, ordered (12,13,14,23,24,34)."""
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    return np.array([x[a] * y[b] - x[b] * y[a] for a, b in pairs])


def test_exterior_square_canonical_camera():
    p = np.hstack([np.eye(3), np.zeros((3, 1))])
    # direct 2x2 minor oracle
    rows = [(1, 2), (0, 2), (0, 1)]
    cols = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    oracle = np.zeros((3, 6))
    for i, (ra, rb) in enumerate(rows):
        for j, (ca, cb) in enumerate(cols):
            oracle[i, j] = (-1) ** i * np.linalg.det(p[np.ix_([ra, rb], [ca, cb])])
    np.testing.assert_array_equal(exterior_square(p), oracle)
    # only the identity-minor planes survive: (23), (13), (12)
    expected = np.zeros((3, 6))
    expected[0, 3], expected[1, 1], expected[2, 0] = 1.0, -1.0, 1.0
    np.testing.assert_array_equal(exterior_square(p), expected)


def test_exterior_square_maps_lines_to_image_lines(rng):
    p = rng.standard_normal((3, 4))
    x, y = rng.standard_normal((2, 4))
    np.testing.assert_allclose(exterior_square(p) @ _plucker(x, y), np.cross(p @ x, p @ y),
                               atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_exterior_square_kernel_iff_through_center(seed):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((3, 4))
    c = np.append(camera_center(p), 1.0)
    through = _plucker(c, rng.standard_normal(4))
    assert np.linalg.norm(exterior_square(p) @ through) < 1e-10 * np.linalg.norm(through)
    other = _plucker(rng.standard_normal(4), rng.standard_normal(4))
    assert np.linalg.norm(exterior_square(p) @ other) > 1e-3 * np.linalg.norm(other)


def test_exterior_square_is_quadratic(rng):
    p = rng.standard_normal((3, 4))
    np.testing.assert_allclose(exterior_square(2.5 * p), 6.25 * exterior_square(p), rtol=1e-12)


@pytest.mark.parametrize("mode,rank", [("generic", 6), ("collinear", 5)])
def test_line_projection_stack_rank(mode, rank):
    p = line_projection_stack(generate_cameras(8, mode, seed=4))
    s = np.linalg.svd(p, compute_uv=False)
    assert int(np.sum(s / s[0] > 1e-8)) == rank


def test_generate_cameras_collinear_centers():
    cams = generate_cameras(10, "collinear", seed=0)
    centers = np.array([decompose_camera(p)[2] for p in cams])
    s = np.linalg.svd(centers - centers.mean(0), compute_uv=False)
    assert s[1] < 1e-12 * s[0]


def test_generate_cameras_calibrated_and_deterministic():
    a = generate_cameras(5, "generic", seed=9)
    b = generate_cameras(5, "generic", seed=9)
    np.testing.assert_array_equal(a, b)
    for p in a:
        k, r, _ = decompose_camera(p)
        np.testing.assert_allclose(k, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)


def test_generate_cameras_generic_mlrank():
    q = build_block_tensor(generate_cameras(6, "generic", seed=5)).data
    assert mlrank_estimate(q).ranks == (4, 4, 4, 4)


@pytest.mark.parametrize("kwargs", [dict(n=1), dict(n=4, mode="spiral")])
def test_generate_cameras_rejects(kwargs):
    with pytest.raises(ValueError):
        generate_cameras(**kwargs)


def test_perturb_cameras(generic_cams, rng):
    np.testing.assert_array_equal(perturb_cameras(generic_cams, 0, rng), generic_cams)
    noisy = perturb_cameras(generic_cams, 3.0, rng)
    rel = [np.linalg.norm(a - b) / np.linalg.norm(b) for a, b in zip(noisy, generic_cams)]
    np.testing.assert_allclose(rel, 0.03, rtol=1e-12)
    with pytest.raises(ValueError):
        perturb_cameras(generic_cams, -1, rng)


def test_align_overlap_identity(generic_cams):
    al = align_overlap(generic_cams, generic_cams)
    h = al.H / al.H[0, 0]
    np.testing.assert_allclose(h, np.eye(4), atol=1e-12)
    assert al.residual < 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_align_overlap_recovers_frame(seed):
    rng = np.random.default_rng(seed)
    src = rng.standard_normal((3, 3, 4))
    h0 = random_invertible(rng)
    tgt = np.array([p @ h0 for p in src])
    al = align_overlap(src, tgt)
    assert not al.degenerate
    # src H = a tgt = a src h0, so H is proportional to h0
    scale = np.vdot(h0, al.H) / np.vdot(h0, h0)
    assert np.linalg.norm(al.H - scale * h0) < 1e-8 * np.linalg.norm(al.H)


def test_align_overlap_residual_is_smallest_singular_value(rng):
    src = rng.standard_normal((3, 3, 4))
    tgt = src + 0.05 * rng.standard_normal(src.shape)
    al = align_overlap(src, tgt)

    def white(x):
        u, _, vt = np.linalg.svd(x.reshape(-1, 4), full_matrices=False)
        return (u @ vt).reshape(x.shape)

    # the system is solved on stacks whitened to orthonormal columns
    ws, wt = white(src), white(tgt)
    a = np.zeros((36, 19))
    for c in range(3):
        a[12 * c:12 * c + 12, :16] = np.kron(ws[c], np.eye(4))
        a[12 * c:12 * c + 12, 16 + c] = -wt[c].ravel()
    assert np.isclose(al.residual, np.linalg.svd(a, compute_uv=False)[-1], rtol=1e-10)
    assert np.isclose(np.linalg.norm(al.H), 1.0) and np.linalg.det(al.H) > 0


@pytest.mark.parametrize("side", ["source", "target"])
def test_align_overlap_frame_equivariant(rng, side):
    src = rng.standard_normal((3, 3, 4))
    tgt = src @ random_invertible(rng) + 0.05 * rng.standard_normal(src.shape)
    base = align_overlap(src, tgt)
    m = 2.5 * random_invertible(rng)
    if side == "source":
        moved = align_overlap(src @ m, tgt)
        before, after = src @ base.H, src @ m @ moved.H
    else:
        moved = align_overlap(src, tgt @ m)
        before, after = src @ base.H @ m, src @ moved.H
    k = np.vdot(before, after) / np.vdot(before, before)
    np.testing.assert_allclose(k * before, after, atol=1e-10 * np.linalg.norm(after))
    np.testing.assert_allclose(base.residual, moved.residual, rtol=1e-9)


def test_align_overlap_needs_two_cameras(rng):
    with pytest.raises(DegenerateAlignment):
        align_overlap(rng.standard_normal((1, 3, 4)), rng.standard_normal((1, 3, 4)))
    with pytest.raises(ValueError):
        align_overlap(rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 3, 4)))


def test_fit_frame_exact_recovery(generic_cams, rng):
    h0 = random_invertible(rng)
    scales = rng.uniform(0.5, 2.0, len(generic_cams)) * rng.choice([-1, 1], len(generic_cams))
    est = np.array([s * p @ h0 for s, p in zip(scales, generic_cams)])
    al = fit_frame_to_ground_truth(est, generic_cams)
    aligned = apply_alignment(est, al)
    np.testing.assert_allclose(aligned, generic_cams, atol=1e-9)
    errs = pose_errors(aligned, generic_cams).summary()
    assert max(errs.values()) < 1e-6


def test_fit_frame_identity(generic_cams):
    al = fit_frame_to_ground_truth(generic_cams, generic_cams)
    np.testing.assert_allclose(al.H / al.H[0, 0], np.eye(4), atol=1e-10)


def test_fit_frame_rejects_rank_deficient(generic_cams):
    flat = generic_cams.copy()
    flat[:, :, 3] = 0.0
    flat[:, :, 2] = 0.0
    with pytest.raises(DegenerateAlignment):
        fit_frame_to_ground_truth(flat, generic_cams)


def test_decompose_round_trip(rng):
    r = random_rotation(rng)
    t = rng.standard_normal(3)
    k = np.array([[2.0, 0.1, 0.3], [0.0, 1.5, -0.2], [0.0, 0.0, 1.0]])
    k2, r2, t2 = decompose_camera(-3.0 * compose_camera(r, t, k))
    np.testing.assert_allclose(k2, k, atol=1e-12)
    np.testing.assert_allclose(r2, r, atol=1e-12)
    np.testing.assert_allclose(t2, t, atol=1e-12)
    with pytest.raises(ValueError):
        decompose_camera(np.zeros((3, 4)))


def test_pose_errors_identical_and_known_rotation(generic_cams, rng):
    errs = pose_errors(generic_cams, generic_cams)
    assert errs.mean_location < 1e-12 and errs.mean_rotation < 1e-6
    rotated = []
    for p in generic_cams:
        _, r, t = decompose_camera(p)
        rotated.append(compose_camera(rotation_about_axis(rng.standard_normal(3),
                                                          np.deg2rad(5.0)) @ r, t))
    errs = pose_errors(np.array(rotated), generic_cams)
    np.testing.assert_allclose(errs.rotation_deg, 5.0, atol=1e-9)
    assert errs.mean_location < 1e-12


def test_pose_errors_invariant_to_camera_scales(generic_cams, rng):
    est = perturb_cameras(generic_cams, 2.0, rng)
    a = pose_errors(est, generic_cams)
    s = rng.uniform(0.3, 3.0, len(est))
    b = pose_errors(est * s[:, None, None], generic_cams * s[::-1, None, None])
    np.testing.assert_allclose(a.rotation_deg, b.rotation_deg, atol=1e-10)
    np.testing.assert_allclose(a.location, b.location, atol=1e-10)


def test_rotation_angle_matches_trace_formula(rng):
    a, b = random_rotation(rng), random_rotation(rng)
    via_trace = np.degrees(np.arccos(np.clip((np.trace(a @ b.T) - 1) / 2, -1, 1)))
    assert np.isclose(rotation_angle_deg(a, b), via_trace, atol=1e-8)


def test_chordal_mean_and_procrustes(rng):
    r = random_rotation(rng)
    np.testing.assert_allclose(chordal_mean([r, r, r]), r, atol=1e-12)
    small = [rotation_about_axis([0, 0, 1], np.deg2rad(a)) @ r for a in (-2.0, 2.0)]
    np.testing.assert_allclose(chordal_mean(small), r, atol=1e-12)
    src = rng.standard_normal((6, 3))
    dst = 1.7 * src @ r.T + np.array([1.0, -2.0, 0.5])
    s, rot, t = similarity_procrustes(src, dst)
    assert np.isclose(s, 1.7) and np.allclose(rot, r) and np.allclose(t, [1.0, -2.0, 0.5])


def test_relative_location_difference():
    others = [np.array([1.0, 0, 0]), np.array([0, 3.0, 0])]
    assert relative_location_difference(np.zeros(3), np.array([0, 0, 2.0]), others) == 1.0
    assert relative_location_difference(np.zeros(3), np.zeros(3), others) == 0.0


def test_stack_round_trip(generic_cams):
    np.testing.assert_array_equal(unstack(stack(generic_cams)), generic_cams)
    with pytest.raises(ValueError):
        unstack(np.zeros((4, 4)))
