import itertools

import numpy as np
import pytest
from scipy.stats import spearmanr

from quadsync.cycles import (LOCATION_THRESHOLD, ROTATION_THRESHOLD_DEG, PruningError,
                             ViewingHypergraph, block_tensor_from_verdicts, chain_alignments,
                             cycle_heuristic, evaluate_quadruple, fuse_quadruple,
                             prune_low_density)
from quadsync.geometry import (align_overlap, camera_center, chordal_mean, compose_camera, decompose_camera,
                               generate_cameras, perturb_cameras, random_rotation,
                               rotation_about_axis)
from quadsync.multifocal import quadrifocal_from_cameras

from conftest import random_invertible

QUAD = (0, 1, 2, 3)
CHAIN_KEYS = [(0, 1, 2), (1, 2, 3), (2, 3, 0), (3, 0, 1)]


def _triples(cams, rng, frames=True, noise=None, first_frame=None):
    """The four chain triples of quadruple (0,1,2,3), each in its own frame.

    ``noise`` maps a chain position to a percentage of camera noise.
    """
    out = []
    for t, key in enumerate(CHAIN_KEYS):
        tri = cams[list(key)]
        if noise and t in noise:
            tri = perturb_cameras(tri, noise[t], rng)
        if t == 0 and first_frame is not None:
            tri = tri @ first_frame
        elif frames and t > 0:
            tri = tri @ random_invertible(rng)
        out.append(tri)
    return out


def _similarity(rng):
    h = np.eye(4)
    h[:3, :3] = 1.7 * random_rotation(rng)
    h[:3, 3] = rng.standard_normal(3)
    return h


def _closure_discrepancy(chain):
    """Relative residual of the best scalar fit ``a P_first ~ P_last``."""
    out = []
    for p1, p4 in chain.closure:
        a = np.vdot(p1, p4) / np.vdot(p1, p1)
        out.append(np.linalg.norm(a * p1 - p4) / np.linalg.norm(p4))
    return float(np.mean(out))


@pytest.fixture
def quad_cams():
    return generate_cameras(4, "generic", seed=21)


# --- chain alignment ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_exact_chain_closes(quad_cams, seed):
    chain = chain_alignments(*_triples(quad_cams, np.random.default_rng(seed)))
    assert not chain.degenerate
    for p1, p4 in chain.closure:
        a = np.vdot(p1, p4) / np.vdot(p1, p1)
        assert np.linalg.norm(a * p1 - p4) / np.linalg.norm(p4) < 1e-8


def test_identity_frames_give_identity_alignment(quad_cams):
    for t in range(1, 4):
        src = quad_cams[list(CHAIN_KEYS[t][:2])]
        al = align_overlap(src, src)
        np.testing.assert_allclose(al.H / al.H[0, 0], np.eye(4), atol=1e-10)
    chain = chain_alignments(*_triples(quad_cams, None, frames=False))
    for t, key in enumerate(CHAIN_KEYS):
        for cam, idx in zip(chain.aligned[t], key):
            a = np.vdot(cam, quad_cams[idx]) / np.vdot(cam, cam)
            np.testing.assert_allclose(a * cam, quad_cams[idx], atol=1e-9)


def test_closure_grows_with_noise(quad_cams):
    scales = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
    xs, ys = [], []
    for seed in range(10):
        for s in scales:
            rng = np.random.default_rng(seed)
            chain = chain_alignments(*_triples(quad_cams, rng, noise={2: s}))
            xs.append(s)
            ys.append(_closure_discrepancy(chain))
    assert spearmanr(xs, ys).statistic > 0.9


def test_chain_estimates_map_cameras(quad_cams):
    chain = chain_alignments(*_triples(quad_cams, np.random.default_rng(0)))
    est = chain.estimates()
    assert [len(e) for e in est] == [3, 3, 3, 3]


# --- heuristic ------------------------------------------------------------------------

def test_exact_heuristic_is_zero(quad_cams):
    chain = chain_alignments(*_triples(quad_cams, np.random.default_rng(1)))
    rot, loc = cycle_heuristic(chain)
    assert rot < 1e-6 and loc < 1e-8


def test_heuristic_reads_a_rotation_offset(quad_cams):
    chain = chain_alignments(*_triples(quad_cams, None, frames=False))
    offset = rotation_about_axis(np.array([0.3, -1.0, 0.5]), np.deg2rad(5.0))
    for q, (p1, _) in enumerate(chain.closure):
        _, r, c = decompose_camera(p1)
        chain.closure[q] = (p1, compose_camera(offset @ r, c))
    rot, loc = cycle_heuristic(chain)
    assert rot == pytest.approx(5.0, abs=1e-9)
    assert loc < 1e-9


def test_heuristic_is_the_average_of_both_closure_pairs(quad_cams):
    rng = np.random.default_rng(4)
    chain = chain_alignments(*_triples(quad_cams, rng, noise={1: 2.0, 3: 2.0}))
    rot, loc = cycle_heuristic(chain)
    centres = [camera_center(est[0]) for est in chain.estimates()]
    rots, locs = [], []
    for q, (p1, p4) in enumerate(chain.closure):
        _, r1, c1 = decompose_camera(p1)
        _, r4, c4 = decompose_camera(p4)
        rots.append(np.degrees(np.arccos(np.clip((np.trace(r1 @ r4.T) - 1) / 2, -1, 1))))
        ref = np.mean([np.linalg.norm(c1 - c) for m, c in enumerate(centres) if m != q])
        locs.append(np.linalg.norm(c1 - c4) / ref)
    assert rot == pytest.approx(np.mean(rots), rel=1e-6)
    assert loc == pytest.approx(np.mean(locs), rel=1e-12)
    assert rot > 0 and loc > 0


@pytest.mark.parametrize("seed", range(3))
def test_heuristic_invariant_to_later_frames(quad_cams, seed):
    rng = np.random.default_rng(seed)
    noisy = _triples(quad_cams, rng, frames=False, noise={0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0})
    reframed = [noisy[0]] + [t @ random_invertible(rng) for t in noisy[1:]]
    a = cycle_heuristic(chain_alignments(*noisy))
    b = cycle_heuristic(chain_alignments(*reframed))
    np.testing.assert_allclose(a, b, atol=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_heuristic_invariant_to_similarity_of_first_frame(quad_cams, seed):
    rng = np.random.default_rng(seed)
    noisy = _triples(quad_cams, rng, frames=False, noise={0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0})
    reframed = [noisy[0] @ np.linalg.inv(_similarity(rng))] + noisy[1:]
    a = cycle_heuristic(chain_alignments(*noisy))
    b = cycle_heuristic(chain_alignments(*reframed))
    np.testing.assert_allclose(a, b, atol=1e-8)


# --- fusion ---------------------------------------------------------------------------

def test_noiseless_fusion_matches_direct_tensor(quad_cams):
    chain = chain_alignments(*_triples(quad_cams, None, frames=False))
    fused, block = fuse_quadruple(chain)
    direct = quadrifocal_from_cameras(*quad_cams)
    direct /= np.linalg.norm(direct)
    a = np.vdot(block, direct)
    np.testing.assert_allclose(a * block, direct, atol=1e-10)
    assert np.linalg.norm(block) == pytest.approx(1.0, abs=1e-15)


def test_single_estimate_passthrough():
    r = random_rotation(np.random.default_rng(2))
    np.testing.assert_allclose(chordal_mean([r]), r, atol=1e-14)


def test_fusion_beats_worst_single_frame(quad_cams):
    direct = quadrifocal_from_cameras(*quad_cams)
    direct /= np.linalg.norm(direct)

    def dist(block):
        block = block / np.linalg.norm(block)
        return min(np.linalg.norm(block - direct), np.linalg.norm(block + direct))

    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        noisy = _triples(quad_cams, rng, frames=False, noise={0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0})
        chain = chain_alignments(*noisy)
        _, fused_block = fuse_quadruple(chain)
        singles = []
        for t in range(4):
            est = {(t + pos) % 4: cam for pos, cam in enumerate(chain.aligned[t])}
            # the camera this triple lacks comes from the next triple in the chain
            (missing,) = set(range(4)) - set(est)
            est[missing] = chain.aligned[(t + 1) % 4][(missing - t - 1) % 4]
            singles.append(dist(quadrifocal_from_cameras(*(est[i] for i in range(4)))))
        wins += dist(fused_block) < max(singles)
    assert wins > 10


# --- verdicts ---------------------------------------------------------------------------

def _triple_map(cams, rng, corrupt=None):
    out = {}
    for key in itertools.combinations(range(len(cams)), 3):
        tri = cams[list(key)] @ random_invertible(rng)
        out[key] = tri
    if corrupt is not None:
        out[corrupt] = rng.standard_normal((3, 3, 4))
    return out


def test_exact_inputs_always_accepted():
    for seed in range(5):
        cams = generate_cameras(5, "generic", seed=seed)
        rng = np.random.default_rng(seed)
        triples = _triple_map(cams, rng)
        for quad in itertools.combinations(range(5), 4):
            v = evaluate_quadruple(quad, triples)
            assert v.accepted, v.reason
            assert v.fused_poses.shape == (4, 3, 4)


def test_corrupted_triple_always_rejected():
    accepted = 0
    for seed in range(50):
        cams = generate_cameras(4, "generic", seed=seed)
        rng = np.random.default_rng(seed)
        triples = _triple_map(cams, rng, corrupt=(1, 2, 3))
        v = evaluate_quadruple(QUAD, triples)
        accepted += v.accepted
        assert v.accepted == (v.rotation_heuristic <= ROTATION_THRESHOLD_DEG
                              and v.location_heuristic <= LOCATION_THRESHOLD)
    assert accepted == 0


def test_missing_triple_is_rejected_with_reason(quad_cams, rng):
    triples = _triple_map(quad_cams, rng)
    del triples[(0, 1, 3)]
    v = evaluate_quadruple(QUAD, triples)
    assert not v.accepted and "missing" in v.reason


def test_triples_found_under_any_ordering(quad_cams, rng):
    triples = {tuple(reversed(k)): v[::-1] for k, v in _triple_map(quad_cams, rng).items()}
    assert evaluate_quadruple(QUAD, triples).accepted


def test_degenerate_overlap_is_rejected(quad_cams, rng):
    triples = _triple_map(quad_cams, rng)
    triples[(1, 2, 3)] = np.zeros((3, 3, 4))
    v = evaluate_quadruple(QUAD, triples)
    assert not v.accepted and v.reason


def test_block_tensor_from_verdicts():
    cams = generate_cameras(5, "generic", seed=2)
    triples = _triple_map(cams, np.random.default_rng(2))
    verdicts = [evaluate_quadruple(q, triples) for q in itertools.combinations(range(5), 4)]
    bt = block_tensor_from_verdicts(5, verdicts)
    assert bt.block_count == 5 * 24
    norms = bt.block_norms()[bt.omega]
    np.testing.assert_allclose(norms[norms > 0], 1.0)


# --- pruning ----------------------------------------------------------------------------

def _dense(n):
    return ViewingHypergraph(n, set(itertools.combinations(range(n), 4)))


def test_densities_in_unit_interval():
    h = _dense(7)
    assert all(d == 1.0 for d in h.densities().values())
    sparse = ViewingHypergraph(7, {(0, 1, 2, 3)})
    assert all(0.0 <= d <= 1.0 for d in sparse.densities().values())


def test_dense_graph_unchanged():
    h = _dense(7)
    assert prune_low_density(h).vertices == h.vertices


def test_isolated_vertex_removed():
    h = ViewingHypergraph(8, set(itertools.combinations(range(7), 4)))
    out = prune_low_density(h)
    assert out.vertices == tuple(range(7))


def test_second_threshold_used_when_first_prunes_too_much():
    # 60 cameras; vertex v sits in 3% of its possible quadruples, so 0.05 removes
    # everything while 0.02 keeps all of them
    n = 60
    rng = np.random.default_rng(0)
    all_quads = list(itertools.combinations(range(n), 4))
    pick = rng.choice(len(all_quads), size=int(0.03 * len(all_quads)), replace=False)
    h = ViewingHypergraph(n, {all_quads[i] for i in pick})
    d = h.densities()
    assert max(d.values()) < 0.05 and min(d.values()) > 0.02
    out = prune_low_density(h, min_cameras=10)
    assert len(out.vertices) == n


def test_all_pruned_raises():
    h = ViewingHypergraph(10, {(0, 1, 2, 3)})
    with pytest.raises(PruningError):
        prune_low_density(h, min_cameras=5)


def test_thresholds_must_descend():
    with pytest.raises(ValueError):
        prune_low_density(_dense(5), thresholds=(0.01, 0.05))
