from math import comb

import numpy as np
import pytest

from quadsync.cycles import CycleVerdict
from quadsync.geometry import generate_cameras
from quadsync.io import (FormatError, read_block_tensor, read_cameras, read_key_values,
                         read_triples, write_block_tensor, write_cameras, write_triples,
                         write_verdicts)
from quadsync.multifocal import build_from_canonical, canonical_tuples


def test_cameras_round_trip_bit_exact(tmp_path, rng):
    cams = rng.standard_normal((5, 3, 4)) * 10.0 ** rng.integers(-8, 8, (5, 3, 4))
    path = tmp_path / "cams.txt"
    write_cameras(path, cams)
    np.testing.assert_array_equal(read_cameras(path), cams)


@pytest.mark.parametrize("order", [4, 3, 2])
@pytest.mark.parametrize("keep", [1.0, 0.5])
def test_block_tensor_round_trip_bit_exact(tmp_path, order, keep):
    rng = np.random.default_rng(order)
    cams = generate_cameras(6, "generic", seed=1)
    tuples = [t for t in canonical_tuples(6, order) if rng.random() < keep]
    bt = build_from_canonical(cams, tuples, order, noise_pct=2.0, rng=rng)
    path = tmp_path / "bt.txt"
    write_block_tensor(path, bt)
    back = read_block_tensor(path)
    np.testing.assert_array_equal(back.data, bt.data)
    np.testing.assert_array_equal(back.omega, bt.omega)
    # one block per symmetry orbit, plus the super-diagonal
    assert int(path.read_text().split()[2]) == len(tuples) + 6


def test_full_quadrifocal_file_stores_each_quadruple_once(tmp_path):
    cams = generate_cameras(7, "generic", seed=2)
    bt = build_from_canonical(cams, canonical_tuples(7, 4))
    path = tmp_path / "q.txt"
    write_block_tensor(path, bt)
    order, n, count = map(int, path.read_text().splitlines()[0].split())
    assert (order, n, count) == (4, 7, comb(7, 4) + 7)


def test_triples_round_trip(tmp_path, rng):
    triples = {(0, 1, 2): rng.standard_normal((3, 3, 4)), (3, 1, 2): rng.standard_normal((3, 3, 4))}
    path = tmp_path / "t.txt"
    write_triples(path, triples)
    back = read_triples(path)
    assert set(back) == set(triples)
    for k in triples:
        np.testing.assert_array_equal(back[k], triples[k])


def test_truncated_triple(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("0 1 2\n" + "1 2 3 4\n" * 5)
    with pytest.raises(FormatError, match="truncated"):
        read_triples(path)


def test_verdict_csv(tmp_path):
    path = tmp_path / "v.csv"
    write_verdicts(path, [CycleVerdict((0, 1, 2, 3), 0.5, 0.01, True),
                          CycleVerdict((0, 1, 2, 4), np.inf, np.inf, False, reason="missing")])
    lines = path.read_text().splitlines()
    assert lines[0] == "i,j,k,l,rotation_deg,location,accepted,reason"
    assert lines[1].startswith("0,1,2,3,0.5,0.01,1,")
    assert lines[2].endswith(",0,missing")


def test_key_values(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# header\nn = 10  # trailing\n\nscenario=collinear\n")
    assert read_key_values(path) == {"n": "10", "scenario": "collinear"}


@pytest.mark.parametrize("text,match", [
    ("n = 1\nn = 2\n", ":2: duplicate"),
    ("n = 1\njunk\n", ":2: expected 'key = value'"),
    (" = 3\n", ":1: empty key"),
])
def test_key_value_errors(tmp_path, text, match):
    path = tmp_path / "c.txt"
    path.write_text(text)
    with pytest.raises(FormatError, match=match):
        read_key_values(path)


@pytest.mark.parametrize("text,match", [
    ("2\n1 2 3 4\n", "unexpected end of file"),
    ("1\n1 2 3\n1 2 3 4\n1 2 3 4\n", ":2: expected 4 numbers, got 3"),
    ("1\n1 2 3 x\n1 2 3 4\n1 2 3 4\n", ":2: expected numbers"),
    ("1\n" + "1 2 3 4\n" * 4, ":5: trailing content"),
    ("one\n", ":1: expected integers"),
])
def test_camera_format_errors(tmp_path, text, match):
    path = tmp_path / "c.txt"
    path.write_text(text)
    with pytest.raises(FormatError, match=match):
        read_cameras(path)


@pytest.mark.parametrize("text,match", [
    ("5 4 0\n", "unsupported order"),
    ("2 3 1\n0 7\n1 2 3\n1 2 3\n1 2 3\n", "out of range"),
    ("2 3 1\n0 1\n1 2 3\n", "unexpected end of file"),
])
def test_block_tensor_format_errors(tmp_path, text, match):
    path = tmp_path / "b.txt"
    path.write_text(text)
    with pytest.raises(FormatError, match=match):
        read_block_tensor(path)
