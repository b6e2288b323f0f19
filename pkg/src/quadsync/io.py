"""Plain-text interchange formats.

Every float is written with ``repr`` so files round-trip bit-exactly.

Cameras::

    n
    <3 lines of 4 numbers per camera>

Block tensors (only one block per symmetry orbit is stored)::

    order n count
    i j k l
    <3**(order-1) lines of 3 numbers>
    ...

Camera triples, for the cycle checks::

    i j k
    <9 lines of 4 numbers: the three cameras>
    ...
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .multifocal import SYMMETRIES, BlockTensor, block_tensor_from_blocks

__all__ = [
    "FormatError",
    "write_cameras",
    "read_cameras",
    "write_block_tensor",
    "read_block_tensor",
    "write_triples",
    "read_triples",
    "write_verdicts",
    "read_key_values",
]


class FormatError(ValueError):
    """A file does not follow its format; the message names the line."""


def _fmt(row) -> str:
    return " ".join(repr(float(x)) for x in row)


def _lines(path):
    """Non-empty, comment-stripped lines with their 1-based numbers."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _floats(path, lineno, line, count) -> list[float]:
    try:
        vals = [float(x) for x in line.split()]
    except ValueError:
        raise FormatError(f"{path}:{lineno}: expected numbers") from None
    if len(vals) != count:
        raise FormatError(f"{path}:{lineno}: expected {count} numbers, got {len(vals)}")
    return vals


def _ints(path, lineno, line, count) -> list[int]:
    try:
        vals = [int(x) for x in line.split()]
    except ValueError:
        raise FormatError(f"{path}:{lineno}: expected integers") from None
    if len(vals) != count:
        raise FormatError(f"{path}:{lineno}: expected {count} integers, got {len(vals)}")
    return vals


class _Reader:
    def __init__(self, path):
        self.path = path
        self.it = _lines(path)

    def next(self, what: str):
        try:
            return next(self.it)
        except StopIteration:
            raise FormatError(f"{self.path}: unexpected end of file, expected {what}") from None

    def floats(self, count: int) -> list[float]:
        lineno, line = self.next("numbers")
        return _floats(self.path, lineno, line, count)

    def ints(self, count: int) -> list[int]:
        lineno, line = self.next("indices")
        return _ints(self.path, lineno, line, count)

    def done(self) -> None:
        for lineno, _ in self.it:
            raise FormatError(f"{self.path}:{lineno}: trailing content")


# --- cameras ----------------------------------------------------------------

def write_cameras(path, cams: np.ndarray) -> None:
    cams = np.asarray(cams, dtype=float).reshape(-1, 3, 4)
    with open(path, "w") as fh:
        fh.write(f"{len(cams)}\n")
        for p in cams:
            for row in p:
                fh.write(_fmt(row) + "\n")


def read_cameras(path) -> np.ndarray:
    r = _Reader(path)
    (n,) = r.ints(1)
    cams = np.array([[r.floats(4) for _ in range(3)] for _ in range(n)]).reshape(n, 3, 4)
    r.done()
    return cams


# --- block tensors ----------------------------------------------------------

def _orbit_representatives(omega: np.ndarray) -> list[tuple[int, ...]]:
    """Observed indices that are lexicographically smallest in their symmetry orbit."""
    perms = [p for p, _ in SYMMETRIES[omega.ndim]]
    reps = []
    for idx in map(tuple, np.argwhere(omega)):
        if all(tuple(idx[i] for i in p) >= idx for p in perms):
            reps.append(tuple(int(i) for i in idx))
    return reps


def write_block_tensor(path, bt: BlockTensor) -> None:
    """Write one block per symmetry orbit of the observed mask.

    Partner blocks are regenerated on reading, so ``bt`` must already be
    consistent under the entity's index symmetries (as all builders ensure).
    """
    reps = _orbit_representatives(bt.omega)
    k = bt.order
    with open(path, "w") as fh:
        fh.write(f"{k} {bt.n} {len(reps)}\n")
        for idx in reps:
            fh.write(" ".join(map(str, idx)) + "\n")
            for row in bt.block(idx).reshape(-1, 3):
                fh.write(_fmt(row) + "\n")


def read_block_tensor(path) -> BlockTensor:
    r = _Reader(path)
    order, n, count = r.ints(3)
    if order not in (2, 3, 4):
        raise FormatError(f"{path}:1: unsupported order {order}")
    tuples, blocks, diag = [], [], []
    for _ in range(count):
        idx = tuple(r.ints(order))
        if not all(0 <= i < n for i in idx):
            raise FormatError(f"{path}: block index {idx} out of range for n={n}")
        blk = np.array([r.floats(3) for _ in range(3 ** (order - 1))]).reshape((3,) * order)
        if len(set(idx)) == 1:
            diag.append((idx, blk))
        else:
            tuples.append(idx)
            blocks.append(blk)
    r.done()
    bt = block_tensor_from_blocks(n, tuples, blocks, order)
    view = bt.view()
    for idx, blk in diag:
        sl = []
        for i in idx:
            sl += [i, slice(None)]
        view[tuple(sl)] = blk
    return bt


# --- camera triples and verdicts ---------------------------------------------

def write_triples(path, triples: dict) -> None:
    with open(path, "w") as fh:
        for key in sorted(triples):
            fh.write(" ".join(str(int(i)) for i in key) + "\n")
            for row in np.asarray(triples[key], dtype=float).reshape(9, 4):
                fh.write(_fmt(row) + "\n")


def read_triples(path) -> dict:
    out = {}
    it = _lines(path)
    for lineno, line in it:
        key = tuple(_ints(path, lineno, line, 3))
        rows = []
        for _ in range(9):
            try:
                ln, ll = next(it)
            except StopIteration:
                raise FormatError(f"{path}: triple {key} is truncated") from None
            rows.append(_floats(path, ln, ll, 4))
        out[key] = np.array(rows).reshape(3, 3, 4)
    return out


def write_verdicts(path, verdicts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "k", "l", "rotation_deg", "location", "accepted", "reason"])
        for v in verdicts:
            w.writerow([*v.quadruple, repr(float(v.rotation_heuristic)),
                        repr(float(v.location_heuristic)), int(v.accepted), v.reason])


# --- key-value configuration --------------------------------------------------

def read_key_values(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Duplicate keys are an error."""
    out: dict[str, str] = {}
    for lineno, line in _lines(path):
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"{path}:{lineno}: empty key")
        if key in out:
            raise FormatError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
