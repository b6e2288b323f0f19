"""Synthetic experiment orchestration: configs, input generation, runs and results.

An experiment directory holds one ``seed-<s>`` folder per seed with the
generated inputs (``cameras.txt`` and the block tensors) and the per-seed
outputs, plus merged ``results-<command>.csv`` files at the top level.
"""
from __future__ import annotations

import csv
import dataclasses
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from .distributed import ClusterPlan, read_cluster_plan, run_distributed
from .geometry import apply_alignment, fit_frame_to_ground_truth, generate_cameras, pose_errors
from .io import (FormatError, ensure_dir, read_block_tensor, read_cameras, read_key_values,
                 write_block_tensor, write_cameras)
from .multifocal import build_from_canonical, canonical_tuples
from .sync_joint import JointConfig, run_joint
from .sync_quad import QuadSyncConfig, run_quadsync

__all__ = [
    "SCENARIOS",
    "RESULT_COLUMNS",
    "ExperimentConfig",
    "ResultRow",
    "load_config",
    "sample_tuples",
    "synthesize",
    "run_experiment",
    "write_results",
    "read_results",
    "thread_count",
]

SCENARIOS = ("collinear", "generic", "distributed", "subsample-sweep", "joint")
RESULT_COLUMNS = ("scenario", "n", "noise", "observed", "mean_et", "med_et", "mean_er",
                  "med_er", "time_s", "seed")
THREADS_ENV = "QUADSYNC_THREADS"
ENTITY_FILES = {4: "quadrifocal.txt", 3: "trifocal.txt", 2: "essential.txt"}


@dataclass
class ExperimentConfig:
    scenario: str = "collinear"
    n: int = 10
    noise_pct: float = 0.0
    observed_pct: float = 100.0
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "results"
    # camera layout; defaults to collinear for the collinear and distributed scenarios
    cameras: str | None = None
    # cluster plan file for the distributed scenario
    clusters: str | None = None
    # subsample sizes for the sweep; None means full updates
    subsample_ms: list[int | None] = field(default_factory=lambda: [20, 30, 50, 100, None])
    # write measured wall times; off gives byte-identical reruns
    record_timing: bool = True
    solver: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {', '.join(SCENARIOS)}")
        if int(self.n) < 4:
            raise ValueError("n must be at least 4")
        if not 0 < float(self.observed_pct) <= 100:
            raise ValueError("observed_pct must be in (0, 100]")
        if float(self.noise_pct) < 0:
            raise ValueError("noise_pct must be non-negative")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.cameras not in (None, "generic", "collinear"):
            raise ValueError("cameras must be generic or collinear")
        self.n = int(self.n)
        self.noise_pct = float(self.noise_pct)
        self.observed_pct = float(self.observed_pct)
        self.seeds = [int(s) for s in self.seeds]
        solver_type = JointConfig if self.scenario == "joint" else QuadSyncConfig
        known = {f.name: f.type for f in dataclasses.fields(solver_type)}
        for key in self.solver:
            if key not in known:
                raise ValueError(f"unknown solver option solver.{key}")

    @property
    def camera_mode(self) -> str:
        if self.cameras is not None:
            return self.cameras
        return "collinear" if self.scenario in ("collinear", "distributed") else "generic"


@dataclass(frozen=True)
class ResultRow:
    scenario: str
    n: int
    noise: float
    observed: float
    mean_et: float
    med_et: float
    mean_er: float
    med_er: float
    time_s: float
    seed: int

    def values(self) -> list[str]:
        out = []
        for name in RESULT_COLUMNS:
            v = getattr(self, name)
            out.append(repr(float(v)) if isinstance(v, float) else str(v))
        return out


# --- configuration ------------------------------------------------------------

def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_solver_value(value: str):
    v = value.strip()
    if v.lower() in ("none", ""):
        return None
    if v.lower() in ("true", "false"):
        return v.lower() == "true"
    try:
        return int(v)
    except ValueError:
        return float(v)


def _parse_ms(value: str) -> list[int | None]:
    out = []
    for tok in value.split(","):
        tok = tok.strip()
        out.append(None if tok == "full" else int(tok))
    return out


def load_config(path) -> ExperimentConfig:
    """Read a key-value config file; every key names an ``ExperimentConfig`` field.

    Solver overrides use ``solver.<option>`` keys.
    """
    raw = read_key_values(path)
    kwargs: dict = {"solver": {}}
    parsers = {
        "scenario": str,
        "n": int,
        "noise_pct": float,
        "observed_pct": float,
        "seeds": lambda v: [int(s) for s in v.split(",") if s.strip()],
        "out": str,
        "cameras": str,
        "clusters": str,
        "subsample_ms": _parse_ms,
        "record_timing": _parse_bool,
    }
    for key, value in raw.items():
        try:
            if key.startswith("solver."):
                kwargs["solver"][key[len("solver."):]] = _parse_solver_value(value)
            elif key in parsers:
                kwargs[key] = parsers[key](value)
            else:
                raise ValueError("unknown key")
        except ValueError as exc:
            raise FormatError(f"{path}: bad value for {key!r}: {exc}") from None
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def thread_count() -> int:
    """Worker count from the environment, default 1."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


# --- input generation -----------------------------------------------------------

def sample_tuples(n: int, order: int, observed_pct: float, rng) -> list[tuple[int, ...]]:
    """Uniform sample, without replacement, of the canonical tuples to a target percentage."""
    tuples = canonical_tuples(n, order)
    count = max(1, int(round(observed_pct / 100.0 * len(tuples))))
    if count >= len(tuples):
        return tuples
    picked = np.sort(rng.choice(len(tuples), count, replace=False))
    return [tuples[i] for i in picked]


def _seed_streams(seed: int):
    cam_ss, sample_ss, noise_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(cam_ss), np.random.default_rng(sample_ss),
            np.random.default_rng(noise_ss))


def seed_dir(config: ExperimentConfig, seed: int, out=None) -> Path:
    return Path(out or config.out) / f"seed-{seed}"


def synthesize(config: ExperimentConfig, seed: int, out=None) -> Path:
    """Write ground-truth cameras and the sampled noisy block tensors for one seed."""
    cam_rng, sample_rng, noise_rng = _seed_streams(seed)
    d = ensure_dir(seed_dir(config, seed, out))
    cams = generate_cameras(config.n, config.camera_mode, seed=cam_rng)
    write_cameras(d / "cameras.txt", cams)
    orders = (4, 3, 2) if config.scenario == "joint" else (4,)
    for order in orders:
        tuples = sample_tuples(config.n, order, config.observed_pct, sample_rng)
        bt = build_from_canonical(cams, tuples, order, config.noise_pct, noise_rng)
        write_block_tensor(d / ENTITY_FILES[order], bt)
    return d


# --- runs ----------------------------------------------------------------------

def _errors(est, gt) -> dict[str, float]:
    al = fit_frame_to_ground_truth(est, gt)
    return pose_errors(apply_alignment(est, al), gt).summary()


def _row(config, label, seed, est, gt, elapsed) -> ResultRow:
    errs = _errors(est, gt)
    t = float(elapsed) if config.record_timing else 0.0
    return ResultRow(label, config.n, config.noise_pct, config.observed_pct,
                     errs["mean_et"], errs["med_et"], errs["mean_er"], errs["med_er"], t, seed)


def _load(d: Path, name: str):
    path = d / name
    if not path.exists():
        raise FileNotFoundError(f"missing input {path}; run synth first")
    return read_block_tensor(path)


def _quad_config(config: ExperimentConfig, seed: int, subsample_m) -> QuadSyncConfig:
    opts = dict(config.solver)
    opts.setdefault("seed", seed)
    if subsample_m is not None:
        opts["subsample_m"] = subsample_m
    return QuadSyncConfig(**opts)


def _run_seed(command: str, config: ExperimentConfig, seed: int, out, subsample_m,
              plan: ClusterPlan | None, workers: int) -> list[ResultRow]:
    d = seed_dir(config, seed, out)
    gt_path = d / "cameras.txt"
    if not gt_path.exists():
        raise FileNotFoundError(f"missing input {gt_path}; run synth first")
    gt = read_cameras(gt_path)
    rows = []
    if command == "joint":
        ents = {o: _load(d, ENTITY_FILES[o]) if (d / ENTITY_FILES[o]).exists() else None
                for o in (4, 3, 2)}
        start = time.perf_counter()
        est, diag = run_joint(ents[4], ents[3], ents[2], JointConfig(**config.solver))
        rows.append(_row(config, "joint", seed, est, gt, time.perf_counter() - start))
        diag.to_csv(d / "diagnostics-joint.csv", config.record_timing)
    elif command == "distributed":
        q = _load(d, ENTITY_FILES[4])
        res = run_distributed(q, plan, _quad_config(config, seed, subsample_m), workers)
        rows.append(_row(config, "distributed", seed, res.cameras, gt, res.wall_time))
        for c, cl in enumerate(res.clusters):
            cl.diagnostics.to_csv(d / f"diagnostics-cluster{c}.csv", config.record_timing)
    else:
        q = _load(d, ENTITY_FILES[4])
        if config.scenario == "subsample-sweep" and subsample_m is None:
            sizes = config.subsample_ms
        else:
            sizes = [subsample_m]
        for m in sizes:
            start = time.perf_counter()
            est, diag = run_quadsync(q, _quad_config(config, seed, m))
            elapsed = time.perf_counter() - start
            if config.scenario == "subsample-sweep":
                # sweep rows report the time spent in camera factor updates
                label = f"subsample-sweep/m={'full' if m is None else m}"
                rows.append(_row(config, label, seed, est, gt, diag.c_update_time))
            else:
                rows.append(_row(config, config.scenario, seed, est, gt, elapsed))
            tag = "" if m is None else f"-m{m}"
            diag.to_csv(d / f"diagnostics-sync{tag}.csv", config.record_timing)
    write_results(d / f"rows-{command}.csv", rows)
    return rows


def run_experiment(command: str, config: ExperimentConfig, seeds=None, out=None,
                   subsample_m: int | None = None, clusters=None) -> Path:
    """Run ``command`` (``sync``, ``joint`` or ``distributed``) for every seed.

    Seeds run concurrently on ``QUADSYNC_THREADS`` workers; each writes its own
    rows, which are merged in seed order into ``results-<command>.csv``.
    """
    if command not in ("sync", "joint", "distributed"):
        raise ValueError(f"unknown command {command!r}")
    seeds = list(seeds) if seeds else config.seeds
    workers = thread_count()
    plan = None
    if command == "distributed":
        path = clusters or config.clusters
        if path is None:
            raise ValueError("distributed runs need a cluster plan (--clusters)")
        plan = read_cluster_plan(path)
        plan.validate(config.n)
    job = lambda s: _run_seed(command, config, s, out, subsample_m, plan, 1)  # noqa: E731
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(job, seeds))
    else:
        per_seed = [job(s) for s in seeds]
    target = Path(out or config.out) / f"results-{command}.csv"
    write_results(target, [r for rows in per_seed for r in rows])
    return target


# --- result files ---------------------------------------------------------------

def write_results(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow(r.values())


def read_results(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RESULT_COLUMNS:
            raise FormatError(f"{path}:1: expected header {','.join(RESULT_COLUMNS)}")
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != len(RESULT_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(RESULT_COLUMNS)} fields")
            try:
                row = ResultRow(rec[0], int(rec[1]), float(rec[2]), float(rec[3]),
                                *(float(x) for x in rec[4:9]), int(rec[9]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            rows.append(row)
    return rows
