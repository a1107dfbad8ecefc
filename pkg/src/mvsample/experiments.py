"""Matched-size scheme construction and evaluation runs used by sweeps."""
from __future__ import annotations

import itertools
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import partition as part
from .bundle import reduce, size_report
from .field import GridSpec, MultivariateField
from .posthoc import error_report
from .sampling import SamplePlan


def match_kdtree(
    fld: MultivariateField,
    target_count: int,
    kd_ps=(0.999, 0.9999, 0.99999, 0.999999),
    min_dim: int = 2,
) -> part.PartitionSet:
    """K-d partitioning whose leaf count is closest to ``target_count``.

    ``min_dim`` stays at the finest allowed extent so the PCA criterion, not
    the size floor, decides where to stop (a coarse floor with an unmet
    criterion would just reproduce a regular tiling). Scans ``q_max`` over
    ``1..d`` for each threshold in ``kd_ps``; ties go to the earlier threshold
    and then the smaller ``q_max``.
    """
    return _match_kdtree(fld, target_count, kd_ps, min_dim)[0]


def _match_kdtree(fld, target_count, kd_ps=(0.999, 0.9999, 0.99999, 0.999999), min_dim=2):
    best = None
    for kd_p in kd_ps:
        for q_max in range(1, fld.n_vars + 1):
            crit = part.KdCriterion(q_max, kd_p, min_dim)
            pset = part.partition_kdtree(fld, crit)
            key = abs(pset.n_partitions - target_count)
            if best is None or key < best[0]:
                best = (key, pset, crit)
            if pset.n_partitions <= target_count:
                break  # larger q_max only merges further
    return best[1], best[2]


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def blocks_for_count(grid: GridSpec, target_count: int, around: int) -> tuple[int, ...]:
    """Block dims within ``[around/2, 2*around]`` per axis whose tiling count is closest to ``target_count``.

    Ties prefer the most cubic block, then the lexicographically smallest.
    """
    span = range(max(1, around // 2), 2 * around + 1)
    best = None
    for dims in itertools.product(span, repeat=grid.ndim):
        if any(b > n for b, n in zip(dims, grid.dims)):
            continue
        count = math.prod(-(-n // b) for n, b in zip(grid.dims, dims))
        key = (abs(count - target_count), max(dims) - min(dims), dims)
        if best is None or key < best:
            best = key
    return best[2] if best else (around,) * grid.ndim


def matched_partitions(
    fld: MultivariateField,
    block: int,
    schemes=("regular", "kdtree", "slic"),
    slic_compactness: float | None = None,
    timings: dict | None = None,
) -> dict[str, part.PartitionSet]:
    """Partitions for each scheme at a common mean partition size.

    The k-d tree leaf count can only move in coarse steps, so it is matched
    first to the count of ``block``-wide cubes; regular blocks and SLIC are
    then sized to the k-d leaf count. Without the k-d scheme, regular uses
    ``block`` directly and SLIC matches its count.

    If ``timings`` is given it receives the seconds taken by each scheme's
    final construction (the k-d search over criteria is not counted).
    """
    timings = {} if timings is None else timings
    grid = fld.grid
    cubes, t_cubes = _timed(lambda: part.partition_regular(grid, (block,) * grid.ndim))
    out = {}
    target = cubes.n_partitions
    if "kdtree" in schemes:
        out["kdtree"], crit = _match_kdtree(fld, target)
        _, timings["kdtree"] = _timed(lambda: part.partition_kdtree(fld, crit))
        target = out["kdtree"].n_partitions
    if "regular" in schemes:
        if "kdtree" in schemes:
            dims = blocks_for_count(grid, target, block)
            out["regular"], timings["regular"] = _timed(lambda: part.partition_regular(grid, dims))
        else:
            out["regular"], timings["regular"] = cubes, t_cubes
            target = cubes.n_partitions
    if "slic" in schemes:
        params = part.SlicParams(target, compactness=slic_compactness)
        out["slic"], timings["slic"] = _timed(lambda: part.partition_slic(fld, params))
    return {k: out[k] for k in schemes}


def build_partition(
    fld: MultivariateField,
    scheme: str,
    block: int,
    slic_compactness: float | None = None,
) -> part.PartitionSet:
    """Partition ``fld`` with one scheme at the mean size of ``block``-wide cubes."""
    if scheme not in part.SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    regular = part.partition_regular(fld.grid, (block,) * fld.grid.ndim)
    if scheme == "regular":
        return regular
    if scheme == "slic":
        return part.partition_slic(fld, part.SlicParams(regular.n_partitions, compactness=slic_compactness))
    return match_kdtree(fld, regular.n_partitions)


@dataclass
class RunResult:
    scheme: str
    block: int
    rate: float
    algorithm: str
    n_partitions: int
    mean_partition_size: float
    reduced_bytes: int
    raw_bytes: int
    norm_mv_recon_error: float
    norm_mv_recon_error_sampled: float
    min_var_rmse: float
    max_var_rmse: float
    mean_q: float
    t_partition: float
    t_reduce: float


def plan_for(algorithm: str, rate: float, bins: int = 32, seed: int = 0) -> SamplePlan:
    if algorithm == "random":
        return SamplePlan(rate, 0.0, bins, seed)
    if algorithm == "feature":
        return SamplePlan(0.0, rate, bins, seed)
    if algorithm == "combined":
        return SamplePlan(rate / 2, rate / 2, bins, seed)
    raise ValueError(f"unknown sampling algorithm {algorithm!r}")


def _median_time(fn, repeats: int):
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return out, statistics.median(times)


def evaluate(
    fld: MultivariateField,
    scheme: str,
    block: int,
    p: float = 0.999,
    rate: float = 0.05,
    algorithm: str = "combined",
    seed: int = 0,
    precision: str = "f32",
    repeats: int = 1,
    workers: int = 1,
    slic_compactness: float | None = None,
) -> RunResult:
    pset, t_part = _median_time(lambda: build_partition(fld, scheme, block, slic_compactness), repeats)
    return evaluate_partition(fld, pset, block, p, rate, algorithm, seed, precision, repeats, workers, t_part)


def evaluate_partition(
    fld: MultivariateField,
    pset: part.PartitionSet,
    block: int,
    p: float = 0.999,
    rate: float = 0.05,
    algorithm: str = "combined",
    seed: int = 0,
    precision: str = "f32",
    repeats: int = 1,
    workers: int = 1,
    t_part: float = float("nan"),
) -> RunResult:
    """Reduce ``fld`` over an existing partitioning and score the result."""
    plan = plan_for(algorithm, rate, seed=seed)
    bundle, t_red = _median_time(lambda: reduce(fld, pset, p, plan, precision, workers=workers), repeats)
    err = error_report(bundle, fld)
    sizes = size_report(bundle)
    return RunResult(
        scheme=pset.scheme,
        block=block,
        rate=rate,
        algorithm=algorithm,
        n_partitions=pset.n_partitions,
        mean_partition_size=pset.mean_size(),
        reduced_bytes=sizes["reduced_bytes"],
        raw_bytes=sizes["raw_bytes"],
        norm_mv_recon_error=err.norm_mv_recon_error,
        norm_mv_recon_error_sampled=err.norm_mv_recon_error_sampled,
        min_var_rmse=err.min_var_rmse,
        max_var_rmse=err.max_var_rmse,
        mean_q=float(np.mean([pp.model.q for pp in bundle.parts])),
        t_partition=t_part,
        t_reduce=t_red,
    )
