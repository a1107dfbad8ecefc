"""Analyses that run on a reduced bundle: sample reconstruction, error
metrics, multivariate queries and per-partition correlation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import pca
from .bundle import ReducedBundle
from .field import MultivariateField, ScalarField


def _model64(model: pca.LocalPCAModel) -> pca.LocalPCAModel:
    return model.astype(np.float64)


def _scales(bundle: ReducedBundle) -> np.ndarray:
    return np.ones(bundle.d) if bundle.scales is None else bundle.scales


@dataclass(frozen=True)
class SampleReconstruction:
    indices: np.ndarray
    partition_ids: np.ndarray
    values: np.ndarray  # (n_samples, d) in original units

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(i): v for i, v in zip(self.indices, self.values)}


def reconstruct_samples(bundle: ReducedBundle, partitions: Iterable[int] | None = None) -> SampleReconstruction:
    """Rebuild the full variable vector of every stored sample."""
    pids = range(len(bundle.parts)) if partitions is None else sorted(set(int(p) for p in partitions))
    scales = _scales(bundle)
    idx, owner, vals = [], [], []
    for pid in pids:
        part = bundle.parts[pid]
        idx.append(part.sample_indices)
        owner.append(np.full(part.sample_indices.size, pid, dtype=np.int64))
        vals.append(pca.reconstruct(_model64(part.model), part.w_s) * scales)
    if not idx:
        return SampleReconstruction(np.empty(0, np.int64), np.empty(0, np.int64), np.empty((0, bundle.d)))
    return SampleReconstruction(np.concatenate(idx), np.concatenate(owner), np.vstack(vals))


@dataclass(frozen=True)
class ErrorReport:
    norm_mv_recon_error: float
    norm_mv_recon_error_sampled: float
    var_rmse: np.ndarray
    degenerate_vars: tuple[str, ...]
    partition_errors: np.ndarray

    @property
    def min_var_rmse(self) -> float:
        return float(self.var_rmse.min())

    @property
    def max_var_rmse(self) -> float:
        return float(self.var_rmse.max())


def error_report(bundle: ReducedBundle, original: MultivariateField) -> ErrorReport:
    """Compare a bundle against the field it was reduced from.

    ``norm_mv_recon_error`` averages ``||X - X_hat||^2 / ||X - mu||^2`` over
    partitions using every point of each partition, the quantity bounded by
    ``1 - p``. ``norm_mv_recon_error_sampled`` is the same average restricted
    to the stored samples reconstructed from ``w_s``. Per-variable RMSE is
    measured on the stored samples in original units and divided by each
    variable's global range; zero-range variables report 0 and are listed in
    ``degenerate_vars``. Errors are measured in the space the models were
    fitted in, i.e. standardized units when the bundle was standardized.
    """
    if original.grid != bundle.grid or original.n_vars != bundle.d:
        raise ValueError("original field does not match the bundle grid/variables")
    scales = _scales(bundle)
    data = np.asarray(original.data, dtype=np.float64)
    work = data / scales
    full_err = np.empty(len(bundle.parts))
    sampled = []
    for pid, idx in enumerate(bundle.pset.point_indices()):
        part = bundle.parts[pid]
        model = _model64(part.model)
        full_err[pid] = pca.normalized_residual(work[idx], model)
        if part.sample_indices.size:
            xs = work[part.sample_indices]
            resid = xs - pca.reconstruct(model, part.w_s)
            centered = xs - model.mu
            denom = float(np.sum(centered * centered))
            sampled.append(float(np.sum(resid * resid)) / denom if denom > 0 else 0.0)

    rec = reconstruct_samples(bundle)
    diff = rec.values - data[rec.indices]
    rmse = np.sqrt(np.mean(diff * diff, axis=0)) if rec.indices.size else np.zeros(bundle.d)
    rng = data.max(axis=0) - data.min(axis=0)
    degenerate = rng <= 0
    var_rmse = np.where(degenerate, 0.0, rmse / np.where(degenerate, 1.0, rng))
    return ErrorReport(
        norm_mv_recon_error=float(full_err.mean()),
        norm_mv_recon_error_sampled=float(np.mean(sampled)) if sampled else 0.0,
        var_rmse=var_rmse,
        degenerate_vars=tuple(n for n, g in zip(bundle.var_names, degenerate) if g),
        partition_errors=full_err,
    )


# ---------------------------------------------------------------------------
# queries

@dataclass(frozen=True)
class QueryResult:
    indices: np.ndarray
    partition_ids: np.ndarray
    distances: np.ndarray
    bounds: tuple[float, float]

    @property
    def normalized(self) -> np.ndarray:
        lo, hi = self.bounds
        if hi <= lo:
            return np.zeros_like(self.distances)
        return (self.distances - lo) / (hi - lo)


def query_vector(bundle: ReducedBundle, values: Mapping[str, float], pid: int) -> np.ndarray:
    """Full query vector for one partition in the model's working units.

    Variables not named in ``values`` take the partition mean, so they add
    nothing once centered.
    """
    model = bundle.parts[pid].model
    qv = model.mu.astype(np.float64).copy()
    scales = _scales(bundle)
    for name, v in values.items():
        j = bundle.var_index(name)
        qv[j] = float(v) / scales[j]
    return qv


def query(bundle: ReducedBundle, values: Mapping[str, float]) -> QueryResult:
    """Distance from a multivariate query to every stored sample, in PC space."""
    if not values:
        raise ValueError("query needs at least one variable")
    for name in values:
        bundle.var_index(name)
    idx, owner, dist = [], [], []
    for pid, part in enumerate(bundle.parts):
        if part.sample_indices.size == 0:
            continue
        model = _model64(part.model)
        w_q = pca.project(model, query_vector(bundle, values, pid))
        delta = part.w_s.astype(np.float64) - w_q
        idx.append(part.sample_indices)
        owner.append(np.full(part.sample_indices.size, pid, dtype=np.int64))
        dist.append(np.sqrt(np.sum(delta * delta, axis=1)))
    distances = np.concatenate(dist)
    return QueryResult(
        np.concatenate(idx),
        np.concatenate(owner),
        distances,
        (float(distances.min()), float(distances.max())),
    )


def parse_query(text: str) -> dict[str, float]:
    """Parse ``"pressure=-1000,temperature=0"`` into a mapping."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, sep, value = item.partition("=")
        if not sep or not name.strip():
            raise ValueError(f"malformed query term {item!r}; expected name=value")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise ValueError(f"malformed query value in {item!r}") from None
    if not out:
        raise ValueError("empty query")
    return out


def query_to_csv(result: QueryResult, bundle: ReducedBundle, path) -> None:
    coords = bundle.grid.coords()[result.indices]
    axes = "xyz"[: bundle.grid.ndim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", *axes, "partition", "distance", "normalized"])
        for row, c, pid, dv, nv in zip(result.indices, coords, result.partition_ids, result.distances, result.normalized):
            w.writerow([int(row), *map(int, c), int(pid), repr(float(dv)), repr(float(nv))])


def sample_scalar(bundle: ReducedBundle, indices: np.ndarray, values: np.ndarray) -> tuple[ScalarField, np.ndarray]:
    """Scatter per-sample values onto the grid; returns the field and a sample mask."""
    full = np.zeros(bundle.grid.n_points)
    mask = np.zeros(bundle.grid.n_points, dtype=bool)
    full[indices] = values
    mask[indices] = True
    return ScalarField(bundle.grid, full), mask


# ---------------------------------------------------------------------------
# correlation

@dataclass(frozen=True)
class CorrelationReport:
    var_names: tuple[str, ...]
    cov: np.ndarray  # (P, d, d)
    cor: np.ma.MaskedArray  # (P, d, d), masked where a variable has zero variance

    def pair(self, var_i: str, var_j: str) -> np.ma.MaskedArray:
        i, j = self.var_names.index(var_i), self.var_names.index(var_j)
        return self.cor[:, i, j]

    def pair_field(self, bundle: ReducedBundle, var_i: str, var_j: str) -> tuple[ScalarField, np.ndarray]:
        """Per-point map of a pairwise correlation and the mask of defined points."""
        per_part = self.pair(var_i, var_j)
        defined = ~np.ma.getmaskarray(per_part)
        vals = np.ma.filled(per_part, 0.0)[bundle.labels]
        return ScalarField(bundle.grid, vals), defined[bundle.labels]


def covariance_from_model(model: pca.LocalPCAModel, scales: np.ndarray | None = None) -> np.ndarray:
    cov = model.covariance()
    if scales is not None:
        cov = cov * np.outer(scales, scales)
    return 0.5 * (cov + cov.T)


def correlation_from_cov(cov: np.ndarray, var_floor: float = 0.0) -> np.ma.MaskedArray:
    """Pearson correlation ``D^-1 cov D^-1`` with undefined rows/columns masked."""
    var = np.diag(cov).copy()
    ok = var > var_floor
    sd = np.sqrt(np.where(ok, var, 1.0))
    cor = cov / np.outer(sd, sd)
    cor = np.clip(0.5 * (cor + cor.T), -1.0, 1.0)
    np.fill_diagonal(cor, 1.0)
    mask = ~np.outer(ok, ok)
    return np.ma.MaskedArray(np.where(mask, 0.0, cor), mask=mask)


def correlation(bundle: ReducedBundle, var_i: str | None = None, var_j: str | None = None) -> CorrelationReport:
    """Per-partition covariance and correlation rebuilt from stored eigenpairs.

    If both ``var_i`` and ``var_j`` are given they are validated up front so
    an unknown name fails before any work is done; use
    :meth:`CorrelationReport.pair` to slice.
    """
    for name in (var_i, var_j):
        if name is not None:
            bundle.var_index(name)
    eps = np.finfo(np.float32 if bundle.precision == "f32" else np.float64).eps
    covs, cors = [], []
    for part in bundle.parts:
        cov = covariance_from_model(part.model, bundle.scales)
        floor = (100 * eps) ** 2 * float(np.max(np.diag(cov), initial=0.0))
        covs.append(cov)
        cors.append(correlation_from_cov(cov, floor))
    cor = np.ma.stack(cors) if cors else np.ma.empty((0, bundle.d, bundle.d))
    return CorrelationReport(bundle.var_names, np.stack(covs), cor)


def correlation_to_csv(report: CorrelationReport, path, var_i: str | None = None, var_j: str | None = None) -> None:
    names = report.var_names
    pairs = (
        [(names.index(var_i), names.index(var_j))]
        if var_i is not None and var_j is not None
        else [(i, j) for i in range(len(names)) for j in range(i + 1, len(names))]
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["partition", "var_i", "var_j", "correlation", "defined"])
        for pid in range(report.cor.shape[0]):
            for i, j in pairs:
                defined = not np.ma.getmaskarray(report.cor)[pid, i, j]
                value = repr(float(report.cor.data[pid, i, j])) if defined else ""
                w.writerow([pid, names[i], names[j], value, int(defined)])
