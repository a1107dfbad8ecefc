"""Local principal component models.

Each model stores the partition mean ``mu``, the full eigenbasis ``c_full``
(one unit-norm component per *row*, sorted by decreasing variance), the
eigenvalues ``ev`` and the retained component count ``q``. Data relate to
the model through::

    w     = (x - mu) @ c_q.T
    x_hat = w @ c_q + mu

where ``c_q = c_full[:q]``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class LocalPCAModel:
    mu: np.ndarray
    c_full: np.ndarray
    ev: np.ndarray
    q: int
    n_points: int

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    @property
    def c_q(self) -> np.ndarray:
        return self.c_full[: self.q]

    @property
    def total_variance(self) -> float:
        return float(np.sum(self.ev, dtype=np.float64))

    def with_q(self, q: int) -> "LocalPCAModel":
        if not 1 <= q <= self.d:
            raise ValueError(f"q={q} outside 1..{self.d}")
        return replace(self, q=int(q))

    def astype(self, dtype) -> "LocalPCAModel":
        return replace(
            self,
            mu=self.mu.astype(dtype),
            c_full=self.c_full.astype(dtype),
            ev=self.ev.astype(dtype),
        )

    def covariance(self) -> np.ndarray:
        """Covariance rebuilt from the eigenpairs.

        The textbook form is ``V diag(ev) V^-1`` with eigenvectors as columns;
        components are stored as rows here and the basis is orthonormal, so
        the inverse is a transpose.
        """
        c = self.c_full.astype(np.float64)
        return c.T @ (self.ev.astype(np.float64)[:, None] * c)


def _canonical_signs(rows: np.ndarray) -> np.ndarray:
    # flip each row so its largest-magnitude entry (lowest index on ties) is positive
    mag = np.abs(rows)
    near_max = mag >= mag.max(axis=1, keepdims=True) - 1e-12
    lead = np.argmax(near_max, axis=1)
    signs = np.where(rows[np.arange(rows.shape[0]), lead] < 0, -1.0, 1.0)
    return rows * signs[:, None]


def fit(x) -> LocalPCAModel:
    """Fit a PCA model to an ``(n, d)`` matrix; the returned model keeps all ``d`` components."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"fit needs an (n >= 1, d >= 1) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("fit input contains non-finite values")
    n, d = x.shape
    if n == 1 or np.all(x == x[0]):
        # constant rows: the mean is exact and there is no variance to rotate
        return LocalPCAModel(x[0].copy(), np.eye(d), np.zeros(d), d, n)
    mu = x.mean(axis=0)
    xc = x - mu

    cov = (xc.T @ xc) / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1]
    ev = np.maximum(vals[order], 0.0)
    c_full = _canonical_signs(vecs[:, order].T)
    return LocalPCAModel(mu, np.ascontiguousarray(c_full), ev, d, n)


def explained_variance_ratio(model: LocalPCAModel, q: int | None = None) -> float:
    """Fraction of total variance captured by the leading ``q`` components."""
    q = model.q if q is None else q
    if not 1 <= q <= model.d:
        raise ValueError(f"q={q} outside 1..{model.d}")
    ev = model.ev.astype(np.float64)
    total = ev.sum()
    if total <= 0:
        return 1.0
    return float(min(ev[:q].sum() / total, 1.0))


def select_q(model: LocalPCAModel, variance_target: float) -> int:
    """Smallest component count whose cumulative explained variance reaches ``variance_target``."""
    if not 0 < variance_target <= 1:
        raise ValueError(f"variance target must be in (0, 1], got {variance_target}")
    ev = model.ev.astype(np.float64)
    total = ev.sum()
    if total <= 0:
        return 1
    if variance_target >= 1.0:
        # roundoff-level eigenvalues cannot be told apart from real ones
        return model.d
    # compare the discarded tail directly instead of 1 - cumulative ratio so
    # small but genuine variances are not lost to cancellation near p = 1
    tail = np.append(np.cumsum(ev[::-1])[::-1][1:], 0.0)
    slack = 16 * model.d * np.finfo(np.float64).eps * total
    hit = np.flatnonzero(tail <= (1.0 - variance_target) * total + slack)
    return int(hit[0]) + 1


def _check_cols(x: np.ndarray, want: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != want:
        raise ValueError(f"{what} needs {want} columns, got shape {x.shape}")
    return x


def project(model: LocalPCAModel, x, q: int | None = None) -> np.ndarray:
    """Coordinates of ``x`` on the leading ``q`` components (default ``model.q``)."""
    q = model.q if q is None else q
    x = _check_cols(x, model.d, "project")
    c = model.c_full[:q].astype(np.float64)
    return (x - model.mu.astype(np.float64)) @ c.T


def reconstruct(model: LocalPCAModel, w) -> np.ndarray:
    """Map PC-space coordinates back to variable space: ``w @ c_q + mu``."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    q = w.shape[1]
    if w.ndim != 2 or q != model.q:
        raise ValueError(f"reconstruct needs {model.q} columns, got shape {w.shape}")
    return w @ model.c_full[:q].astype(np.float64) + model.mu.astype(np.float64)


def normalized_residual(x, model: LocalPCAModel, q: int | None = None) -> float:
    """``||x - x_hat||^2 / ||x - mu||^2`` for a ``q``-component reconstruction.

    The denominator is the centered norm, which makes this the exact
    complement of :func:`explained_variance_ratio` on the fitted data.
    Returns 0 when ``x`` coincides with the mean.
    """
    q = model.q if q is None else q
    x = _check_cols(x, model.d, "normalized_residual")
    xc = x - model.mu.astype(np.float64)
    denom = float(np.sum(xc * xc))
    if denom <= 0:
        return 0.0
    c = model.c_full[:q].astype(np.float64)
    resid = xc - (xc @ c.T) @ c
    return float(np.sum(resid * resid) / denom)
