"""Spatial domain decomposition.

Three schemes are provided:

* ``regular``: fixed-size axis-aligned blocks.
* ``kdtree``: top-down median splits that stop once a node's local PCA
  needs at most ``q_max`` components for the variance target.
* ``slic``: superpixel clustering of the global first principal component
  field.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from . import pca
from .field import GridSpec, MultivariateField, ScalarField, _readonly

log = logging.getLogger(__name__)

SCHEMES = ("regular", "kdtree", "slic")


@dataclass(frozen=True)
class Partition:
    id: int
    point_count: int
    # (lo, hi) per grid axis, hi exclusive; None for slic
    box: tuple[tuple[int, int], ...] | None = None


@dataclass(frozen=True)
class PartitionSet:
    grid: GridSpec
    labels: np.ndarray
    scheme: str
    partitions: tuple[Partition, ...]
    block_dims: tuple[int, ...] | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (self.grid.n_points,):
            raise ValueError(f"labels must have length {self.grid.n_points}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        object.__setattr__(self, "labels", _readonly(labels))

    @property
    def n_partitions(self) -> int:
        return len(self.partitions)

    def point_indices(self) -> list[np.ndarray]:
        """Sorted global point indices per partition id."""
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(np.bincount(self.labels, minlength=self.n_partitions))
        return np.split(order, bounds[:-1])

    def mean_size(self) -> float:
        return self.grid.n_points / self.n_partitions


@dataclass(frozen=True)
class KdCriterion:
    q_max: int
    p: float = 0.99
    min_dim: int = 4

    def __post_init__(self):
        if self.q_max < 1:
            raise ValueError("q_max must be >= 1")
        if not 0 < self.p <= 1:
            raise ValueError("p must be in (0, 1]")
        if self.min_dim < 2:
            raise ValueError("min_dim must be >= 2")


@dataclass(frozen=True)
class SlicParams:
    n_superpixels: int
    compactness: float | None = None  # None: std of the first-PC values
    max_iters: int = 10
    enforce_connectivity: bool = True

    def __post_init__(self):
        if self.n_superpixels < 1:
            raise ValueError("n_superpixels must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.compactness is not None and self.compactness < 0:
            raise ValueError("compactness must be >= 0")


def _box_labels(grid: GridSpec, boxes) -> np.ndarray:
    vol = np.empty(grid.shape, dtype=np.int64)
    for pid, box in enumerate(boxes):
        vol[_box_slices(box)] = pid
    return vol.ravel()


def _box_slices(box) -> tuple[slice, ...]:
    # numpy order is (z, y, x)
    return tuple(slice(lo, hi) for lo, hi in reversed(box))


def _from_boxes(grid, boxes, scheme, block_dims=None) -> PartitionSet:
    parts = tuple(
        Partition(i, math.prod(hi - lo for lo, hi in box), tuple(box)) for i, box in enumerate(boxes)
    )
    return PartitionSet(grid, _box_labels(grid, boxes), scheme, parts, block_dims)


def regular_boxes(grid: GridSpec, block_dims) -> list[tuple[tuple[int, int], ...]]:
    """Block boxes in label order (x block index fastest)."""
    counts = [-(-n // b) for n, b in zip(grid.dims, block_dims)]
    boxes = []
    for flat in range(math.prod(counts)):
        box = []
        for n, b, c in zip(grid.dims, block_dims, counts):
            i = flat % c
            flat //= c
            box.append((i * b, min((i + 1) * b, n)))
        boxes.append(tuple(box))
    return boxes


def partition_regular(grid, block_dims) -> PartitionSet:
    """Tile the grid with equal blocks; edge blocks are truncated.

    Block labels follow the point ordering: the x block index varies fastest.
    """
    grid = grid if isinstance(grid, GridSpec) else GridSpec(tuple(grid))
    block_dims = tuple(int(b) for b in block_dims)
    if len(block_dims) != grid.ndim:
        raise ValueError(f"block_dims {list(block_dims)} do not match a {grid.ndim}D grid")
    if any(b < 1 for b in block_dims):
        raise ValueError("block dims must be >= 1")
    if any(b > n for b, n in zip(block_dims, grid.dims)):
        warnings.warn(f"block dims {list(block_dims)} exceed grid {list(grid.dims)}; clamping", stacklevel=2)
        block_dims = tuple(min(b, n) for b, n in zip(block_dims, grid.dims))
    return _from_boxes(grid, regular_boxes(grid, block_dims), "regular", block_dims)


def _box_data(vol: np.ndarray, box) -> np.ndarray:
    return vol[_box_slices(box)].reshape(-1, vol.shape[-1])


def partition_kdtree(fld: MultivariateField, crit: KdCriterion) -> PartitionSet:
    """Recursive median split along the longest axis until the PCA criterion holds.

    A node becomes a leaf when ``select_q(p) <= q_max`` on its points, or when
    its longest extent is below ``2 * min_dim`` (no split keeps both halves at
    ``min_dim``). Leaves are numbered in depth-first, lower-half-first order.
    """
    grid = fld.grid
    if crit.q_max > fld.n_vars:
        raise ValueError(f"q_max={crit.q_max} exceeds d={fld.n_vars}")
    vol = fld.data.reshape(*grid.shape, fld.n_vars)
    leaves = []
    stack = [tuple((0, n) for n in grid.dims)]
    while stack:
        box = stack.pop()
        extents = [hi - lo for lo, hi in box]
        axis = int(np.argmax(extents))  # ties -> lowest axis
        if extents[axis] < 2 * crit.min_dim:
            leaves.append(box)
            continue
        model = pca.fit(_box_data(vol, box))
        if pca.select_q(model, crit.p) <= crit.q_max:
            leaves.append(box)
            continue
        lo, hi = box[axis]
        mid = lo + (hi - lo) // 2
        left = box[:axis] + ((lo, mid),) + box[axis + 1:]
        right = box[:axis] + ((mid, hi),) + box[axis + 1:]
        stack.append(right)
        stack.append(left)
    return _from_boxes(grid, leaves, "kdtree")


# ---------------------------------------------------------------------------
# SLIC

def first_pc_field(fld: MultivariateField) -> ScalarField:
    """Projection of every point on the leading component of a global PCA."""
    model = pca.fit(fld.data).with_q(1)
    return ScalarField(fld.grid, pca.project(model, fld.data)[:, 0])


def _seed_centers(grid: GridSpec, n_superpixels: int) -> tuple[np.ndarray, float]:
    step = (grid.n_points / n_superpixels) ** (1.0 / grid.ndim)
    per_axis = [max(1, min(n, int(round(n / step)))) for n in grid.dims]
    axes = [(np.arange(k) + 0.5) * n / k - 0.5 for n, k in zip(grid.dims, per_axis)]
    mesh = np.meshgrid(*axes, indexing="ij")
    # x fastest in the flattened seed order
    centers = np.stack([m.transpose(*reversed(range(grid.ndim))).ravel() for m in mesh], axis=1)
    return centers, step


def _slic_energy(coords, values, centers, cvals, labels, spatial_w2) -> float:
    dv = values - cvals[labels]
    ds = coords - centers[labels]
    return float(np.sum(dv * dv + spatial_w2 * np.sum(ds * ds, axis=1)))


def slic_labels(sf: ScalarField, params: SlicParams, history: list | None = None) -> np.ndarray:
    """Run SLIC on a scalar field; returns raw (possibly sparse) cluster labels.

    The clustering energy is the sum over points of ``D^2`` with
    ``D^2 = dv^2 + (m / S)^2 ds^2``. Each point keeps its current center as a
    candidate during assignment, so the energy never increases between full
    iterations. If ``history`` is given, the energy after each assignment and
    update step is appended to it.
    """
    grid = sf.grid
    if params.n_superpixels > grid.n_points:
        raise ValueError(f"n_superpixels={params.n_superpixels} exceeds {grid.n_points} points")
    values = sf.values
    coords = grid.coords().astype(np.float64)
    centers, step = _seed_centers(grid, params.n_superpixels)
    m = params.compactness if params.compactness is not None else float(values.std())
    spatial_w2 = (m / step) ** 2
    shape = grid.shape
    val_vol = values.reshape(shape)
    coord_vols = [coords[:, a].reshape(shape) for a in range(grid.ndim)]

    # initial assignment: nearest seed in space
    from scipy.spatial import cKDTree

    _, labels = cKDTree(centers).query(coords)
    labels = np.asarray(labels, dtype=np.int64)
    k = centers.shape[0]
    cvals = np.bincount(labels, weights=values, minlength=k) / np.maximum(np.bincount(labels, minlength=k), 1)

    radius = step  # 2S x 2S search window
    for it in range(params.max_iters):
        # assignment, seeded with the distance to the current center
        best = (values - cvals[labels]) ** 2 + spatial_w2 * np.sum((coords - centers[labels]) ** 2, axis=1)
        best_vol = best.reshape(shape)
        lab_vol = labels.reshape(shape).copy()
        for c in range(k):
            sl = tuple(
                slice(max(0, int(math.floor(centers[c, a] - radius))), min(grid.dims[a], int(math.ceil(centers[c, a] + radius)) + 1))
                for a in reversed(range(grid.ndim))
            )
            dv = val_vol[sl] - cvals[c]
            dist = dv * dv
            for a in range(grid.ndim):
                ds = coord_vols[a][sl] - centers[c, a]
                dist = dist + spatial_w2 * ds * ds
            win_best = best_vol[sl]
            better = dist < win_best
            win_best[better] = dist[better]
            lab_vol[sl][better] = c
        new_labels = lab_vol.ravel()
        if history is not None:
            history.append(_slic_energy(coords, values, centers, cvals, new_labels, spatial_w2))
        changed = np.any(new_labels != labels)
        labels = new_labels

        counts = np.bincount(labels, minlength=k)
        live = counts > 0
        for a in range(grid.ndim):
            sums = np.bincount(labels, weights=coords[:, a], minlength=k)
            centers[live, a] = sums[live] / counts[live]
        cvals[live] = np.bincount(labels, weights=values, minlength=k)[live] / counts[live]
        if history is not None:
            history.append(_slic_energy(coords, values, centers, cvals, labels, spatial_w2))
        if not changed:
            break
    return labels


def _neighbor_edges(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(grid.n_points).reshape(grid.shape)
    a, b = [], []
    for ax in range(grid.ndim):
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        a.append(idx[tuple(lo)].ravel())
        b.append(idx[tuple(hi)].ravel())
    return np.concatenate(a), np.concatenate(b)


def enforce_connectivity(grid: GridSpec, labels: np.ndarray) -> np.ndarray:
    """Merge every non-largest connected piece of a label into a neighboring label.

    Orphan pieces only merge into pieces that are kept (the largest piece of
    their label), choosing the neighbor label with the most points. Orphans
    with no kept neighbor wait for a later pass.
    """
    labels = np.asarray(labels, dtype=np.int64).copy()
    ea, eb = _neighbor_edges(grid)
    n = grid.n_points
    while True:
        same = labels[ea] == labels[eb]
        adj = sparse.coo_matrix((np.ones(same.sum()), (ea[same], eb[same])), shape=(n, n))
        n_comp, comp = connected_components(adj, directed=False)
        comp_size = np.bincount(comp, minlength=n_comp)
        comp_label = np.empty(n_comp, dtype=np.int64)
        comp_label[comp] = labels
        # keep the largest piece of each label, lowest component id on ties
        order = np.lexsort((np.arange(n_comp), -comp_size, comp_label))
        first = np.ones(n_comp, bool)
        first[1:] = comp_label[order[1:]] != comp_label[order[:-1]]
        keep = np.zeros(n_comp, bool)
        keep[order[first]] = True
        if keep.all():
            return labels

        label_size = np.bincount(labels)
        ca, cb = comp[ea[~same]], comp[eb[~same]]
        src = np.concatenate([ca, cb])
        dst = np.concatenate([cb, ca])
        use = ~keep[src] & keep[dst]
        src, tgt = src[use], comp_label[dst[use]]
        # per orphan: largest neighboring label, lowest label id on ties
        order = np.lexsort((tgt, -label_size[tgt], src))
        src, tgt = src[order], tgt[order]
        head = np.ones(src.size, bool)
        head[1:] = src[1:] != src[:-1]
        new_label = comp_label.copy()
        new_label[src[head]] = tgt[head]
        labels = new_label[comp]


def _densify(labels: np.ndarray) -> np.ndarray:
    _, dense = np.unique(labels, return_inverse=True)
    return dense.astype(np.int64).ravel()


def partition_slic(fld: MultivariateField, params: SlicParams) -> PartitionSet:
    """SLIC superpixels on the first principal component of the whole field."""
    if params.n_superpixels > fld.n_points:
        raise ValueError(f"n_superpixels={params.n_superpixels} exceeds {fld.n_points} points")
    sf = first_pc_field(fld)
    labels = slic_labels(sf, params)
    if params.enforce_connectivity:
        labels = enforce_connectivity(fld.grid, labels)
    labels = _densify(labels)
    counts = np.bincount(labels)
    parts = tuple(Partition(i, int(c)) for i, c in enumerate(counts))
    return PartitionSet(fld.grid, labels, "slic", parts)


def pc_count_map(fld: MultivariateField, pset: PartitionSet, p: float) -> ScalarField:
    """Per-point component count needed by its partition for variance target ``p``."""
    counts = np.empty(pset.n_partitions)
    for pid, idx in enumerate(pset.point_indices()):
        counts[pid] = pca.select_q(pca.fit(fld.data[idx]), p)
    return ScalarField(fld.grid, counts[pset.labels])


def partition_from_boxes(grid: GridSpec, boxes, scheme: str, block_dims=None) -> PartitionSet:
    return _from_boxes(grid, boxes, scheme, block_dims)


def partition_from_labels(grid: GridSpec, labels, scheme: str = "slic") -> PartitionSet:
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels)
    if np.any(counts == 0):
        raise ValueError("partition labels must be dense and nonempty")
    parts = tuple(Partition(i, int(c)) for i, c in enumerate(counts))
    return PartitionSet(grid, labels, scheme, parts)
