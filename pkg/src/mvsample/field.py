"""Gridded multivariate fields: data model, sidecar-header I/O, rasters and
synthetic generators.

A field stores ``N`` grid points by ``d`` variables in point-major order with
the x axis varying fastest, so point ``i`` of a ``[nx, ny, nz]`` grid sits at
``x = i % nx``, ``y = (i // nx) % ny``, ``z = i // (nx * ny)``.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

_DTYPES = {"f32": np.float32, "f64": np.float64}


class FieldError(ValueError):
    """Invalid field contents or a malformed field file."""


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(v) for v in self.dims)
        if len(dims) not in (2, 3):
            raise FieldError(f"grid must be 2D or 3D, got dims={list(dims)}")
        if any(v < 1 for v in dims):
            raise FieldError(f"grid dims must be positive, got {list(dims)}")
        object.__setattr__(self, "dims", dims)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def n_points(self) -> int:
        return math.prod(self.dims)

    @property
    def shape(self) -> tuple[int, ...]:
        """numpy C-order shape, slowest axis first: ``(nz, ny, nx)``."""
        return tuple(reversed(self.dims))

    def coords(self) -> np.ndarray:
        """Integer ``(N, ndim)`` array of point coordinates, columns x, y[, z]."""
        idx = np.arange(self.n_points)
        out = np.empty((self.n_points, self.ndim), dtype=np.int64)
        for axis, n in enumerate(self.dims):
            out[:, axis] = idx % n
            idx = idx // n
        return out


def _as_grid(grid) -> GridSpec:
    return grid if isinstance(grid, GridSpec) else GridSpec(tuple(grid))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MultivariateField:
    grid: GridSpec
    var_names: tuple[str, ...]
    data: np.ndarray
    var_units: tuple[str, ...] = ()

    def __post_init__(self):
        grid = _as_grid(self.grid)
        object.__setattr__(self, "grid", grid)
        names = tuple(str(v) for v in self.var_names)
        units = tuple(str(v) for v in self.var_units) or ("",) * len(names)
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim != 2:
            raise FieldError(f"data must be an N x d matrix, got shape {data.shape}")
        n, d = data.shape
        if d < 1 or len(names) != d:
            raise FieldError(f"{len(names)} variable names for {d} data columns")
        if len(units) != d:
            raise FieldError(f"{len(units)} variable units for {d} data columns")
        if len(set(names)) != d:
            dupes = sorted({v for v in names if names.count(v) > 1})
            raise FieldError(f"duplicate variable names: {dupes}")
        if n != grid.n_points:
            raise FieldError(f"data has {n} rows, grid {list(grid.dims)} has {grid.n_points} points")
        if not np.all(np.isfinite(data)):
            raise FieldError("field contains non-finite values")
        object.__setattr__(self, "var_names", names)
        object.__setattr__(self, "var_units", units)
        object.__setattr__(self, "data", _readonly(data))

    @property
    def n_points(self) -> int:
        return self.grid.n_points

    @property
    def n_vars(self) -> int:
        return self.data.shape[1]

    def var_index(self, name: str) -> int:
        try:
            return self.var_names.index(name)
        except ValueError:
            raise KeyError(f"unknown variable {name!r}") from None

    def column(self, name: str) -> "ScalarField":
        return ScalarField(self.grid, self.data[:, self.var_index(name)])


@dataclass(frozen=True)
class ScalarField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        grid = _as_grid(self.grid)
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size != grid.n_points:
            raise FieldError(f"{values.size} values for a grid of {grid.n_points} points")
        if not np.all(np.isfinite(values)):
            raise FieldError("scalar field contains non-finite values")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", _readonly(values))


# ---------------------------------------------------------------------------
# file I/O

def load_field(header_path) -> MultivariateField:
    """Load a field from its JSON sidecar header and raw binary payload."""
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FieldError(f"{header_path}: malformed header ({exc})") from None

    missing = {"dims", "num_vars", "var_names", "dtype", "data_file"} - set(header)
    if missing:
        raise FieldError(f"{header_path}: header missing keys {sorted(missing)}")
    grid = GridSpec(tuple(header["dims"]))
    d = int(header["num_vars"])
    names = list(header["var_names"])
    units = list(header.get("var_units") or [""] * d)
    if len(names) != d:
        raise FieldError(f"{header_path}: num_vars={d} but {len(names)} var_names")
    if header["dtype"] not in _DTYPES:
        raise FieldError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    endian = header.get("endian", "little")
    if endian not in ("little", "big"):
        raise FieldError(f"{header_path}: unsupported endian {endian!r}")

    dtype = np.dtype(_DTYPES[header["dtype"]]).newbyteorder("<" if endian == "little" else ">")
    data_path = header_path.parent / header["data_file"]
    payload = data_path.read_bytes()
    expected = grid.n_points * d
    if len(payload) != expected * dtype.itemsize:
        raise FieldError(
            f"{data_path}: holds {len(payload) / dtype.itemsize:g} values, "
            f"header declares {expected} ({list(grid.dims)} x {d})"
        )
    data = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="))
    return MultivariateField(grid, names, data.reshape(grid.n_points, d), units)


def save_field(fld: MultivariateField, header_path, dtype: str = "f64", data_file: str | None = None) -> Path:
    """Write ``fld`` as a little-endian binary payload plus JSON header.

    Returns the header path. The payload defaults to ``<stem>.bin`` beside
    the header.
    """
    if dtype not in _DTYPES:
        raise FieldError(f"unsupported dtype {dtype!r}")
    header_path = Path(header_path)
    data_file = data_file or header_path.with_suffix(".bin").name
    out = np.ascontiguousarray(fld.data, dtype=np.dtype(_DTYPES[dtype]).newbyteorder("<"))
    (header_path.parent / data_file).write_bytes(out.tobytes())
    header = {
        "dims": list(fld.grid.dims),
        "num_vars": fld.n_vars,
        "var_names": list(fld.var_names),
        "var_units": list(fld.var_units),
        "dtype": dtype,
        "endian": "little",
        "data_file": data_file,
    }
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path


# ---------------------------------------------------------------------------
# rasters

_CATEGORICAL = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
], dtype=np.float64)


def _categorical_palette(k: int) -> np.ndarray:
    if k <= len(_CATEGORICAL):
        return _CATEGORICAL[:k]
    # evenly spaced hues beyond the fixed table
    h = np.arange(k) / k
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    v, p, qv, t = np.ones(k), np.zeros(k), 1 - f, f
    rgb = np.select(
        [i[:, None] == j for j in range(6)],
        [np.stack(c, axis=1) for c in
         [(v, t, p), (qv, v, p), (p, v, t), (p, qv, v), (t, p, v), (v, p, qv)]],
    )
    return rgb * 255.0


def _colorize(t: np.ndarray, colormap: str) -> np.ndarray:
    if colormap == "gray":
        rgb = np.repeat(t[..., None] * 255.0, 3, axis=-1)
    elif colormap == "diverging":
        # blue -> white -> red
        lo = np.array([59.0, 76.0, 192.0])
        mid = np.array([245.0, 245.0, 245.0])
        hi = np.array([180.0, 4.0, 38.0])
        s = t[..., None]
        rgb = np.where(s < 0.5, lo + (mid - lo) * (s * 2), mid + (hi - mid) * (s * 2 - 1))
    elif colormap.startswith("categorical"):
        k = int(colormap.partition(":")[2] or 10)
        if k < 1:
            raise ValueError("categorical colormap needs k >= 1")
        cls = np.minimum(np.floor(t * k), k - 1).astype(int)
        rgb = _categorical_palette(k)[cls]
    else:
        raise ValueError(f"unknown colormap {colormap!r}")
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _slice_2d(grid: GridSpec, values: np.ndarray, slice_axis):
    vol = values.reshape(grid.shape)
    if grid.ndim == 2:
        return vol
    if slice_axis is None:
        raise ValueError("3D fields need slice_axis=(axis, index) to rasterize")
    axis, index = slice_axis
    if not 0 <= axis < 3 or not 0 <= index < grid.dims[axis]:
        raise ValueError(f"slice {slice_axis} outside grid {list(grid.dims)}")
    # numpy axis order is reversed relative to grid axes
    return np.take(vol, index, axis=2 - axis)


def save_scalar_raster(
    sf: ScalarField,
    path,
    slice_axis: tuple[int, int] | None = None,
    colormap: str = "gray",
    mask: np.ndarray | None = None,
    background: Sequence[int] = (0, 0, 0),
) -> tuple[float, float]:
    """Render ``sf`` as a binary PPM (P6) image.

    Values are min-max normalized before colormapping and the bounds are
    written to ``<path stem>.range.txt``. ``colormap`` is ``"gray"``,
    ``"diverging"`` or ``"categorical:<k>"``. An optional boolean ``mask``
    restricts rendering (and the bounds) to selected points; others get
    ``background``. Rows follow the second grid axis of the slice, columns
    the first. Returns ``(vmin, vmax)``.
    """
    path = Path(path)
    plane = _slice_2d(sf.grid, sf.values, slice_axis)
    keep = np.ones(plane.shape, bool) if mask is None else _slice_2d(sf.grid, np.asarray(mask, bool), slice_axis)
    shown = plane[keep]
    if shown.size == 0:
        vmin = vmax = 0.0
    else:
        vmin, vmax = float(shown.min()), float(shown.max())
    if vmax > vmin:
        t = (plane - vmin) / (vmax - vmin)
    else:
        warnings.warn(f"{path.name}: degenerate value range [{vmin}, {vmax}], rendering midtone", stacklevel=2)
        t = np.full(plane.shape, 0.5)
    rgb = _colorize(np.clip(t, 0.0, 1.0), colormap)
    rgb[~keep] = np.asarray(background, dtype=np.uint8)
    h, w = plane.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
    range_path = path.with_name(path.stem + ".range.txt")
    range_path.write_text(f"{vmin!r}\n{vmax!r}\n")
    return vmin, vmax


def read_ppm(path) -> np.ndarray:
    """Read a P6 image written by :func:`save_scalar_raster` as ``(h, w, 3)`` uint8."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise FieldError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FieldError(f"{path}: only 8-bit PPM supported")
    pixels = raw[len(raw) - w * h * 3:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SyntheticConfig:
    """Piecewise-linear generator settings.

    Each region ``r`` draws a ``k_r``-dimensional latent vector per point and
    maps it through a random well-conditioned ``d x k_r`` matrix, adds a
    region mean and optional Gaussian noise.
    """

    grid: Sequence[int] = (64, 64)
    d: int = 8
    n_regions: int = 4
    noise_sigma: float = 0.0
    seed: int = 0
    ranks: Sequence[int] | None = None
    layout: str = "voronoi"  # or "blocks"
    mean_scale: float = 4.0
    latent_std: float = 1.0


@dataclass(frozen=True)
class SyntheticField:
    field: MultivariateField
    region_labels: np.ndarray
    ranks: tuple[int, ...]
    bases: tuple[np.ndarray, ...] = dc_field(default=(), repr=False)


def _block_layout(grid: GridSpec, n_regions: int) -> np.ndarray:
    nx, ny = grid.dims[0], grid.dims[1]
    # most square factorization rows x cols = n_regions
    rows = max(r for r in range(1, int(math.isqrt(n_regions)) + 1) if n_regions % r == 0)
    cols = n_regions // rows
    if nx < ny:
        rows, cols = cols, rows
    if cols > nx or rows > ny:
        raise FieldError(f"{n_regions} block regions do not fit grid {list(grid.dims)}")
    c = grid.coords()
    bx = c[:, 0] * cols // nx
    by = c[:, 1] * rows // ny
    return bx + cols * by


def _voronoi_layout(grid: GridSpec, n_regions: int, rng: np.random.Generator) -> np.ndarray:
    if n_regions > grid.n_points:
        raise FieldError(f"{n_regions} regions exceed {grid.n_points} grid points")
    sites = rng.choice(grid.n_points, size=n_regions, replace=False)
    c = grid.coords().astype(np.float64)
    from scipy.spatial import cKDTree

    _, labels = cKDTree(c[sites]).query(c)
    return np.asarray(labels, dtype=np.int64)


def gen_synthetic(cfg: SyntheticConfig) -> SyntheticField:
    """Generate a piecewise-linear multivariate field with known local ranks."""
    grid = _as_grid(cfg.grid)
    d = int(cfg.d)
    if cfg.n_regions < 1:
        raise FieldError("n_regions must be >= 1")
    if cfg.noise_sigma < 0:
        raise FieldError("noise_sigma must be >= 0")
    if d < 2:
        raise FieldError("synthetic fields need d >= 2 so that k_r < d is possible")
    rng = np.random.default_rng(cfg.seed)

    if cfg.ranks is None:
        ranks = tuple(int(v) for v in rng.integers(1, min(d - 1, 4) + 1, size=cfg.n_regions))
    else:
        ranks = tuple(int(v) for v in cfg.ranks)
        if len(ranks) != cfg.n_regions:
            raise FieldError(f"{len(ranks)} ranks given for {cfg.n_regions} regions")
    bad = [k for k in ranks if not 1 <= k < d]
    if bad:
        raise FieldError(f"latent ranks must satisfy 1 <= k_r < d={d}, got {bad}")

    if cfg.layout == "blocks":
        labels = _block_layout(grid, cfg.n_regions)
    elif cfg.layout == "voronoi":
        labels = _voronoi_layout(grid, cfg.n_regions, rng)
    else:
        raise FieldError(f"unknown region layout {cfg.layout!r}")
    counts = np.bincount(labels, minlength=cfg.n_regions)
    if np.any(counts == 0):
        raise FieldError(f"regions {np.flatnonzero(counts == 0).tolist()} have zero area")

    data = np.empty((grid.n_points, d))
    bases = []
    for r, k in enumerate(ranks):
        q, _ = np.linalg.qr(rng.standard_normal((d, k)))
        basis = q * rng.uniform(1.0, 2.0, size=k)
        mean = rng.standard_normal(d) * cfg.mean_scale
        idx = np.flatnonzero(labels == r)
        latent = rng.standard_normal((idx.size, k)) * cfg.latent_std
        data[idx] = latent @ basis.T + mean
        bases.append(basis)
    if cfg.noise_sigma > 0:
        data += rng.standard_normal(data.shape) * cfg.noise_sigma

    names = [f"v{j}" for j in range(d)]
    fld = MultivariateField(grid, names, data)
    return SyntheticField(fld, _readonly(labels), ranks, tuple(bases))


def gen_vortex(grid=(96, 96), seed: int = 0, noise_sigma: float = 0.0, radius: float | None = None) -> MultivariateField:
    """Hurricane-like analog with an eyewall ring at ``radius`` grid units.

    On the ring pressure perturbation is -1000 Pa, temperature 0 degC and
    wind speed peaks at 20 m/s. Extra moisture/cloud variables are smooth
    functions of the same radial profile.
    """
    grid = _as_grid(grid)
    rng = np.random.default_rng(seed)
    c = grid.coords().astype(np.float64)
    nx, ny = grid.dims[0], grid.dims[1]
    center = np.array([nx, ny], dtype=np.float64) / 2 + rng.uniform(-0.05, 0.05, 2) * [nx, ny]
    radius = radius or min(nx, ny) / 6.0
    rho = np.hypot(c[:, 0] - center[0], c[:, 1] - center[1]) / radius
    height = np.exp(-c[:, 2] / grid.dims[2]) if grid.ndim == 3 else 1.0

    pressure = -2000.0 * np.exp2(-rho**2) * height
    temperature = 10.0 * (1 - rho**2) / (1 + rho**2)
    wind = np.where(rho < 1, 20.0 * rho, 20.0 / np.maximum(rho, 1e-12)) * height
    qvapor = 0.02 * np.exp(-(rho / 2) ** 2)
    qcloud = 1e-3 * np.exp(-((rho - 1) / 0.4) ** 2)
    precip = 5e-3 * np.exp(-((rho - 1.2) / 0.6) ** 2) + 1e-3 * np.exp(-rho)
    data = np.column_stack([pressure, temperature, wind, qvapor, qcloud, precip])
    if noise_sigma > 0:
        data = data + rng.standard_normal(data.shape) * noise_sigma * data.std(axis=0)
    return MultivariateField(
        grid,
        ["pressure", "temperature", "wind", "qvapor", "qcloud", "precip"],
        data,
        ["Pa", "degC", "m/s", "kg/kg", "kg/kg", "kg/kg"],
    )
