"""Reduced-data bundles and their single-file container.

Container layout (all integers little-endian)::

    b"MVRB" | u32 format_version | u64 header_length | UTF-8 JSON header
    | geometry section | per-partition records (ordered by id) | u64 CRC-64/XZ

The geometry section depends on the partition scheme: empty for regular
blocks (``block_dims`` in the header suffices), ``P x 2*ndim`` u32 box bounds
for k-d trees, and ``N`` u32 labels for SLIC. Each record is
``u32 id, u32 n_s, u16 q`` followed by ``mu[d], ev[d], c_full[d*d]``
(row-major), ``sample_indices[n_s]`` as u64 and ``w_s[n_s*q]`` (row-major),
floats at the stored precision.
"""
from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import crcmod
import numpy as np

from . import pca, sampling
from .field import GridSpec, MultivariateField, _readonly
from .partition import PartitionSet, partition_from_boxes, partition_from_labels, partition_regular
from .sampling import SamplePlan

MAGIC = b"MVRB"
FORMAT_VERSION = 1
_PRECISIONS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_PREAMBLE = struct.Struct("<4sIQ")
_RECORD = struct.Struct("<IIH")
_crc64 = crcmod.mkCrcFun(0x142F0E1EBA9EA3693, initCrc=0, rev=True, xorOut=0xFFFFFFFFFFFFFFFF)


class BundleFormatError(ValueError):
    pass


class BundleVersionError(BundleFormatError):
    pass


class PartitionError(RuntimeError):
    """A per-partition computation failed; carries the partition id."""

    def __init__(self, pid: int, cause: BaseException):
        super().__init__(f"partition {pid}: {type(cause).__name__}: {cause}")
        self.pid = pid


class ChecksumError(BundleFormatError):
    pass


@dataclass(frozen=True)
class ReducedPartition:
    model: pca.LocalPCAModel
    sample_indices: np.ndarray
    w_s: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.sample_indices, dtype=np.int64)
        if self.w_s.shape != (idx.size, self.model.q):
            raise ValueError(f"w_s shape {self.w_s.shape} does not match {idx.size} samples x q={self.model.q}")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("sample indices must be sorted and unique")
        object.__setattr__(self, "sample_indices", _readonly(idx))


@dataclass(frozen=True)
class ReducedBundle:
    grid: GridSpec
    var_names: tuple[str, ...]
    var_units: tuple[str, ...]
    pset: PartitionSet
    variance_target: float
    plan: SamplePlan
    precision: str
    parts: tuple[ReducedPartition, ...]
    scales: np.ndarray | None = None
    source_dtype: str = "f64"
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if len(self.parts) != self.pset.n_partitions:
            raise ValueError(f"{len(self.parts)} partitions stored, labels reference {self.pset.n_partitions}")
        if self.pset.grid != self.grid:
            raise ValueError("partition grid does not match bundle grid")

    @property
    def d(self) -> int:
        return len(self.var_names)

    @property
    def labels(self) -> np.ndarray:
        return self.pset.labels

    @property
    def scheme(self) -> str:
        return self.pset.scheme

    @property
    def n_samples(self) -> int:
        return sum(p.sample_indices.size for p in self.parts)

    def var_index(self, name: str) -> int:
        try:
            return self.var_names.index(name)
        except ValueError:
            raise KeyError(f"unknown variable {name!r}") from None

    def header(self) -> dict:
        return {
            "format_version": self.format_version,
            "dims": list(self.grid.dims),
            "num_vars": self.d,
            "var_names": list(self.var_names),
            "var_units": list(self.var_units),
            "scheme": self.scheme,
            "block_dims": list(self.pset.block_dims) if self.scheme == "regular" else None,
            "n_partitions": self.pset.n_partitions,
            "variance_target": self.variance_target,
            "sampling": asdict(self.plan),
            "precision": self.precision,
            "standardize": self.scales is not None,
            "scales": None if self.scales is None else [float(v) for v in self.scales],
            "source_dtype": self.source_dtype,
        }


# ---------------------------------------------------------------------------
# reduction

def _scales_for(data: np.ndarray) -> np.ndarray:
    s = data.std(axis=0)
    return np.where(s > 0, s, 1.0)


def reduce(
    fld: MultivariateField,
    pset: PartitionSet,
    p: float,
    plan: SamplePlan,
    precision: str = "f32",
    standardize: bool = False,
    workers: int = 1,
) -> ReducedBundle:
    """Fit, truncate, project and sample every partition of ``fld``.

    Sampling runs on column 0 of each partition's projected data with seed
    ``plan.seed ^ partition_id``. Stored arrays are cast to ``precision``.
    With ``standardize`` every variable is divided by its global standard
    deviation before fitting; the scales go in the header.
    """
    if precision not in _PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}")
    if pset.grid != fld.grid:
        raise ValueError("partition set and field grids differ")
    if not 0 < p <= 1:
        raise ValueError(f"variance target must be in (0, 1], got {p}")
    dtype = _PRECISIONS[precision].newbyteorder("=")
    data = np.asarray(fld.data, dtype=np.float64)
    scales = _scales_for(data) if standardize else None
    if scales is not None:
        data = data / scales

    def work(item):
        pid, idx = item
        try:
            x = data[idx]
            model = pca.fit(x)
            model = model.with_q(pca.select_q(model, p))
            w = pca.project(model, x)
            picks = sampling.sample_combined(w[:, 0], replace(plan, seed=plan.seed ^ pid))
            return ReducedPartition(model.astype(dtype), idx[picks.indices], w[picks.indices].astype(dtype))
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise PartitionError(pid, exc) from exc

    items = list(enumerate(pset.point_indices()))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = tuple(pool.map(work, items))
    else:
        parts = tuple(map(work, items))
    return ReducedBundle(
        grid=fld.grid,
        var_names=fld.var_names,
        var_units=fld.var_units,
        pset=pset,
        variance_target=float(p),
        plan=plan,
        precision=precision,
        parts=parts,
        scales=scales,
        source_dtype="f32" if fld.data.dtype == np.float32 else "f64",
    )


# ---------------------------------------------------------------------------
# serialization

def _header_bytes(bundle: ReducedBundle) -> bytes:
    return json.dumps(bundle.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _geometry_bytes(bundle: ReducedBundle) -> bytes:
    if bundle.scheme == "regular":
        return b""
    if bundle.scheme == "kdtree":
        boxes = np.array([[v for lohi in part.box for v in lohi] for part in bundle.pset.partitions])
        return boxes.astype("<u4").tobytes()
    return bundle.labels.astype("<u4").tobytes()


def _record_bytes(pid: int, part: ReducedPartition, dt: np.dtype) -> bytes:
    m = part.model
    return b"".join([
        _RECORD.pack(pid, part.sample_indices.size, m.q),
        m.mu.astype(dt).tobytes(),
        m.ev.astype(dt).tobytes(),
        np.ascontiguousarray(m.c_full, dtype=dt).tobytes(),
        part.sample_indices.astype("<u8").tobytes(),
        np.ascontiguousarray(part.w_s, dtype=dt).tobytes(),
    ])


def to_bytes(bundle: ReducedBundle) -> bytes:
    dt = _PRECISIONS[bundle.precision]
    header = _header_bytes(bundle)
    body = b"".join([
        _PREAMBLE.pack(MAGIC, bundle.format_version, len(header)),
        header,
        _geometry_bytes(bundle),
        *(_record_bytes(pid, part, dt) for pid, part in enumerate(bundle.parts)),
    ])
    return body + struct.pack("<Q", _crc64(body))


def save_bundle(bundle: ReducedBundle, path) -> int:
    """Write ``bundle`` to ``path``; returns the number of bytes written."""
    raw = to_bytes(bundle)
    Path(path).write_bytes(raw)
    return len(raw)


class _Reader:
    def __init__(self, buf: bytes, start: int, end: int):
        self.buf, self.pos, self.end = buf, start, end

    def take(self, nbytes: int) -> bytes:
        if self.pos + nbytes > self.end:
            raise BundleFormatError("bundle payload truncated")
        out = self.buf[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).astype(dtype.newbyteorder("="))


def from_bytes(raw: bytes) -> ReducedBundle:
    if len(raw) < _PREAMBLE.size + 8:
        raise BundleFormatError("file too short to be a bundle")
    magic, version, hlen = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise BundleFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise BundleVersionError(f"unsupported bundle format_version {version} (this reader handles {FORMAT_VERSION})")
    if _PREAMBLE.size + hlen + 8 > len(raw):
        raise BundleFormatError("bundle truncated inside header")
    (stored_crc,) = struct.unpack_from("<Q", raw, len(raw) - 8)
    if _crc64(raw[:-8]) != stored_crc:
        raise ChecksumError("bundle checksum mismatch")

    try:
        return _parse(raw, hlen, version)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, BundleFormatError):
            raise
        raise BundleFormatError(f"malformed bundle: {type(exc).__name__}: {exc}") from None


def _parse(raw: bytes, hlen: int, version: int) -> ReducedBundle:
    rd = _Reader(raw, _PREAMBLE.size, len(raw) - 8)
    try:
        header = json.loads(rd.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"malformed bundle header: {exc}") from None
    grid = GridSpec(tuple(header["dims"]))
    d = int(header["num_vars"])
    n_parts = int(header["n_partitions"])
    scheme = header["scheme"]
    if header["precision"] not in _PRECISIONS:
        raise BundleFormatError(f"unknown precision {header['precision']!r}")
    dt = _PRECISIONS[header["precision"]]

    if scheme == "regular":
        pset = partition_regular(grid, header["block_dims"])
    elif scheme == "kdtree":
        flat = rd.array("<u4", n_parts * 2 * grid.ndim).astype(np.int64).reshape(n_parts, grid.ndim, 2)
        pset = partition_from_boxes(grid, [tuple(map(tuple, b)) for b in flat.tolist()], "kdtree")
    elif scheme == "slic":
        pset = partition_from_labels(grid, rd.array("<u4", grid.n_points).astype(np.int64), "slic")
    else:
        raise BundleFormatError(f"unknown scheme {scheme!r}")
    if pset.n_partitions != n_parts:
        raise BundleFormatError(f"geometry describes {pset.n_partitions} partitions, header says {n_parts}")

    counts = np.bincount(pset.labels, minlength=n_parts)
    parts = []
    for expect in range(n_parts):
        pid, n_s, q = _RECORD.unpack(rd.take(_RECORD.size))
        if pid != expect:
            raise BundleFormatError(f"record {expect} carries id {pid}")
        if not 1 <= q <= d:
            raise BundleFormatError(f"record {pid}: q={q} outside 1..{d}")
        mu = rd.array(dt, d)
        ev = rd.array(dt, d)
        c_full = rd.array(dt, d * d).reshape(d, d)
        idx = rd.array("<u8", n_s).astype(np.int64)
        w_s = rd.array(dt, n_s * q).reshape(n_s, q)
        model = pca.LocalPCAModel(mu, c_full, ev, int(q), int(counts[pid]))
        parts.append(ReducedPartition(model, idx, w_s))
    if rd.pos != rd.end:
        raise BundleFormatError(f"{rd.end - rd.pos} unexpected trailing bytes")

    scales = header.get("scales")
    return ReducedBundle(
        grid=grid,
        var_names=tuple(header["var_names"]),
        var_units=tuple(header["var_units"]),
        pset=pset,
        variance_target=float(header["variance_target"]),
        plan=SamplePlan(**header["sampling"]),
        precision=header["precision"],
        parts=tuple(parts),
        scales=None if scales is None else np.asarray(scales, dtype=np.float64),
        source_dtype=header.get("source_dtype", "f64"),
        format_version=version,
    )


def load_bundle(path) -> ReducedBundle:
    return from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# accounting

def size_report(bundle: ReducedBundle) -> dict:
    """Byte accounting of the serialized bundle.

    ``breakdown`` sums exactly to ``reduced_bytes``, which equals the size of
    the file :func:`save_bundle` writes. ``reduction_ratio`` is
    ``raw_bytes / reduced_bytes``.
    """
    b = _PRECISIONS[bundle.precision].itemsize
    d = bundle.d
    n_s = np.array([p.sample_indices.size for p in bundle.parts], dtype=np.int64)
    q = np.array([p.model.q for p in bundle.parts], dtype=np.int64)
    n_parts = len(bundle.parts)
    breakdown = {
        "header": _PREAMBLE.size + len(_header_bytes(bundle)) + 8,
        "labels": len(_geometry_bytes(bundle)),
        "record_overhead": _RECORD.size * n_parts,
        "models": n_parts * (d * d + 2 * d) * b,
        "indices": int(n_s.sum()) * 8,
        "w_s": int((n_s * q).sum()) * b,
    }
    reduced = sum(breakdown.values())
    raw = bundle.grid.n_points * d * (4 if bundle.source_dtype == "f32" else 8)
    return {
        "raw_bytes": raw,
        "reduced_bytes": reduced,
        "breakdown": breakdown,
        "reduction_ratio": raw / reduced,
        "mean_q": float(q.mean()),
        "n_partitions": n_parts,
        "n_samples": int(n_s.sum()),
    }
