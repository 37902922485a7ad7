"""Parallel-beam Radon operator: geometry, exact chord-length matrix, projection."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import kernels
from .core import DimensionError, Image, Sinogram

CACHE_MAGIC = b"TMRO"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
_ENTRY = np.dtype([("row", "<u4"), ("col", "<u4"), ("weight", "<f8")])


@dataclass(frozen=True)
class ProjectionGeometry:
    angles_deg: tuple
    detector_count: int
    image_side: int
    detector_spacing: float = 1.0

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles_deg)
        object.__setattr__(self, "angles_deg", angles)
        if not angles:
            raise ValueError("geometry needs at least one angle")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError("angles must be strictly increasing")
        if angles[0] < 0 or angles[-1] >= 180:
            raise ValueError("angles must lie in [0, 180)")
        needed = math.sqrt(2.0) * self.image_side / self.detector_spacing
        if self.detector_count < needed - 1e-9:
            raise ValueError(
                f"{self.detector_count} bins cannot cover a {self.image_side}px image "
                f"(need {math.ceil(needed)})")

    @property
    def offsets(self) -> np.ndarray:
        k = np.arange(self.detector_count, dtype=np.float64)
        return (k - (self.detector_count - 1) / 2.0) * self.detector_spacing

    @property
    def n_rays(self) -> int:
        return len(self.angles_deg) * self.detector_count

    def restrict(self, angles_deg: Sequence[float]) -> "ProjectionGeometry":
        return ProjectionGeometry(tuple(angles_deg), self.detector_count, self.image_side,
                                  self.detector_spacing)

    def to_dict(self) -> dict:
        return {"angles_deg": list(self.angles_deg), "detector_count": self.detector_count,
                "image_side": self.image_side, "detector_spacing": self.detector_spacing}

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:32]


def default_detector_count(side: int) -> int:
    """``ceil(sqrt(2) * side)``, bumped by one when needed so that bins share
    the parity of ``side`` (ray offsets then hit pixel centres, not pixel
    boundaries, at 0 and 90 degrees)."""
    d = math.ceil(math.sqrt(2.0) * side)
    if (d - side) % 2:
        d += 1
    return d


def build_geometry(n_angles: int, missing_wedge_deg: float, image_side: int) -> ProjectionGeometry:
    """Equidistant angles over 180 degrees, or over ``[w/2, 180 - w/2]`` with a wedge."""
    if n_angles < 1:
        raise ValueError("n_angles must be at least 1")
    if not 0 <= missing_wedge_deg < 180:
        raise ValueError("missing wedge must lie in [0, 180)")
    if missing_wedge_deg > 0:
        lo = missing_wedge_deg / 2.0
        hi = 180.0 - missing_wedge_deg / 2.0
        if n_angles == 1:
            angles = np.array([lo])
        else:
            angles = np.linspace(lo, hi, n_angles)
        if angles[-1] >= 180:
            angles = angles[:-1]
    else:
        angles = np.arange(n_angles) * (180.0 / n_angles)
    return ProjectionGeometry(tuple(np.round(angles, 12)), default_detector_count(image_side),
                              image_side)


@dataclass(frozen=True)
class SparseOperator:
    """Nonnegative ray-by-pixel matrix; rows are ``angle * bins + bin``."""

    matrix: sp.csr_matrix

    def __post_init__(self):
        mat = sp.csr_matrix(self.matrix, dtype=np.float64)
        mat.eliminate_zeros()
        mat.sort_indices()
        if mat.nnz and mat.data.min() <= 0:
            raise ValueError("operator weights must be strictly positive")
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def from_triples(cls, rows, cols, weights, shape) -> "SparseOperator":
        return cls(sp.csr_matrix((weights, (rows, cols)), shape=shape))

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def triples(self):
        coo = self.matrix.tocoo()
        return coo.row, coo.col, coo.data

    def __matmul__(self, v):
        return self.matrix @ v

    @property
    def T(self):
        return self.matrix.T

    def take_rows(self, rows) -> "SparseOperator":
        return SparseOperator(self.matrix[np.asarray(rows)])


def build_radon_matrix(geom: ProjectionGeometry, cache_dir: Optional[Path] = None) -> SparseOperator:
    """Exact intersection-length operator via Siddon traversal.

    With ``cache_dir`` set, the operator is read from / written to
    ``<cache_dir>/<geometry hash>.radon``.
    """
    if cache_dir is not None:
        path = Path(cache_dir) / f"{geom.content_hash()}.radon"
        if path.exists():
            op = read_operator(path)
            if op.shape == (geom.n_rays, geom.image_side ** 2):
                return op
    thetas = np.deg2rad(np.asarray(geom.angles_deg, dtype=np.float64))
    rows, cols, vals = kernels.trace_rays(thetas, geom.offsets, geom.image_side)
    op = SparseOperator.from_triples(rows, cols, vals, (geom.n_rays, geom.image_side ** 2))
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        write_operator(op, path)
    return op


def write_operator(op: SparseOperator, path) -> None:
    rows, cols, vals = op.triples()
    order = np.lexsort((cols, rows))
    rec = np.empty(rows.size, dtype=_ENTRY)
    rec["row"] = rows[order]
    rec["col"] = cols[order]
    rec["weight"] = vals[order]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, op.m, op.n, rows.size))
        fh.write(rec.tobytes())


def read_operator(path) -> SparseOperator:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("operator cache file truncated")
    magic, version, m, n, nnz = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise ValueError("not an operator cache file")
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported operator cache version {version}")
    body = data[_HEADER.size:]
    if len(body) != nnz * _ENTRY.itemsize:
        raise ValueError("operator cache payload size mismatch")
    rec = np.frombuffer(body, dtype=_ENTRY)
    if nnz and (rec["row"].max() >= m or rec["col"].max() >= n):
        raise ValueError("operator cache index out of range")
    return SparseOperator.from_triples(rec["row"].astype(np.int64), rec["col"].astype(np.int64),
                                       rec["weight"].astype(np.float64), (m, n))


def forward_project(R: SparseOperator, f: Image, angles=None, detector_count=None) -> Sinogram:
    if f.n != R.n:
        raise DimensionError(f"image has {f.n} pixels, operator expects {R.n}")
    p = R @ f.pixels
    np.maximum(p, 0.0, out=p)  # exact for f >= 0; clears -0.0
    if angles is None:
        angles = tuple(range(1))
        detector_count = R.m
    return Sinogram(angles, detector_count, p)


def back_project(R: SparseOperator, p: Sinogram, side: Optional[int] = None) -> Image:
    if p.m != R.m:
        raise DimensionError(f"sinogram has {p.m} values, operator expects {R.m}")
    side = side or int(round(math.sqrt(R.n)))
    return Image(side, R.n // side, R.T @ p.values)


def project(geom: ProjectionGeometry, R: SparseOperator, f: Image) -> Sinogram:
    """Forward projection labelled with the geometry's angles and bins."""
    return forward_project(R, f, geom.angles_deg, geom.detector_count)
