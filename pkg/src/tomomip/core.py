"""Shared image/sinogram containers and the four reconstruction quality metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class MetricError(ValueError):
    """Raised when a metric is undefined for its inputs."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    """Row-major nonnegative pixel grid (``height`` rows by ``width`` columns)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float64).reshape(-1)
        if px.size != self.width * self.height:
            raise DimensionError(
                f"buffer of {px.size} pixels does not match {self.width}x{self.height}")
        if px.size and not np.all(px >= 0):
            raise ValueError("image pixels must be nonnegative")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, arr) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError("expected a 2-D array")
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr.reshape(-1))

    @property
    def n(self) -> int:
        return self.pixels.size

    @property
    def shape(self):
        return (self.height, self.width)

    def as_array(self) -> np.ndarray:
        return self.pixels.reshape(self.height, self.width)


@dataclass(frozen=True)
class Sinogram:
    """Projection data, angle-major: ``values[a * detector_count + k]``."""

    angles: tuple
    detector_count: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        v = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if v.size != len(self.angles) * self.detector_count:
            raise DimensionError(
                f"{v.size} values for {len(self.angles)} angles x {self.detector_count} bins")
        if v.size and not np.all(v >= 0):
            raise ValueError("sinogram values must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def m(self) -> int:
        return self.values.size

    def as_array(self) -> np.ndarray:
        return self.values.reshape(len(self.angles), self.detector_count)


@dataclass(frozen=True)
class MaterialParams:
    omega: float = 255.0

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("omega must be positive")


CSV_FIELDS = ("dataset", "algorithm", "params", "rme", "rdc", "bms", "mc", "runtime_seconds")


@dataclass
class MetricReport:
    bms: float
    mc: int
    runtime_seconds: float = 0.0
    rme: Optional[float] = None
    rdc: Optional[float] = None
    dataset: str = ""
    algorithm: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.bms <= 1.0:
            raise ValueError("bms must lie in [0, 1]")
        if self.mc < 0:
            raise ValueError("mc must be nonnegative")

    def csv_row(self) -> dict:
        def fmt(v):
            return "" if v is None else repr(float(v))

        params = ";".join(f"{k}={self.params[k]}" for k in sorted(self.params))
        return {
            "dataset": self.dataset,
            "algorithm": self.algorithm,
            "params": params,
            "rme": fmt(self.rme),
            "rdc": fmt(self.rdc),
            "bms": fmt(self.bms),
            "mc": str(int(self.mc)),
            "runtime_seconds": fmt(self.runtime_seconds),
        }


def write_metric_csv(reports: Sequence[MetricReport], fh=None, header=True) -> str:
    """Write reports as CSV rows; returns the text when ``fh`` is None."""
    own = fh is None
    if own:
        fh = io.StringIO()
    writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
    if header:
        writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    return fh.getvalue() if own else ""


def _pixels(img) -> np.ndarray:
    if isinstance(img, Image):
        return img.pixels
    return np.asarray(img, dtype=np.float64).reshape(-1)


def rme(recon, ground_truth) -> float:
    """Relative mean error ``sum|f - f_hat| / sum|f_hat|``."""
    f = _pixels(recon)
    g = _pixels(ground_truth)
    if isinstance(recon, Image) and isinstance(ground_truth, Image):
        if recon.shape != ground_truth.shape:
            raise DimensionError(f"shape {recon.shape} vs {ground_truth.shape}")
    if f.size != g.size:
        raise DimensionError(f"{f.size} pixels vs {g.size}")
    denom = np.abs(g).sum()
    if denom == 0:
        raise MetricError("RME undefined for an all-zero ground truth")
    return float(np.abs(f - g).sum() / denom)


def rdc(R, recon, measured) -> float:
    """Raw data coverage ``sum|R f - p_hat| / sum|p_hat|``."""
    f = _pixels(recon)
    p = measured.values if isinstance(measured, Sinogram) else np.asarray(measured, float).reshape(-1)
    rows, cols = R.shape
    if cols != f.size or rows != p.size:
        raise DimensionError(f"operator {R.shape} vs image {f.size}, sinogram {p.size}")
    denom = np.abs(p).sum()
    if denom == 0:
        raise MetricError("RDC undefined for an all-zero sinogram")
    return float(np.abs(R @ f - p).sum() / denom)


def bms(recon, epsilon: float = 10.0) -> float:
    """Bimodal contrast score on the 8-bit rescaled image.

    Pixels are mapped by ``255 * f / f_max``; a pixel counts when it lies in
    ``[0, eps]`` or ``[255 - eps, 255]``.  An image whose maximum is 0 scores 1.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    f = _pixels(recon)
    if f.size == 0:
        raise MetricError("BMS undefined for an empty image")
    fmax = f.max()
    if fmax <= 0:
        return 1.0
    # 255 * f / fmax can round to just above 255 at the maximum itself
    g = np.minimum(255.0 * f / fmax, 255.0)
    low = (g >= 0) & (g <= epsilon)
    high = (g >= 255.0 - epsilon) & (g <= 255.0)
    hits = np.count_nonzero(low) + np.count_nonzero(high & ~low)
    return float(hits / f.size)


def mc(recon, zero_tol: float = 0.0) -> int:
    """Material coverage: number of pixels strictly above ``zero_tol``."""
    f = _pixels(recon)
    return int(np.count_nonzero(f > zero_tol))
