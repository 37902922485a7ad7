"""Phantom synthesis, shot noise, angle subsampling and raw/PNG file I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Image, Sinogram

RAW_VERSION = 1
_MAX_PIXELS = 1 << 28


@dataclass(frozen=True)
class PhantomSpec:
    """Ellipse with two circular holes; lengths are fractions of ``side``."""

    side: int = 64
    center: tuple = (0.5, 0.5)
    semi_axes: tuple = (0.35, 0.25)
    holes: tuple = (((0.38, 0.45), 0.06), ((0.62, 0.55), 0.06))
    material_value: float = 255.0

    def __post_init__(self):
        if self.material_value <= 0:
            raise ValueError("material_value must be positive")
        if self.side < 1:
            raise ValueError("side must be positive")
        cx, cy = self.center
        ax, ay = self.semi_axes
        for (hx, hy), r in self.holes:
            # every point of the hole disk must be inside the ellipse
            ang = np.linspace(0, 2 * np.pi, 721)
            px = hx + r * np.cos(ang)
            py = hy + r * np.sin(ang)
            if np.any(((px - cx) / ax) ** 2 + ((py - cy) / ay) ** 2 >= 1.0):
                raise ValueError("holes must lie strictly inside the ellipse")


@dataclass(frozen=True)
class NoiseSpec:
    dose: float = 1e4
    seed: int = 0

    def __post_init__(self):
        if not self.dose > 0:
            raise ValueError("dose must be positive")


def _pixel_centres(side):
    c = (np.arange(side) + 0.5) / side
    # x grows with column, y with row
    return np.meshgrid(c, c, indexing="xy")


def generate_phantom(spec: PhantomSpec = PhantomSpec()) -> Image:
    """Binary phantom: ``material_value`` inside the ellipse and outside both holes."""
    x, y = _pixel_centres(spec.side)
    cx, cy = spec.center
    ax, ay = spec.semi_axes
    inside = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0
    for (hx, hy), r in spec.holes:
        inside &= (x - hx) ** 2 + (y - hy) ** 2 > r * r
    return Image.from_array(np.where(inside, spec.material_value, 0.0))


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based generator used for every stochastic step."""
    return np.random.Generator(np.random.Philox(seed))


def apply_poisson_noise(p: Sinogram, spec: NoiseSpec) -> Sinogram:
    """Replace each bin by ``Poisson(dose * p / p_ref) * p_ref / dose``, ``p_ref = max p``."""
    ref = p.values.max() if p.m else 0.0
    if ref <= 0:
        return p
    lam = spec.dose * p.values / ref
    counts = rng_for(spec.seed).poisson(lam)
    return Sinogram(p.angles, p.detector_count, counts * (ref / spec.dose))


def subsample_angles(full: Sinogram, target_angles) -> Sinogram:
    """Keep only the rows of ``full`` whose angle is in ``target_angles``."""
    angles = getattr(target_angles, "angles_deg", target_angles)
    idx = angle_indices(full.angles, angles)
    rows = full.as_array()[idx]
    return Sinogram(tuple(full.angles[i] for i in idx), full.detector_count, rows)


def angle_indices(available, wanted, tol=1e-6):
    avail = np.asarray(available, dtype=np.float64)
    idx = []
    for a in wanted:
        hit = np.flatnonzero(np.abs(avail - a) <= tol)
        if hit.size == 0:
            raise KeyError(f"angle {a} not present in the full sinogram")
        idx.append(int(hit[0]))
    return idx


def ray_rows(angle_idx, detector_count):
    """Operator row indices belonging to the given angle indices."""
    return (np.asarray(angle_idx)[:, None] * detector_count + np.arange(detector_count)).ravel()


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def _stem(path, kind):
    path = str(path)
    for suffix in (f".{kind}.json", f".{kind}.bin"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def write_image(img: Image, path) -> Path:
    """Writes ``<stem>.img.json`` + ``<stem>.img.bin``; returns the json path."""
    stem = _stem(path, "img")
    meta = {"width": img.width, "height": img.height, "dtype": "f64", "version": RAW_VERSION}
    Path(stem + ".img.json").write_text(json.dumps(meta))
    Path(stem + ".img.bin").write_bytes(img.pixels.astype("<f8").tobytes())
    return Path(stem + ".img.json")


def read_image(path) -> Image:
    stem = _stem(path, "img")
    try:
        meta = json.loads(Path(stem + ".img.json").read_text())
        w, h = int(meta["width"]), int(meta["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed image header: {exc}") from exc
    if meta.get("dtype") != "f64":
        raise ValueError(f"unsupported dtype {meta.get('dtype')!r}")
    if w < 0 or h < 0 or w * h > _MAX_PIXELS:
        raise ValueError(f"image dimensions {w}x{h} out of range")
    raw = Path(stem + ".img.bin").read_bytes()
    if len(raw) != 8 * w * h:
        raise ValueError("image payload size does not match header")
    return Image(w, h, np.frombuffer(raw, dtype="<f8").astype(np.float64))


def write_sinogram(s: Sinogram, path) -> Path:
    stem = _stem(path, "sino")
    meta = {"angles": list(s.angles), "detector_count": s.detector_count, "dtype": "f64",
            "version": RAW_VERSION}
    Path(stem + ".sino.json").write_text(json.dumps(meta))
    Path(stem + ".sino.bin").write_bytes(s.values.astype("<f8").tobytes())
    return Path(stem + ".sino.json")


def read_sinogram(path) -> Sinogram:
    stem = _stem(path, "sino")
    try:
        meta = json.loads(Path(stem + ".sino.json").read_text())
        angles = [float(a) for a in meta["angles"]]
        bins = int(meta["detector_count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed sinogram header: {exc}") from exc
    if meta.get("dtype") != "f64":
        raise ValueError(f"unsupported dtype {meta.get('dtype')!r}")
    if bins < 0 or len(angles) * bins > _MAX_PIXELS:
        raise ValueError("sinogram dimensions out of range")
    raw = Path(stem + ".sino.bin").read_bytes()
    if len(raw) != 8 * len(angles) * bins:
        raise ValueError("sinogram payload size does not match header")
    return Sinogram(angles, bins, np.frombuffer(raw, dtype="<f8").astype(np.float64))


def export_png(img: Image, path, bits: int = 8) -> Path:
    """Linear rescale so the maximum pixel maps to the top of the bit range."""
    from PIL import Image as PILImage

    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    top = 255 if bits == 8 else 65535
    arr = img.as_array()
    fmax = arr.max() if arr.size else 0.0
    scaled = np.zeros_like(arr) if fmax <= 0 else np.rint(arr * (top / fmax))
    if bits == 8:
        pil = PILImage.fromarray(scaled.astype(np.uint8), mode="L")
    else:
        pil = PILImage.fromarray(scaled.astype(np.uint16))
    pil.save(path)
    return Path(path)
