"""Deterministic CT-like phantoms with ellipsoidal lesions and exact ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .volume import MaskVolume, ScanVolume, WindowSpec

LUNG_WINDOW = WindowSpec(-600.0, 1500.0)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]  # (z, y, x) in voxel indices
    radii: tuple[float, float, float]  # (rz, ry, rx)

    def contains(self, z, y, x):
        cz, cy, cx = self.center
        rz, ry, rx = self.radii
        return ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    width: int = 128
    height: int = 128
    depth: int = 64
    n_lesions: int = 3
    lesion_band: tuple[int, int] = (-700, -500)
    lung_hu: int = -900
    tissue_hu: int = 40
    radius_range: tuple[float, float] = (6.0, 14.0)
    z_radius_range: tuple[float, float] = (4.0, 12.0)
    lung_fraction: float = 0.42
    noise_hu: int = 0
    lesions: tuple[Ellipsoid, ...] | None = None
    scan_id: str | None = None
    window: WindowSpec = field(default=LUNG_WINDOW)

    @property
    def name(self) -> str:
        return self.scan_id if self.scan_id is not None else f"phantom-{self.seed}"


def _lung_region(spec: PhantomSpec) -> np.ndarray:
    """Elliptic cylinder along z, centred in-plane."""
    y, x = np.mgrid[0:spec.height, 0:spec.width]
    cy, cx = (spec.height - 1) / 2, (spec.width - 1) / 2
    ay, ax = spec.lung_fraction * spec.height, spec.lung_fraction * spec.width
    return ((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2 <= 1.0


def _draw_lesions(spec: PhantomSpec, lung: np.ndarray, rng: np.random.Generator) -> list[Ellipsoid]:
    lesions = []
    r_lo, r_hi = spec.radius_range
    z_lo, z_hi = spec.z_radius_range
    for _ in range(spec.n_lesions):
        for _attempt in range(200):
            rz = rng.uniform(z_lo, z_hi)
            ry, rx = rng.uniform(r_lo, r_hi, size=2)
            cz = rng.uniform(rz + 1, spec.depth - rz - 2)
            cy = rng.uniform(ry + 1, spec.height - ry - 2)
            cx = rng.uniform(rx + 1, spec.width - rx - 2)
            candidate = Ellipsoid((cz, cy, cx), (rz, ry, rx))
            # keep a one-voxel margin of lung around the lesion footprint
            y, x = np.mgrid[0:spec.height, 0:spec.width]
            foot = ((y - cy) / (ry + 1.5)) ** 2 + ((x - cx) / (rx + 1.5)) ** 2 <= 1.0
            if not (foot & ~lung).any():
                lesions.append(candidate)
                break
        else:
            raise InvalidInputError("could not place a lesion inside the lung region; shrink the radii")
    return lesions


def generate_phantom(spec: PhantomSpec) -> tuple[ScanVolume, MaskVolume]:
    if spec.depth < 4:
        raise InvalidInputError(f"phantom depth must be >= 4, got {spec.depth}")
    if spec.width < 8 or spec.height < 8:
        raise InvalidInputError("phantom slices must be at least 8x8")
    lo, hi = spec.lesion_band
    if lo > hi:
        raise InvalidInputError(f"lesion band [{lo}, {hi}] is empty")
    if spec.noise_hu < 0:
        raise InvalidInputError("noise amplitude must be non-negative")
    for bg in (spec.lung_hu, spec.tissue_hu):
        if bg - spec.noise_hu <= hi and bg + spec.noise_hu >= lo:
            raise InvalidInputError("noise would push background voxels into the lesion band")

    rng = np.random.default_rng(spec.seed)
    lung = _lung_region(spec)
    if spec.lesions is not None:
        lesions = list(spec.lesions)
    elif spec.n_lesions > 0:
        r_hi = max(spec.radius_range)
        if 2 * (r_hi + 2) >= 2 * spec.lung_fraction * min(spec.width, spec.height) or 2 * (max(spec.z_radius_range) + 2) >= spec.depth:
            raise InvalidInputError("lesion radii do not fit inside the phantom")
        lesions = _draw_lesions(spec, lung, rng)
    else:
        lesions = []

    z, y, x = np.ogrid[0:spec.depth, 0:spec.height, 0:spec.width]
    mask = np.zeros((spec.depth, spec.height, spec.width), dtype=bool)
    for e in lesions:
        mask |= e.contains(z, y, x)
    if spec.lesions is not None and (mask & ~lung[None]).any():
        raise InvalidInputError("explicit lesions must lie inside the lung region")

    hu = np.where(lung[None], spec.lung_hu, spec.tissue_hu).astype(np.int32)
    hu = np.broadcast_to(hu, mask.shape).copy()
    if spec.noise_hu:
        hu += rng.integers(-spec.noise_hu, spec.noise_hu + 1, size=hu.shape)
    n_lesion = int(mask.sum())
    if n_lesion:
        hu[mask] = rng.integers(lo, hi + 1, size=n_lesion)

    scan = ScanVolume(hu, scan_id=spec.name, spacing=(1.0, 1.0, 1.0), window=spec.window)
    return scan, MaskVolume(mask, scan_id=spec.name, spacing=(1.0, 1.0, 1.0))


def lesion_band_normalized(spec: PhantomSpec, window: WindowSpec | None = None) -> tuple[float, float]:
    """The lesion HU band expressed in windowed [0, 1] units."""
    window = window or spec.window
    lo, hi = window.normalize(spec.lesion_band)
    return float(lo), float(hi)
