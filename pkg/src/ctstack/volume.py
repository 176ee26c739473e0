"""Voxel-grid data model and intensity transforms.

Every volume stores its voxels as a numpy array of shape ``(depth, height, width)``
in C order, which makes x the fastest-varying axis when flattened. Volumes are
immutable: the array is marked read-only on construction.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass
from typing import ClassVar, TypeVar

import numpy as np

from .errors import GeometryMismatchError, InvalidInputError

log = logging.getLogger(__name__)

I16_MIN, I16_MAX = -32768, 32767
STANDARD_SIZE = (512, 512)

V = TypeVar("V", bound="Volume")


@dataclass(frozen=True)
class WindowSpec:
    """Grey-level window given by its centre and width in HU."""

    center: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise InvalidInputError(f"window width must be > 0, got {self.width}")

    @property
    def lower(self) -> float:
        return self.center - self.width / 2.0

    @property
    def upper(self) -> float:
        return self.center + self.width / 2.0

    def normalize(self, hu):
        """Map HU value(s) into [0, 1] with the linear clamp used by :func:`apply_window`."""
        return np.clip((np.asarray(hu, dtype=np.float64) - self.lower) / self.width, 0.0, 1.0)


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    scan_id: str = ""
    spacing: tuple[float, float, float] | None = None

    kind: ClassVar[str] = "volume"
    dtype: ClassVar[np.dtype] = np.dtype(np.float64)

    def __post_init__(self):
        arr = np.asarray(self.voxels)
        if arr.ndim != 3:
            raise GeometryMismatchError(f"{self.kind} voxels must be 3-D (depth, height, width), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise GeometryMismatchError(f"{self.kind} has an empty axis: shape {arr.shape}")
        arr = self._coerce(arr)
        arr = np.ascontiguousarray(arr)
        if arr is self.voxels or np.shares_memory(arr, np.asarray(self.voxels)):
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)
        if self.spacing is not None:
            sp = tuple(float(s) for s in self.spacing)
            if len(sp) != 3 or any(not s > 0 for s in sp):
                raise InvalidInputError(f"spacing must be three positive reals, got {self.spacing}")
            object.__setattr__(self, "spacing", sp)

    def _coerce(self, arr: np.ndarray) -> np.ndarray:
        return arr.astype(self.dtype, copy=False)

    @classmethod
    def from_flat(cls: type[V], flat, width: int, height: int, depth: int, **kwargs) -> V:
        """Build a volume from an x-fastest flat voxel sequence."""
        flat = np.asarray(flat).reshape(-1)
        if flat.size != width * height * depth:
            raise GeometryMismatchError(
                f"expected {width}*{height}*{depth}={width * height * depth} voxels, got {flat.size}"
            )
        return cls(flat.reshape(depth, height, width), **kwargs)

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def flat(self) -> np.ndarray:
        return self.voxels.reshape(-1)

    def replace(self: V, **changes) -> V:
        return dataclasses.replace(self, **changes)

    def with_voxels(self: V, voxels) -> V:
        return dataclasses.replace(self, voxels=voxels)

    def _derived(self: V, voxels: np.ndarray) -> V:
        """Same metadata, voxels already known to be valid for this type (skips validation)."""
        arr = np.ascontiguousarray(voxels, dtype=self.dtype)
        if arr.flags.writeable:
            arr.setflags(write=False)
        out = object.__new__(type(self))
        out.__dict__.update(self.__dict__, voxels=arr)
        return out

    def check_same_geometry(self, other: "Volume") -> None:
        if self.shape != other.shape:
            raise GeometryMismatchError(f"geometry mismatch: {self.shape} vs {other.shape}")

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.scan_id == other.scan_id
            and self.spacing == other.spacing
            and self.voxels.dtype == other.voxels.dtype
            and np.array_equal(self.voxels, other.voxels)
            and self._extra_eq(other)
        )

    def _extra_eq(self, other) -> bool:
        return True

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ScanVolume(Volume):
    """Signed 16-bit Hounsfield-unit voxels."""

    window: WindowSpec | None = None

    kind: ClassVar[str] = "scan"
    dtype: ClassVar[np.dtype] = np.dtype(np.int16)

    def _coerce(self, arr):
        if arr.dtype == np.int16:
            return arr
        if arr.size and (arr.min() < I16_MIN or arr.max() > I16_MAX):
            raise InvalidInputError("Hounsfield values exceed the signed 16-bit storage range")
        if np.issubdtype(arr.dtype, np.floating) and not np.array_equal(arr, np.rint(arr)):
            raise InvalidInputError("scan voxels must be integral")
        return arr.astype(np.int16)

    def _extra_eq(self, other):
        return self.window == other.window


@dataclass(frozen=True, eq=False)
class MaskVolume(Volume):
    """Binary label volume with values in {0, 1}."""

    kind: ClassVar[str] = "mask"
    dtype: ClassVar[np.dtype] = np.dtype(np.uint8)

    def _coerce(self, arr):
        if arr.dtype == np.bool_:
            return arr.astype(np.uint8)
        bad = (arr != 0) & (arr != 1)
        if bad.any():
            raise InvalidInputError(f"mask contains {int(bad.sum())} voxel(s) outside {{0, 1}}")
        return arr.astype(np.uint8)

    def count(self) -> int:
        return int(np.count_nonzero(self.voxels))


class _UnitInterval(Volume):
    def _coerce(self, arr):
        arr = arr.astype(self.dtype, copy=False)
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError(f"{self.kind} volume contains non-finite values")
        if arr.size and (arr.min() < 0 or arr.max() > 1):
            raise InvalidInputError(f"{self.kind} values must lie in [0, 1]")
        return arr


@dataclass(frozen=True, eq=False)
class ProbVolume(_UnitInterval):
    """Per-voxel probabilities, stored as float32 to match the on-disk format."""

    kind: ClassVar[str] = "prob"
    dtype: ClassVar[np.dtype] = np.dtype(np.float32)


@dataclass(frozen=True, eq=False)
class NormalizedVolume(_UnitInterval):
    """Windowed model input in [0, 1]. Kept in float64 until it is written out."""

    kind: ClassVar[str] = "normalized"
    dtype: ClassVar[np.dtype] = np.dtype(np.float64)


class RescaleSaturationWarning(UserWarning):
    def __init__(self, count: int):
        super().__init__(f"{count} value(s) saturated to the signed 16-bit range during rescale")
        self.count = count


def apply_rescale(raw, slope: float, intercept: float) -> np.ndarray:
    """Convert stored pixel values to HU: ``round(raw * slope + intercept)``.

    Results outside the int16 range are saturated; the number of saturated values
    is reported through a :class:`RescaleSaturationWarning`. Rounding is
    half-to-even.
    """
    if slope == 0:
        raise InvalidInputError("rescale slope must be non-zero")
    hu = np.rint(np.asarray(raw, dtype=np.float64) * float(slope) + float(intercept))
    clipped = int(np.count_nonzero((hu < I16_MIN) | (hu > I16_MAX)))
    if clipped:
        log.warning("rescale saturated %d value(s)", clipped)
        warnings.warn(RescaleSaturationWarning(clipped), stacklevel=2)
    return np.clip(hu, I16_MIN, I16_MAX).astype(np.int16)


def apply_window(scan: ScanVolume, window: WindowSpec) -> NormalizedVolume:
    if not isinstance(window, WindowSpec):
        window = WindowSpec(*window)
    return NormalizedVolume(window.normalize(scan.voxels), scan_id=scan.scan_id, spacing=scan.spacing)


def _nearest_index(n_src: int, n_dst: int) -> np.ndarray:
    # destination pixel centre (j + 0.5) maps to source coordinate (j + 0.5) * n_src / n_dst
    return np.minimum(((2 * np.arange(n_dst) + 1) * n_src) // (2 * n_dst), n_src - 1)


def _linear_weights(n_src: int, n_dst: int):
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    return lo, hi, frac


def _bilinear(slices: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    y0, y1, fy = _linear_weights(slices.shape[1], out_h)
    x0, x1, fx = _linear_weights(slices.shape[2], out_w)
    s = slices.astype(np.float64)
    rows = s[:, y0, :] * (1 - fy)[None, :, None] + s[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def resize_to_standard(volume: V, target: tuple[int, int] = STANDARD_SIZE) -> V:
    """Resample every slice to ``target`` = (width, height); depth is untouched.

    Masks use nearest-neighbour so they stay binary; scans and float volumes use
    bilinear interpolation with pixel-centre alignment.
    """
    out_w, out_h = target
    if volume.width < 2 or volume.height < 2:
        raise InvalidInputError(f"cannot resize a slice with a 1-voxel axis ({volume.width}x{volume.height})")
    if (volume.width, volume.height) == (out_w, out_h):
        return volume
    if isinstance(volume, MaskVolume):
        yi = _nearest_index(volume.height, out_h)
        xi = _nearest_index(volume.width, out_w)
        return volume.with_voxels(volume.voxels[:, yi, :][:, :, xi])
    out = _bilinear(volume.voxels, out_h, out_w)
    if isinstance(volume, ScanVolume):
        out = np.clip(np.rint(out), I16_MIN, I16_MAX)
    elif isinstance(volume, _UnitInterval):
        out = np.clip(out, 0.0, 1.0)
    return volume.with_voxels(out.astype(volume.dtype))


def threshold_prob(prob: ProbVolume, t: float = 0.2) -> MaskVolume:
    """Binarize probabilities; a voxel is positive iff ``prob >= t``."""
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError(f"threshold must lie in [0, 1], got {t}")
    # compare in the storage precision so a stored float32(0.2) is not below t=0.2
    return MaskVolume(prob.voxels >= np.float32(t), scan_id=prob.scan_id, spacing=prob.spacing)
