"""Native volume directory format.

A volume directory holds ``meta.json`` and ``voxels.raw``. The raw file is
little-endian and x-fastest: int16 for scans, uint8 for masks, float32 for
probability and normalized volumes.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .volume import MaskVolume, NormalizedVolume, ProbVolume, ScanVolume, Volume, WindowSpec

META_NAME = "meta.json"
RAW_NAME = "voxels.raw"

DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1"), "f32": np.dtype("<f4")}
KIND_DTYPE = {"scan": "i16", "mask": "u8", "prob": "f32", "normalized": "f32"}
KIND_CLASS = {"scan": ScanVolume, "mask": MaskVolume, "prob": ProbVolume, "normalized": NormalizedVolume}
DEFAULT_KIND = {"i16": "scan", "u8": "mask", "f32": "prob"}


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def volume_meta(volume: Volume) -> dict:
    meta = {
        "scan_id": volume.scan_id,
        "kind": volume.kind,
        "width": volume.width,
        "height": volume.height,
        "depth": volume.depth,
        "dtype": KIND_DTYPE[volume.kind],
        "spacing": list(volume.spacing) if volume.spacing is not None else None,
    }
    window = getattr(volume, "window", None)
    if window is not None:
        meta["window"] = {"center": window.center, "width": window.width}
    return meta


def write_native(volume: Volume, path) -> Path:
    """Write ``volume`` to the directory ``path`` (created if needed)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = volume_meta(volume)
    raw = np.ascontiguousarray(volume.voxels, dtype=DTYPES[meta["dtype"]]).tobytes()
    atomic_write_bytes(path / RAW_NAME, raw)
    atomic_write_text(path / META_NAME, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _require_int(meta: dict, key: str) -> int:
    value = meta.get(key)
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise FormatError(f"meta.json field {key!r} must be a positive integer, got {value!r}", field=key)
    return value


def read_meta(path) -> dict:
    path = Path(path)
    try:
        meta = json.loads((path / META_NAME).read_text())
    except FileNotFoundError:
        raise FormatError(f"{path} has no {META_NAME}", field=META_NAME) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path / META_NAME} is not valid JSON: {exc}", field=META_NAME) from None
    if not isinstance(meta, dict):
        raise FormatError(f"{path / META_NAME} must hold a JSON object", field=META_NAME)
    return meta


def read_native(path) -> Volume:
    """Read a volume directory; the volume class follows ``kind`` (or ``dtype``)."""
    path = Path(path)
    meta = read_meta(path)
    width, height, depth = (_require_int(meta, k) for k in ("width", "height", "depth"))
    dtype = meta.get("dtype")
    if dtype not in DTYPES:
        raise FormatError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}", field="dtype")
    kind = meta.get("kind", DEFAULT_KIND[dtype])
    if kind not in KIND_CLASS or KIND_DTYPE[kind] != dtype:
        raise FormatError(f"kind {kind!r} is not valid for dtype {dtype!r}", field="kind")

    scan_id = meta.get("scan_id", "")
    if not isinstance(scan_id, str):
        raise FormatError("scan_id must be a string", field="scan_id")
    spacing = meta.get("spacing")
    if spacing is not None:
        if not (isinstance(spacing, list) and len(spacing) == 3 and all(isinstance(s, (int, float)) and s > 0 for s in spacing)):
            raise FormatError(f"spacing must be null or three positive numbers, got {spacing!r}", field="spacing")
        spacing = tuple(float(s) for s in spacing)

    try:
        raw = (path / RAW_NAME).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path} has no {RAW_NAME}", field=RAW_NAME) from None
    expected = width * height * depth * DTYPES[dtype].itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{RAW_NAME} holds {len(raw)} bytes but width*height*depth*itemsize = {expected}", field="voxels.raw length"
        )
    flat = np.frombuffer(raw, dtype=DTYPES[dtype]).astype(KIND_CLASS[kind].dtype)

    kwargs = {"scan_id": scan_id, "spacing": spacing}
    if kind == "scan" and meta.get("window") is not None:
        win = meta["window"]
        try:
            kwargs["window"] = WindowSpec(float(win["center"]), float(win["width"]))
        except (TypeError, KeyError, ValueError) as exc:
            raise FormatError(f"malformed window entry {win!r}: {exc}", field="window") from None
    try:
        return KIND_CLASS[kind].from_flat(flat, width, height, depth, **kwargs)
    except InvalidInputError as exc:
        raise FormatError(f"{path}: {exc}", field="voxels") from None
