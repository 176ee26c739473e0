"""Minimal DICOM reader: explicit-VR little-endian, uncompressed 16-bit pixels.

Only the tags needed to rebuild a Hounsfield volume are extracted; everything
else is skipped by its declared length. Slices are then ordered and stacked by
:func:`assemble_scan`.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AmbiguousOrderError,
    GeometryMismatchError,
    InvalidInputError,
    MalformedStreamError,
    NotDicomError,
    UnsupportedEncodingError,
)
from .volume import ScanVolume, WindowSpec, apply_rescale

log = logging.getLogger(__name__)

PREAMBLE_LEN = 128
MAGIC = b"DICM"
EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"

# VRs whose explicit-VR header carries 2 reserved bytes and a 4-byte length
LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}
UNDEFINED = 0xFFFFFFFF

TRANSFER_SYNTAX = (0x0002, 0x0010)
ROWS = (0x0028, 0x0010)
COLUMNS = (0x0028, 0x0011)
BITS_ALLOCATED = (0x0028, 0x0100)
PIXEL_REPRESENTATION = (0x0028, 0x0103)
WINDOW_CENTER = (0x0028, 0x1050)
WINDOW_WIDTH = (0x0028, 0x1051)
RESCALE_INTERCEPT = (0x0028, 0x1052)
RESCALE_SLOPE = (0x0028, 0x1053)
INSTANCE_NUMBER = (0x0020, 0x0013)
SLICE_LOCATION = (0x0020, 0x1041)
PIXEL_DATA = (0x7FE0, 0x0010)

ITEM = (0xFFFE, 0xE000)
ITEM_DELIM = (0xFFFE, 0xE00D)
SEQ_DELIM = (0xFFFE, 0xE0DD)

ORDER_KEYS = ("instance_number", "slice_location", "filename")
ORDER_ALIASES = {"instance": "instance_number", "location": "slice_location", "name": "filename"}


@dataclass(frozen=True)
class SliceRecord:
    rows: int
    columns: int
    pixels: np.ndarray
    bits_allocated: int = 16
    pixel_representation: int = 0
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    window: WindowSpec | None = None
    instance_number: int | None = None
    slice_location: float | None = None
    filename: str | None = None

    def __post_init__(self):
        if self.pixels.size != self.rows * self.columns:
            raise GeometryMismatchError(f"{self.pixels.size} pixels for a {self.rows}x{self.columns} slice")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise MalformedStreamError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def at_end(self) -> bool:
        return self.pos >= len(self.data)

    def element_header(self):
        start = self.pos
        group, elem = struct.unpack("<HH", self.take(4, "element tag"))
        tag = (group, elem)
        if group == 0xFFFE:
            (length,) = struct.unpack("<I", self.take(4, "item length"))
            return start, tag, None, length
        vr = self.take(2, "value representation")
        if not (65 <= vr[0] <= 90 and 65 <= vr[1] <= 90):
            raise UnsupportedEncodingError(f"element ({group:04X},{elem:04X}) at offset {start} has no explicit VR")
        if vr in LONG_VRS:
            self.take(2, "reserved bytes")
            (length,) = struct.unpack("<I", self.take(4, "element length"))
        else:
            (length,) = struct.unpack("<H", self.take(2, "element length"))
        return start, tag, vr, length

    def skip_undefined(self, depth: int = 0) -> None:
        """Skip the items of an undefined-length sequence through its delimiter."""
        if depth > 32:
            raise MalformedStreamError("sequence nesting too deep", self.pos)
        while True:
            start, tag, vr, length = self.element_header()
            if tag == SEQ_DELIM:
                return
            if tag != ITEM:
                raise MalformedStreamError(f"unexpected element ({tag[0]:04X},{tag[1]:04X}) inside sequence", start)
            if length == UNDEFINED:
                self.skip_item(depth)
            else:
                self.take(length, "sequence item")

    def skip_item(self, depth: int) -> None:
        while True:
            start, tag, vr, length = self.element_header()
            if tag == ITEM_DELIM:
                return
            if length == UNDEFINED:
                if vr not in (b"SQ", b"UN"):
                    raise MalformedStreamError("undefined length on a non-sequence element", start)
                self.skip_undefined(depth + 1)
            else:
                self.take(length, "element value")


def _text(value: bytes) -> str:
    return value.decode("ascii", errors="replace").strip(" \x00")


def _first_number(value: bytes, tag, offset: int, as_int: bool = False):
    text = _text(value).split("\\")[0].strip().replace("\u2212", "-")
    try:
        return int(text) if as_int else float(text)
    except ValueError:
        raise MalformedStreamError(f"tag ({tag[0]:04X},{tag[1]:04X}) holds non-numeric text {text!r}", offset) from None


def _us(value: bytes, tag, offset: int) -> int:
    if len(value) != 2:
        raise MalformedStreamError(f"tag ({tag[0]:04X},{tag[1]:04X}) must be 2 bytes, got {len(value)}", offset)
    return struct.unpack("<H", value)[0]


def parse_dicom_file(data: bytes, filename: str | None = None) -> SliceRecord:
    """Parse one DICOM Part-10 byte stream into a :class:`SliceRecord`."""
    data = bytes(data)
    if len(data) < PREAMBLE_LEN + 4:
        raise MalformedStreamError("stream shorter than preamble and magic", len(data))
    if data[PREAMBLE_LEN:PREAMBLE_LEN + 4] != MAGIC:
        raise NotDicomError("missing 'DICM' magic after the 128-byte preamble")

    r = _Reader(data)
    r.pos = PREAMBLE_LEN + 4
    fields: dict = {}
    window_center = window_width = None
    pixel_bytes = None
    pixel_representation = None

    while not r.at_end():
        start, tag, vr, length = r.element_header()
        if tag[0] != 0x0002 and "transfer_syntax" not in fields:
            raise UnsupportedEncodingError("file meta group lacks a transfer syntax UID")
        if length == UNDEFINED:
            if tag == PIXEL_DATA:
                raise UnsupportedEncodingError("encapsulated (compressed) pixel data is not supported")
            if vr == b"SQ" or vr == b"UN":
                r.skip_undefined()
                continue
            raise MalformedStreamError(f"undefined length on ({tag[0]:04X},{tag[1]:04X})", start)
        value = r.take(length, f"value of ({tag[0]:04X},{tag[1]:04X})")

        if tag == TRANSFER_SYNTAX:
            ts = _text(value)
            if ts != EXPLICIT_VR_LE:
                raise UnsupportedEncodingError(f"transfer syntax {ts} is not explicit-VR little-endian")
            fields["transfer_syntax"] = ts
        elif tag == ROWS:
            fields["rows"] = _us(value, tag, start)
        elif tag == COLUMNS:
            fields["columns"] = _us(value, tag, start)
        elif tag == BITS_ALLOCATED:
            bits = _us(value, tag, start)
            if bits != 16:
                raise UnsupportedEncodingError(f"BitsAllocated={bits}; only 16-bit pixels are supported")
            fields["bits_allocated"] = bits
        elif tag == PIXEL_REPRESENTATION:
            pixel_representation = _us(value, tag, start)
            if pixel_representation not in (0, 1):
                raise MalformedStreamError(f"PixelRepresentation={pixel_representation}", start)
        elif tag == RESCALE_INTERCEPT:
            fields["rescale_intercept"] = _first_number(value, tag, start)
        elif tag == RESCALE_SLOPE:
            fields["rescale_slope"] = _first_number(value, tag, start)
        elif tag == WINDOW_CENTER:
            window_center = _first_number(value, tag, start)
        elif tag == WINDOW_WIDTH:
            window_width = _first_number(value, tag, start)
        elif tag == INSTANCE_NUMBER:
            fields["instance_number"] = _first_number(value, tag, start, as_int=True)
        elif tag == SLICE_LOCATION:
            fields["slice_location"] = _first_number(value, tag, start)
        elif tag == PIXEL_DATA:
            pixel_bytes = (value, start)

    if "transfer_syntax" not in fields:
        raise MalformedStreamError("no transfer syntax and no dataset", r.pos)
    if pixel_bytes is None:
        raise MalformedStreamError("stream ended without PixelData", r.pos)
    for key in ("rows", "columns"):
        if key not in fields:
            raise MalformedStreamError(f"PixelData present but {key} missing", pixel_bytes[1])
    if fields.get("bits_allocated") != 16:
        raise UnsupportedEncodingError("BitsAllocated missing; only 16-bit pixels are supported")
    if pixel_representation is None:
        log.warning("PixelRepresentation missing; treating pixels as unsigned")
        pixel_representation = 0

    rows, columns = fields["rows"], fields["columns"]
    if rows < 1 or columns < 1:
        raise MalformedStreamError(f"degenerate slice geometry {rows}x{columns}", pixel_bytes[1])
    raw, offset = pixel_bytes
    if len(raw) != 2 * rows * columns:
        raise GeometryMismatchError(
            f"PixelData holds {len(raw)} bytes at offset {offset}, expected 2*{rows}*{columns}={2 * rows * columns}"
        )
    pixels = np.frombuffer(raw, dtype="<i2" if pixel_representation else "<u2").reshape(rows, columns)

    window = None
    if window_center is not None and window_width is not None:
        if window_width > 0:
            window = WindowSpec(window_center, window_width)
        else:
            log.warning("ignoring non-positive WindowWidth %s", window_width)

    del fields["transfer_syntax"]
    return SliceRecord(
        pixels=pixels,
        pixel_representation=pixel_representation,
        window=window,
        filename=filename,
        **fields,
    )


def read_dicom_file(path) -> SliceRecord:
    path = Path(path)
    return parse_dicom_file(path.read_bytes(), filename=path.name)


@dataclass
class ScanAssembly:
    slices: list[SliceRecord]
    ordering_key: str = "instance_number"

    @classmethod
    def from_records(cls, records: Sequence[SliceRecord], prefer: str | None = None) -> "ScanAssembly":
        """Pick the ordering key: InstanceNumber, then SliceLocation, then filename."""
        records = list(records)
        if prefer is not None:
            key = ORDER_ALIASES.get(prefer, prefer)
            if key not in ORDER_KEYS:
                raise InvalidInputError(f"unknown ordering key {prefer!r}")
            return cls(records, key)
        for key in ORDER_KEYS:
            if records and all(getattr(s, key) is not None for s in records):
                return cls(records, key)
        raise InvalidInputError("no ordering key is present on every slice")


def assemble_scan(assembly: ScanAssembly, scan_id: str = "", spacing=None) -> ScanVolume:
    slices = assembly.slices
    key = assembly.ordering_key
    if not slices:
        raise InvalidInputError("cannot assemble a scan from zero slices")
    if key not in ORDER_KEYS:
        raise InvalidInputError(f"unknown ordering key {key!r}")
    first = slices[0]
    for s in slices[1:]:
        if (s.rows, s.columns, s.pixel_representation) != (first.rows, first.columns, first.pixel_representation):
            raise GeometryMismatchError(
                f"slice geometry {s.rows}x{s.columns} (repr {s.pixel_representation}) differs from "
                f"{first.rows}x{first.columns} (repr {first.pixel_representation})"
            )
    values = [getattr(s, key) for s in slices]
    if any(v is None for v in values):
        raise InvalidInputError(f"ordering key {key} missing on some slices")
    order = sorted(range(len(slices)), key=lambda i: values[i])
    for a, b in zip(order, order[1:]):
        if not values[a] < values[b]:
            raise AmbiguousOrderError(f"duplicate {key} value {values[a]!r}")

    planes = [apply_rescale(slices[i].pixels, slices[i].rescale_slope, slices[i].rescale_intercept) for i in order]
    return ScanVolume(np.stack(planes), scan_id=scan_id, spacing=spacing, window=slices[order[0]].window)


def read_dicom_dir(directory, order: str | None = None, scan_id: str | None = None):
    """Parse every regular file in ``directory`` and assemble a volume.

    Returns ``(volume, ordering_key)``.
    """
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.is_file() and not p.name.startswith("."))
    records = [read_dicom_file(p) for p in files]
    assembly = ScanAssembly.from_records(records, prefer=order)
    volume = assemble_scan(assembly, scan_id=scan_id if scan_id is not None else directory.name)
    return volume, assembly.ordering_key
