"""Segmentation backends and the end-to-end prediction pipeline.

Two deterministic reference backends stand in for trained networks:

* ``threshold3d`` scores each voxel by the fraction of its 3-D box neighbourhood
  that falls inside an intensity band, so neighbouring slices influence each other.
* ``slice2d`` does the same with 2-D boxes on one slice at a time and can drop
  whole slices at a seeded rate, which mimics independent per-slice failures.

``external`` runs any program that honours the ``--in DIR --out DIR`` protocol.
"""

from __future__ import annotations

import hashlib
import logging
import shlex
import subprocess
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BackendFailureError, CTStackError, InvalidInputError
from .nativeio import read_native, write_native
from .stacker import StackParams, StackPlan, StackSlab, plan_stacks, reassemble, slice_into_stacks
from .volume import (
    MaskVolume,
    NormalizedVolume,
    ProbVolume,
    ScanVolume,
    WindowSpec,
    apply_window,
    resize_to_standard,
    threshold_prob,
)

log = logging.getLogger(__name__)

KINDS = ("threshold3d", "slice2d", "external")
MODES = ("per_slice_2d", "stacked_3d")
MODE_ALIASES = {"2d": "per_slice_2d", "3d": "stacked_3d"}
MAX_RADIUS = 3
DEFAULT_TIMEOUT = 300.0


def _check_band(band, radius: int) -> tuple[float, float]:
    lo, hi = (float(b) for b in band)
    if not (0.0 <= lo <= hi <= 1.0):
        raise InvalidInputError(f"band must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]")
    if int(radius) != radius or not 0 <= radius <= MAX_RADIUS:
        raise InvalidInputError(f"smoothing radius must be an integer in [0, {MAX_RADIUS}], got {radius}")
    return lo, hi


def _box_sum(counts: np.ndarray, radius: int, axes) -> np.ndarray:
    """Sum over a (2r+1)-wide box along ``axes`` with edge-replicated borders."""
    if radius == 0:
        return counts
    out = counts
    for ax in axes:
        pad = [(0, 0)] * out.ndim
        pad[ax] = (radius + 1, radius)
        padded = np.pad(out, pad, mode="edge")
        # the extra leading row becomes the zero of the running sum
        idx = [slice(None)] * out.ndim
        idx[ax] = slice(0, 1)
        padded[tuple(idx)] = 0
        csum = np.cumsum(padded, axis=ax)
        hi = [slice(None)] * out.ndim
        lo = [slice(None)] * out.ndim
        hi[ax] = slice(2 * radius + 1, None)
        lo[ax] = slice(0, -(2 * radius + 1))
        out = csum[tuple(hi)] - csum[tuple(lo)]
    return out


def _band_fraction(voxels: np.ndarray, band, radius: int, axes) -> np.ndarray:
    lo, hi = band
    inside = ((voxels >= lo) & (voxels <= hi)).astype(np.int64)
    counts = _box_sum(inside, radius, axes)
    return counts / float((2 * radius + 1) ** len(axes))


def segment_threshold3d(slab: NormalizedVolume, band, smooth_radius: int = 0) -> ProbVolume:
    band = _check_band(band, smooth_radius)
    score = _band_fraction(slab.voxels, band, smooth_radius, axes=(0, 1, 2))
    return ProbVolume(score.astype(np.float32), scan_id=slab.scan_id, spacing=slab.spacing)


def slice_dropped(seed: int, scan_id: str, slice_index: int, rate: float) -> bool:
    """Deterministic Bernoulli(rate) draw keyed on (seed, scan_id, slice_index)."""
    digest = hashlib.sha256(f"{seed}\x1f{scan_id}\x1f{slice_index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64 < rate


def segment_slice2d(
    slice_: NormalizedVolume,
    band,
    smooth_radius: int = 0,
    rate: float = 0.0,
    seed: int = 0,
    slice_index: int = 0,
) -> ProbVolume:
    """2-D box scoring of each slice; slice ``z`` is zeroed when its hash draw falls under ``rate``.

    ``slice_index`` is the absolute index of the first slice in the parent scan.
    """
    band = _check_band(band, smooth_radius)
    if not 0.0 <= rate <= 1.0:
        raise InvalidInputError(f"instability rate must lie in [0, 1], got {rate}")
    score = _band_fraction(slice_.voxels, band, smooth_radius, axes=(1, 2))
    for z in range(slice_.depth):
        if slice_dropped(seed, slice_.scan_id, slice_index + z, rate):
            score[z] = 0.0
    return ProbVolume(score.astype(np.float32), scan_id=slice_.scan_id, spacing=slice_.spacing)


def segment_external(slab: NormalizedVolume, command, timeout: float = DEFAULT_TIMEOUT) -> ProbVolume:
    """Run an external program on ``slab`` in a private temporary workspace."""
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    if not argv:
        raise InvalidInputError("external backend needs a command")
    with tempfile.TemporaryDirectory(prefix="ctstack-ext-") as work:
        in_dir, out_dir = Path(work) / "in", Path(work) / "out"
        write_native(slab, in_dir)
        try:
            proc = subprocess.run(
                argv + ["--in", str(in_dir), "--out", str(out_dir)],
                capture_output=True,
                text=True,
                timeout=timeout,
            )
        except subprocess.TimeoutExpired as exc:
            raise BackendFailureError(f"external backend timed out after {timeout} s", _captured(exc)) from None
        except OSError as exc:
            raise BackendFailureError(f"cannot start external backend {argv[0]!r}: {exc}") from None
        if proc.returncode != 0:
            raise BackendFailureError(f"external backend exited with status {proc.returncode}", _captured(proc))
        try:
            result = read_native(out_dir)
        except CTStackError as exc:
            raise BackendFailureError(f"external backend produced an unreadable volume: {exc}", _captured(proc)) from None
    if not isinstance(result, ProbVolume):
        raise BackendFailureError(f"external backend returned a {result.kind} volume, expected prob", _captured(proc))
    if result.shape != slab.shape:
        raise BackendFailureError(f"external backend returned shape {result.shape}, expected {slab.shape}", _captured(proc))
    return result.replace(scan_id=slab.scan_id, spacing=slab.spacing)


def _captured(proc) -> str:
    parts = []
    for name in ("stdout", "stderr"):
        text = getattr(proc, name, None)
        if isinstance(text, bytes):
            text = text.decode(errors="replace")
        if text:
            parts.append(f"[{name}]\n{text.rstrip()}")
    return "\n".join(parts)


class Backend:
    """Callable segmenter. ``slice_offset`` is the index of the input's first slice in the scan."""

    kind = "custom"
    mode = "stacked_3d"

    def __call__(self, volume: NormalizedVolume, *, slice_offset: int = 0) -> ProbVolume:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "mode": self.mode}


class Threshold3DBackend(Backend):
    kind = "threshold3d"

    def __init__(self, band, radius: int = 1, mode: str = "stacked_3d"):
        self.band = _check_band(band, radius)
        self.radius = int(radius)
        self.mode = mode

    def __call__(self, volume, *, slice_offset=0):
        return segment_threshold3d(volume, self.band, self.radius)

    def describe(self):
        return {"kind": self.kind, "mode": self.mode, "band": list(self.band), "radius": self.radius}


class Slice2DBackend(Backend):
    kind = "slice2d"

    def __init__(self, band, radius: int = 1, rate: float = 0.0, seed: int = 0, mode: str = "per_slice_2d"):
        self.band = _check_band(band, radius)
        self.radius = int(radius)
        if not 0.0 <= rate <= 1.0:
            raise InvalidInputError(f"instability rate must lie in [0, 1], got {rate}")
        self.rate = float(rate)
        self.seed = int(seed)
        self.mode = mode

    def __call__(self, volume, *, slice_offset=0):
        return segment_slice2d(volume, self.band, self.radius, self.rate, self.seed, slice_index=slice_offset)

    def describe(self):
        return {
            "kind": self.kind,
            "mode": self.mode,
            "band": list(self.band),
            "radius": self.radius,
            "rate": self.rate,
            "seed": self.seed,
        }


class ExternalBackend(Backend):
    kind = "external"

    def __init__(self, command, timeout: float = DEFAULT_TIMEOUT, mode: str = "stacked_3d"):
        self.command = command
        self.timeout = float(timeout)
        self.mode = mode

    def __call__(self, volume, *, slice_offset=0):
        return segment_external(volume, self.command, self.timeout)

    def describe(self):
        return {"kind": self.kind, "mode": self.mode, "command": self.command, "timeout": self.timeout}


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str
    mode: str = "stacked_3d"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown backend kind {self.kind!r}; expected one of {KINDS}")
        mode = MODE_ALIASES.get(self.mode, self.mode)
        if mode not in MODES:
            raise InvalidInputError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "mode", mode)

    def build(self) -> Backend:
        p = dict(self.params)
        band = p.pop("band", (0.0, 1.0))
        try:
            if self.kind == "threshold3d":
                return Threshold3DBackend(band, int(p.pop("radius", 1)), mode=self.mode)
            if self.kind == "slice2d":
                return Slice2DBackend(
                    band, int(p.pop("radius", 1)), float(p.pop("rate", 0.0)), int(p.pop("seed", 0)), mode=self.mode
                )
            return ExternalBackend(p.pop("command"), float(p.pop("timeout", DEFAULT_TIMEOUT)), mode=self.mode)
        except KeyError as exc:
            raise InvalidInputError(f"backend {self.kind} needs parameter {exc.args[0]!r}") from None


def resolve_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise InvalidInputError(f"unknown mode {mode!r}; expected 2d or 3d")
    return mode


@dataclass
class PipelineResult:
    mask: MaskVolume
    prob: ProbVolume
    mode: str
    backend_calls: int
    call_seconds: list[float]
    total_seconds: float
    threshold: float
    plan: StackPlan | None = None

    @property
    def backend_seconds(self) -> float:
        return float(sum(self.call_seconds))


def _timed(backend: Backend, unit: NormalizedVolume, offset: int):
    t0 = time.perf_counter()
    out = backend(unit, slice_offset=offset)
    elapsed = time.perf_counter() - t0
    if not isinstance(out, ProbVolume):
        raise BackendFailureError(f"backend {backend.kind} returned {type(out).__name__}, expected ProbVolume")
    if out.shape != unit.shape:
        raise BackendFailureError(f"backend {backend.kind} returned shape {out.shape}, expected {unit.shape}")
    return out, elapsed


def run_pipeline(
    scan: ScanVolume,
    window: WindowSpec | None,
    backend: Backend,
    params: StackParams = StackParams(32, 0),
    threshold: float = 0.2,
    mode: str | None = None,
    workers: int = 1,
    resize: bool = False,
) -> PipelineResult:
    """Window ``scan``, segment it slice-by-slice (2-D) or stack-by-stack (3-D), and threshold.

    Stacked mode uses ``params`` as given; inference normally runs with zero
    overlap. With ``resize`` the windowed volume is resampled to 512x512 first.
    """
    t_start = time.perf_counter()
    mode = resolve_mode(mode or backend.mode)
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInputError(f"threshold must lie in [0, 1], got {threshold}")
    window = window if window is not None else scan.window
    if window is None:
        raise InvalidInputError(f"scan {scan.scan_id!r} has no window metadata; pass one explicitly")
    normalized = apply_window(scan, window)
    if resize:
        normalized = resize_to_standard(normalized)

    plan = None
    if mode == "per_slice_2d":
        units = [(z, normalized.with_voxels(normalized.voxels[z:z + 1])) for z in range(normalized.depth)]
    else:
        plan = plan_stacks(normalized.depth, params)
        units = [(plan.entries[s.plan_index].start, s.data) for s in slice_into_stacks(normalized, plan)]

    def work(item):
        offset, unit = item
        return _timed(backend, unit, offset)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(work, units))
    else:
        outputs = [work(u) for u in units]
    call_seconds = [sec for _, sec in outputs]
    log.info("%s: %d backend call(s) in %s mode", scan.scan_id or "scan", len(outputs), mode)

    if mode == "per_slice_2d":
        prob = ProbVolume(np.concatenate([o.voxels for o, _ in outputs]), scan_id=scan.scan_id, spacing=normalized.spacing)
    else:
        prob = reassemble([StackSlab(k, o) for k, (o, _) in enumerate(outputs)], plan)
    mask = threshold_prob(prob, threshold)
    return PipelineResult(
        mask=mask,
        prob=prob,
        mode=mode,
        backend_calls=len(outputs),
        call_seconds=call_seconds,
        total_seconds=time.perf_counter() - t_start,
        threshold=threshold,
        plan=plan,
    )
