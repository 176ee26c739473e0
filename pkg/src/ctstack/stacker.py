"""Split a volume into fixed-depth overlapping stacks and put predictions back together.

Stacks use half-open slice ranges ``[start, start + S)``. Adjacent stacks start
``S - O`` slices apart, where ``O`` is the number of shared slices. The last
stack is padded past the end of the volume so that every stack holds exactly
``S`` slices; padding is dropped again on reassembly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryMismatchError, InvalidInputError, PlanMismatchError
from .volume import MaskVolume, NormalizedVolume, ProbVolume, ScanVolume, Volume

AIR_HU = -1000

PAD_VALUE = {ScanVolume: AIR_HU, MaskVolume: 0, NormalizedVolume: 0.0, ProbVolume: 0.0}


@dataclass(frozen=True)
class StackParams:
    stack_size: int
    overlap_slices: int = 0

    def __post_init__(self):
        if isinstance(self.stack_size, bool) or int(self.stack_size) != self.stack_size or self.stack_size < 1:
            raise InvalidInputError(f"stack size must be a positive integer, got {self.stack_size}")
        if int(self.overlap_slices) != self.overlap_slices or self.overlap_slices < 0:
            raise InvalidInputError(f"overlap must be a non-negative integer, got {self.overlap_slices}")
        if self.overlap_slices >= self.stack_size:
            raise InvalidInputError(
                f"overlap ({self.overlap_slices}) must be smaller than the stack size ({self.stack_size})"
            )

    @property
    def stride(self) -> int:
        return self.stack_size - self.overlap_slices

    @property
    def overlap_factor(self) -> float:
        return self.overlap_slices / self.stack_size

    @classmethod
    def from_factor(cls, stack_size: int, factor: float) -> "StackParams":
        """Convert an overlap factor to whole slices; the factor must hit an integer exactly."""
        overlap = round(factor * stack_size)
        if abs(factor * stack_size - overlap) > 1e-9:
            raise InvalidInputError(
                f"overlap factor {factor} with stack size {stack_size} is not a whole number of slices"
            )
        return cls(stack_size, overlap)


@dataclass(frozen=True)
class StackEntry:
    start: int
    pad: int = 0


@dataclass(frozen=True)
class StackPlan:
    total_slices: int
    params: StackParams
    entries: tuple[StackEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def span(self, k: int) -> tuple[int, int]:
        start = self.entries[k].start
        return start, start + self.params.stack_size

    def to_dict(self) -> dict:
        return {
            "N": self.total_slices,
            "S": self.params.stack_size,
            "O": self.params.overlap_slices,
            "overlap_factor": self.params.overlap_factor,
            "stride": self.params.stride,
            "entries": [{"start": e.start, "pad": e.pad} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StackPlan":
        plan = plan_stacks(int(data["N"]), StackParams(int(data["S"]), int(data["O"])))
        stored = tuple(StackEntry(int(e["start"]), int(e["pad"])) for e in data.get("entries", []))
        if stored and stored != plan.entries:
            raise PlanMismatchError("stored plan entries disagree with N, S and O")
        return plan


def plan_stacks(total_slices: int, params: StackParams) -> StackPlan:
    if isinstance(total_slices, bool) or int(total_slices) != total_slices or total_slices < 1:
        raise InvalidInputError(f"a volume needs at least one slice, got {total_slices}")
    n_slices, size, stride = int(total_slices), params.stack_size, params.stride
    count = 1 if n_slices <= size else 1 + math.ceil((n_slices - size) / stride)
    entries = []
    for k in range(count):
        start = k * stride
        entries.append(StackEntry(start, max(0, start + size - n_slices)))
    return StackPlan(n_slices, params, tuple(entries))


@dataclass(frozen=True)
class StackSlab:
    plan_index: int
    data: Volume


def slice_into_stacks(volume: Volume, plan: StackPlan) -> list[StackSlab]:
    if volume.depth != plan.total_slices:
        raise GeometryMismatchError(f"volume depth {volume.depth} != plan total slices {plan.total_slices}")
    fill = PAD_VALUE.get(type(volume), 0)
    slabs = []
    for k, entry in enumerate(plan.entries):
        stop = min(entry.start + plan.params.stack_size, volume.depth)
        block = volume.voxels[entry.start:stop]
        if entry.pad:
            pad = np.full((entry.pad,) + block.shape[1:], fill, dtype=block.dtype)
            block = np.concatenate([block, pad])
        # sub-blocks of a validated volume plus type-appropriate padding stay valid
        slabs.append(StackSlab(k, volume._derived(block)))
    return slabs


def reassemble(slabs: list[StackSlab], plan: StackPlan) -> ProbVolume:
    """Stitch slab predictions back into a full-depth volume.

    Padding slices are discarded. Slices covered by more than one slab get the
    arithmetic mean of the covering values. The sum is accumulated in float64,
    so for float32 payloads agreeing slabs reproduce their value exactly.
    """
    if len(slabs) != len(plan):
        raise PlanMismatchError(f"{len(slabs)} slabs for a plan of {len(plan)} stacks")
    slabs = sorted(slabs, key=lambda s: s.plan_index)
    if [s.plan_index for s in slabs] != list(range(len(plan))):
        raise PlanMismatchError("slab indices do not enumerate the plan")
    size, total = plan.params.stack_size, plan.total_slices
    first = slabs[0].data
    plane = first.shape[1:]
    acc = np.zeros((total,) + plane, dtype=np.float64)
    hits = np.zeros(total, dtype=np.int64)
    expected = (size,) + plane
    for slab, entry in zip(slabs, plan.entries):
        vox = slab.data.voxels
        if vox.shape != expected:
            raise PlanMismatchError(f"slab {slab.plan_index} has shape {vox.shape}, expected {expected}")
        start, keep = entry.start, size - entry.pad
        acc[start:start + keep] += vox[:keep]
        hits[start:start + keep] += 1
    out = acc / hits[:, None, None]
    cls = type(first) if isinstance(first, (ProbVolume, NormalizedVolume)) else ProbVolume
    return cls(out.astype(cls.dtype), scan_id=first.scan_id, spacing=first.spacing)
