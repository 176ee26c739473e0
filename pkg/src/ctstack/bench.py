"""Wall-clock and backend-call accounting for 2-D versus stacked 3-D inference."""

from __future__ import annotations

import statistics
from dataclasses import asdict, dataclass, field

from .errors import BackendFailureError, InvalidInputError
from .segmenters import Backend, resolve_mode, run_pipeline
from .stacker import StackParams
from .volume import ScanVolume, WindowSpec


@dataclass
class TimingReport:
    mode: str
    backend_kind: str
    depth: int
    stack_size: int
    backend_calls: int
    wall_seconds: float
    backend_seconds: float
    call_mean: float
    call_min: float
    call_max: float
    workers: int = 1
    repetitions: int = 1
    parallel: bool = False
    wall_samples: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def time_inference(
    scan: ScanVolume,
    window: WindowSpec | None,
    backend: Backend,
    mode: str,
    params: StackParams = StackParams(32, 0),
    repetitions: int = 5,
    workers: int = 1,
    threshold: float = 0.2,
) -> TimingReport:
    """Run the pipeline ``repetitions`` times; report median wall and backend-only time.

    Any backend failure propagates and the partial timings are dropped.
    """
    if repetitions < 1:
        raise InvalidInputError(f"repetitions must be >= 1, got {repetitions}")
    mode = resolve_mode(mode)
    walls, backend_totals, calls = [], [], []
    counts = set()
    for _ in range(repetitions):
        result = run_pipeline(scan, window, backend, params, threshold=threshold, mode=mode, workers=workers)
        walls.append(result.total_seconds)
        backend_totals.append(result.backend_seconds)
        calls.extend(result.call_seconds)
        counts.add(result.backend_calls)
    if len(counts) != 1:
        raise BackendFailureError(f"backend call count changed between repetitions: {sorted(counts)}")
    return TimingReport(
        mode=mode,
        backend_kind=backend.kind,
        depth=scan.depth,
        stack_size=params.stack_size,
        backend_calls=counts.pop(),
        wall_seconds=statistics.median(walls),
        backend_seconds=statistics.median(backend_totals),
        call_mean=statistics.fmean(calls),
        call_min=min(calls),
        call_max=max(calls),
        workers=workers,
        repetitions=repetitions,
        parallel=workers > 1,
        wall_samples=walls,
    )


def compare_modes(report_2d: TimingReport, report_3d: TimingReport) -> dict:
    return {
        "call_ratio_2d_3d": report_2d.backend_calls / report_3d.backend_calls,
        "wall_ratio_2d_3d": report_2d.wall_seconds / report_3d.wall_seconds,
        "backend_ratio_2d_3d": report_2d.backend_seconds / report_3d.backend_seconds,
    }


def format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    line = lambda r: "| " + " | ".join(str(c).center(w) for c, w in zip(r, widths)) + " |"
    return "\n".join([rule, line(header), rule] + [line(r) for r in rows] + [rule])


def format_inference_table(rows: dict[str, tuple[float, float]]) -> str:
    """Per-technique inference seconds with and without GPU, e.g. ``{"2D": (70, 1145)}``."""
    body = [[name, f"{gpu:g}", f"{cpu:g}"] for name, (gpu, cpu) in rows.items()]
    return format_table(["Technique", "Inference time With GPU", "Inference time Without GPU"], body)


def format_timing_reports(reports: list[TimingReport]) -> str:
    label = {"per_slice_2d": "2D", "stacked_3d": "3D"}
    body = [
        [label.get(r.mode, r.mode), str(r.backend_calls), f"{r.wall_seconds:.4f}", f"{r.backend_seconds:.4f}"]
        for r in reports
    ]
    return format_table(["Technique", "Backend calls", "Wall s (median)", "Backend s (median)"], body)
