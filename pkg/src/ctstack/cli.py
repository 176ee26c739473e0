"""Command-line entry point: ``ctstack <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 data/format error, 3 backend failure.
Every run leaves a ``manifest.json`` (argv, resolved config, tool version and
SHA-256 digests of the inputs) beside its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .bench import compare_modes, format_timing_reports, time_inference
from .dicom import read_dicom_dir
from .errors import BackendFailureError, CTStackError
from .metrics import AreaPlot, area_plot, continuity_tv, dice_score, evaluate
from .nativeio import META_NAME, atomic_write_text, read_native, write_native
from .plotting import plot_area_plots, plot_sweep
from .segmenters import BackendDescriptor, run_pipeline
from .stacker import StackParams, plan_stacks, slice_into_stacks
from .synth import LUNG_WINDOW, PhantomSpec, generate_phantom
from .volume import MaskVolume, ScanVolume, WindowSpec, resize_to_standard

log = logging.getLogger("ctstack")

DEFAULT_THRESHOLD = 0.2
DEFAULT_LESION_BAND_HU = (-700.0, -500.0)
SWEEP_FACTORS = (0.0, 0.375, 0.625)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _digest(path: Path) -> dict:
    path = Path(path)
    if path.is_file():
        return {str(path): hashlib.sha256(path.read_bytes()).hexdigest()}
    out = {}
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file() and not p.name.startswith("."):
                out[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _write_manifest(out_dir: Path, args, inputs: list, config: dict) -> None:
    digests = {}
    for p in inputs:
        if p is not None:
            digests.update(_digest(Path(p)))
    manifest = {
        "tool": "ctstack",
        "version": __version__,
        "argv": args._argv,
        "config": config,
        "inputs": digests,
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    atomic_write_text(Path(out_dir) / "manifest.json", _dump_json(manifest))


def _volume_dir(path, role: str) -> Path:
    """Accept a volume directory or a parent holding ``<role>/`` (as written by ``synth``/``predict``)."""
    path = Path(path)
    if (path / META_NAME).exists():
        return path
    if (path / role / META_NAME).exists():
        return path / role
    raise CTStackError(f"{path} is not a volume directory and has no {role}/ volume")


def _load(path, role: str, cls):
    vol = read_native(_volume_dir(path, role))
    if not isinstance(vol, cls):
        raise CTStackError(f"{path}: expected a {cls.kind} volume, found {vol.kind}")
    return vol


def _window(args, scan: ScanVolume) -> WindowSpec:
    if args.window_center is not None or args.window_width is not None:
        if args.window_center is None or args.window_width is None:
            raise UsageError("--window-center and --window-width go together")
        return WindowSpec(args.window_center, args.window_width)
    if scan.window is not None:
        return scan.window
    log.warning("scan %s has no window metadata; using the lung window %s", scan.scan_id, LUNG_WINDOW)
    return LUNG_WINDOW


def _stack_params(args) -> StackParams:
    if getattr(args, "overlap_factor", None) is not None:
        return StackParams.from_factor(args.stack_size, args.overlap_factor)
    return StackParams(args.stack_size, getattr(args, "overlap_slices", 0) or 0)


def _descriptor(args, window: WindowSpec, mode: str) -> BackendDescriptor:
    band = tuple(args.band) if args.band else tuple(float(v) for v in window.normalize(args.band_hu))
    params = {"band": band, "radius": args.radius}
    if args.backend == "slice2d":
        params.update(rate=args.rate, seed=args.seed)
    if args.backend == "external":
        if not args.command:
            raise UsageError("--backend external requires --command")
        params = {"command": args.command, "timeout": args.timeout}
    return BackendDescriptor(args.backend, mode, params)


def _mode(value: str) -> str:
    return {"2d": "per_slice_2d", "3d": "stacked_3d"}[value]


def _area_rows(truth: AreaPlot | None, preds: dict[str, AreaPlot]) -> tuple[list[str], list[list]]:
    header = ["slice_index"]
    if truth is not None:
        header += ["truth_ratio", "truth_normalized"]
    for name in preds:
        header += [f"{name}_ratio", f"{name}_normalized"]
    n = len(truth) if truth is not None else len(next(iter(preds.values())))
    rows = []
    for i in range(n):
        row = [i]
        if truth is not None:
            row += [repr(truth.ratios[i]), repr(truth.normalized[i])]
        for plot in preds.values():
            row += [repr(plot.ratios[i]), repr(plot.normalized[i])]
        rows.append(row)
    return header, rows


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> dict:
    scan, key = read_dicom_dir(args.input, order=args.order, scan_id=args.scan_id)
    if args.resize:
        scan = resize_to_standard(scan)
    write_native(scan, args.out)
    report = {"scan_id": scan.scan_id, "depth": scan.depth, "ordering_key": key,
              "width": scan.width, "height": scan.height}
    atomic_write_text(Path(args.out) / "ingest.json", _dump_json(report))
    _write_manifest(args.out, args, [args.input], {"order": args.order, "resize": args.resize})
    return report


def cmd_synth(args) -> dict:
    spec = PhantomSpec(seed=args.seed, depth=args.depth, n_lesions=args.lesions, width=args.width,
                       height=args.height, noise_hu=args.noise)
    scan, mask = generate_phantom(spec)
    out = Path(args.out)
    write_native(scan, out / "scan")
    write_native(mask, out / "mask")
    config = {"seed": spec.seed, "depth": spec.depth, "lesions": spec.n_lesions, "width": spec.width,
              "height": spec.height, "noise_hu": spec.noise_hu, "lesion_band_hu": list(spec.lesion_band)}
    _write_manifest(out, args, [], config)
    return {"scan_id": scan.scan_id, "lesion_voxels": mask.count()}


def cmd_stack(args) -> dict:
    vol = read_native(args.input)
    params = _stack_params(args)
    plan = plan_stacks(vol.depth, params)
    out = Path(args.out)
    for slab in slice_into_stacks(vol, plan):
        write_native(slab.data, out / f"slab_{slab.plan_index:04d}")
    atomic_write_text(out / "plan.json", _dump_json(plan.to_dict()))
    _write_manifest(out, args, [args.input], plan.to_dict() | {"entries": len(plan)})
    return {"stacks": len(plan), "stride": params.stride, "overlap_factor": params.overlap_factor}


def _predict(scan, args, params, out: Path) -> tuple:
    window = _window(args, scan)
    desc = _descriptor(args, window, _mode(args.mode))
    backend = desc.build()
    result = run_pipeline(scan, window, backend, params, threshold=args.threshold, workers=args.workers,
                          resize=args.resize)
    write_native(result.mask, out / "mask")
    write_native(result.prob, out / "prob")
    config = {
        "backend": backend.describe(),
        "mode": result.mode,
        "window": {"center": window.center, "width": window.width},
        "threshold": args.threshold,
        "stack_size": params.stack_size,
        "overlap_slices": params.overlap_slices,
        "overlap_factor": params.overlap_factor,
        "workers": args.workers,
        "resize": args.resize,
    }
    report = {"scan_id": scan.scan_id, "depth": scan.depth, "backend_calls": result.backend_calls, "config": config}
    if result.plan is not None:
        atomic_write_text(out / "plan.json", _dump_json(result.plan.to_dict()))
        report["stacks"] = len(result.plan)
    atomic_write_text(out / "predict.json", _dump_json(report))
    log.info("%d backend calls (%s), %.3f s", result.backend_calls, result.mode, result.total_seconds)
    return result, config


def cmd_predict(args) -> dict:
    scan = _load(args.input, "scan", ScanVolume)
    result, config = _predict(scan, args, _stack_params(args), Path(args.out))
    _write_manifest(args.out, args, [_volume_dir(args.input, "scan")], config)
    return {"backend_calls": result.backend_calls, "mode": result.mode}


def _collect(path: Path, role: str, cls) -> dict[str, object]:
    """Map names to volumes: a single volume, or every volume found one level down."""
    path = Path(path)
    try:
        return {"": _load(path, role, cls)}
    except CTStackError:
        pass
    found = {}
    for child in sorted(p for p in path.iterdir() if p.is_dir()):
        try:
            found[child.name] = _load(child, role, cls)
        except CTStackError:
            continue
    if not found:
        raise CTStackError(f"no {cls.kind} volumes under {path}")
    return found


def cmd_evaluate(args) -> dict:
    preds = _collect(Path(args.pred), "mask", MaskVolume)
    truths = _collect(Path(args.truth), "mask", MaskVolume)
    if set(preds) != set(truths):
        raise CTStackError(f"prediction and truth sets differ: {sorted(set(preds) ^ set(truths))}")
    pairs = [(preds[k], truths[k]) for k in sorted(preds)]
    report = evaluate(pairs, threshold=args.threshold, config={"threshold": args.threshold})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, _dump_json(report.to_dict()))
    _write_manifest(out.parent, args, [args.pred, args.truth], {"threshold": args.threshold})
    return {"mean_dice": report.mean_dice, "scans": len(pairs)}


def cmd_areaplot(args) -> dict:
    truth = area_plot(_load(args.mask, "mask", MaskVolume))
    preds = {}
    if args.pred:
        pred = _load(args.pred, "mask", MaskVolume)
        if pred.depth != len(truth):
            raise CTStackError(f"prediction depth {pred.depth} != truth depth {len(truth)}")
        preds["pred"] = area_plot(pred)
    header, rows = _area_rows(truth, preds)
    if not preds:
        header += ["pred_ratio", "pred_normalized"]
        rows = [r + ["", ""] for r in rows]
    _write_csv(Path(args.csv), header, rows)
    plot_area_plots({"truth": truth, **preds}, args.svg, title=truth.scan_id or None)
    summary = {"truth_tv": continuity_tv(truth) if len(truth) > 1 else None}
    if preds:
        summary["pred_tv"] = continuity_tv(preds["pred"]) if len(truth) > 1 else None
    _write_manifest(Path(args.csv).parent, args, [args.mask, args.pred], summary)
    return summary


def cmd_bench(args) -> dict:
    scan = _load(args.input, "scan", ScanVolume)
    window = _window(args, scan)
    params = StackParams(args.stack_size, 0)
    modes = ["2d", "3d"] if args.mode == "both" else [args.mode]
    reports = []
    for m in modes:
        backend = _descriptor(args, window, _mode(m)).build()
        reports.append(time_inference(scan, window, backend, m, params, repetitions=args.reps, workers=args.workers))
    payload = {"reports": [r.to_dict() for r in reports],
               "config": {"stack_size": args.stack_size, "reps": args.reps, "workers": args.workers,
                          "threshold": DEFAULT_THRESHOLD, "backend": args.backend}}
    if len(reports) == 2:
        payload["comparison"] = compare_modes(reports[0], reports[1])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, _dump_json(payload))
    print(format_timing_reports(reports))
    _write_manifest(out.parent, args, [_volume_dir(args.input, "scan")], payload["config"])
    return {r.mode: r.backend_calls for r in reports}


def _factor_name(f: float) -> str:
    return f"{f:g}"


def cmd_sweep(args) -> dict:
    scan = _load(args.input, "scan", ScanVolume)
    truth = None
    if args.truth:
        truth = _load(args.truth, "mask", MaskVolume)
    else:
        try:
            truth = _load(args.input, "mask", MaskVolume)
        except CTStackError:
            truth = None
    out = Path(args.out)
    truth_plot = area_plot(truth) if truth is not None else None
    preds, summary = {}, []
    for f in args.factors:
        params = StackParams.from_factor(args.stack_size, f)
        name = _factor_name(f)
        fdir = out / f"factor_{name}"
        result, _ = _predict(scan, args, params, fdir)
        plot = area_plot(result.mask)
        preds[name] = plot
        header, rows = _area_rows(truth_plot, {"pred": plot})
        _write_csv(out / f"areaplot_{name}.csv", header, rows)
        plot_area_plots({"truth": truth_plot, "pred": plot} if truth_plot else {"pred": plot},
                        out / f"areaplot_{name}.svg", title=f"overlap factor = {name}")
        entry = {"factor": f, "overlap_slices": params.overlap_slices, "stacks": result.backend_calls,
                 "pred_tv": continuity_tv(plot) if len(plot) > 1 else None}
        if truth is not None:
            entry["dice"] = dice_score(result.mask, truth)
        summary.append(entry)
    header, rows = _area_rows(truth_plot, {f"pred_{k}": v for k, v in preds.items()})
    _write_csv(out / "sweep.csv", header, rows)
    panels = {f"overlap factor = {k}": ({"truth": truth_plot, "pred": v} if truth_plot else {"pred": v})
              for k, v in preds.items()}
    plot_sweep(panels, out / "sweep.svg")
    report = {
        "scan_id": scan.scan_id,
        "stack_size": args.stack_size,
        "threshold": args.threshold,
        "truth_tv": continuity_tv(truth_plot) if truth_plot is not None and len(truth_plot) > 1 else None,
        "factors": summary,
    }
    atomic_write_text(out / "sweep.json", _dump_json(report))
    _write_manifest(out, args, [_volume_dir(args.input, "scan")] + ([args.truth] if args.truth else []),
                    {"factors": list(args.factors), "stack_size": args.stack_size, "threshold": args.threshold})
    return {"factors": [e["factor"] for e in summary]}


# ---------------------------------------------------------------- parser


def _add_window(p):
    p.add_argument("--window-center", type=float, help="override the scan's window centre (HU)")
    p.add_argument("--window-width", type=float, help="override the scan's window width (HU)")


def _add_backend(p, default_mode: str | None = "3d"):
    p.add_argument("--backend", choices=["threshold3d", "slice2d", "external"], default="threshold3d")
    p.add_argument("--band-hu", nargs=2, type=float, default=DEFAULT_LESION_BAND_HU, metavar=("LO", "HI"),
                   help="intensity band in HU, mapped through the window (default: %(default)s)")
    p.add_argument("--band", nargs=2, type=float, metavar=("LO", "HI"), help="band in windowed [0,1] units")
    p.add_argument("--radius", type=int, default=1, help="box smoothing radius in voxels")
    p.add_argument("--rate", type=float, default=0.0, help="slice2d instability rate")
    p.add_argument("--seed", type=int, default=0, help="slice2d instability seed")
    p.add_argument("--command", help="external backend program")
    p.add_argument("--timeout", type=float, default=300.0, help="external backend timeout in seconds")
    p.add_argument("--workers", type=int, default=1)
    _add_window(p)


def _add_stacking(p, overlap: bool = True):
    p.add_argument("--stack-size", type=int, default=32)
    if overlap:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--overlap-slices", type=int, default=0)
        g.add_argument("--overlap-factor", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress")
    parser = _Parser(prog="ctstack", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"ctstack {__version__}")
    sub = parser.add_subparsers(dest="command_name", required=True, parser_class=_Parser)
    _sub_add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _sub_add(*a, parents=[common], **kw)

    p = sub.add_parser("ingest", help="read a directory of DICOM slices into a native volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--order", choices=["instance", "location", "name"])
    p.add_argument("--scan-id")
    p.add_argument("--resize", action="store_true", help="resample slices to 512x512")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a phantom scan and its mask")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth", type=int, default=64)
    p.add_argument("--lesions", type=int, default=3)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--noise", type=int, default=0, help="uniform HU jitter amplitude")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stack", help="split a volume into stacks and write plan.json")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    _add_stacking(p)
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("predict", help="segment a scan in 2d or 3d mode")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["2d", "3d"], default="3d")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--resize", action="store_true")
    _add_stacking(p)
    _add_backend(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="dice and continuity report for predictions against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD, help="recorded in the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("areaplot", help="area-plot CSV and SVG for a mask (and optional prediction)")
    p.add_argument("--mask", required=True)
    p.add_argument("--pred")
    p.add_argument("--csv", required=True)
    p.add_argument("--svg", required=True)
    p.set_defaults(func=cmd_areaplot)

    p = sub.add_parser("bench", help="time 2d and/or 3d inference")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["2d", "3d", "both"], default="both")
    p.add_argument("--reps", type=int, default=5)
    _add_stacking(p, overlap=False)
    _add_backend(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="predict and area-plot across overlap factors")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--truth")
    p.add_argument("--out", required=True)
    p.add_argument("--factors", nargs="+", type=float, default=list(SWEEP_FACTORS))
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--resize", action="store_true")
    _add_stacking(p, overlap=False)
    _add_backend(p)
    p.set_defaults(func=cmd_sweep, mode="3d")
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args._argv = argv
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except UsageError as exc:
        print(f"ctstack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendFailureError as exc:
        print(f"ctstack: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (CTStackError, OSError) as exc:
        print(f"ctstack: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if summary:
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
