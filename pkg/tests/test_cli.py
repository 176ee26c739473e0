import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dicom_fixture import write_dicom
from ctstack.cli import run
from ctstack.nativeio import read_native, write_native
from ctstack.volume import MaskVolume, ScanVolume, WindowSpec


@pytest.fixture
def phantom(tmp_path):
    out = tmp_path / "ph"
    assert run(["synth", "--seed", "5", "--depth", "40", "--width", "48", "--height", "48", "--out", str(out)]) == 0
    return out


def test_synth_writes_scan_mask_manifest(phantom):
    assert isinstance(read_native(phantom / "scan"), ScanVolume)
    assert read_native(phantom / "mask").count() > 0
    manifest = json.loads((phantom / "manifest.json").read_text())
    assert manifest["argv"][0] == "synth" and manifest["config"]["seed"] == 5


def test_ingest_dicom_dir(tmp_path):
    src = tmp_path / "dcm"
    src.mkdir()
    for i in range(3):
        (src / f"s{i}.dcm").write_bytes(write_dicom(np.full((4, 4), 100 * i, dtype=np.int16),
                                                    instance_number=3 - i, window_center="-600",
                                                    window_width="1500"))
    out = tmp_path / "vol"
    assert run(["ingest", "--in", str(src), "--out", str(out), "--scan-id", "x"]) == 0
    vol = read_native(out)
    assert vol.scan_id == "x" and vol.window == WindowSpec(-600, 1500)
    assert vol.voxels[:, 0, 0].tolist() == [200 - 1024, 100 - 1024, -1024]
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["inputs"]) == 3


def test_ingest_bad_file_is_data_error(tmp_path, capsys):
    src = tmp_path / "dcm"
    src.mkdir()
    (src / "junk.dcm").write_bytes(b"\x00" * 200)
    assert run(["ingest", "--in", str(src), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_stack_writes_plan(tmp_path):
    vol = tmp_path / "v"
    write_native(ScanVolume(np.zeros((601, 2, 2), dtype=np.int16)), vol)
    out = tmp_path / "stacks"
    assert run(["stack", "--in", str(vol), "--out", str(out), "--overlap-factor", "0.625"]) == 0
    plan = json.loads((out / "plan.json").read_text())
    assert (plan["N"], plan["S"], plan["O"], plan["stride"]) == (601, 32, 20, 12)
    assert len(list(out.glob("slab_*"))) == 49
    assert read_native(out / "slab_0048").depth == 32


def test_predict_call_counts(tmp_path):
    vol = tmp_path / "v"
    write_native(ScanVolume(np.full((601, 4, 4), -900, dtype=np.int16)), vol)
    for mode, calls in (("3d", 19), ("2d", 601)):
        out = tmp_path / mode
        assert run(["predict", "--in", str(vol), "--out", str(out), "--mode", mode]) == 0
        report = json.loads((out / "predict.json").read_text())
        assert report["backend_calls"] == calls
    assert (tmp_path / "3d" / "plan.json").exists()
    assert not (tmp_path / "2d" / "plan.json").exists()


def test_predict_evaluate_areaplot(phantom, tmp_path):
    pred = tmp_path / "pred"
    assert run(["predict", "--in", str(phantom), "--out", str(pred), "--radius", "0"]) == 0
    report = tmp_path / "eval" / "report.json"
    assert run(["evaluate", "--pred", str(pred), "--truth", str(phantom), "--out", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["mean_dice"] == 1.0
    csv_path, svg_path = tmp_path / "ap" / "a.csv", tmp_path / "ap" / "a.svg"
    assert run(["areaplot", "--mask", str(phantom), "--pred", str(pred), "--csv", str(csv_path),
                "--svg", str(svg_path)]) == 0
    with csv_path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["slice_index", "truth_ratio", "truth_normalized", "pred_ratio", "pred_normalized"]
    assert len(rows) == 41
    assert svg_path.read_text().lstrip().startswith("<?xml")


def test_evaluate_directory_of_scans(tmp_path):
    for name in ("a", "b"):
        write_native(MaskVolume(np.ones((2, 2, 2)), scan_id=name), tmp_path / "truth" / name)
        vox = np.ones((2, 2, 2)) if name == "a" else np.zeros((2, 2, 2))
        write_native(MaskVolume(vox, scan_id=name), tmp_path / "pred" / name)
    out = tmp_path / "r.json"
    assert run(["evaluate", "--pred", str(tmp_path / "pred"), "--truth", str(tmp_path / "truth"),
                "--out", str(out)]) == 0
    assert json.loads(out.read_text())["mean_dice"] == 0.5


def test_sweep_outputs(phantom, tmp_path):
    out = tmp_path / "sweep"
    assert run(["sweep", "--in", str(phantom), "--out", str(out)]) == 0
    overlaps = {}
    for f in ("0", "0.375", "0.625"):
        plan = json.loads((out / f"factor_{f}" / "plan.json").read_text())
        overlaps[f] = plan["O"]
        assert (out / f"areaplot_{f}.csv").exists() and (out / f"areaplot_{f}.svg").exists()
    assert overlaps == {"0": 0, "0.375": 12, "0.625": 20}
    summary = json.loads((out / "sweep.json").read_text())
    assert [e["overlap_slices"] for e in summary["factors"]] == [0, 12, 20]
    assert (out / "sweep.svg").exists() and (out / "sweep.csv").exists()


def test_bench(phantom, tmp_path, capsys):
    out = tmp_path / "b.json"
    assert run(["bench", "--in", str(phantom), "--out", str(out), "--reps", "1"]) == 0
    data = json.loads(out.read_text())
    calls = {r["mode"]: r["backend_calls"] for r in data["reports"]}
    assert calls == {"per_slice_2d": 40, "stacked_3d": 2}
    assert "Dice" not in capsys.readouterr().out


def test_rerun_from_manifest_is_byte_identical(phantom, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(["predict", "--in", str(phantom), "--out", "p", "--overlap-slices", "8"]) == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "p").rglob("*") if p.is_file()}
    argv = json.loads((tmp_path / "p" / "manifest.json").read_text())["argv"]
    assert run(argv) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "p").rglob("*") if p.is_file()}
    assert first == second


@pytest.mark.parametrize("argv", [["frobnicate"], [], ["predict", "--in", "x"], ["stack", "--in", "a", "--out", "b",
                                                                              "--overlap-slices", "1",
                                                                              "--overlap-factor", "0.5"]])
def test_usage_errors(argv, capsys):
    assert run(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_external_without_command_is_usage(phantom, tmp_path):
    assert run(["predict", "--in", str(phantom), "--out", str(tmp_path / "o"), "--backend", "external"]) == 1


def test_missing_input_is_data_error(tmp_path):
    assert run(["predict", "--in", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 2


def test_invalid_overlap_is_data_error(phantom, tmp_path):
    assert run(["predict", "--in", str(phantom), "--out", str(tmp_path / "o"), "--overlap-slices", "32"]) == 2


def test_external_backend(phantom, tmp_path, stub):
    command = " ".join(stub("constant", "--value", "0.9"))
    out = tmp_path / "o"
    assert run(["predict", "--in", str(phantom), "--out", str(out), "--backend", "external",
                "--command", command]) == 0
    assert read_native(out / "mask").count() == 40 * 48 * 48


def test_external_backend_failure_exit_3(phantom, tmp_path, stub, capsys):
    command = " ".join(stub("fail"))
    assert run(["predict", "--in", str(phantom), "--out", str(tmp_path / "o"), "--backend", "external",
                "--command", command]) == 3
    assert "backend failure" in capsys.readouterr().err


def test_console_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ctstack", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "ctstack" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "ctstack", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1
