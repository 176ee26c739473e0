"""Tiny native-format reader/writer for the stub backends (kept independent of ctstack)."""
import argparse
import json
from pathlib import Path

import numpy as np


def args():
    p = argparse.ArgumentParser()
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--value", type=float, default=0.3)
    p.add_argument("--sleep", type=float, default=0.0)
    return p.parse_args()


def read(path):
    meta = json.loads((Path(path) / "meta.json").read_text())
    raw = np.fromfile(Path(path) / "voxels.raw", dtype="<f4")
    return meta, raw.reshape(meta["depth"], meta["height"], meta["width"])


def write(path, meta, voxels):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = dict(meta, dtype="f32", kind="prob", depth=voxels.shape[0], height=voxels.shape[1], width=voxels.shape[2])
    meta.pop("window", None)
    (path / "meta.json").write_text(json.dumps(meta))
    np.ascontiguousarray(voxels, dtype="<f4").tofile(path / "voxels.raw")
