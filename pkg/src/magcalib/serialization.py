"""File-boundary formats: JSONL fingerprints, map persistence, JSON configs.

In memory rotations are matrices; on disk they are unit quaternions in
``[w, x, y, z]`` order. A fingerprint record is one JSON object per line
with fixed field order::

    {"t": <seconds>, "p": [x, y, z], "q": [w, x, y, z], "B": [bx, by, bz]}

positions in meters, readings in uT. Map files are versioned JSON containers
holding hyperparameters, grid metadata, and per-block training arrays;
Cholesky factors are recomputed on load.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .extrinsic import CalibrationConfig, CalibrationResult
from .geometry import Dataset, Fingerprint, Pose
from .intrinsic import AffineDistortion
from .magmap import GpHyperparams, MagMap, MapBlock, _fit_block
from .simulator import Box, Dipole, SensorRig, WorldConfig

MAP_SCHEMA = "magmap/1"
RESULT_SCHEMA = "calibration-result/1"

QUAT_NORM_TOL = 1e-6


# ---------------------------------------------------------------------------
# quaternions (scalar-first) at the file boundary


def quat_to_rotmat(q) -> np.ndarray:
    """Unit quaternion [w, x, y, z] to a rotation matrix.

    The quaternion is normalized first; a norm off unity by more than
    ``QUAT_NORM_TOL`` is rejected.
    """
    q = np.asarray(q, float).reshape(4)
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > QUAT_NORM_TOL:
        raise ValueError(f"quaternion norm {norm:.9f} deviates from 1 by more than "
                         f"{QUAT_NORM_TOL}")
    w, x, y, z = q / norm
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R) -> np.ndarray:
    """Rotation matrix to a unit quaternion [w, x, y, z] (w >= 0)."""
    R = np.asarray(R, float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# fingerprint JSONL


def fingerprint_to_record(fp: Fingerprint) -> dict:
    return {
        "t": fp.timestamp,
        "p": list(fp.pose.translation),
        "q": list(rotmat_to_quat(fp.pose.rotation)),
        "B": list(fp.reading),
    }


def record_to_fingerprint(record: dict, from_frame: str = "lidar") -> Fingerprint:
    pose = Pose(quat_to_rotmat(record["q"]), np.asarray(record["p"], float),
                from_frame, "map")
    return Fingerprint(float(record["t"]), pose, np.asarray(record["B"], float))


def write_fingerprints(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for fp in dataset.samples:
            fh.write(json.dumps(fingerprint_to_record(fp)) + "\n")


def read_fingerprints(path, sensor_id: str | None = None,
                      from_frame: str = "lidar") -> Dataset:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                samples.append(record_to_fingerprint(json.loads(line), from_frame))
    return Dataset(sensor_id or Path(path).stem, samples)


# ---------------------------------------------------------------------------
# map persistence


def save_map(field_map: MagMap, path) -> None:
    blocks = []
    for key, block in field_map.blocks.items():
        blocks.append({
            "index": list(key),
            "lo": list(block.lo),
            "hi": list(block.hi),
            "positions": block.train_pos.tolist(),
            "fields": block.train_field.tolist(),
        })
    doc = {
        "schema": MAP_SCHEMA,
        "hyper": {
            "length_scale": field_map.hyper.length_scale,
            "signal_variance": field_map.hyper.signal_variance,
            "noise_variance": field_map.hyper.noise_variance,
            "mean_mode": field_map.hyper.mean_mode,
        },
        "block_size": field_map.block_size,
        "overlap": field_map.overlap,
        "grid_lo": list(field_map.grid_lo),
        "grid_shape": [int(v) for v in field_map.grid_shape],
        "blocks": blocks,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_map(path) -> MagMap:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != MAP_SCHEMA:
        raise ValueError(f"unsupported map schema {doc.get('schema')!r}, "
                         f"expected {MAP_SCHEMA!r}")
    hyper = GpHyperparams(**doc["hyper"])
    blocks: dict[tuple, MapBlock] = {}
    for entry in doc["blocks"]:
        block = _fit_block(hyper, np.asarray(entry["lo"], float),
                           np.asarray(entry["hi"], float),
                           np.asarray(entry["positions"], float),
                           np.asarray(entry["fields"], float))
        blocks[tuple(entry["index"])] = block
    return MagMap(hyper, doc["block_size"], doc["overlap"],
                  np.asarray(doc["grid_lo"], float),
                  np.asarray(doc["grid_shape"], int), blocks)


# ---------------------------------------------------------------------------
# configuration files


def load_world(path) -> WorldConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    extent = Box(np.asarray(doc["extent"]["lo"], float),
                 np.asarray(doc["extent"]["hi"], float))
    dipoles = None
    if "dipoles" in doc:
        dipoles = tuple(Dipole(np.asarray(d["position"], float),
                               np.asarray(d["moment"], float))
                        for d in doc["dipoles"])
    return WorldConfig(extent=extent,
                       ambient_field=np.asarray(doc.get("ambient", [20.0, 0.0, -45.0]), float),
                       dipoles=dipoles,
                       rng_seed=int(doc.get("seed", 0)))


def load_rig(path) -> SensorRig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    offsets = []
    distortions = []
    for sensor in doc["sensors"]:
        offsets.append(np.asarray(sensor["offset"], float))
        gain = np.asarray(sensor.get("gain", np.eye(3).tolist()), float)
        bias = np.asarray(sensor.get("bias", [0.0, 0.0, 0.0]), float)
        distortions.append(AffineDistortion(gain, bias))
    return SensorRig(tuple(offsets), tuple(distortions),
                     float(doc.get("noise_sigma", 0.0)))


def load_hyper(path) -> tuple:
    """Hyperparameter file: kernel settings plus block geometry.

    Returns ``(GpHyperparams, block_size, overlap_or_None)``.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    hyper = GpHyperparams(
        length_scale=float(doc.get("length_scale", 1.0)),
        signal_variance=float(doc.get("signal_variance", 25.0)),
        noise_variance=float(doc.get("noise_variance", 0.01)),
        mean_mode=doc.get("mean_mode", "constant_per_block"),
    )
    block_size = float(doc.get("block_size", 10.0))
    overlap = doc.get("overlap")
    return hyper, block_size, None if overlap is None else float(overlap)


def load_calibration_config(path) -> CalibrationConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return CalibrationConfig(**doc)


def save_result(result: CalibrationResult, path, data_path: str | None = None) -> None:
    doc = {
        "schema": RESULT_SCHEMA,
        "translation": list(result.translation),
        "gain": result.distortion.gain.tolist(),
        "bias": list(result.distortion.bias),
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "final_rms_ut": float(result.final_rms),
        "skipped_samples": int(result.skipped_samples),
        "message": result.message,
        "cost_trace": [[list(t), float(c)] for t, c in result.trace],
    }
    if data_path is not None:
        doc["data"] = str(data_path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def load_result(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != RESULT_SCHEMA:
        raise ValueError(f"unsupported result schema {doc.get('schema')!r}")
    return doc
