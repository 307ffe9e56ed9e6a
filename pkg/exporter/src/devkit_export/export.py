"""Walk nuScenes-format devkit tables and emit one scenelog/1 file per scene.

Reads the JSON tables directly (scene, sample, sample_data, ego_pose,
calibrated_sensor, sensor) instead of depending on the devkit package, so
any dataset laid out in that format works. Only keyframes are exported:
the planar ego pose (x, y, and the yaw of the pose quaternion) plus the
six camera image paths, rewritten relative to the output directory.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

SCENELOG_VERSION = "scenelog/1"

TABLES = ("scene", "sample", "sample_data", "ego_pose", "calibrated_sensor", "sensor")

CAMERA_CHANNELS = {
    "CAM_FRONT": "FRONT",
    "CAM_FRONT_LEFT": "FRONT_LEFT",
    "CAM_FRONT_RIGHT": "FRONT_RIGHT",
    "CAM_BACK": "BACK",
    "CAM_BACK_LEFT": "BACK_LEFT",
    "CAM_BACK_RIGHT": "BACK_RIGHT",
}

# Official mini-split scene names, fixed by the benchmark.
MINI_TRAIN = (
    "scene-0061",
    "scene-0553",
    "scene-0655",
    "scene-0757",
    "scene-0796",
    "scene-1077",
    "scene-1094",
    "scene-1100",
)
MINI_VAL = ("scene-0103", "scene-0916")


class ExportError(Exception):
    """A devkit table is missing or malformed."""


@dataclass
class ExportManifest:
    """Summary of one export run."""

    scenes_exported: int = 0
    frames_per_scene: list[int] = field(default_factory=list)
    camera_coverage: dict[str, int] = field(default_factory=dict)
    devkit_version: str = ""

    def as_dict(self) -> dict:
        return {
            "scenes_exported": self.scenes_exported,
            "frames_per_scene": self.frames_per_scene,
            "camera_coverage": self.camera_coverage,
            "devkit_version": self.devkit_version,
        }


def quaternion_yaw(rotation: list[float]) -> float:
    """Yaw of a [w, x, y, z] quaternion projected onto the ground plane."""
    w, x, y, z = rotation
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def _load_tables(devkit_root: Path, version: str) -> dict[str, list[dict]]:
    table_dir = devkit_root / version
    if not table_dir.is_dir():
        raise ExportError(f"no table directory at {table_dir}")
    tables = {}
    for name in TABLES:
        path = table_dir / f"{name}.json"
        if not path.exists():
            raise ExportError(f"missing devkit table {name!r} (expected {path})")
        try:
            tables[name] = json.loads(path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise ExportError(f"table {name!r} is not valid JSON: {exc}") from exc
    return tables


def _index(rows: list[dict], key: str = "token") -> dict[str, dict]:
    return {row[key]: row for row in rows}


def _split_scenes(scene_names: list[str], devkit_root: Path, split: str) -> dict[str, list[str]]:
    """train/test scene lists: explicit splits.json, the embedded mini
    split, or everything-to-train as a last resort."""
    override = devkit_root / "splits.json"
    if override.exists():
        data = json.loads(override.read_text("utf-8"))
        return {"train": list(data.get("train", [])), "test": list(data.get("test", []))}
    if split == "mini":
        return {
            "train": [name for name in scene_names if name in MINI_TRAIN],
            "test": [name for name in scene_names if name in MINI_VAL],
        }
    logger.warning("no splits.json and split %r has no embedded listing; all scenes -> train", split)
    return {"train": list(scene_names), "test": []}


def export(
    devkit_root: str | Path,
    output_dir: str | Path,
    split: str = "mini",
    version: str | None = None,
) -> ExportManifest:
    """Emit one scenelog/1 file per scene plus splits.json.

    ``version`` defaults to ``v1.0-<split>``. Raises ``ExportError`` with
    the offending table named before any file is written.
    """
    devkit_root = Path(devkit_root)
    output_dir = Path(output_dir)
    version = version or f"v1.0-{split}"
    tables = _load_tables(devkit_root, version)

    samples = _index(tables["sample"])
    ego_poses = _index(tables["ego_pose"])
    sensors = _index(tables["sensor"])
    calibrated = _index(tables["calibrated_sensor"])

    # keyframe sample_data rows grouped by the sample they belong to
    by_sample: dict[str, list[dict]] = {}
    for row in tables["sample_data"]:
        if row.get("is_key_frame"):
            by_sample.setdefault(row["sample_token"], []).append(row)

    def channel_of(sample_data: dict) -> str:
        sensor_token = calibrated[sample_data["calibrated_sensor_token"]]["sensor_token"]
        return sensors[sensor_token]["channel"]

    # build every record first so a malformed table never leaves partial output
    manifest = ExportManifest(devkit_version=version)
    records = []
    for scene in tables["scene"]:
        name = scene["name"]
        frames = []
        token = scene["first_sample_token"]
        while token:
            sample = samples.get(token)
            if sample is None:
                raise ExportError(f"scene {name}: sample {token} not in sample table")
            datas = {channel_of(row): row for row in by_sample.get(token, [])}

            pose_row = datas.get("LIDAR_TOP") or datas.get("CAM_FRONT")
            if pose_row is None:
                raise ExportError(f"scene {name}: sample {token} has no pose-bearing keyframe")
            pose = ego_poses[pose_row["ego_pose_token"]]

            images = {}
            for channel, camera in CAMERA_CHANNELS.items():
                row = datas.get(channel)
                if row is not None:
                    absolute = devkit_root / row["filename"]
                    images[camera] = os.path.relpath(absolute, output_dir)
                    manifest.camera_coverage[camera] = (
                        manifest.camera_coverage.get(camera, 0) + 1
                    )
            if "FRONT" not in images:
                raise ExportError(f"scene {name}: sample {token} lacks a CAM_FRONT keyframe")

            frames.append(
                {
                    "timestamp": sample["timestamp"] / 1e6,
                    "ego_pose": {
                        "x": pose["translation"][0],
                        "y": pose["translation"][1],
                        "heading": quaternion_yaw(pose["rotation"]),
                    },
                    "images": images,
                }
            )
            token = sample.get("next") or ""

        records.append((name, {"version": SCENELOG_VERSION, "scene_id": name, "frames": frames}))
        manifest.frames_per_scene.append(len(frames))
        manifest.scenes_exported += 1

    output_dir.mkdir(parents=True, exist_ok=True)
    for name, record in records:
        (output_dir / f"{name}.jsonl").write_text(
            json.dumps(record, sort_keys=True) + "\n", encoding="utf-8"
        )

    splits = _split_scenes([name for name, _ in records], devkit_root, split)
    (output_dir / "splits.json").write_text(
        json.dumps(splits, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest
