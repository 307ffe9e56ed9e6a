"""Regenerate the synthetic devkit fixture used by the exporter tests.

Builds a minimal but structurally faithful table set (scene, sample,
sample_data, ego_pose, calibrated_sensor, sensor): one 19-sample scene at
2 Hz with LIDAR_TOP plus all six cameras as keyframes, driving a gentle
arc. Run from the exporter directory: python3 tools/gen_devkit_fixture.py
"""

from __future__ import annotations

import json
import math
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
FIXTURE = ROOT / "tests" / "fixtures" / "devkit"
VERSION = "v1.0-mini"

SCENE_NAME = "scene-0061"  # a mini-train member, so the split file is non-trivial
N_SAMPLES = 19
T0_US = 1_532_402_927_600_000  # arbitrary epoch in microseconds
DT_US = 500_000

CHANNELS = (
    "LIDAR_TOP",
    "CAM_FRONT",
    "CAM_FRONT_LEFT",
    "CAM_FRONT_RIGHT",
    "CAM_BACK",
    "CAM_BACK_LEFT",
    "CAM_BACK_RIGHT",
)


def yaw_quaternion(yaw: float) -> list[float]:
    return [math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0)]


def main() -> None:
    table_dir = FIXTURE / VERSION
    table_dir.mkdir(parents=True, exist_ok=True)

    sensors = [
        {"token": f"sensor-{c}", "channel": c, "modality": "lidar" if "LIDAR" in c else "camera"}
        for c in CHANNELS
    ]
    calibrated = [
        {
            "token": f"calib-{c}",
            "sensor_token": f"sensor-{c}",
            "translation": [0.0, 0.0, 1.6],
            "rotation": [1.0, 0.0, 0.0, 0.0],
            "camera_intrinsic": [] if "LIDAR" in c else [[1266.0, 0, 816.0], [0, 1266.0, 491.0], [0, 0, 1]],
        }
        for c in CHANNELS
    ]

    samples, sample_data, ego_poses = [], [], []
    x, y, yaw, speed = 400.0, 1100.0, 0.6, 5.0
    for i in range(N_SAMPLES):
        token = f"sample-{i:03d}"
        timestamp = T0_US + i * DT_US
        samples.append(
            {
                "token": token,
                "timestamp": timestamp,
                "scene_token": "scene-token-0",
                "prev": f"sample-{i - 1:03d}" if i > 0 else "",
                "next": f"sample-{i + 1:03d}" if i < N_SAMPLES - 1 else "",
            }
        )
        for channel in CHANNELS:
            pose_token = f"pose-{i:03d}-{channel}"
            ego_poses.append(
                {
                    "token": pose_token,
                    "timestamp": timestamp,
                    "translation": [x, y, 0.0],
                    "rotation": yaw_quaternion(yaw),
                }
            )
            suffix = "pcd.bin" if "LIDAR" in channel else "jpg"
            filename = f"samples/{channel}/{SCENE_NAME}_{i:03d}.{suffix}"
            sample_data.append(
                {
                    "token": f"data-{i:03d}-{channel}",
                    "sample_token": token,
                    "ego_pose_token": pose_token,
                    "calibrated_sensor_token": f"calib-{channel}",
                    "filename": filename,
                    "fileformat": suffix.split(".")[-1],
                    "is_key_frame": True,
                    "timestamp": timestamp,
                    "prev": "",
                    "next": "",
                }
            )
        # advance the gentle arc (unicycle step at 2 Hz)
        x += speed * math.cos(yaw) * 0.5
        y += speed * math.sin(yaw) * 0.5
        yaw += 0.03
        speed = max(speed + 0.1, 0.0)

    scene = [
        {
            "token": "scene-token-0",
            "name": SCENE_NAME,
            "description": "synthetic fixture drive",
            "log_token": "log-0",
            "nbr_samples": N_SAMPLES,
            "first_sample_token": "sample-000",
            "last_sample_token": f"sample-{N_SAMPLES - 1:03d}",
        }
    ]

    tables = {
        "scene": scene,
        "sample": samples,
        "sample_data": sample_data,
        "ego_pose": ego_poses,
        "calibrated_sensor": calibrated,
        "sensor": sensors,
    }
    for name, rows in tables.items():
        (table_dir / f"{name}.json").write_text(
            json.dumps(rows, indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )

    # stub media files so exported relative paths resolve
    for row in sample_data:
        path = FIXTURE / row["filename"]
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"stub")
    print(f"wrote fixture devkit under {table_dir}")


if __name__ == "__main__":
    main()
