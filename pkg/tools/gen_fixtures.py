"""Regenerate the bundled test fixtures.

Writes a 41-frame scene log (20 s at 2 Hz) whose motion is produced by the
package's own rollout model in the global frame: a straight accelerating
stretch, a left turn, and a braking phase down to standstill, so the
extracted clips cover straight / turn / stop commands. Also writes the
six stub camera files the scene references and the golden prompt renders.

Run from the repo root:  python3 tools/gen_fixtures.py
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from navplan.kinematics import ControlSequence, KinematicState, rollout_states
from navplan.prompting import (
    CAMERA_ORDER,
    AblationFlags,
    OutputMode,
    build_driver_prompt,
    build_navigator_prompt,
    format_ego_state,
)
from navplan.scene_log import extract_clips, load_scene_log, with_reasoning
from navplan.prompting import parse_reasoning

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "tests" / "fixtures"
GOLDEN = ROOT / "tests" / "golden"

SCENE_ID = "scene-0001"
T0 = 1000.0
DT = 0.5

REASONING_TEXT = (
    "Scene Description: a two-lane road curving gently to the left with no "
    "nearby traffic.\n"
    "Recommended Action: keep to the lane and follow the curve at the current speed.\n"
    "Reasoning: the lane ahead is clear and the curvature is mild, so no braking "
    "or evasive maneuver is needed."
)


def build_scene_record() -> dict:
    accels = np.concatenate((np.full(16, 0.4), np.zeros(12), np.full(12, -2.2)))
    kappas = np.concatenate((np.zeros(16), np.full(12, 0.015), np.zeros(12)))
    controls = ControlSequence(np.column_stack((accels, kappas)), dt=DT)
    init = KinematicState(position=(120.0, -45.0), heading=0.35, speed=8.0)
    positions, headings, _, _ = rollout_states(controls, init)

    xs = np.concatenate(([init.position[0]], positions[:, 0]))
    ys = np.concatenate(([init.position[1]], positions[:, 1]))

    frames = []
    for i in range(41):
        frames.append(
            {
                "timestamp": T0 + i * DT,
                "ego_pose": {"x": float(xs[i]), "y": float(ys[i]), "heading": float(headings[i])},
                "images": {camera: f"images/{camera}.jpg" for camera in CAMERA_ORDER},
            }
        )
    return {"version": "scenelog/1", "scene_id": SCENE_ID, "frames": frames}


def write_scene() -> Path:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    images_dir = FIXTURES / "images"
    images_dir.mkdir(exist_ok=True)
    for camera in CAMERA_ORDER:
        (images_dir / f"{camera}.jpg").write_bytes(
            b"\xff\xd8\xff\xe0" + f"stub-{camera}".encode("ascii") + b"\xff\xd9"
        )
    path = FIXTURES / f"{SCENE_ID}.jsonl"
    path.write_text(json.dumps(build_scene_record(), sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_goldens(scene_path: Path) -> None:
    GOLDEN.mkdir(parents=True, exist_ok=True)
    scene = load_scene_log(scene_path)
    clips = extract_clips(scene)
    clip = with_reasoning(clips[0], parse_reasoning(REASONING_TEXT))

    (GOLDEN / "ego_state.txt").write_text(
        format_ego_state(clip.ego_state, clip.history) + "\n", encoding="utf-8"
    )
    navigator = build_navigator_prompt(clip)
    (GOLDEN / "navigator_user.txt").write_text(navigator.user, encoding="utf-8")
    (GOLDEN / "navigator_system.txt").write_text(navigator.system, encoding="utf-8")

    rows = (
        AblationFlags(reason=True, command=False, images=False),
        AblationFlags(reason=True, command=False, images=True),
        AblationFlags(reason=True, command=True, images=False),
        AblationFlags(reason=True, command=True, images=True),
    )
    for flags in rows:
        bundle = build_driver_prompt(clip, flags, OutputMode.WAYPOINT)
        (GOLDEN / f"driver_user_{flags.label()}.txt").write_text(bundle.user, encoding="utf-8")
    bundle = build_driver_prompt(clip, rows[-1], OutputMode.ACTION)
    (GOLDEN / "driver_user_action.txt").write_text(bundle.user, encoding="utf-8")


def write_report_golden(scene_path: Path) -> None:
    from navplan.evaluation import render_markdown, run_eval
    from navplan.vlm_gateway import ScriptedOracleBackend, VlmGateway

    scene = load_scene_log(scene_path)
    clips = [with_reasoning(c, parse_reasoning(REASONING_TEXT)) for c in extract_clips(scene)]
    gateway = VlmGateway(ScriptedOracleBackend(clips, noise_sigma=0.0))
    report = run_eval(
        clips, gateway, AblationFlags(True, True, True), k=6,
        mode=OutputMode.WAYPOINT, model_id="mock-oracle",
    )
    (GOLDEN / "report_zero.md").write_text(
        render_markdown([report], include_6s=True), encoding="utf-8"
    )


def main() -> None:
    scene_path = write_scene()
    write_goldens(scene_path)
    write_report_golden(scene_path)
    scene = load_scene_log(scene_path)
    clips = extract_clips(scene)
    commands = [clip.command.value for clip in clips]
    print(f"wrote {scene_path} ({len(scene.frames)} frames, {len(clips)} clips)")
    print("commands:", commands)


if __name__ == "__main__":
    main()
