"""Scene-log ingestion, clip extraction, and dataset emission.

A scene log (format ``scenelog/1``) is a JSON record describing one
20-second drive: global ego poses plus camera image references sampled at
2 Hz. Clips are cut from it with a sliding window (17 frames = 8 s by
default), re-anchored in the ego frame of each clip's current frame, and
written out either as an evaluation manifest or as a chat-format SFT
corpus where only the assistant turn bears loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from . import prompting
from .errors import InvalidInput, MissingControls, MissingReasoning, SchemaError
from .kinematics import (
    ControlSequence,
    EgoState,
    Pose2D,
    Trajectory,
    derive_ego_state,
    to_ego_frame,
)
from .prompting import (
    CAMERA_ORDER,
    AblationFlags,
    OutputMode,
    ReasoningOutput,
    serialize_actions,
    serialize_waypoints,
)

logger = logging.getLogger(__name__)

SCENELOG_VERSION = "scenelog/1"

HISTORY_POINTS = 5   # 4 past frames + the current-frame origin
FUTURE_POINTS = 12   # 6 s at 2 Hz

_NOMINAL_SPACING = 0.5
_SPACING_TOLERANCE = 0.05


class Command(str, Enum):
    """Six-class driving intention derived from the ground-truth future."""

    HARD_LEFT = "Hard Left"
    SLIGHT_LEFT = "Slight Left"
    KEEP_STRAIGHT = "Keep Straight"
    SLIGHT_RIGHT = "Slight Right"
    HARD_RIGHT = "Hard Right"
    DECELERATE_STOP = "Decelerate Stop"


@dataclass(frozen=True)
class CommandThresholds:
    """Tunable rules for :func:`classify_command`.

    The stop rule fires when the final-step speed is below ``stop_speed``
    and below ``stop_ratio`` times the current speed; otherwise the total
    heading change over the future picks the steering class.
    """

    stop_speed: float = 0.5
    stop_ratio: float = 0.5
    straight_deg: float = 8.0
    hard_deg: float = 30.0


@dataclass(frozen=True)
class Frame:
    """One timestamped sample: global ego pose plus camera references."""

    timestamp: float
    ego_pose: Pose2D
    camera_images: dict[str, str]

    def __post_init__(self) -> None:
        if "FRONT" not in self.camera_images:
            raise InvalidInput("every frame must reference a FRONT image")
        unknown = set(self.camera_images) - set(CAMERA_ORDER)
        if unknown:
            raise InvalidInput(f"unknown camera names: {sorted(unknown)}")


@dataclass(frozen=True)
class SceneLog:
    """A validated scene: frames sorted by time at 2 Hz spacing."""

    scene_id: str
    frames: tuple[Frame, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(self.frames))
        bad = [
            i
            for i, (a, b) in enumerate(zip(self.frames, self.frames[1:]))
            if abs((b.timestamp - a.timestamp) - _NOMINAL_SPACING) > _SPACING_TOLERANCE
        ]
        if bad:
            gaps = ", ".join(
                f"frames[{i}]->frames[{i + 1}] "
                f"({self.frames[i + 1].timestamp - self.frames[i].timestamp:.3f} s)"
                for i in bad[:5]
            )
            raise SchemaError(
                f"frame spacing outside {_NOMINAL_SPACING} +/- {_SPACING_TOLERANCE} s: {gaps}",
                path=f"{self.scene_id}.frames",
            )


@dataclass(frozen=True)
class Clip:
    """One 8-second sample anchored in the ego frame of its current frame."""

    clip_id: str
    history: Trajectory
    future: Trajectory
    ego_state: EgoState
    command: Command
    images: dict[str, str]
    gt_controls: ControlSequence | None = None
    reasoning: ReasoningOutput | None = None

    def __post_init__(self) -> None:
        if len(self.history) != HISTORY_POINTS:
            raise InvalidInput(
                f"history must have {HISTORY_POINTS} points, got {len(self.history)}"
            )
        if not np.allclose(self.history.points[-1], 0.0, atol=1e-9):
            raise InvalidInput("history must end at the ego-frame origin")
        if len(self.future) == 0:
            raise InvalidInput("future must be non-empty")


def clip_start_indices(frame_count: int, window_frames: int, stride_frames: int) -> list[int]:
    """Start indices of every full window: 0, stride, 2*stride, ..."""
    if window_frames < 1 or stride_frames < 1:
        raise InvalidInput("window and stride must be positive")
    if frame_count < window_frames:
        return []
    return list(range(0, frame_count - window_frames + 1, stride_frames))


def _schema_get(record: dict, key: str, kind, path: str):
    if not isinstance(record, dict) or key not in record:
        raise SchemaError(f"missing field {key!r}", path=path)
    value = record[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise SchemaError(f"expected a number, got {type(value).__name__}", path=f"{path}.{key}")
        return float(value)
    if not isinstance(value, kind):
        raise SchemaError(
            f"expected {kind.__name__}, got {type(value).__name__}", path=f"{path}.{key}"
        )
    return value


def _frame_from_record(record: dict, base_dir: Path, path: str) -> Frame:
    timestamp = _schema_get(record, "timestamp", float, path)
    pose_rec = _schema_get(record, "ego_pose", dict, path)
    pose = Pose2D(
        x=_schema_get(pose_rec, "x", float, f"{path}.ego_pose"),
        y=_schema_get(pose_rec, "y", float, f"{path}.ego_pose"),
        heading=_schema_get(pose_rec, "heading", float, f"{path}.ego_pose"),
    )
    images_rec = _schema_get(record, "images", dict, path)
    images = {}
    for camera, ref in images_rec.items():
        if camera not in CAMERA_ORDER:
            raise SchemaError(f"unknown camera {camera!r}", path=f"{path}.images")
        if not isinstance(ref, str):
            raise SchemaError("image reference must be a string", path=f"{path}.images.{camera}")
        images[camera] = str((base_dir / ref).resolve()) if not Path(ref).is_absolute() else ref
    try:
        return Frame(timestamp=timestamp, ego_pose=pose, camera_images=images)
    except InvalidInput as exc:
        raise SchemaError(str(exc), path=path) from exc


def load_scene_log(path: str | Path) -> SceneLog:
    """Load and validate a single-scene ``scenelog/1`` file.

    Image references are resolved relative to the file's directory. Raises
    ``SchemaError`` with a path to the offending field on any violation;
    missing files surface as the usual ``OSError``.
    """
    path = Path(path)
    lines = [line for line in path.read_text("utf-8").splitlines() if line.strip()]
    if len(lines) != 1:
        raise SchemaError(f"expected exactly one scene record, found {len(lines)}", path=str(path))
    try:
        record = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", path=str(path)) from exc

    version = _schema_get(record, "version", str, str(path))
    if version != SCENELOG_VERSION:
        raise SchemaError(f"unsupported version {version!r}", path=f"{path}.version")
    scene_id = _schema_get(record, "scene_id", str, str(path))
    frame_records = _schema_get(record, "frames", list, str(path))

    frames = [
        _frame_from_record(rec, path.parent, f"frames[{i}]") for i, rec in enumerate(frame_records)
    ]
    out_of_order = [
        i for i, (a, b) in enumerate(zip(frames, frames[1:])) if b.timestamp <= a.timestamp
    ]
    if out_of_order:
        raise SchemaError(
            f"frames out of order at indices {out_of_order[:5]}", path=f"{scene_id}.frames"
        )
    return SceneLog(scene_id=scene_id, frames=tuple(frames))


def classify_command(
    future: Trajectory,
    ego_state: EgoState,
    thresholds: CommandThresholds = CommandThresholds(),
) -> Command:
    """Deterministic six-class intention from the ego-frame future.

    Stop detection takes priority; the steering classes then split on the
    total heading change of the future path relative to the current
    heading (0 in the ego frame), positive meaning left.
    """
    full = np.vstack((np.zeros((1, 2)), future.points))
    deltas = np.diff(full, axis=0)
    lengths = np.hypot(deltas[:, 0], deltas[:, 1])
    final_speed = lengths[-1] / future.dt
    if final_speed < thresholds.stop_speed and final_speed < thresholds.stop_ratio * ego_state.speed:
        return Command.DECELERATE_STOP

    heading = 0.0
    for delta, length in zip(deltas, lengths):
        if length >= 0.05:
            raw = math.atan2(delta[1], delta[0])
            heading = heading + math.remainder(raw - heading, 2.0 * math.pi)
    total_turn = math.degrees(heading)
    if abs(total_turn) < thresholds.straight_deg:
        return Command.KEEP_STRAIGHT
    if abs(total_turn) <= thresholds.hard_deg:
        return Command.SLIGHT_LEFT if total_turn > 0 else Command.SLIGHT_RIGHT
    return Command.HARD_LEFT if total_turn > 0 else Command.HARD_RIGHT


def extract_clips(
    scene: SceneLog,
    window_frames: int = 17,
    stride_frames: int = 2,
    thresholds: CommandThresholds = CommandThresholds(),
    dt: float = _NOMINAL_SPACING,
) -> list[Clip]:
    """Cut sliding-window clips out of a scene.

    Each window's 5th frame is the clip's current frame: the preceding
    4 frames plus the current one form the history (ending at the origin),
    the remaining ``window_frames - 5`` frames form the future. A scene
    shorter than the window yields zero clips.
    """
    starts = clip_start_indices(len(scene.frames), window_frames, stride_frames)
    if not starts:
        logger.warning(
            "scene %s has %d frames, shorter than the %d-frame window; no clips",
            scene.scene_id,
            len(scene.frames),
            window_frames,
        )
        return []

    clips = []
    for start in starts:
        window = scene.frames[start : start + window_frames]
        current = window[HISTORY_POINTS - 1]
        ref = current.ego_pose

        history_global = np.array([(f.ego_pose.x, f.ego_pose.y) for f in window[:HISTORY_POINTS]])
        future_global = np.array([(f.ego_pose.x, f.ego_pose.y) for f in window[HISTORY_POINTS:]])
        history = to_ego_frame(history_global, ref, dt=dt)
        future = to_ego_frame(future_global, ref, dt=dt)
        ego_state = derive_ego_state(
            [(f.ego_pose, f.timestamp) for f in window[:HISTORY_POINTS]]
        )
        clips.append(
            Clip(
                clip_id=f"{scene.scene_id}#{start:03d}",
                history=history,
                future=future,
                ego_state=ego_state,
                command=classify_command(future, ego_state, thresholds),
                images=dict(current.camera_images),
            )
        )
    return clips


# --- manifest and corpus serialization ------------------------------------

def _trajectory_to_record(traj: Trajectory) -> dict:
    return {"points": traj.points.tolist(), "dt": traj.dt}


def _controls_to_record(controls: ControlSequence) -> dict:
    return {"steps": controls.steps.tolist(), "dt": controls.dt}


def _reasoning_to_record(reasoning: ReasoningOutput) -> dict:
    return {
        "scene_description": reasoning.scene_description,
        "recommended_action": reasoning.recommended_action,
        "reasoning": reasoning.reasoning,
        "raw": reasoning.raw,
        "degraded": reasoning.degraded,
    }


def clip_to_record(clip: Clip) -> dict:
    return {
        "clip_id": clip.clip_id,
        "history": _trajectory_to_record(clip.history),
        "future": _trajectory_to_record(clip.future),
        "ego_state": {
            "speed": clip.ego_state.speed,
            "yaw_rate": clip.ego_state.yaw_rate,
            "accel": clip.ego_state.accel,
        },
        "command": clip.command.value,
        "images": dict(clip.images),
        "gt_controls": _controls_to_record(clip.gt_controls) if clip.gt_controls else None,
        "reasoning": _reasoning_to_record(clip.reasoning) if clip.reasoning else None,
    }


def clip_from_record(record: dict, path: str = "clip") -> Clip:
    try:
        gt_controls = record.get("gt_controls")
        reasoning = record.get("reasoning")
        return Clip(
            clip_id=record["clip_id"],
            history=Trajectory(np.asarray(record["history"]["points"]), record["history"]["dt"]),
            future=Trajectory(np.asarray(record["future"]["points"]), record["future"]["dt"]),
            ego_state=EgoState(
                speed=record["ego_state"]["speed"],
                yaw_rate=record["ego_state"]["yaw_rate"],
                accel=record["ego_state"]["accel"],
            ),
            command=Command(record["command"]),
            images=dict(record["images"]),
            gt_controls=(
                ControlSequence(np.asarray(gt_controls["steps"]), gt_controls["dt"])
                if gt_controls
                else None
            ),
            reasoning=(
                ReasoningOutput(
                    scene_description=reasoning["scene_description"],
                    recommended_action=reasoning["recommended_action"],
                    reasoning=reasoning["reasoning"],
                    raw=reasoning["raw"],
                    degraded=reasoning.get("degraded", False),
                )
                if reasoning
                else None
            ),
        )
    except (KeyError, TypeError, ValueError, InvalidInput) as exc:
        raise SchemaError(f"bad clip record: {exc}", path=path) from exc


def emit_eval_manifest(clips: Iterable[Clip], path: str | Path) -> int:
    """Write one clip record per line; returns the number written."""
    path = Path(path)
    count = 0
    with path.open("w", encoding="utf-8") as fp:
        for clip in clips:
            fp.write(json.dumps(clip_to_record(clip), sort_keys=True))
            fp.write("\n")
            count += 1
    return count


def load_eval_manifest(path: str | Path) -> list[Clip]:
    """Read a manifest back into clips (inverse of :func:`emit_eval_manifest`)."""
    path = Path(path)
    clips = []
    for i, line in enumerate(path.read_text("utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", path=f"{path}:{i + 1}") from exc
        clips.append(clip_from_record(record, path=f"{path}:{i + 1}"))
    return clips


def with_reasoning(clip: Clip, reasoning: ReasoningOutput) -> Clip:
    return replace(clip, reasoning=reasoning)


def with_controls(clip: Clip, controls: ControlSequence) -> Clip:
    return replace(clip, gt_controls=controls)


def sft_record(clip: Clip, mode: OutputMode, include: AblationFlags) -> dict:
    """One chat-format training record; only the assistant turn bears loss."""
    if include.reason and clip.reasoning is None:
        raise MissingReasoning(clip.clip_id)
    if mode is OutputMode.ACTION and clip.gt_controls is None:
        raise MissingControls(clip.clip_id)

    bundle = prompting.build_driver_prompt(clip, include, mode)
    user_parts: list[dict] = [{"type": "text", "text": bundle.user}]
    for camera in bundle.image_refs:
        user_parts.append({"type": "image", "path": clip.images[camera]})
    if mode is OutputMode.WAYPOINT:
        target = serialize_waypoints(clip.future)
    else:
        target = serialize_actions(clip.gt_controls)

    return {
        "clip_id": clip.clip_id,
        "mode": mode.value,
        "messages": [
            {"role": "system", "content": [{"type": "text", "text": bundle.system}]},
            {"role": "user", "content": user_parts},
            {"role": "assistant", "content": [{"type": "text", "text": target}]},
        ],
        "supervision_mask": [False, False, True],
    }


def emit_sft_corpus(
    clips: Iterable[Clip],
    mode: OutputMode,
    include: AblationFlags,
    path: str | Path,
) -> int:
    """Write the SFT corpus (one chat record per line); returns the count.

    All records are built before anything is written, so a clip missing
    its reasoning or controls never leaves a partial corpus behind.
    """
    records = [sft_record(clip, mode, include) for clip in clips]
    path = Path(path)
    with path.open("w", encoding="utf-8") as fp:
        for record in records:
            fp.write(json.dumps(record, sort_keys=True))
            fp.write("\n")
    return len(records)


CORPUS_README = """\
# SFT corpus

One JSON record per line. Each record holds a three-turn chat transcript
(`messages`: system, user, assistant) plus `supervision_mask`, which marks
the turns that bear loss during fine-tuning: only the assistant turn is
set, so every other token must be masked out of the objective.

User turns mix text parts with image-reference parts (`{"type": "image",
"path": ...}`); resolve the paths and feed the images through the model's
vision tower. The assistant turn is the serialized target: `waypoint`
records hold 12 ego-frame waypoints "[(x, y), ...]" (meters, 2 decimals),
`action` records hold 12 (acceleration, curvature) pairs (2 and 3
decimals) fitted from the ground-truth waypoints.

Suggested fine-tuning configuration for a lightweight VLM:

- optimizer AdamW, weight decay 0.01, initial learning rate 1e-5
- cosine learning-rate schedule, 3 epochs
- batch size 1 with gradient accumulation over 16 steps
- for ~8B backbones: 8-bit quantization with LoRA (rank 64, alpha 128,
  dropout 0.05); smaller backbones can be fully fine-tuned
"""


def emit_corpus_readme(path: str | Path) -> None:
    Path(path).write_text(CORPUS_README, encoding="utf-8")
