"""Prompt assembly and the text formats flowing to and from the models.

Navigator prompts carry every available camera view plus ego state and the
high-level command; driver prompts carry the front view only, with the
reasoning/command/image blocks individually toggleable for ablations.
Wording lives in versioned template files under ``templates/`` so it can
be tuned without touching code; tests pin golden renders.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from string import Template
from typing import TYPE_CHECKING

import numpy as np

from .errors import InvalidInput, MalformedNumber, MissingReasoning, OutOfRange, WrongCount
from .kinematics import ControlSequence, EgoState, Trajectory

if TYPE_CHECKING:
    from .scene_log import Clip

CAMERA_ORDER = ("FRONT", "FRONT_LEFT", "FRONT_RIGHT", "BACK", "BACK_LEFT", "BACK_RIGHT")

DEFAULT_KAPPA_MAX = 0.3

_MARKER_RE = re.compile(r"^<!-- clip-id: (?P<clip_id>.*) -->$", re.MULTILINE)
_SECTION_RE = re.compile(
    r"^[\s#*>\-\d.)]*?(scene description|recommended action|reasoning)\b[\s*_]*[:：]",
    re.IGNORECASE | re.MULTILINE,
)
_NUMBER_TOKEN_RE = re.compile(r"[^\s\[\](),]+")


class OutputMode(str, Enum):
    """What the driver model is asked to emit."""

    WAYPOINT = "waypoint"
    ACTION = "action"


@dataclass(frozen=True)
class AblationFlags:
    """Which driver-prompt input blocks are enabled."""

    reason: bool = True
    command: bool = True
    images: bool = True

    def label(self) -> str:
        parts = [
            name
            for name, on in (("reason", self.reason), ("command", self.command), ("images", self.images))
            if on
        ]
        return "+".join(parts) if parts else "none"


@dataclass(frozen=True)
class ReasoningOutput:
    """Navigator output: three labeled sections plus the verbatim text."""

    scene_description: str
    recommended_action: str
    reasoning: str
    raw: str
    degraded: bool = False


@dataclass(frozen=True)
class PromptBundle:
    """A rendered (system, user) prompt pair plus the cameras it references."""

    system: str
    user: str
    image_refs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.system or not self.user:
            raise InvalidInput("system and user prompts must be non-empty")


@lru_cache(maxsize=None)
def _template(name: str) -> Template:
    text = resources.files("navplan").joinpath("templates", f"{name}.txt").read_text("utf-8")
    return Template(text)


def _fmt(value: float, decimals: int) -> str:
    # round first and add 0.0 so tiny negatives never render as "-0.00"
    return f"{round(float(value), decimals) + 0.0:.{decimals}f}"


def _pairs_text(values, first_decimals: int, second_decimals: int) -> str:
    body = ", ".join(
        f"({_fmt(a, first_decimals)}, {_fmt(b, second_decimals)})" for a, b in values
    )
    return f"[{body}]"


def format_ego_state(state: EgoState, history: Trajectory) -> str:
    """Render speed/yaw-rate/acceleration plus past waypoints as fixed text."""
    waypoints = _pairs_text(history.points, 2, 2)
    return (
        f"Speed: {state.speed:.2f} m/s\n"
        f"Yaw rate: {state.yaw_rate:.2f} rad/s\n"
        f"Acceleration: {state.accel:.2f} m/s^2\n"
        f"Past waypoints: {waypoints}"
    )


def clip_marker(clip_id: str) -> str:
    """The structured comment line identifying a clip inside a user prompt."""
    return f"<!-- clip-id: {clip_id} -->"


def extract_clip_id(text: str) -> str | None:
    """Pull the clip id back out of a user prompt, if present."""
    match = _MARKER_RE.search(text)
    return match.group("clip_id") if match else None


def strip_marker_lines(text: str) -> str:
    """Remove clip-id marker lines (used when content-addressing prompts)."""
    return "\n".join(line for line in text.splitlines() if not _MARKER_RE.fullmatch(line))


def build_navigator_prompt(clip: "Clip") -> PromptBundle:
    """Assemble the scene-understanding prompt for one clip."""
    user = _template("navigator_user").substitute(
        clip_id=clip.clip_id,
        ego_state=format_ego_state(clip.ego_state, clip.history),
        command=clip.command.value,
    )
    cameras = tuple(cam for cam in CAMERA_ORDER if cam in clip.images)
    return PromptBundle(
        system=_template("navigator_system").substitute(),
        user=user,
        image_refs=cameras,
    )


def _output_instruction(mode: OutputMode, n: int, dt: float) -> str:
    horizon = n * dt
    if mode is OutputMode.WAYPOINT:
        return (
            f"Predict the ego vehicle's trajectory over the next {horizon:g} seconds as "
            f"exactly {n} waypoints (x, y) in meters in the ego frame (x forward, y left), "
            f"one every {dt:g} seconds. Answer with a single list formatted like "
            "[(x1, y1), (x2, y2), ...] and nothing else."
        )
    return (
        f"Predict the ego vehicle's control actions over the next {horizon:g} seconds as "
        f"exactly {n} pairs (acceleration in m/s^2, curvature in 1/m), one every "
        f"{dt:g} seconds. Answer with a single list formatted like "
        "[(a1, k1), (a2, k2), ...] and nothing else."
    )


def build_driver_prompt(
    clip: "Clip", flags: AblationFlags, mode: OutputMode = OutputMode.WAYPOINT
) -> PromptBundle:
    """Assemble the planning prompt for one clip under the given ablation flags."""
    if not (flags.reason or flags.command or flags.images):
        raise InvalidInput("driver prompt needs at least one enabled input component")
    if flags.reason and clip.reasoning is None:
        raise MissingReasoning(clip.clip_id)

    command_block = f"High-level driving command: {clip.command.value}\n\n" if flags.command else ""
    reasoning_block = (
        f"Navigator guidance:\n{clip.reasoning.raw}\n\n" if flags.reason else ""
    )
    user = _template("driver_user").substitute(
        clip_id=clip.clip_id,
        ego_state=format_ego_state(clip.ego_state, clip.history),
        command_block=command_block,
        reasoning_block=reasoning_block,
        output_instruction=_output_instruction(mode, len(clip.future), clip.future.dt),
    )
    cameras = ("FRONT",) if flags.images and "FRONT" in clip.images else ()
    return PromptBundle(
        system=_template("driver_system").substitute(),
        user=user,
        image_refs=cameras,
    )


def parse_reasoning(raw: str) -> ReasoningOutput:
    """Split navigator text into its three labeled sections.

    Total over arbitrary text: labels are matched case-insensitively at
    line starts, tolerating markdown decoration and reordering. When no
    labels are found the whole text is kept as the reasoning field and the
    output is flagged degraded; the raw text is always preserved verbatim.
    """
    matches = list(_SECTION_RE.finditer(raw))
    sections: dict[str, str] = {}
    for i, match in enumerate(matches):
        label = " ".join(match.group(1).lower().split())
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        body = raw[match.end() : end].strip().strip("*_").strip()
        sections.setdefault(label, body)

    scene = sections.get("scene description", "")
    action = sections.get("recommended action", "")
    reasoning = sections.get("reasoning", "")
    if not (scene or action or reasoning):
        return ReasoningOutput(
            scene_description="",
            recommended_action="",
            reasoning=raw.strip(),
            raw=raw,
            degraded=True,
        )
    degraded = not (scene and action and reasoning)
    return ReasoningOutput(
        scene_description=scene,
        recommended_action=action,
        reasoning=reasoning,
        raw=raw,
        degraded=degraded,
    )


def _parse_number_pairs(text: str, expected: int) -> np.ndarray:
    """Shared pair grammar: numbers separated by brackets/commas/whitespace."""
    values: list[float] = []
    for match in _NUMBER_TOKEN_RE.finditer(text):
        token = match.group(0)
        try:
            value = float(token)
        except ValueError:
            raise MalformedNumber(match.start(), token) from None
        if not math.isfinite(value):
            raise MalformedNumber(match.start(), token)
        values.append(value)
    if len(values) != 2 * expected:
        raise WrongCount(found=len(values) // 2, expected=expected)
    return np.asarray(values).reshape(-1, 2)


def serialize_waypoints(traj: Trajectory) -> str:
    """``[(x1, y1), (x2, y2), ...]`` with coordinates at 2 decimals."""
    return _pairs_text(traj.points, 2, 2)


def parse_waypoints(text: str, expected: int, dt: float = 0.5) -> Trajectory:
    """Parse a waypoint list, requiring exactly ``expected`` pairs."""
    return Trajectory(points=_parse_number_pairs(text, expected), dt=dt)


def serialize_actions(controls: ControlSequence) -> str:
    """``[(a1, k1), ...]`` with acceleration at 2 and curvature at 3 decimals."""
    return _pairs_text(controls.steps, 2, 3)


def parse_actions(
    text: str, expected: int, dt: float = 0.5, kappa_max: float = DEFAULT_KAPPA_MAX
) -> ControlSequence:
    """Parse an action list; curvature magnitudes above ``kappa_max`` are rejected."""
    steps = _parse_number_pairs(text, expected)
    worst = float(np.max(np.abs(steps[:, 1]))) if len(steps) else 0.0
    if worst > kappa_max:
        raise OutOfRange(f"curvature {worst} exceeds the {kappa_max} 1/m bound")
    return ControlSequence(steps=steps, dt=dt)
