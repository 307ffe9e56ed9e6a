"""Open-loop planning metrics: per-horizon L2, min-of-K selection, reports.

Published baselines mix two averaging conventions, so every metric is
computed under both and labeled explicitly:

- ``pointwise``: L2 at horizon ts is the single profile sample at that
  time; the average is the mean of the reported horizon samples.
- ``cumulative``: L2 at horizon ts is the mean of all profile samples up
  to and including that time; the 3 s / 6 s averages coincide with the
  3 s / 6 s horizon values by construction.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ExhaustedRetries,
    ImageUnreadable,
    InvalidInput,
    InvalidResponse,
    NoValidCandidate,
    UnknownRequest,
)
from .kinematics import ControlSequence, KinematicState, Trajectory, rollout
from .prompting import AblationFlags, OutputMode
from .scene_log import Clip
from .vlm_gateway import Candidate, predict_candidates

logger = logging.getLogger(__name__)

HORIZONS_S = (1, 2, 3, 6)
PROFILE_LEN = 12
PROTOCOLS = ("pointwise", "cumulative")


@dataclass(frozen=True)
class ProtocolMetrics:
    """Horizon L2 values plus 3 s / 6 s averages under one protocol."""

    l2_at: dict[int, float]
    avg_3s: float
    avg_6s: float

    def as_record(self) -> dict:
        return {
            **{f"l2_{h}s": self.l2_at[h] for h in HORIZONS_S},
            "avg_3s": self.avg_3s,
            "avg_6s": self.avg_6s,
        }


@dataclass(frozen=True)
class MetricsRow:
    """Per-clip evaluation outcome."""

    clip_id: str
    selected_candidate: int
    valid_candidates: int
    parse_failure: bool
    metrics: dict[str, ProtocolMetrics]

    def as_record(self) -> dict:
        record = {
            "clip_id": self.clip_id,
            "selected_candidate": self.selected_candidate,
            "valid_candidates": self.valid_candidates,
            "parse_failure": self.parse_failure,
        }
        for protocol in PROTOCOLS:
            for name, value in self.metrics[protocol].as_record().items():
                record[f"{protocol}_{name}"] = value
        return record


@dataclass
class EvalReport:
    """All rows of one run plus their aggregate means and the run config."""

    rows: list[MetricsRow]
    aggregates: dict[str, ProtocolMetrics]
    config: dict
    failure_count: int

    def validate(self) -> None:
        """Check that aggregates equal the arithmetic means of the rows."""
        recomputed = _aggregate_rows(self.rows, self.config.get("include_fallback", True))
        for protocol in PROTOCOLS:
            got = self.aggregates[protocol].as_record()
            want = recomputed[protocol].as_record()
            for name in got:
                if abs(got[name] - want[name]) > 1e-12:
                    raise InvalidInput(
                        f"aggregate {protocol}.{name} is {got[name]}, rows say {want[name]}"
                    )


def l2_profile(pred: Trajectory, gt: Trajectory) -> np.ndarray:
    """Per-step Euclidean distance between two equal-length trajectories."""
    if len(pred) != len(gt):
        raise InvalidInput(f"length mismatch: {len(pred)} vs {len(gt)}")
    if pred.dt != gt.dt:
        raise InvalidInput(f"dt mismatch: {pred.dt} vs {gt.dt}")
    diff = pred.points - gt.points
    return np.hypot(diff[:, 0], diff[:, 1])


def select_candidate(
    candidates: Sequence[Trajectory], gt: Trajectory
) -> tuple[int, np.ndarray]:
    """Pick the candidate with the smallest full-horizon mean L2.

    Ties break toward the lowest index. Raises ``NoValidCandidate`` when
    the list is empty.
    """
    if not candidates:
        raise NoValidCandidate("no valid candidates to select from")
    profiles = [l2_profile(candidate, gt) for candidate in candidates]
    means = np.array([profile.mean() for profile in profiles])
    index = int(np.argmin(means))
    return index, profiles[index]


def aggregate(profile: np.ndarray) -> dict[str, ProtocolMetrics]:
    """Per-horizon metrics for a 12-step profile under both protocols."""
    profile = np.asarray(profile, dtype=float)
    if profile.shape != (PROFILE_LEN,):
        raise InvalidInput(f"profile must have length {PROFILE_LEN}, got shape {profile.shape}")

    pointwise = {h: float(profile[2 * h - 1]) for h in HORIZONS_S}
    cumulative = {h: float(np.mean(profile[: 2 * h])) for h in HORIZONS_S}
    return {
        "pointwise": ProtocolMetrics(
            l2_at=pointwise,
            avg_3s=float(np.mean([pointwise[1], pointwise[2], pointwise[3]])),
            avg_6s=float(np.mean([pointwise[h] for h in HORIZONS_S])),
        ),
        "cumulative": ProtocolMetrics(
            l2_at=cumulative,
            avg_3s=float(np.mean(profile[:6])),
            avg_6s=float(np.mean(profile[:12])),
        ),
    }


def constant_velocity_fallback(clip: Clip) -> Trajectory:
    """Zero-control rollout at the clip's current speed (the parse fallback)."""
    controls = ControlSequence.zeros(len(clip.future), dt=clip.future.dt)
    init = KinematicState(position=(0.0, 0.0), heading=0.0, speed=clip.ego_state.speed)
    return rollout(controls, init)


def _aggregate_rows(rows: list[MetricsRow], include_fallback: bool) -> dict[str, ProtocolMetrics]:
    used = rows if include_fallback else [row for row in rows if not row.parse_failure]
    if not used:
        zero = {h: 0.0 for h in HORIZONS_S}
        return {p: ProtocolMetrics(l2_at=dict(zero), avg_3s=0.0, avg_6s=0.0) for p in PROTOCOLS}
    out = {}
    for protocol in PROTOCOLS:
        out[protocol] = ProtocolMetrics(
            l2_at={
                h: float(np.mean([row.metrics[protocol].l2_at[h] for row in used]))
                for h in HORIZONS_S
            },
            avg_3s=float(np.mean([row.metrics[protocol].avg_3s for row in used])),
            avg_6s=float(np.mean([row.metrics[protocol].avg_6s for row in used])),
        )
    return out


def evaluate_clip(
    clip: Clip,
    candidates: list[Candidate],
) -> MetricsRow:
    """Score one clip given its parsed candidates."""
    valid = [c.trajectory for c in candidates if c.valid]
    index_map = [i for i, c in enumerate(candidates) if c.valid]
    if valid:
        picked, profile = select_candidate(valid, clip.future)
        selected = index_map[picked]
        parse_failure = False
    else:
        profile = l2_profile(constant_velocity_fallback(clip), clip.future)
        selected = -1
        parse_failure = True
    return MetricsRow(
        clip_id=clip.clip_id,
        selected_candidate=selected,
        valid_candidates=len(valid),
        parse_failure=parse_failure,
        metrics=aggregate(profile),
    )


def run_eval(
    clips: Sequence[Clip],
    gateway,
    flags: AblationFlags,
    k: int,
    mode: OutputMode,
    model_id: str,
    temperature: float = 0.8,
    seed: int | None = None,
    workers: int = 1,
    include_fallback: bool = True,
    attach_reasoning: Callable[[Clip], Clip] | None = None,
    config_label: str | None = None,
    navigator_model_id: str | None = None,
) -> EvalReport:
    """Evaluate every clip and assemble the report.

    ``attach_reasoning`` (when the reason flag is set and a clip has no
    cached reasoning) maps a clip to one carrying reasoning, typically via
    the gateway cache. Gateway failures after retries are recorded as
    parse failures on the clip and the run continues; rows keep manifest
    order regardless of worker interleaving.
    """

    def one(clip: Clip) -> MetricsRow:
        if flags.reason and clip.reasoning is None:
            if attach_reasoning is None:
                raise InvalidInput(
                    f"clip {clip.clip_id} has no reasoning; run gen-reason first or "
                    "configure a navigator"
                )
            clip = attach_reasoning(clip)
        try:
            candidates = predict_candidates(
                clip, flags, gateway, k, mode, model_id, temperature=temperature, seed=seed
            )
        except (ExhaustedRetries, InvalidResponse, ImageUnreadable, UnknownRequest) as exc:
            logger.warning("clip %s failed after retries: %s", clip.clip_id, exc)
            candidates = []
        return evaluate_clip(clip, candidates)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, clips))
    else:
        rows = [one(clip) for clip in clips]

    failure_count = sum(1 for row in rows if row.parse_failure)
    config = {
        "label": config_label or flags.label(),
        "flags": {"reason": flags.reason, "command": flags.command, "images": flags.images},
        "k": k,
        "mode": mode.value,
        "model_id": model_id,
        "navigator_model_id": navigator_model_id,
        "temperature": temperature,
        "seed": seed,
        "include_fallback": include_fallback,
    }
    report = EvalReport(
        rows=rows,
        aggregates=_aggregate_rows(rows, include_fallback),
        config=config,
        failure_count=failure_count,
    )
    report.validate()
    return report


# --- report emission ---------------------------------------------------------

def render_markdown(reports: list[EvalReport], include_6s: bool = True) -> str:
    """One markdown table per protocol, one row per report."""
    horizons = [1, 2, 3, 6] if include_6s else [1, 2, 3]
    lines = []
    for protocol in PROTOCOLS:
        header = ["Model/Config"] + [f"L2 ({h}s)" for h in horizons] + ["Avg"]
        lines.append(f"## {protocol} protocol")
        lines.append("")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for report in reports:
            metrics = report.aggregates[protocol]
            avg = metrics.avg_6s if include_6s else metrics.avg_3s
            cells = [report.config["label"]]
            cells += [f"{metrics.l2_at[h]:.3f}" for h in horizons]
            cells += [f"{avg:.3f}"]
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def emit_report(
    report: EvalReport,
    format: str,
    path: str | Path,
    include_6s: bool = True,
) -> Path:
    """Write a report as markdown, CSV (row level), or JSON lines (raw rows)."""
    path = Path(path)
    if format == "markdown":
        path.write_text(render_markdown([report], include_6s=include_6s), encoding="utf-8")
    elif format == "csv":
        records = [row.as_record() for row in report.rows]
        with path.open("w", encoding="utf-8", newline="") as fp:
            writer = csv.DictWriter(fp, fieldnames=list(records[0].keys()) if records else ["clip_id"])
            writer.writeheader()
            for record in records:
                writer.writerow(
                    {
                        key: (f"{value:.3f}" if isinstance(value, float) else value)
                        for key, value in record.items()
                    }
                )
    elif format == "jsonl":
        with path.open("w", encoding="utf-8") as fp:
            for row in report.rows:
                fp.write(json.dumps(row.as_record(), sort_keys=True))
                fp.write("\n")
    else:
        raise InvalidInput(f"unknown report format {format!r}")
    return path
