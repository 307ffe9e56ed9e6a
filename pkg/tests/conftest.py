from __future__ import annotations

from pathlib import Path

import pytest

from navplan.prompting import parse_reasoning
from navplan.scene_log import extract_clips, load_scene_log, with_reasoning

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

# Mirrored in tools/gen_fixtures.py, which renders the golden prompts.
REASONING_TEXT = (
    "Scene Description: a two-lane road curving gently to the left with no "
    "nearby traffic.\n"
    "Recommended Action: keep to the lane and follow the curve at the current speed.\n"
    "Reasoning: the lane ahead is clear and the curvature is mild, so no braking "
    "or evasive maneuver is needed."
)


@pytest.fixture(scope="session")
def fixture_scene_path() -> Path:
    return FIXTURES / "scene-0001.jsonl"


@pytest.fixture(scope="session")
def fixture_scene(fixture_scene_path):
    return load_scene_log(fixture_scene_path)


@pytest.fixture(scope="session")
def fixture_clips(fixture_scene):
    return extract_clips(fixture_scene)


@pytest.fixture(scope="session")
def reasoned_clips(fixture_clips):
    reasoning = parse_reasoning(REASONING_TEXT)
    return [with_reasoning(clip, reasoning) for clip in fixture_clips]


@pytest.fixture()
def reasoned_clip(reasoned_clips):
    return reasoned_clips[0]


def golden(name: str) -> str:
    return (GOLDEN / name).read_text("utf-8")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    reports = []
    for status in ("passed", "failed"):
        reports.extend(terminalreporter.stats.get(status, []))
    acceptance = sorted(
        (r for r in reports if "test_acceptance" in r.nodeid and r.when == "call"),
        key=lambda r: r.nodeid,
    )
    if not acceptance:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for report in acceptance:
        word = "PASS" if report.passed else "FAIL"
        terminalreporter.write_line(f"[{word}] {report.nodeid.split('::')[-1]}")
