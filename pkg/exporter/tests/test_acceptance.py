"""Exporter acceptance: emitted files must satisfy the primary harness.

The check goes through the primary's external interfaces only: the
scenelog/1 file format and the installed ``navplan`` CLI.
"""

from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from devkit_export.export import export

FIXTURE_DEVKIT = Path(__file__).parent / "fixtures" / "devkit"


@pytest.fixture(scope="module")
def exported_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenelogs")
    export(FIXTURE_DEVKIT, out, split="mini")
    return out


def test_primary_cli_loads_exported_files(exported_dir, tmp_path_factory):
    """navplan extract accepts every exported file without SchemaError."""
    out = tmp_path_factory.mktemp("extract") / "manifest.jsonl"
    result = subprocess.run(
        [
            sys.executable, "-m", "navplan.cli",
            "--dry-run", "extract",
            "--scene-logs", str(exported_dir),
            "--out", str(out),
        ],
        capture_output=True,
        text=True,
    )
    assert result.returncode == 0, result.stderr
    assert "schema error" not in result.stderr.lower()
    assert "would write" in result.stdout


def test_frame_spacing_invariant(exported_dir):
    """Every emitted scene keeps the 0.5 s +/- 0.05 s spacing."""
    scene_files = sorted(exported_dir.glob("scene-*.jsonl"))
    assert scene_files
    for path in scene_files:
        record = json.loads(path.read_text())
        assert record["version"] == "scenelog/1"
        times = [frame["timestamp"] for frame in record["frames"]]
        for a, b in zip(times, times[1:]):
            assert abs((b - a) - 0.5) <= 0.05
