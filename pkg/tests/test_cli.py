from __future__ import annotations

import json
from pathlib import Path

import pytest

from navplan.cli import main
from navplan.scene_log import load_eval_manifest


@pytest.fixture()
def manifest(fixture_scene_path, tmp_path) -> Path:
    out = tmp_path / "manifest.jsonl"
    assert main(["extract", "--scene-logs", str(fixture_scene_path), "--out", str(out)]) == 0
    return out


@pytest.fixture()
def reasoned_manifest(manifest, tmp_path) -> Path:
    out = tmp_path / "reasoned.jsonl"
    code = main(
        [
            "gen-reason",
            "--manifest", str(manifest),
            "--out", str(out),
            "--cache", str(tmp_path / "cache"),
            "--mock", "echo",
        ]
    )
    assert code == 0
    return out


class TestExtract:
    def test_summary_line(self, fixture_scene_path, tmp_path, capsys):
        out = tmp_path / "m.jsonl"
        code = main(["extract", "--scene-logs", str(fixture_scene_path), "--out", str(out)])
        assert code == 0
        assert "13 clips" in capsys.readouterr().out
        assert len(load_eval_manifest(out)) == 13

    def test_directory_input(self, fixture_scene_path, tmp_path, capsys):
        out = tmp_path / "m.jsonl"
        code = main(["extract", "--scene-logs", str(fixture_scene_path.parent), "--out", str(out)])
        assert code == 0
        assert "13 clips from 1 scene(s)" in capsys.readouterr().out

    def test_dry_run_writes_nothing(self, fixture_scene_path, tmp_path, capsys):
        out = tmp_path / "m.jsonl"
        code = main(
            ["--dry-run", "extract", "--scene-logs", str(fixture_scene_path), "--out", str(out)]
        )
        assert code == 0
        assert not out.exists()
        assert "would write 13 clips" in capsys.readouterr().out

    def test_missing_input_is_usage_error(self, tmp_path):
        code = main(["extract", "--scene-logs", str(tmp_path / "none"), "--out", "x.jsonl"])
        assert code == 1

    def test_rerun_byte_identical(self, fixture_scene_path, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        main(["extract", "--scene-logs", str(fixture_scene_path), "--out", str(a)])
        main(["extract", "--scene-logs", str(fixture_scene_path), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_split_filter(self, fixture_scene_path, tmp_path, capsys):
        split_file = tmp_path / "splits.json"
        split_file.write_text(
            json.dumps({"train": ["scene-0001"], "test": []}), encoding="utf-8"
        )
        out = tmp_path / "train.jsonl"
        code = main(
            [
                "extract", "--scene-logs", str(fixture_scene_path), "--out", str(out),
                "--split", "train", "--split-file", str(split_file),
            ]
        )
        assert code == 0
        assert "13 clips" in capsys.readouterr().out

        out_test = tmp_path / "test.jsonl"
        code = main(
            [
                "extract", "--scene-logs", str(fixture_scene_path), "--out", str(out_test),
                "--split", "test", "--split-file", str(split_file),
            ]
        )
        assert code == 0
        assert "0 clips" in capsys.readouterr().out

    def test_unknown_split_name(self, fixture_scene_path, tmp_path):
        split_file = tmp_path / "splits.json"
        split_file.write_text(json.dumps({"train": []}), encoding="utf-8")
        code = main(
            [
                "extract", "--scene-logs", str(fixture_scene_path), "--out", "x.jsonl",
                "--split", "val", "--split-file", str(split_file),
            ]
        )
        assert code == 1


class TestFitActions:
    def test_adds_controls_and_prints_histogram(self, manifest, tmp_path, capsys):
        out = tmp_path / "fitted.jsonl"
        code = main(
            ["fit-actions", "--manifest", str(manifest), "--out", str(out), "--lam", "1e-6"]
        )
        assert code == 0
        assert "RMSE histogram" in capsys.readouterr().out
        clips = load_eval_manifest(out)
        assert all(clip.gt_controls is not None for clip in clips)
        assert all(len(clip.gt_controls) == 12 for clip in clips)

    def test_dry_run(self, manifest, tmp_path, capsys):
        out = tmp_path / "fitted.jsonl"
        code = main(["--dry-run", "fit-actions", "--manifest", str(manifest), "--out", str(out)])
        assert code == 0
        assert not out.exists()

    def test_rerun_byte_identical(self, manifest, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            assert main(["fit-actions", "--manifest", str(manifest), "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestGenReason:
    def test_mock_echo_annotates_all(self, reasoned_manifest):
        clips = load_eval_manifest(reasoned_manifest)
        assert all(clip.reasoning is not None for clip in clips)
        assert all(not clip.reasoning.degraded for clip in clips)

    def test_cache_reused_on_rerun(self, manifest, tmp_path):
        cache = tmp_path / "cache"
        args = [
            "gen-reason", "--manifest", str(manifest),
            "--out", str(tmp_path / "r1.jsonl"), "--cache", str(cache), "--mock", "echo",
        ]
        assert main(args) == 0
        entries_before = sorted(p.name for p in cache.rglob("*.json"))
        args[4] = str(tmp_path / "r2.jsonl")
        assert main(args) == 0
        entries_after = sorted(p.name for p in cache.rglob("*.json"))
        assert entries_before == entries_after
        assert (tmp_path / "r1.jsonl").read_bytes() == (tmp_path / "r2.jsonl").read_bytes()


class TestEmitSft:
    def test_waypoint_corpus(self, reasoned_manifest, tmp_path):
        out = tmp_path / "sft.jsonl"
        code = main(["emit-sft", "--manifest", str(reasoned_manifest), "--out", str(out)])
        assert code == 0
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(records) == 13
        assert records[0]["supervision_mask"] == [False, False, True]
        assert out.with_suffix(".README.md").exists()

    def test_action_mode_requires_controls(self, reasoned_manifest, tmp_path):
        code = main(
            [
                "emit-sft", "--manifest", str(reasoned_manifest),
                "--out", str(tmp_path / "sft.jsonl"), "--mode", "action",
            ]
        )
        assert code == 2


class TestEvaluate:
    def test_oracle_zero_report(self, reasoned_manifest, tmp_path, capsys):
        from conftest import golden

        out_dir = tmp_path / "out"
        code = main(
            [
                "evaluate", "--manifest", str(reasoned_manifest),
                "--out-dir", str(out_dir), "--mock", "oracle", "--sigma", "0",
            ]
        )
        assert code == 0
        assert "0 parse failures" in capsys.readouterr().out
        assert (out_dir / "report.md").read_text() == golden("report_zero.md")
        rows = [json.loads(line) for line in (out_dir / "report.jsonl").read_text().splitlines()]
        assert len(rows) == 13
        assert all(row["pointwise_avg_6s"] == 0.0 for row in rows)

    def test_seeded_noise_byte_identical(self, reasoned_manifest, tmp_path):
        dirs = [tmp_path / "run1", tmp_path / "run2"]
        for out_dir in dirs:
            code = main(
                [
                    "evaluate", "--manifest", str(reasoned_manifest),
                    "--out-dir", str(out_dir),
                    "--mock", "oracle", "--sigma", "0.1", "--seed", "7",
                ]
            )
            assert code == 0
        for name in ("report.md", "report.csv", "report.jsonl"):
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()

    def test_dry_run(self, reasoned_manifest, tmp_path, capsys):
        out_dir = tmp_path / "out"
        code = main(
            [
                "--dry-run", "evaluate", "--manifest", str(reasoned_manifest),
                "--out-dir", str(out_dir), "--mock", "oracle",
            ]
        )
        assert code == 0
        assert not out_dir.exists()
        assert "would evaluate 13 clips" in capsys.readouterr().out


class TestAblate:
    def test_four_rows_identical_zero_metrics(self, reasoned_manifest, tmp_path):
        out_dir = tmp_path / "out"
        code = main(
            [
                "ablate", "--manifest", str(reasoned_manifest),
                "--out-dir", str(out_dir), "--mock", "oracle", "--sigma", "0",
            ]
        )
        assert code == 0
        table = (out_dir / "ablation.md").read_text()
        for label in ("reason", "reason+images", "reason+command", "reason+command+images"):
            assert f"| {label} | 0.000 | 0.000 | 0.000 | 0.000 | 0.000 |" in table


class TestRollout:
    def test_action_string_to_waypoints(self, capsys):
        actions = "[" + ", ".join(["(0.00, 0.000)"] * 12) + "]"
        code = main(["rollout", actions, "--speed", "2.0"])
        assert code == 0
        out = capsys.readouterr().out.strip()
        assert out.startswith("[(1.00, 0.00), (2.00, 0.00)")

    def test_bad_action_string(self, capsys):
        assert main(["rollout", "(nope)", "--count", "1"]) == 2


class TestPlumbing:
    def test_version(self, capsys):
        assert main(["version"]) == 0
        assert "navplan" in capsys.readouterr().out

    def test_config_dump(self, capsys):
        assert main(["config-dump"]) == 0
        out = capsys.readouterr().out
        assert "window_frames: 17" in out
        assert "k: 6" in out

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("dataset:\n  window_size: 17\n", encoding="utf-8")
        assert main(["--config", str(cfg), "version"]) == 1
        assert "window_size" in capsys.readouterr().err

    def test_env_interpolation(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("SCENES_DIR", str(tmp_path))
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("paths:\n  scene_logs: ${SCENES_DIR}\n", encoding="utf-8")
        assert main(["--config", str(cfg), "config-dump"]) == 0
        assert str(tmp_path) in capsys.readouterr().out

    def test_missing_env_var_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("paths:\n  scene_logs: ${NAVPLAN_NO_SUCH_VAR}\n", encoding="utf-8")
        assert main(["--config", str(cfg), "version"]) == 1

    def test_usage_error_exit_code(self):
        assert main(["extract"]) == 1  # --out is required

    def test_config_overridden_by_flags(self, fixture_scene_path, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("dataset:\n  stride_frames: 4\n", encoding="utf-8")
        out = tmp_path / "m.jsonl"
        code = main(
            [
                "--config", str(cfg),
                "extract", "--scene-logs", str(fixture_scene_path),
                "--out", str(out), "--stride", "2",
            ]
        )
        assert code == 0
        assert "13 clips" in capsys.readouterr().out
