import json
from pathlib import Path

import numpy as np
import pytest

from farfield.cli import main
from farfield.errors import ConfigError, DataError, FarfieldError, NumericalError
from farfield.pipeline import (
    atomic_write_bytes,
    content_hash,
    load_config,
    load_manifest,
    run_full,
    run_preprocess,
    score_directories,
)
from farfield.segments import read_rttm


class TestConfig:
    def test_defaults_when_no_file(self):
        config = load_config(None)
        assert config["stft"]["frame_length"] == 1024
        assert config["diarize"]["reject_thrs"] == [8.0, 10.0, 14.0]

    def test_partial_file_merges_with_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"gss": {"iterations": 2}}))
        config = load_config(path)
        assert config["gss"]["iterations"] == 2
        assert config["gss"]["context_margin"] == 0.5

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"gss": {"iteratoins": 2}}))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"mystery": {}}))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_overrides(self):
        config = load_config(None, overrides={"gss.iterations": 7})
        assert config["gss"]["iterations"] == 7

    def test_exit_codes(self):
        assert ConfigError("x").exit_code == 2
        assert DataError("x").exit_code == 3
        assert NumericalError("x").exit_code == 4
        assert FarfieldError("x").exit_code == 1


class TestManifest:
    def test_paths_resolved_relative_to_manifest(self, demo_manifest):
        sessions = load_manifest(demo_manifest)
        assert len(sessions) == 1
        base = Path(demo_manifest).parent
        for channel in sessions[0]["channels"]:
            assert Path(channel).is_absolute() or Path(channel).exists()
            assert str(base) in channel
        assert str(base) in sessions[0]["reference_rttm"]

    def test_missing_required_fields(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"sessions": [{"session_id": "x"}]}))
        with pytest.raises(DataError):
            load_manifest(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(tmp_path / "nope.json")


class TestCaching:
    def test_atomic_write_creates_parents(self, tmp_path):
        target = tmp_path / "a" / "b" / "c.txt"
        atomic_write_bytes(target, b"payload")
        assert target.read_bytes() == b"payload"

    def test_content_hash_sensitive_to_file_and_config(self, tmp_path):
        f = tmp_path / "x.bin"
        f.write_bytes(b"aaa")
        h1 = content_hash([f], {"k": 1})
        h2 = content_hash([f], {"k": 2})
        f.write_bytes(b"bbb")
        h3 = content_hash([f], {"k": 1})
        assert len({h1, h2, h3}) == 3

    def test_content_hash_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            content_hash([tmp_path / "gone"], {})

    def test_preprocess_cache_hit_and_invalidation(self, demo_manifest, tmp_path):
        sessions = load_manifest(demo_manifest)
        config = load_config(None)
        run_dir = tmp_path / "run"
        first = run_preprocess(sessions[0], config, run_dir)
        assert first["cached"] is False
        second = run_preprocess(sessions[0], config, run_dir)
        assert second["cached"] is True
        changed = load_config(None, overrides={"preprocess.percentile": 0.9})
        third = run_preprocess(sessions[0], changed, run_dir)
        assert third["cached"] is False


class TestFullPipeline:
    def test_run_full_produces_report_and_outputs(self, demo_manifest, tmp_path):
        sessions = load_manifest(demo_manifest)
        config = load_config(None, overrides={"gss.iterations": 3})
        run_dir = tmp_path / "run"
        report = run_full(sessions[0], config, run_dir)
        assert report["session_id"] == "demo"
        assert report["ref_speakers"] == 2
        assert report["hyp_speakers"] == 2
        assert report["der"] < 0.25
        assert len(report["gss_outputs"]) == 5  # one WAV per reference-style turn
        for path in report["gss_outputs"]:
            assert Path(path).exists()
        assert (run_dir / "fusion" / "demo" / "final.rttm").exists()
        assert json.loads((run_dir / "report" / "demo.json").read_text())["der"] == report["der"]

    def test_two_runs_bit_identical(self, demo_manifest, tmp_path):
        sessions = load_manifest(demo_manifest)
        config = load_config(None, overrides={"gss.iterations": 2})
        reports = []
        finals = []
        for name in ("run-a", "run-b"):
            run_dir = tmp_path / name
            reports.append(run_full(sessions[0], config, run_dir))
            finals.append((run_dir / "fusion" / "demo" / "final.rttm").read_bytes())
        assert finals[0] == finals[1]
        assert reports[0]["der"] == reports[1]["der"]


class TestScoring:
    def test_score_directories(self, demo_manifest, tmp_path):
        base = Path(demo_manifest).parent
        ref_dir = tmp_path / "ref"
        hyp_dir = tmp_path / "hyp"
        ref_dir.mkdir()
        hyp_dir.mkdir()
        (ref_dir / "demo.rttm").write_bytes((base / "demo.rttm").read_bytes())
        (hyp_dir / "demo.rttm").write_bytes((base / "demo.rttm").read_bytes())
        result = score_directories(ref_dir, hyp_dir)
        assert result["macro_der"] == pytest.approx(0.0)
        assert result["count_accuracy"] == 1.0

    def test_missing_hypothesis_marked(self, demo_manifest, tmp_path):
        base = Path(demo_manifest).parent
        ref_dir = tmp_path / "ref"
        hyp_dir = tmp_path / "hyp"
        ref_dir.mkdir()
        hyp_dir.mkdir()
        (ref_dir / "demo.rttm").write_bytes((base / "demo.rttm").read_bytes())
        result = score_directories(ref_dir, hyp_dir)
        assert result["sessions"][0]["der"] is None


class TestCli:
    def test_preprocess_command(self, demo_manifest, tmp_path, capsys):
        code = main([
            "preprocess", "--manifest", str(demo_manifest),
            "--run-dir", str(tmp_path / "run"),
        ])
        assert code == 0
        assert "demo" in capsys.readouterr().out
        assert (tmp_path / "run" / "preprocess" / "demo" / "ranking.txt").exists()

    def test_score_command(self, demo_manifest, tmp_path, capsys):
        base = Path(demo_manifest).parent
        code = main([
            "score", "--ref-dir", str(base), "--hyp-dir", str(base),
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "demo" in out and "AVG" in out

    def test_fuse_command(self, demo_manifest, tmp_path, capsys):
        base = Path(demo_manifest).parent
        inputs = tmp_path / "inputs.json"
        inputs.write_text(json.dumps({
            "hypotheses": [
                {"path": str(base / "demo.rttm"), "weight": 1.0},
                {"path": str(base / "demo.rttm"), "weight": 2.0},
            ]
        }))
        out_path = tmp_path / "fused.rttm"
        code = main(["fuse", "--inputs", str(inputs), "--output", str(out_path)])
        assert code == 0
        fused = read_rttm(out_path)["demo"]
        assert fused.num_speakers == 2

    def test_simulate_command(self, tmp_path, capsys):
        from farfield.audio import MultichannelAudio, write_wav

        rng = np.random.default_rng(0)
        write_wav(tmp_path / "dry.wav", MultichannelAudio(0.1 * rng.standard_normal(8000), 16000))
        config = {
            "room_ranges": {
                "dim_max": [5.0, 4.0, 3.0], "t60_min": 0.2, "t60_max": 0.25,
                "num_sources": 2, "num_receivers": 2,
            },
            "dry_corpus": [{"ref": "u", "path": "dry.wav", "speaker": "s0"}],
            "speakers": 2,
            "duration": 3.0,
            "channels": 2,
            "num_sessions": 1,
        }
        cfg_path = tmp_path / "sim.json"
        cfg_path.write_text(json.dumps(config))
        out_dir = tmp_path / "out"
        code = main([
            "simulate", "--config", str(cfg_path), "--output-dir", str(out_dir),
            "--seed", "1",
        ])
        assert code == 0
        assert (out_dir / "sim000.wav").exists()
        assert (out_dir / "sim000.rttm").exists()
        assert json.loads((out_dir / "sim000.json").read_text())["session_id"] == "sim000"

    def test_bad_config_exits_2(self, demo_manifest, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"nope": 1}))
        code = main([
            "preprocess", "--manifest", str(demo_manifest), "--config", str(bad),
            "--run-dir", str(tmp_path / "run"),
        ])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_manifest_exits_3(self, tmp_path, capsys):
        code = main([
            "preprocess", "--manifest", str(tmp_path / "gone.json"),
            "--run-dir", str(tmp_path / "run"),
        ])
        assert code == 3

    def test_run_command_end_to_end(self, demo_manifest, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gss": {"iterations": 2}}))
        code = main([
            "run", "--manifest", str(demo_manifest), "--config", str(cfg),
            "--run-dir", str(tmp_path / "run"),
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "demo" in out and "DER" in out
