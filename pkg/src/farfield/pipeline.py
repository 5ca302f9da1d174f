"""Manifest-driven orchestration of the full pipeline with artifact caching."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from farfield.audio import read_wav, stack_channel_files, write_wav
from farfield.diarize import DiarizeConfig, diarize_embeddings
from farfield.embeddings import read_embeddings
from farfield.errors import ConfigError, DataError
from farfield.fusion import FusionInput, doverlap_fuse, soft_fuse
from farfield.gss import GssConfig, extract_speaker_segment
from farfield.metrics import compute_der
from farfield.preprocess import (
    ClipNormConfig,
    WpeConfig,
    clip_normalize,
    envelope_variance_rank,
    select_top_channels,
    wpe_dereverberate,
)
from farfield.segments import (
    Segmentation,
    SoftActivity,
    binarize,
    extend_segments,
    read_activity,
    read_rttm,
    write_rttm,
)
from farfield.stft import StftParams, istft, stft

DEFAULT_CONFIG = {
    "seed": 0,
    "stft": {"frame_length": 1024, "frame_shift": 256, "window": "hann"},
    "preprocess": {
        "percentile": 0.998,
        "target_peak": 0.95,
        "wpe": True,
        "wpe_taps": 10,
        "wpe_delay": 2,
        "wpe_iterations": 3,
        "block_seconds": 120.0,
        "selection_fraction": 0.8,
    },
    "diarize": {
        "merge_cos_threshold": 0.75,
        "reject_thrs": [8.0, 10.0, 14.0],
        "max_clusters": 8,
        "reduced_dim": 12,
        "frame_step": 0.5,
        "single_speaker_cos_threshold": 0.6,
        "reduction": "linear",
        "variants": ["orig", "wpe"],
    },
    "fusion": {"binarize_threshold": 0.5, "count_match_threshold": 0.5},
    "gss": {
        "iterations": 5,
        "context_margin": 0.5,
        "chunk_frames": None,
        "noise_floor": 0.01,
        "wpe": True,
    },
    "score": {"collar": 0.0},
}


def _validate(config: dict, defaults: dict, path: str = "") -> dict:
    """Recursively apply defaults and reject unknown keys."""
    merged = {}
    for key, default in defaults.items():
        where = f"{path}.{key}" if path else key
        if key not in config:
            merged[key] = default
        elif isinstance(default, dict):
            if not isinstance(config[key], dict):
                raise ConfigError(f"{where}: expected a mapping")
            merged[key] = _validate(config[key], default, where)
        else:
            merged[key] = config[key]
    for key in config:
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + '.' if path else ''}{key}")
    return merged


def load_config(path=None, overrides: dict | None = None) -> dict:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    config = _validate(raw, DEFAULT_CONFIG)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        config[section][key] = value
    return config


def load_manifest(path) -> list:
    """Read a session manifest file; returns a list of session dicts."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    sessions = raw["sessions"] if isinstance(raw, dict) else raw
    base = Path(path).parent
    out = []
    for entry in sessions:
        if "session_id" not in entry or "channels" not in entry:
            raise DataError("manifest sessions need session_id and channels")
        entry = dict(entry)
        entry["channels"] = [str(base / p) for p in entry["channels"]]
        for item in entry.get("embeddings", []):
            item["path"] = str(base / item["path"])
        for item in entry.get("soft_activities", []):
            item["path"] = str(base / item["path"])
        if entry.get("reference_rttm"):
            entry["reference_rttm"] = str(base / entry["reference_rttm"])
        out.append(entry)
    return out


# ---------------------------------------------------------------------------
# atomic writes and content-hash caching


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def content_hash(paths, config_blob) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(config_blob, sort_keys=True, default=str).encode())
    for p in sorted(str(p) for p in paths):
        digest.update(p.encode())
        try:
            digest.update(hashlib.sha256(Path(p).read_bytes()).digest())
        except OSError as exc:
            raise DataError(f"missing input file {p}") from exc
    return digest.hexdigest()


def _cache_valid(stage_dir: Path, key: str) -> bool:
    marker = stage_dir / ".cache-key"
    return marker.exists() and marker.read_text().strip() == key


def _cache_store(stage_dir: Path, key: str) -> None:
    atomic_write_bytes(stage_dir / ".cache-key", key.encode())


# ---------------------------------------------------------------------------
# stages


def _stft_params(config) -> StftParams:
    s = config["stft"]
    return StftParams(s["frame_length"], s["frame_shift"], s["window"], "center")


def run_preprocess(session: dict, config: dict, run_dir: Path) -> dict:
    """Normalize, dereverberate and rank channels; returns artifact paths."""
    stage_dir = Path(run_dir) / "preprocess" / session["session_id"]
    pc = config["preprocess"]
    key = content_hash(session["channels"], {"stage": "preprocess", **pc, "stft": config["stft"]})
    result = {
        "orig": stage_dir / "normalized.wav",
        "wpe": stage_dir / "wpe.wav",
        "ranking": stage_dir / "ranking.txt",
        "selected": stage_dir / "selected.json",
        "cached": False,
    }
    if _cache_valid(stage_dir, key):
        result["cached"] = True
        return result

    audio = stack_channel_files(session["channels"], session.get("sample_rate"))
    normalized = clip_normalize(audio, ClipNormConfig(pc["percentile"], pc["target_peak"]))
    params = _stft_params(config)
    if pc["wpe"]:
        tensor = wpe_dereverberate(
            stft(normalized, params),
            WpeConfig(pc["wpe_taps"], pc["wpe_delay"], pc["wpe_iterations"], pc["block_seconds"]),
        )
        dereverbed = istft(tensor, params)
    else:
        dereverbed = normalized
    ranking = envelope_variance_rank(dereverbed)
    selected = select_top_channels(ranking, pc["selection_fraction"])

    stage_dir.mkdir(parents=True, exist_ok=True)
    write_wav(result["orig"], normalized)
    write_wav(result["wpe"], dereverbed)
    lines = ["channel\tscore\trank"]
    for rank, ch in enumerate(ranking.order):
        lines.append(f"{int(ch)}\t{ranking.scores[ch]:.6f}\t{rank}")
    atomic_write_bytes(result["ranking"], ("\n".join(lines) + "\n").encode())
    atomic_write_bytes(result["selected"], json.dumps(selected).encode())
    _cache_store(stage_dir, key)
    return result


def _grid_cells(session: dict, config: dict):
    """Grid: activity-segment source x recording variant x rejection threshold."""
    vad_sources = sorted({e.get("vad_source", "default") for e in session.get("embeddings", [])})
    for vad_source in vad_sources:
        for variant in config["diarize"]["variants"]:
            for thr in config["diarize"]["reject_thrs"]:
                yield vad_source, variant, float(thr)


def _find_embedding(session, channel, vad_source, variant):
    for item in session.get("embeddings", []):
        if (
            item.get("channel", 0) == channel
            and item.get("vad_source", "default") == vad_source
            and item.get("variant", "orig") == variant
        ):
            return item["path"]
    return None


def run_diarize_grid(session: dict, config: dict, run_dir: Path) -> dict:
    """Run the clustering grid per channel and fuse each channel's hypotheses."""
    run_dir = Path(run_dir)
    stage_dir = run_dir / "diarize" / session["session_id"]
    dc = config["diarize"]
    selected_path = run_dir / "preprocess" / session["session_id"] / "selected.json"
    if selected_path.exists():
        channels = json.loads(selected_path.read_text())
    else:
        channels = sorted({e.get("channel", 0) for e in session.get("embeddings", [])})

    inputs = [p["path"] for p in session.get("embeddings", [])]
    key = content_hash(inputs, {"stage": "diarize", **dc, "seed": config["seed"]})
    fused_paths = {ch: stage_dir / f"fused_ch{ch}.rttm" for ch in channels}
    if _cache_valid(stage_dir, key) and all(p.exists() for p in fused_paths.values()):
        return {"fused": fused_paths, "cached": True}

    per_channel = {}
    for ch in channels:
        hypotheses = []
        for vad_source, variant, thr in _grid_cells(session, config):
            emb_path = _find_embedding(session, ch, vad_source, variant)
            if emb_path is None:
                warnings.warn(
                    f"no embeddings for channel {ch} / {vad_source} / {variant}; cell skipped",
                    stacklevel=2,
                )
                continue
            cfg = DiarizeConfig(
                merge_cos_threshold=dc["merge_cos_threshold"],
                reject_thr=thr,
                max_clusters=dc["max_clusters"],
                reduced_dim=dc["reduced_dim"],
                frame_step=dc["frame_step"],
                single_speaker_cos_threshold=dc["single_speaker_cos_threshold"],
                reduction=dc["reduction"],
            )
            seg, _, _ = diarize_embeddings(
                read_embeddings(emb_path), cfg, seed=config["seed"],
                session_id=session["session_id"],
            )
            cell_path = stage_dir / f"ch{ch}_{vad_source}_{variant}_thr{thr:g}.rttm"
            stage_dir.mkdir(parents=True, exist_ok=True)
            write_rttm(cell_path, seg)
            hypotheses.append(seg)
        if not hypotheses:
            raise DataError(f"no diarization hypotheses for channel {ch}")
        fused = doverlap_fuse(FusionInput(tuple(hypotheses)))
        write_rttm(fused_paths[ch], fused)
        per_channel[ch] = fused
    _cache_store(stage_dir, key)
    return {"fused": fused_paths, "per_channel": per_channel, "cached": False}


def _channel_activities(session: dict, channel) -> list:
    acts = []
    for item in session.get("soft_activities", []):
        if item.get("channel", channel) == channel:
            acts.append(
                read_activity(
                    item["path"],
                    session_id=session["session_id"],
                    source_tag=item.get("tag", item["path"]),
                )
            )
    return acts


def run_fusion(session: dict, config: dict, run_dir: Path, per_channel: dict) -> dict:
    """Per-channel soft fusion of ND activities, then cross-channel hard fusion."""
    run_dir = Path(run_dir)
    stage_dir = run_dir / "fusion" / session["session_id"]
    stage_dir.mkdir(parents=True, exist_ok=True)
    fc = config["fusion"]
    channel_segs, channel_acts = [], []
    for ch, clustering_seg in sorted(per_channel.items()):
        activities = _channel_activities(session, ch)
        if activities:
            fused_act = soft_fuse(activities, clustering_seg, fc["count_match_threshold"])
            seg = binarize(fused_act, fc["binarize_threshold"])
            seg = Segmentation(session["session_id"], seg.turns)
            channel_acts.append(fused_act)
        else:
            seg = clustering_seg
        channel_segs.append(seg)
    final = doverlap_fuse(FusionInput(tuple(channel_segs)))
    final_path = stage_dir / "final.rttm"
    write_rttm(final_path, final)
    final_act = None
    if channel_acts:
        final_act = soft_fuse(channel_acts, final, fc["count_match_threshold"])
    return {"final": final, "final_path": final_path, "activity": final_act}


def run_gss(session: dict, config: dict, run_dir: Path, seg: Segmentation,
            activity: SoftActivity | None) -> list:
    """Extract one enhanced WAV per (speaker, turn)."""
    run_dir = Path(run_dir)
    stage_dir = run_dir / "gss" / session["session_id"]
    stage_dir.mkdir(parents=True, exist_ok=True)
    gc = config["gss"]
    gss_cfg = GssConfig(
        iterations=gc["iterations"],
        context_margin=gc["context_margin"],
        chunk_frames=gc["chunk_frames"],
        noise_floor=gc["noise_floor"],
        wpe_enabled=gc["wpe"],
    )
    params = _stft_params(config)
    wpe_wav = run_dir / "preprocess" / session["session_id"] / "wpe.wav"
    audio = read_wav(wpe_wav) if wpe_wav.exists() else stack_channel_files(session["channels"])
    speakers = seg.speakers
    if activity is None:
        from farfield.segments import segmentation_to_activity

        frame_step = params.frame_step_seconds(audio.sample_rate)
        activity = segmentation_to_activity(
            seg, frame_step, num_frames=int(np.ceil(audio.duration / frame_step))
        )
    extended = extend_segments(seg, gc["context_margin"], audio.duration)
    outputs = []
    for orig, turn in zip(seg.sorted_turns(), extended.sorted_turns()):
        target = speakers.index(orig.speaker)
        wave = extract_speaker_segment(audio, orig, target, activity, gss_cfg, params)
        name = (
            f"{session['session_id']}-{orig.speaker}-"
            f"{int(round(orig.start * 1000))}-{int(round(orig.end * 1000))}.wav"
        )
        out_path = stage_dir / name
        write_wav(out_path, wave)
        outputs.append(out_path)
    return outputs


def run_full(session: dict, config: dict, run_dir) -> dict:
    """preprocess -> diarize grid -> fusion -> GSS -> scoring."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(run_dir / "config.json", json.dumps(config, indent=2).encode())
    report: dict = {"session_id": session["session_id"]}
    run_preprocess(session, config, run_dir)
    grid = run_diarize_grid(session, config, run_dir)
    per_channel = grid.get("per_channel")
    if per_channel is None:  # cache hit: reload fused per-channel RTTMs
        per_channel = {
            ch: read_rttm(path)[session["session_id"]]
            for ch, path in grid["fused"].items()
        }
    fusion = run_fusion(session, config, run_dir, per_channel)
    report["final_rttm"] = str(fusion["final_path"])
    outputs = run_gss(session, config, run_dir, fusion["final"], fusion["activity"])
    report["gss_outputs"] = [str(p) for p in outputs]
    if session.get("reference_rttm"):
        ref = read_rttm(session["reference_rttm"])[session["session_id"]]
        breakdown = compute_der(ref, fusion["final"], config["score"]["collar"])
        report["der"] = breakdown.der
        report["ref_speakers"] = ref.num_speakers
        report["hyp_speakers"] = fusion["final"].num_speakers
    atomic_write_bytes(
        run_dir / "report" / f"{session['session_id']}.json",
        json.dumps(report, indent=2).encode(),
    )
    return report


def score_directories(ref_dir, hyp_dir, collar: float = 0.0) -> dict:
    """Per-session DER/count table plus macro averages over two RTTM directories."""
    ref_dir, hyp_dir = Path(ref_dir), Path(hyp_dir)
    refs: dict = {}
    for path in sorted(ref_dir.glob("*.rttm")):
        refs.update(read_rttm(path))
    hyps: dict = {}
    for path in sorted(hyp_dir.glob("*.rttm")):
        hyps.update(read_rttm(path))
    rows = []
    for sid in sorted(refs):
        if sid not in hyps:
            rows.append({"session": sid, "der": None, "count_match": False})
            continue
        breakdown = compute_der(refs[sid], hyps[sid], collar)
        rows.append(
            {
                "session": sid,
                "der": breakdown.der,
                "ref_count": refs[sid].num_speakers,
                "hyp_count": hyps[sid].num_speakers,
                "count_match": refs[sid].num_speakers == hyps[sid].num_speakers,
            }
        )
    scored = [r for r in rows if r["der"] is not None]
    macro_der = float(np.mean([r["der"] for r in scored])) if scored else float("nan")
    count_acc = float(np.mean([r["count_match"] for r in rows])) if rows else float("nan")
    return {"sessions": rows, "macro_der": macro_der, "count_accuracy": count_acc}


def format_score_report(result: dict) -> str:
    lines = [f"{'session':<24}{'DER':>8}  {'ref#':>4}{'hyp#':>5}  match"]
    for row in result["sessions"]:
        der = f"{row['der']:.4f}" if row["der"] is not None else "  n/a"
        lines.append(
            f"{row['session']:<24}{der:>8}  {row.get('ref_count', '-'):>4}"
            f"{row.get('hyp_count', '-'):>5}  {'yes' if row['count_match'] else 'no'}"
        )
    lines.append(
        f"{'AVG':<24}{result['macro_der']:>8.4f}  count accuracy "
        f"{result['count_accuracy']:.3f}"
    )
    return "\n".join(lines)
