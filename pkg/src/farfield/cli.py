"""Command-line entry points for the pipeline stages."""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from farfield.errors import FarfieldError


def _add_common(parser):
    parser.add_argument("--manifest", required=True, help="session manifest (JSON)")
    parser.add_argument("--config", default=None, help="pipeline config (JSON)")
    parser.add_argument("--run-dir", default="runs/default", help="artifact directory")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--seed", type=int, default=None, help="override config seed")


def _load(args):
    from farfield.pipeline import load_config, load_manifest

    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    sessions = load_manifest(args.manifest)
    return sessions, config


def _map_sessions(fn, sessions, workers):
    if workers <= 1:
        return [fn(s) for s in sessions]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, sessions))


def cmd_preprocess(args):
    from farfield.pipeline import run_preprocess

    sessions, config = _load(args)
    pc = config["preprocess"]
    if args.percentile is not None:
        pc["percentile"] = args.percentile
    if args.target_peak is not None:
        pc["target_peak"] = args.target_peak
    if args.no_wpe:
        pc["wpe"] = False
    if args.block_seconds is not None:
        pc["block_seconds"] = args.block_seconds
    if args.selection_fraction is not None:
        pc["selection_fraction"] = args.selection_fraction
    results = _map_sessions(
        lambda s: run_preprocess(s, config, Path(args.run_dir)), sessions, args.workers
    )
    for session, result in zip(sessions, results):
        state = "cached" if result["cached"] else "done"
        print(f"{session['session_id']}: {state} -> {result['ranking']}")
    return 0


def cmd_diarize(args):
    from farfield.pipeline import run_diarize_grid, run_preprocess

    sessions, config = _load(args)
    for session in sessions:
        run_preprocess(session, config, Path(args.run_dir))
        result = run_diarize_grid(session, config, Path(args.run_dir))
        for ch, path in sorted(result["fused"].items()):
            print(f"{session['session_id']} channel {ch}: {path}")
    return 0


def cmd_fuse(args):
    from farfield.fusion import FusionInput, doverlap_fuse
    from farfield.segments import read_rttm, write_rttm

    spec = json.loads(Path(args.inputs).read_text())
    base = Path(args.inputs).parent
    hypotheses, weights = [], []
    for item in spec["hypotheses"]:
        segs = read_rttm(base / item["path"])
        if len(segs) != 1:
            raise FarfieldError(f"{item['path']}: expected exactly one session per file")
        hypotheses.append(next(iter(segs.values())))
        weights.append(float(item.get("weight", 1.0)))
    fused = doverlap_fuse(FusionInput(tuple(hypotheses), tuple(weights)))
    write_rttm(args.output, fused)
    print(f"fused {len(hypotheses)} hypotheses -> {args.output}")
    return 0


def cmd_gss(args):
    from farfield.pipeline import run_gss
    from farfield.segments import read_activity, read_rttm

    sessions, config = _load(args)
    gc = config["gss"]
    if args.iterations is not None:
        gc["iterations"] = args.iterations
    if args.margin is not None:
        gc["context_margin"] = args.margin
    if args.chunk_frames is not None:
        gc["chunk_frames"] = args.chunk_frames
    if args.noise_floor is not None:
        gc["noise_floor"] = args.noise_floor
    for session in sessions:
        seg = read_rttm(args.rttm)[session["session_id"]]
        activity = read_activity(args.activity, session["session_id"]) if args.activity else None
        if activity is not None and args.vad_mask:
            import numpy as np

            from farfield.gss import apply_vad_mask

            activity = apply_vad_mask(activity, np.load(args.vad_mask))
        outputs = run_gss(session, config, Path(args.run_dir), seg, activity)
        print(f"{session['session_id']}: {len(outputs)} segment WAVs")
    return 0


def cmd_simulate(args):
    import numpy as np

    from farfield.audio import MultichannelAudio, read_wav, write_wav
    from farfield.pipeline import atomic_write_bytes
    from farfield.segments import write_rttm
    from farfield.simulate import (
        MixtureSpec,
        OverlapStats,
        RoomRanges,
        sample_conversation,
        sample_room,
        simulate_mixture,
    )

    spec = json.loads(Path(args.config).read_text())
    base = Path(args.config).parent
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ranges = RoomRanges(**spec.get("room_ranges", {}))
    stats = OverlapStats(**spec.get("overlap_stats", {}))
    sample_rate = int(spec.get("sample_rate", 16000))
    dry_store = {}
    speaker_of = {}
    for item in spec["dry_corpus"]:
        dry_store[item["ref"]] = read_wav(base / item["path"]).samples[0]
        speaker_of[item["ref"]] = item.get("speaker", item["ref"])
    speech_refs = [r for r in dry_store if r != spec.get("noise_ref")]
    rng = np.random.default_rng(args.seed)
    for index in range(int(spec.get("num_sessions", 1))):
        session_id = f"sim{index:03d}"
        room = sample_room(ranges, seed=args.seed * 1000 + index)
        n_spk = int(spec.get("speakers", 4))
        schedule = sample_conversation(
            stats, n_spk, float(spec.get("duration", 60.0)), seed=args.seed * 1000 + index
        )
        utterances = tuple(
            (u.speaker, speech_refs[int(rng.integers(len(speech_refs)))], u.start)
            for u in schedule
        )
        mix_spec = MixtureSpec(
            speakers=n_spk,
            utterances=utterances,
            duration=float(spec.get("duration", 60.0)),
            channels=int(spec.get("channels", 10)),
            noise_ref=spec.get("noise_ref"),
            snr_db=spec.get("snr_db"),
        )
        audio, seg = simulate_mixture(mix_spec, room, dry_store, sample_rate, noise_seed=index)
        seg = type(seg)(session_id, seg.turns)
        write_wav(out_dir / f"{session_id}.wav", audio)
        write_rttm(out_dir / f"{session_id}.rttm", seg)
        metadata = {
            "session_id": session_id,
            "room": {
                "dimensions": room.dimensions.tolist(),
                "t60": room.t60,
                "sources": room.source_positions.tolist(),
                "receivers": room.receiver_positions.tolist(),
            },
            "seed": args.seed * 1000 + index,
            "snr_db": spec.get("snr_db"),
            "schedule": [(u.speaker, u.start, u.duration) for u in schedule],
        }
        atomic_write_bytes(
            out_dir / f"{session_id}.json", json.dumps(metadata, indent=2).encode()
        )
        print(f"{session_id}: {audio.num_channels}ch {audio.duration:.1f}s, "
              f"{len(seg.turns)} turns")
    return 0


def cmd_score(args):
    from farfield.pipeline import format_score_report, score_directories

    result = score_directories(args.ref_dir, args.hyp_dir, args.collar)
    print(format_score_report(result))
    return 0


def cmd_run(args):
    from farfield.pipeline import run_full

    sessions, config = _load(args)
    reports = _map_sessions(
        lambda s: run_full(s, config, Path(args.run_dir)), sessions, args.workers
    )
    for report in reports:
        der = f"DER {report['der']:.4f}" if "der" in report else "no reference"
        print(f"{report['session_id']}: {der}, {len(report['gss_outputs'])} segments")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="farfield")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalize, dereverberate, rank channels")
    _add_common(p)
    p.add_argument("--percentile", type=float, default=None)
    p.add_argument("--target-peak", type=float, default=None)
    p.add_argument("--no-wpe", action="store_true")
    p.add_argument("--block-seconds", type=float, default=None)
    p.add_argument("--selection-fraction", type=float, default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("diarize", help="clustering grid + per-channel fusion")
    _add_common(p)
    p.set_defaults(func=cmd_diarize)

    p = sub.add_parser("fuse", help="fuse hypothesis RTTMs listed in a manifest")
    p.add_argument("--inputs", required=True, help="JSON manifest: hypotheses + weights")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("gss", help="guided source separation over a segmentation")
    _add_common(p)
    p.add_argument("--rttm", required=True)
    p.add_argument("--activity", default=None, help="soft-activity file")
    p.add_argument("--vad-mask", default=None, help="binary VAD mask (.npy)")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--chunk-frames", type=int, default=None)
    p.add_argument("--noise-floor", type=float, default=None)
    p.set_defaults(func=cmd_gss)

    p = sub.add_parser("simulate", help="generate synthetic sessions")
    p.add_argument("--config", required=True, help="simulation config (JSON)")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("score", help="DER + speaker count over RTTM directories")
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--hyp-dir", required=True)
    p.add_argument("--collar", type=float, default=0.0)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("run", help="full pipeline")
    _add_common(p)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FarfieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
