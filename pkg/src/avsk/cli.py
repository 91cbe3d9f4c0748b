"""``avsk`` command line: train, evaluate, profile, robustness, diarize, features.

Exit codes: 0 success, 2 usage or configuration error, 3 state mismatch
(checkpoint/config hash disagreement).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from avsk import __version__
from avsk.config import ModelConfig
from avsk.errors import AVSKError, ConfigError, InputError, StateMismatchError

EXIT_OK, EXIT_USAGE, EXIT_STATE = 0, 2, 3
PRESET_DIR = Path(__file__).with_name("presets")
ARCH_ALIASES = {"lp": "lp", "vit": "vit", "vgg": "vgg21d", "vgg21d": "vgg21d",
                "conformer": "conformer"}


class UsageError(AVSKError):
    pass


# -- helpers -------------------------------------------------------------------------


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def version_string():
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def load_config(source):
    """Config from a path or a preset name; ``AVSK_SEED`` overrides the seed."""
    path = Path(source)
    if not path.exists():
        preset = PRESET_DIR / f"{source}.json"
        if not preset.exists():
            raise UsageError(f"no such config file or preset: {source}")
        path = preset
    cfg = ModelConfig.load(path)
    return apply_seed_env(cfg)


def apply_seed_env(cfg):
    env = os.environ.get("AVSK_SEED")
    if env is None or env == "":
        return cfg
    try:
        seed = int(env)
    except ValueError as exc:
        raise ConfigError(f"AVSK_SEED must be an integer, got {env!r}", "seed") from exc
    return cfg.replace(seed=seed)


def write_manifest(out_dir, cfg, started, metrics, artifacts):
    manifest = {
        "config_hash": cfg.config_hash(),
        "version": version_string(),
        "started": started,
        "finished": _now(),
        "metrics": metrics,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _floats(text, what):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from exc


def _ints(text, what):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{what}: expected comma-separated integers, got {text!r}") from exc


def _dataset(args, cfg, default_seed_offset=10_000):
    from avsk.model import synth_for
    from avsk.synth import read_shard
    if getattr(args, "dataset", None):
        data = read_shard(args.dataset)
    else:
        n = cfg.data.n_eval if args.n is None else args.n
        data = synth_for(cfg, cfg.seed + default_seed_offset, n)
    if not data:
        raise UsageError("dataset is empty")
    return data


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- subcommands ---------------------------------------------------------------------


def cmd_train(args):
    from avsk.checkpoint import load_checkpoint, save_checkpoint
    from avsk.model import Recognizer
    started = _now()
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, steps=args.steps)).validate()
    out = _out_dir(args.out)
    log_path = out / "loss.csv"
    model = Recognizer(cfg, log_path=str(log_path), verbose=args.verbose).initialize()
    if args.resume:
        _, flat, step = load_checkpoint(args.resume, expect_hash=cfg.config_hash())
        model.set_parameters({k: v.astype(model.dtype_) for k, v in flat.items()}, step)
    model.fit()
    ckpt = out / "checkpoint.avsk"
    save_checkpoint(ckpt, cfg, model.params_, model.step_)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    hist = model.loss_history_
    metrics = {"steps": model.step_, "n_params": model.n_params_}
    if hist:
        metrics.update(initial_loss=hist[0], final_loss=hist[-1])
    if args.eval:
        wer, _ = model.evaluate(model.eval_data(), beam_width=args.beam)
        metrics["eval_wer"] = wer
    write_manifest(out, cfg, started, metrics,
                   {"checkpoint": ckpt, "loss_log": log_path, "config": out / "config.json"})
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _mode_for(cfg, mode):
    if mode is None:
        return cfg.fusion
    if mode == "vsr" and cfg.fusion != "vsr":
        raise UsageError(f"checkpoint is {cfg.fusion}; mode vsr needs a video-only model")
    if mode in ("avsr", "ao") and cfg.fusion != "avsr":
        raise UsageError(f"checkpoint is {cfg.fusion}; mode {mode} needs an audio-visual model")
    return mode


def cmd_evaluate(args):
    from avsk.checkpoint import restore
    from avsk.metrics import corpus_wer, wer_details
    from avsk.synth import transcript_text
    started = _now()
    model = restore(args.checkpoint)
    cfg = apply_seed_env(model.config_)
    mode = _mode_for(cfg, args.mode)
    data = _dataset(args, cfg)
    hyps = model.transcribe(data, seed=cfg.seed, beam_width=args.beam,
                            mode="ao" if mode == "ao" else None)
    out = _out_dir(args.out)
    per = out / "per_utterance.csv"
    with open(per, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "ref", "hyp", "wer"])
        for i, (ex, h) in enumerate(zip(data, hyps)):
            w.writerow([i, transcript_text(ex.transcript), transcript_text(h),
                        f"{wer_details(ex.transcript, h).wer:.6f}"])
    total = corpus_wer([ex.transcript for ex in data], hyps)
    summary = out / "summary.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "n_utterances", "wer"])
        w.writerow([mode, len(data), f"{total:.6f}"])
    write_manifest(out, cfg, started, {"mode": mode, "wer": total, "n": len(data)},
                   {"per_utterance": per, "summary": summary})
    print(f"{mode} WER {total:.4f} over {len(data)} utterances")
    return EXIT_OK


def cmd_profile(args):
    from avsk import bench
    out = _out_dir(args.out)
    if args.render_only:
        records = bench.load_records(args.render_only)
    else:
        if args.trials < bench.MIN_TRIALS:
            raise UsageError(f"--trials must be at least {bench.MIN_TRIALS}")
        if args.warmup < bench.MIN_WARMUP:
            raise UsageError(f"--warmup must be at least {bench.MIN_WARMUP}")
        kinds = []
        for name in args.frontends.split(","):
            name = name.strip()
            if name not in ARCH_ALIASES:
                raise UsageError(f"unknown architecture {name!r}; choose from "
                                 f"{sorted(ARCH_ALIASES)}")
            kinds.append(ARCH_ALIASES[name])
        batches = _ints(args.batches, "--batches")
        if 1 not in batches or min(batches) < 1:
            raise UsageError("--batches must be positive and include 1")
        configs = bench.default_configs(kinds, (args.hw, args.hw), args.dim)
        report = bench.compare_frontends(configs, batches, args.trials, args.warmup,
                                         args.seq_len, args.cap_bytes)
        records = report.records
        bench.save_records(out / "records.jsonl", records)
    (out / "bench.csv").write_text(bench.render_csv(records), encoding="utf-8")
    text = bench.render_text(records)
    (out / "bench.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


class _Evaluator:
    def __init__(self, model, mode, beam):
        self.model, self.mode, self.beam = model, mode, beam

    def transcribe(self, data, masks, seed):
        return self.model.transcribe(data, masks, seed, beam_width=self.beam, mode=self.mode)


def cmd_robustness(args):
    from avsk import robustness as rb
    from avsk.checkpoint import restore
    started = _now()
    fractions = sorted(_floats(args.fractions, "--fractions"))
    if 0.0 not in fractions:
        raise UsageError("--fractions must include 0 (the clean baseline)")
    if any(not 0.0 <= p <= 1.0 for p in fractions):
        raise UsageError("--fractions must lie in [0, 1]")
    suites = [s.strip() for s in args.suites.split(",") if s.strip()]
    for s in suites:
        if s not in rb.SUITES:
            raise UsageError(f"unknown suite {s!r}; choose from {list(rb.SUITES)}")
    seeds = _ints(args.seeds, "--seeds")
    model = restore(args.checkpoint)
    cfg = apply_seed_env(model.config_)
    if cfg.fusion != "avsr":
        raise UsageError("robustness evaluation needs an audio-visual checkpoint")
    data = _dataset(args, cfg)
    tables = rb.run_robustness_eval(_Evaluator(model, None, args.beam), data, suites,
                                    fractions, seeds, tag="AV")
    twin_tables = None
    if args.twin:
        twin = restore(args.twin)
        twin_tables = rb.run_robustness_eval(_Evaluator(twin, "ao", args.beam), data, suites,
                                             fractions, seeds, tag="AO")
    out = _out_dir(args.out)
    rb.write_tables(out / "wer_tables.csv", tables + (twin_tables or []))
    verdicts = {}
    for k, t in enumerate(tables):
        v = rb.check_test_time_robustness(t)
        line = f"{t.suite}: test-time {v.describe()}"
        verdicts[t.suite] = {"test_time": v.robust}
        if twin_tables:
            tv = rb.check_train_time_robustness(t, twin_tables[k])
            line += f" | train-time {tv.describe()}"
            verdicts[t.suite]["train_time"] = tv.robust
        print(line)
    write_manifest(out, cfg, started, {"verdicts": verdicts},
                   {"wer_tables": out / "wer_tables.csv"})
    return EXIT_OK


def cmd_diarize(args):
    from avsk.metrics import (corpus_wer, der, read_segments, read_words, wder,
                              write_segments, write_words)
    out = _out_dir(args.out)
    if args.ref_segments:
        if not args.hyp_segments:
            raise UsageError("--ref-segments needs --hyp-segments")
        d = der(read_segments(args.ref_segments), read_segments(args.hyp_segments))
        row = {"WER": "", "DER": f"{d.der:.6f}", "WDER": ""}
        if args.ref_words and args.hyp_words:
            from avsk.metrics import wer_details
            rw, hw = read_words(args.ref_words), read_words(args.hyp_words)
            row["WER"] = f"{wer_details([w for w, _ in rw], [w for w, _ in hw]).wer:.6f}"
            row["WDER"] = f"{wder(rw, hw).wder:.6f}"
        _write_report(out / "report.csv", [row])
        print(",".join(row.values()))
        return EXIT_OK
    if not args.checkpoint:
        raise UsageError("diarize needs --checkpoint or --ref-segments/--hyp-segments")
    from avsk.checkpoint import restore
    started = _now()
    model = restore(args.checkpoint)
    cfg = apply_seed_env(model.config_)
    data = _dataset(args, cfg)
    results = model.diarize(data, seed=cfg.seed, beam_width=args.beam)
    ders, wders, hyps = [], [], []
    seg_dir = out / "segments"
    seg_dir.mkdir(exist_ok=True)
    for i, (ex, r) in enumerate(zip(data, results)):
        hyps.append(r["tokens"])
        ders.append(der(ex.speaker_spans, r["segments"]) if r["segments"]
                    else der(ex.speaker_spans, []))
        ref_words = [(str(c), s) for c, s in zip(ex.transcript, ex.token_speakers)]
        if r["words"]:
            wders.append(wder(ref_words, r["words"]))
        write_segments(seg_dir / f"{i:05d}.hyp.csv", r["segments"])
        write_segments(seg_dir / f"{i:05d}.ref.csv", ex.speaker_spans)
        write_words(seg_dir / f"{i:05d}.hyp_words.csv", r["words"])
        write_words(seg_dir / f"{i:05d}.ref_words.csv", ref_words)
    w = corpus_wer([ex.transcript for ex in data], hyps)
    d = sum(x.false_alarm + x.missed + x.confusion for x in ders) / sum(x.total for x in ders)
    num = sum(x.c_is + x.s_is + x.i_is for x in wders)
    den = sum(x.correct + x.substituted + x.inserted for x in wders)
    wd = num / den if den else 1.0
    row = {"WER": f"{w:.6f}", "DER": f"{d:.6f}", "WDER": f"{wd:.6f}"}
    _write_report(out / "report.csv", [row])
    acc = float(np.mean([r["frame_accuracy"] for r in results]))
    write_manifest(out, cfg, started, {"WER": w, "DER": d, "WDER": wd,
                                       "face_frame_accuracy": acc},
                   {"report": out / "report.csv", "segments": seg_dir})
    print(f"WER {w:.4f}  DER {d:.4f}  WDER {wd:.4f}")
    return EXIT_OK


def _write_report(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["WER", "DER", "WDER"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_features(args):
    from avsk.synth import read_shard, synth_generate, transcript_text, write_shard
    if args.inspect:
        data = read_shard(args.inspect)
        print(f"{args.inspect}: {len(data)} examples")
        for i, ex in enumerate(data[:args.show]):
            print(f"  [{i}] {transcript_text(ex.transcript):<24} frames={ex.video.n_frames} "
                  f"tracks={len(ex.face_tracks)} speakers={','.join(ex.face_speakers)}")
        return EXIT_OK
    if not args.out:
        raise UsageError("features needs --out (or --inspect)")
    if args.config:
        cfg = load_config(args.config)
        d = cfg.data
        seed = cfg.seed if args.seed is None else args.seed
        data = synth_generate(seed, args.n or d.n_train, n_speakers=max(1, d.n_faces),
                              charset_size=d.charset_size, min_len=d.min_len, max_len=d.max_len,
                              frames_per_char=d.frames_per_char, gap_frames=d.gap_frames,
                              frame_hw=d.frame_hw, audio_ambiguity=d.audio_ambiguity)
    else:
        seed = args.seed if args.seed is not None else int(os.environ.get("AVSK_SEED") or 0)
        data = synth_generate(seed, args.n or 100, n_speakers=args.speakers,
                              charset_size=args.charset)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_shard(args.out, data)
    print(f"wrote {len(data)} examples to {args.out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="avsk", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"avsk {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a recognizer from a config or preset")
    t.add_argument("--config", required=True, help="JSON config path or preset name")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from (config hash must match)")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.add_argument("--eval", action="store_true", help="report held-out WER after training")
    t.add_argument("--beam", type=int, default=None)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="WER of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="AVSK1 shard (default: synthetic held-out set)")
    e.add_argument("--n", type=int, help="size of the synthetic held-out set")
    e.add_argument("--mode", choices=["vsr", "avsr", "ao"])
    e.add_argument("--beam", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("profile", help="latency/memory vs batch size for front-ends")
    pr.add_argument("--frontends", default="lp,vit,vgg")
    pr.add_argument("--batches", default="1,2,4,8")
    pr.add_argument("--trials", type=int, default=5)
    pr.add_argument("--warmup", type=int, default=2)
    pr.add_argument("--seq-len", type=int, default=16)
    pr.add_argument("--hw", type=int, default=16)
    pr.add_argument("--dim", type=int, default=64)
    pr.add_argument("--cap-bytes", type=int, default=None,
                    help="simulate a memory limit; runs over it become capacity rows")
    pr.add_argument("--render-only", metavar="RECORDS",
                    help="re-render a report from saved JSONL records")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_profile)

    r = sub.add_parser("robustness", help="missing-video suites and robustness verdicts")
    r.add_argument("--checkpoint", required=True, help="audio-visual model")
    r.add_argument("--twin", help="audio-only twin checkpoint for the train-time check")
    r.add_argument("--suites", default="utterance,frame,start,middle,end")
    r.add_argument("--fractions", default="0,0.25,0.5,0.75,1")
    r.add_argument("--seeds", default="0,1,2")
    r.add_argument("--dataset")
    r.add_argument("--n", type=int)
    r.add_argument("--beam", type=int, default=1)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_robustness)

    d = sub.add_parser("diarize", help="WER / DER / WDER report")
    d.add_argument("--checkpoint")
    d.add_argument("--dataset")
    d.add_argument("--n", type=int)
    d.add_argument("--beam", type=int, default=1)
    d.add_argument("--ref-segments")
    d.add_argument("--hyp-segments")
    d.add_argument("--ref-words")
    d.add_argument("--hyp-words")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diarize)

    f = sub.add_parser("features", help="write or inspect synthetic dataset shards")
    f.add_argument("--config", help="take data settings from a config or preset")
    f.add_argument("--seed", type=int)
    f.add_argument("--n", type=int)
    f.add_argument("--speakers", type=int, default=1)
    f.add_argument("--charset", type=int, default=8)
    f.add_argument("--out")
    f.add_argument("--inspect", metavar="SHARD")
    f.add_argument("--show", type=int, default=5)
    f.set_defaults(func=cmd_features)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StateMismatchError as exc:
        print(f"avsk: state mismatch: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (ConfigError, InputError, UsageError, ValueError, FileNotFoundError) as exc:
        print(f"avsk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
