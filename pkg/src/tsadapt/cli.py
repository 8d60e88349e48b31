"""Command-line interface: corpus synthesis, parallel-pair generation, training,
evaluation, and the scripted paper-analog experiment suites.

Exit codes: 0 success, 1 runtime failure (including a failed trend assertion in
paper-suite), 2 usage error. Every run writes its resolved configuration next to
its outputs so it can be reproduced from the saved arguments alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus as corp
from . import distill
from . import evaluation as ev
from . import experiments as exp
from . import network as net
from . import signal as sig

OUT_ROOT_ENV = "TSADAPT_OUT"


def _out_path(value: str | None, default_name: str) -> Path:
    if value is not None:
        return Path(value)
    root = os.environ.get(OUT_ROOT_ENV)
    if root is None:
        return Path(default_name)
    return Path(root) / default_name


def _save_run_config(out: Path, args: argparse.Namespace) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in sorted(vars(args).items()) if k != "func" and v is not None}
    resolved["argv"] = sys.argv[1:]
    target = out / "run-config.json" if out.is_dir() else out.with_suffix(out.suffix + ".run.json")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(resolved, sort_keys=True, indent=1) + "\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_synth_spec(path: str) -> tuple[sig.SynthSpec, corp.FeatureConfig]:
    raw = json.loads(Path(path).read_text())
    feat_cfg = corp.FeatureConfig(**raw.pop("features", {}))
    if "templates" in raw:
        raw["class_templates"] = tuple(tuple(t) for t in raw.pop("templates"))
    elif "classes" in raw:
        raw["class_templates"] = sig.default_templates(
            raw.pop("classes"), raw.get("sample_rate", 16000))
    else:
        raise ValueError(f"{path}: needs either 'classes' or 'templates'")
    for key in ("voiced_ms", "f0_hz", "gain_range"):
        if key in raw:
            raw[key] = tuple(raw[key])
    spec = sig.SynthSpec(**raw)
    return spec, dataclasses.replace(feat_cfg, frame_len=spec.frame_len, hop=spec.hop)


def _load_ts_config(path: str | None, seed: int) -> distill.TsConfig:
    overrides = json.loads(Path(path).read_text()) if path else {}
    overrides.setdefault("seed", seed)
    return dataclasses.replace(distill.TsConfig(), **overrides)


def cmd_synth(args: argparse.Namespace) -> int:
    spec, feat_cfg = _load_synth_spec(args.spec)
    out = _out_path(args.out, "corpus")
    records = corp.synth_corpus(spec, args.count, args.seed, out, feat_cfg)
    _save_run_config(out, args)
    _log(f"wrote {len(records)} labeled utterances under {out}")
    return 0


def cmd_noise(args: argparse.Namespace) -> int:
    out = _out_path(args.out, "noise")
    out.mkdir(parents=True, exist_ok=True)
    for i, kind in enumerate(args.kinds.split(",")):
        wave = sig.synth_noise(kind.strip(), args.duration, args.sample_rate,
                               args.seed + i)
        sig.write_wav(out / f"{kind.strip()}{i:02d}.wav", wave)
    _save_run_config(out, args)
    _log(f"wrote noise files under {out}")
    return 0


def cmd_pair(args: argparse.Namespace) -> int:
    records, meta = corp.load_corpus(args.input)
    feat_cfg = (corp.FeatureConfig.from_json(meta["feature_config"])
                if "feature_config" in meta else corp.FeatureConfig())
    out = Path(args.out)
    out_dir = out.parent if out.suffix else out
    if args.mode == "noisy":
        if args.noise is None:
            raise SystemExit2("--mode noisy requires --noise")
        noise_files = sorted(Path(args.noise).glob("*.wav"))
        if not noise_files:
            raise ValueError(f"no WAV files under {args.noise}")
        noises = [sig.read_wav(p) for p in noise_files]
        lo, _, hi = args.snr.partition(":")
        manifest = corp.build_noisy_parallel(records, noises, float(lo), float(hi),
                                             args.seed, out_dir, feat_cfg)
    else:
        manifest = corp.build_warped_parallel(records, args.alpha, args.seed,
                                              out_dir, feat_cfg)
    manifest_path = out if out.suffix else out / "manifest.tsv"
    manifest.save(manifest_path)
    _save_run_config(manifest_path, args)
    _log(f"wrote manifest with {len(manifest)} pairs to {manifest_path}")
    return 0


def _sniff_data(path: str) -> tuple[str, object]:
    """Distinguish a corpus index (5 columns) from a pair manifest (6 columns)."""
    if Path(path).is_dir():
        path = str(Path(path) / "corpus.tsv")
    with open(path) as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            n_cols = len(line.rstrip("\n").split("\t"))
            break
        else:
            raise ValueError(f"{path}: no data rows")
    if n_cols == 6:
        return "manifest", corp.ParallelManifest.load(path)
    return "corpus", corp.load_corpus(path)[0]


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_ts_config(args.config, args.seed)
    kind, data = _sniff_data(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.mode in ("teacher", "multicond"):
        if kind == "manifest":
            items = [(p.target.load_features(), p.target.load_labels())
                     for p in data.pairs]
        else:
            items = corp.load_labeled(data)
        if any(l is None for _, l in items):
            raise ValueError("supervised training needs labels on every utterance")
        num_classes = int(max(int(l.max()) for _, l in items)) + 1
        dims = [items[0][0].shape[1] * (2 * args.context + 1),
                *(int(h) for h in args.hidden.split(",")), num_classes]
        model = exp.init_model(dims, args.seed, args.context, [f for f, _ in items])
        trained, report = distill.train_hard(model, items, cfg)
    elif args.mode == "ts":
        teacher = net.load_checkpoint(args.teacher)
        if kind != "manifest":
            raise ValueError("--mode ts needs a parallel-pair manifest")
        trained, report = distill.ts_adapt(teacher, data, cfg)
    elif args.mode == "pseudo":
        teacher = net.load_checkpoint(args.teacher)
        feats = ([p.target.load_features() for p in data.pairs] if kind == "manifest"
                 else [r.load_features() for r in data])
        trained, report = distill.pseudo_label_adapt(teacher, feats, cfg)
    else:  # interp
        teacher = net.load_checkpoint(args.teacher)
        if kind != "manifest":
            raise ValueError("--mode interp needs a parallel-pair manifest")
        trained, report = distill.interpolated_distill(teacher, data,
                                                       args.interp_lambda, cfg)

    net.save_checkpoint(out, trained)
    report.save(out.with_suffix(".report.tsv"))
    _save_run_config(out, args)
    last = report.rows[-1]
    _log(f"trained {args.mode}: {len(report.rows) - 1} epochs, final validation "
         f"objective {last.val_obj:.6f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = net.load_checkpoint(args.model)
    kind, data = _sniff_data(args.data)
    if kind == "manifest":
        records = [p.target for p in data.pairs]
        ref_records = [p.source for p in data.pairs]
    else:
        records = list(data)
        ref_records = records
    per_utt = []
    errors = frames = 0
    for rec in records:
        feats = rec.load_features()
        labels = rec.load_labels()
        if labels is None:
            raise ValueError(f"record {rec.id} has no labels to score against")
        posteriors = net.forward(model, feats.astype(np.float64))
        utt_err = int(np.sum(posteriors.argmax(axis=1) != labels))
        errors += utt_err
        frames += labels.size
        snr = float("nan")
        if args.buckets:
            wave = rec.load_wave()
            fcfg = corp.FeatureConfig()
            snr = sig.estimate_snr(wave, fcfg.frame_len, fcfg.hop)
        per_utt.append(ev.UtteranceResult(labels.size, utt_err, snr))

    result = ev.EvalResult(args.model, args.data, 100.0 * errors / frames)
    if args.ref_model:
        ref = net.load_checkpoint(args.ref_model)
        result.mean_kl = ev.behavioral_gap(
            ref, [r.load_features() for r in ref_records],
            model, [r.load_features() for r in records])
    lines = []
    if args.buckets:
        report = ev.bucket_breakdown(per_utt)
        result.buckets = {b.value: v for b, v in report.buckets.items()}
        result.sentinel_frames = report.sentinel_frames
        lines.append(f"{'bucket':12s} {'frames':>8s} {'error%':>8s}")
        for bucket, (err, n) in report.buckets.items():
            lines.append(f"{bucket.value:12s} {n:8d} {err:8.2f}")
        lines.append(f"sentinel frames: {report.sentinel_frames}; bucket-weighted "
                     f"{report.bucket_weighted_error:.2f}%")
    lines.append(f"frame error rate: {result.error_rate:.2f}%"
                 + (f", mean KL to reference {result.mean_kl:.4f} nats/frame"
                    if result.mean_kl is not None else ""))
    print("\n".join(lines))
    if args.out:
        ev.write_results(args.out, [result])
        _save_run_config(Path(args.out), args)
    else:
        print(result.to_json())
    return 0


def cmd_paper_suite(args: argparse.Namespace) -> int:
    out = _out_path(args.out, f"suite-{args.scenario}")
    out.mkdir(parents=True, exist_ok=True)
    cfg = exp.SMOKE_CONFIG if args.profile == "smoke" else None
    seeds = [args.seed_base + i for i in range(args.seeds)]
    if args.seeds < 3:
        _log(f"only {args.seeds} seed(s): trend assertions will be marked "
             "as insufficient seeds")
    per_seed, assertions = exp.run_suite(args.scenario, seeds, out, cfg, jobs=args.jobs)

    all_results = [r for s in per_seed for r in s.results]
    if all_results:
        table = ev.experiment_table(all_results)
        (out / "table.txt").write_text(table)
        ev.write_results(out / "results.jsonl", all_results)
        print(table)
    for a in assertions:
        print(a.line())
    _save_run_config(out, args)
    hard_failures = [a for a in assertions if not a.passed and not a.soft]
    if hard_failures:
        _log(f"{len(hard_failures)} trend assertion(s) failed")
        return 1
    return 0


class SystemExit2(Exception):
    """Usage error discovered after argparse (maps to exit code 2)."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsadapt",
        description="Teacher/student domain adaptation on synthetic acoustic data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--spec", required=True, help="JSON synthesis spec")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=f"output directory (default under ${OUT_ROOT_ENV})")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("noise", help="generate noise WAV files")
    p.add_argument("--kinds", default="pink,band")
    p.add_argument("--duration", type=float, default=45.0)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("pair", help="build a parallel source/target manifest")
    p.add_argument("--mode", choices=("noisy", "warped"), required=True)
    p.add_argument("--in", dest="input", required=True, help="corpus index")
    p.add_argument("--noise", help="directory of noise WAVs (noisy mode)")
    p.add_argument("--snr", default="5:20", help="lo:hi dB range (noisy mode)")
    p.add_argument("--alpha", type=float, default=0.1, help="warp factor (warped mode)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="manifest path or directory")
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("train", help="train or adapt a model")
    p.add_argument("--mode", choices=("teacher", "multicond", "ts", "pseudo", "interp"),
                   required=True)
    p.add_argument("--teacher", help="teacher checkpoint (ts/pseudo/interp)")
    p.add_argument("--data", required=True, help="corpus index or pair manifest")
    p.add_argument("--lambda", dest="interp_lambda", type=float, default=0.5,
                   help="soft/hard interpolation weight (interp)")
    p.add_argument("--config", help="JSON file overriding training-config fields")
    p.add_argument("--hidden", default="96,96,96", help="hidden sizes for fresh models")
    p.add_argument("--context", type=int, default=4, help="context frames each side")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labeled data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="corpus index or pair manifest")
    p.add_argument("--ref-model", help="reference model for the behavioral gap")
    p.add_argument("--buckets", action="store_true", help="per-SNR-bucket breakdown")
    p.add_argument("--out", help="write JSONL results here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("paper-suite", help="run a scripted experiment scenario")
    p.add_argument("--scenario", choices=("noisy", "mismatch", "children"),
                   required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    p.add_argument("--profile", choices=("full", "smoke"), default="full",
                   help="smoke shrinks every corpus for a fast functional pass")
    p.add_argument("--out")
    p.set_defaults(func=cmd_paper_suite)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and args.mode in ("ts", "pseudo", "interp") \
            and not args.teacher:
        parser.error(f"--mode {args.mode} requires --teacher")
    if args.command == "train" and args.mode == "interp" \
            and not 0.0 <= args.interp_lambda <= 1.0:
        parser.error("--lambda must lie in [0, 1]")
    if args.command == "pair" and args.mode == "warped" and not abs(args.alpha) < 1.0:
        parser.error("--alpha must satisfy |alpha| < 1")
    if args.command == "pair" and args.mode == "noisy" and args.noise is None:
        parser.error("--mode noisy requires --noise")
    try:
        return args.func(args)
    except SystemExit2 as e:
        parser.error(str(e))
    except Exception as e:
        _log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
