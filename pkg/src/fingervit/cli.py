"""Command-line surface.

Subcommands: gen-data, train-frm, train-pad, train-unified, eval,
ablate, bench, metrics. Every command prints a one-line summary and
writes its artifacts under the configured output directory. Exit codes:
0 success, 1 validation error (including bad usage), 2 runtime failure.

Seed precedence: --seed flag, then the VITU_SEED environment variable,
then the config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import pipeline
from .metrics import compute_report
from .persistence import (ConfigError, RunConfig, config_from_dict, load_config,
                          load_checkpoint, read_scores, save_checkpoint, save_config,
                          write_ablation_csv, write_json, write_scores)
from .pipeline import (SEQUENTIAL, UNIFIED, TrainedSystem, ablate_layers, benchmark,
                       build_untrained_system, evaluate_joint, train_frm, train_pad,
                       train_unified)
from .synth import export_dataset
from .vit import full_config


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1 instead of 2."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _resolve_seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("VITU_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"VITU_SEED must be an integer, got '{env}'") from None
    return None


def _load(args) -> RunConfig:
    seed = _resolve_seed(args)
    if args.config is None:
        return config_from_dict({}, seed_override=seed)
    return load_config(args.config, seed_override=seed)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path) -> None:
    save_config(cfg, out / "config.json")


def _cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    split = cfg.data.build()
    export_dataset(split, out / "data")
    _echo_config(cfg, out)
    print(f"gen-data: wrote {len(split.train)} train / {len(split.test)} test images "
          f"({len(split.train_identities)}/{len(split.test_identities)} identities) to {out / 'data'}")
    return 0


def _cmd_train_frm(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    split = cfg.data.build()
    params, history = train_frm(split, cfg.model, cfg.train_frm)
    mc = dataclasses.replace(cfg.model, num_identities=len(split.train_identities))
    save_checkpoint(params, mc, out / "frm.ckpt")
    _echo_config(cfg, out)
    print(f"train-frm: {cfg.train_frm.epochs} epochs, loss {history[0]:.4f} -> "
          f"{history[-1]:.4f}, checkpoint {out / 'frm.ckpt'}")
    return 0


def _cmd_train_pad(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    frm_path = args.frm or out / "frm.ckpt"
    frm_params, mc = load_checkpoint(frm_path)
    split = cfg.data.build()
    params, history = train_pad(split, frm_params, mc, cfg.train_pad)
    save_checkpoint(params, mc, out / "pad.ckpt")
    _echo_config(cfg, out)
    print(f"train-pad: {cfg.train_pad.epochs} epochs, loss {history[0]:.4f} -> "
          f"{history[-1]:.4f}, checkpoint {out / 'pad.ckpt'}")
    return 0


def _cmd_train_unified(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    teacher_path = args.teacher or out / "frm.ckpt"
    teacher_params, mc = load_checkpoint(teacher_path)
    split = cfg.data.build()
    params, history = train_unified(split, teacher_params, mc, cfg.train_unified)
    save_checkpoint(params, mc, out / "unified.ckpt")
    _echo_config(cfg, out)
    print(f"train-unified: {cfg.train_unified.epochs} epochs, loss {history[0]:.4f} -> "
          f"{history[-1]:.4f}, checkpoint {out / 'unified.ckpt'}")
    return 0


def _build_system(args, cfg: RunConfig, out: Path) -> TrainedSystem:
    if args.topology == SEQUENTIAL:
        frm_params, mc = load_checkpoint(args.frm or out / "frm.ckpt")
        pad_params, _ = load_checkpoint(args.pad or out / "pad.ckpt")
        return TrainedSystem(SEQUENTIAL, mc, frm_params=frm_params, pad_params=pad_params,
                             pad_inference_layer=args.pad_layer or 0)
    unified_params, mc = load_checkpoint(args.unified or out / "unified.ckpt")
    return TrainedSystem(UNIFIED, mc, unified_params=unified_params,
                         pad_inference_layer=args.pad_layer or 0)


def _cmd_eval(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    system = _build_system(args, cfg, out)
    split = cfg.data.build()
    report, records = evaluate_joint(split, system,
                                     pad_target_bpcer=cfg.metrics.pad_target_bpcer,
                                     match_target_fmr=cfg.metrics.match_target_fmr)
    scores_path = out / f"scores_{args.topology}.csv"
    report_path = out / f"report_{args.topology}.json"
    write_scores(records, scores_path)
    write_json({"config": dataclasses.asdict(system.model_config),
                "topology": args.topology, "report": report.to_dict()}, report_path)
    _echo_config(cfg, out)
    print(f"eval[{args.topology}]: IM {report.im_accuracy:.2f}% (ACER {report.acer:.2f}%, "
          f"TAR {report.tar_at_far:.2f}%), {len(records)} records -> {scores_path}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    params, mc = load_checkpoint(args.model or out / "pad.ckpt")
    split = cfg.data.build()
    result = ablate_layers(params, mc, split, target_bpcer=cfg.metrics.ablation_target_bpcer)
    path = out / "ablation.csv"
    write_ablation_csv(result, path)
    _echo_config(cfg, out)
    print(f"ablate: {len(result.rows)} layers at BPCER<={result.target_bpcer}%, "
          f"best layer {result.best_layer} "
          f"(APCER {result.rows[result.best_layer - 1].apcer_avg:.2f}%) -> {path}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    mc = full_config(cfg.model.num_identities) if args.full else cfg.model
    seq = benchmark(build_untrained_system(SEQUENTIAL, mc, seed=cfg.seed), runs=args.runs)
    uni = benchmark(build_untrained_system(UNIFIED, mc, seed=cfg.seed), runs=args.runs)
    payload = {
        "config": dataclasses.asdict(mc),
        "sequential": dataclasses.asdict(seq),
        "unified": dataclasses.asdict(uni),
        "param_ratio": uni.param_total / seq.param_total,
        "latency_ratio": uni.latency_ms / seq.latency_ms,
    }
    path = out / ("bench_full.json" if args.full else "bench.json")
    write_json(payload, path)
    print(f"bench: params {uni.param_total / 1e6:.2f}M vs {seq.param_total / 1e6:.2f}M "
          f"(ratio {payload['param_ratio']:.3f}), latency {uni.latency_ms:.2f} vs "
          f"{seq.latency_ms:.2f} ms (ratio {payload['latency_ratio']:.3f}) -> {path}")
    return 0


def _cmd_metrics(args) -> int:
    cfg = _load(args)
    records = read_scores(args.scores)
    report = compute_report(records,
                            pad_target_bpcer=args.pad_bpcer if args.pad_bpcer is not None
                            else cfg.metrics.pad_target_bpcer,
                            match_target_fmr=args.match_fmr if args.match_fmr is not None
                            else cfg.metrics.match_target_fmr,
                            pad_threshold=args.pad_threshold,
                            match_threshold=args.match_threshold)
    payload = report.to_dict()
    if args.out:
        write_json(payload, args.out)
        where = args.out
    else:
        import json as _json
        print(_json.dumps(payload, indent=2, sort_keys=True))
        where = "stdout"
    print(f"metrics: IM {report.im_accuracy:.2f}% from {len(records)} records ({where})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fingervit",
                     description="Joint fingerprint recognition and presentation "
                                 "attack detection on synthetic data.")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the run seed")

    p = sub.add_parser("gen-data", help="render the synthetic dataset to PNG + manifest")
    common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-frm", help="train the recognition model")
    common(p)
    p.set_defaults(func=_cmd_train_frm)

    p = sub.add_parser("train-pad", help="train the PAD model from recognition weights")
    common(p)
    p.add_argument("--frm", help="recognition checkpoint (default: <out>/frm.ckpt)")
    p.set_defaults(func=_cmd_train_pad)

    p = sub.add_parser("train-unified", help="train the unified model against a teacher")
    common(p)
    p.add_argument("--teacher", help="teacher checkpoint (default: <out>/frm.ckpt)")
    p.set_defaults(func=_cmd_train_unified)

    p = sub.add_parser("eval", help="evaluate a deployed system on the test split")
    common(p)
    p.add_argument("--topology", required=True, choices=[SEQUENTIAL, UNIFIED])
    p.add_argument("--frm", help="recognition checkpoint")
    p.add_argument("--pad", help="PAD checkpoint")
    p.add_argument("--unified", help="unified checkpoint")
    p.add_argument("--pad-layer", type=int, default=0, dest="pad_layer",
                   help="PAD inference layer (default: ceil(depth/2))")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="APCER@BPCER per PAD head layer")
    common(p)
    p.add_argument("--model", help="PAD or unified checkpoint (default: <out>/pad.ckpt)")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("bench", help="parameter counts and single-probe latency")
    common(p)
    p.add_argument("--full", action="store_true", help="use the full 224x224 config")
    p.add_argument("--runs", type=int, default=100, help="timed runs (default 100)")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("metrics", help="metric report from a score CSV")
    common(p)
    p.add_argument("--scores", required=True, help="score CSV file")
    p.add_argument("--pad-bpcer", type=float, dest="pad_bpcer",
                   help="BPCER target for PAD threshold selection")
    p.add_argument("--match-fmr", type=float, dest="match_fmr",
                   help="FMR target for match threshold selection")
    p.add_argument("--pad-threshold", type=float, dest="pad_threshold",
                   help="fixed PAD threshold (skips selection)")
    p.add_argument("--match-threshold", type=float, dest="match_threshold",
                   help="fixed match threshold (skips selection)")
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.set_defaults(func=_cmd_metrics)

    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if getattr(args, "command", None) is None:
        print(parser.format_usage(), file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"fingervit: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"fingervit: unexpected failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
