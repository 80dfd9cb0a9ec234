"""Command-line driver for the full pipeline.

Commands: gen-data, pretrain-encoder, build-centroids, train, eval,
gradcheck, report.  Every artifact embeds the experiment hash; runs over
different corpora refuse to merge.  Exit codes: 0 ok, 1 usage, 2 validation
or invariant failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checks, evaluation
from .config import ConfigError, ExperimentConfig, load_experiment
from .corpus import CorpusStore, build_corpus, load_manifest
from .losses import load_centroid_bank, save_centroid_bank
from .train import (Checkpoint, TrainingError, average_checkpoints,
                    load_checkpoint, make_bank, pretrain_encoder,
                    save_checkpoint, train_run)
from .util import config_hash

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_cfg(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    if getattr(args, "master_seed", None) is not None:
        overrides["master_seed"] = args.master_seed
    return load_experiment(args.config, overrides)


def _store(cfg: ExperimentConfig) -> CorpusStore:
    manifest_path = cfg.corpus_dir / "manifest.txt"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no corpus at {manifest_path}; run gen-data first")
    return CorpusStore(cfg.corpus_dir)


def _encoder_path(cfg: ExperimentConfig, override) -> Path:
    return Path(override) if override else Path(cfg.out_dir) / "encoder.txt"


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    manifest = build_corpus(cfg.corpus, cfg.master_seed, cfg.corpus_dir)
    print(f"manifest: {cfg.corpus_dir / 'manifest.txt'}")
    print(f"master_seed: {manifest.master_seed}")
    print(f"corpus_hash: {manifest.corpus_hash}")
    return EXIT_OK


def cmd_pretrain_encoder(args) -> int:
    cfg = _load_cfg(args)
    store = _store(cfg)
    params, accuracy, epochs = pretrain_encoder(store, cfg.model_config(),
                                                cfg.pretrain, verbose=args.verbose)
    path = _encoder_path(cfg, args.encoder)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint(params, {"pretrain": cfg.pretrain.seed,
                                        "accuracy": accuracy}, epochs,
                               f"pretrain.seed{cfg.pretrain.seed}", cfg.hash(),
                               store.manifest.corpus_hash), path)
    print(f"encoder: {path}")
    print(f"train_accuracy: {accuracy:.4f} after {epochs} epochs")
    return EXIT_OK


def cmd_build_centroids(args) -> int:
    cfg = _load_cfg(args)
    store = _store(cfg)
    ckpt = load_checkpoint(_encoder_path(cfg, args.encoder))
    bank = make_bank(ckpt.params, store, cfg.model_config())
    path = Path(args.out) if args.out else Path(cfg.out_dir) / "centroids.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_centroid_bank(bank, path, config_hash=cfg.hash())
    print(f"centroids: {path} ({len(bank.speaker_ids)} speakers)")
    return EXIT_OK


def _apply_train_flags(cfg: ExperimentConfig, args) -> None:
    overrides = {}
    if args.encoder_mode:
        overrides["train.encoder_mode"] = args.encoder_mode
    if args.consistency:
        overrides["train.consistency"] = args.consistency
    if args.gate:
        overrides["train.gate_enabled"] = args.gate == "on"
    if args.epochs is not None:
        overrides["train.epochs"] = args.epochs
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if overrides:
        base = cfg.to_dict()["train"]
        for key, value in overrides.items():
            base[key.split(".", 1)[1]] = value
        from .train import TrainConfig
        cfg.train = TrainConfig(**base)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    _apply_train_flags(cfg, args)
    store = _store(cfg)
    run_dir = Path(cfg.out_dir) / "runs" / args.run_name
    pretrained = None
    bank = None
    if cfg.train.encoder_mode == "frozen" or cfg.train.consistency == "centroid":
        enc_path = _encoder_path(cfg, args.encoder)
        if enc_path.exists():
            pretrained = load_checkpoint(enc_path).params
        elif cfg.train.encoder_mode == "frozen":
            raise FileNotFoundError(f"frozen mode needs an encoder at {enc_path}")
    if args.centroids:
        bank = load_centroid_bank(args.centroids)
    run_hash = config_hash({"experiment": cfg.to_dict(), "run": args.run_name})
    paths = train_run(store, cfg.train, cfg.model_config(), run_dir,
                      pretrained=pretrained, bank=bank, verbose=args.verbose,
                      run_config_hash=run_hash)
    (run_dir / "run_config.json").write_text(json.dumps(
        {"run_name": args.run_name, "train": cfg.train.to_dict(),
         "config_hash": run_hash, "corpus_hash": store.manifest.corpus_hash},
        sort_keys=True, indent=1) + "\n")
    print(f"run_dir: {run_dir}")
    print(f"checkpoints: {len(paths)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    store = _store(cfg)
    if args.run:
        run_dir = Path(args.run)
        ckpt_paths = sorted(run_dir.glob("checkpoint_epoch*.txt"))
        if not ckpt_paths:
            raise FileNotFoundError(f"no checkpoints under {run_dir}")
        out_path = Path(args.out) if args.out else run_dir / "report.txt"
    else:
        ckpt_paths = [Path(p) for p in args.checkpoints]
        if not ckpt_paths:
            raise ConfigError("eval needs --run or checkpoint paths")
        out_path = Path(args.out) if args.out else ckpt_paths[-1].parent / "report.txt"
    k = min(cfg.train.checkpoint_avg, len(ckpt_paths))
    ckpts = [load_checkpoint(p) for p in ckpt_paths[-k:]]
    for c in ckpts[1:]:
        if c.corpus_hash != ckpts[0].corpus_hash:
            raise TrainingError("checkpoints come from different corpora")
    avg = average_checkpoints(ckpts)
    scorer = load_checkpoint(_encoder_path(cfg, args.encoder)).params
    report = evaluation.evaluate(avg.params, store, scorer, cfg.model_config(),
                                 unit_mask=args.unit_mask,
                                 config_hash=avg.config_hash,
                                 checkpoint_epoch=avg.epoch)
    evaluation.save_report(report, out_path)
    agg = report.aggregates()
    print(f"report: {out_path}")
    for key in evaluation.SUMMARY_KEYS:
        print(f"{key}: {agg[key]:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = checks.run_battery(seeds=tuple(args.seeds), verbose=args.verbose)
    failed = {k: v for k, v in results.items() if v >= checks.GRAD_TOLERANCE}
    for name, err in results.items():
        status = "FAIL" if name in failed else "ok"
        print(f"{name}: max_rel_err={err:.3e} [{status}]")
    if failed:
        print(f"gradcheck FAILED above {checks.GRAD_TOLERANCE:g}")
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    corpus_hashes = set()
    for run_dir in map(Path, args.runs):
        report = evaluation.load_report(run_dir / "report.txt")
        meta = json.loads((run_dir / "run_config.json").read_text())
        corpus_hashes.add(report.corpus_hash)
        agg = report.aggregates()
        train_meta = meta["train"]
        rows.append({
            "run": meta["run_name"],
            "encoder_mode": train_meta["encoder_mode"],
            "consistency": train_meta["consistency"],
            "gate": "on" if train_meta["gate_enabled"] else "off",
            **{k: agg[k] for k in evaluation.SUMMARY_KEYS},
        })
    if len(corpus_hashes) > 1:
        raise TrainingError(
            f"refusing to merge runs from different corpora: {sorted(corpus_hashes)}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["run", "encoder_mode", "consistency", "gate"] + evaluation.SUMMARY_KEYS
    lines = [",".join(cols)]

    for row in rows:
        lines.append(",".join(_fmt_cell(row[c]) for c in cols))
    (out_dir / "comparison.csv").write_text("\n".join(lines) + "\n")

    baselines = [r for r in rows if r["consistency"] == "none" and r["gate"] == "off"]
    delta_lines = [",".join(["run", "delta_SI_SDR", "delta_SI_SDRi", "delta_Acc",
                             "delta_Sim", "delta_SDR"])]
    if baselines:
        base = baselines[0]
        for row in rows:
            if row is base:
                continue
            delta_lines.append(",".join(
                [row["run"]] + [_fmt_cell(row[k] - base[k])
                                for k in evaluation.SUMMARY_KEYS]))
    (out_dir / "ablation.csv").write_text("\n".join(delta_lines) + "\n")
    print(f"comparison: {out_dir / 'comparison.csv'} ({len(rows)} runs)")
    print(f"ablation: {out_dir / 'ablation.csv'}")
    return EXIT_OK


def _fmt_cell(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tsekit",
                     description="Desk-scale target speaker extraction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", default=None, required=False,
                       help="experiment JSON (defaults apply if omitted)")
        p.add_argument("--out-dir", default=None, help="override output directory")
        p.add_argument("--master-seed", type=int, default=None)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("gen-data", help="build the synthetic corpus")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-encoder", help="train the reference encoder")
    common(p)
    p.add_argument("--encoder", default=None, help="output checkpoint path")
    p.set_defaults(fn=cmd_pretrain_encoder)

    p = sub.add_parser("build-centroids", help="write the speaker centroid bank")
    common(p)
    p.add_argument("--encoder", default=None, help="encoder checkpoint path")
    p.add_argument("--out", default=None, help="output bank path")
    p.set_defaults(fn=cmd_build_centroids)

    p = sub.add_parser("train", help="run separator training")
    common(p)
    p.add_argument("--run-name", required=True)
    p.add_argument("--encoder", default=None, help="pretrained encoder checkpoint")
    p.add_argument("--centroids", default=None, help="centroid bank file")
    p.add_argument("--encoder-mode", choices=["frozen", "joint"], default=None)
    p.add_argument("--consistency", choices=["none", "sc", "centroid"], default=None)
    p.add_argument("--gate", choices=["on", "off"], default=None,
                   help="similarity-gated suppression of the consistency term")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="average checkpoints and evaluate")
    common(p)
    p.add_argument("--run", default=None, help="run directory with checkpoints")
    p.add_argument("checkpoints", nargs="*", help="explicit checkpoint paths")
    p.add_argument("--encoder", default=None, help="scorer encoder checkpoint")
    p.add_argument("--out", default=None, help="report output path")
    p.add_argument("--unit-mask", action="store_true",
                   help="bypass the separator with an all-ones mask")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="merge run reports into comparison tables")
    p.add_argument("runs", nargs="+", help="run directories with report.txt")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, TrainingError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
