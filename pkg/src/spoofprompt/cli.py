"""Operator CLI: synth | train | eval | cluster | ablate | report.

Every command exits nonzero on failure and prints a single machine-parseable
line ``error: <CODE>: <message>`` to stderr.  Run directories are immutable:
re-running into an existing non-empty directory requires --force.  The
environment variable SPLUAD_THREADS caps worker parallelism for `ablate`.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import datetime
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import build_encoder_config, build_train_config, content_hash, load_config
from .encoders import ClassPromptSet, Vocabulary
from .errors import ConfigError, InputError, OverwriteError, SpoofPromptError
from .metrics import format_report, read_scores, summarize, write_roc_csv, write_scores
from .prompts import context_report
from .synthdata import SynthConfig, generate, load_manifest, split, write_corpus
from .training import Trainer, acer_at_eer

ABLATION_CELLS = [
    ("baseline", False, False),
    ("scpg", True, False),
    ("caa", False, True),
    ("full", True, True),
]


def _prepare_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise OverwriteError(f"output directory {out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_prompt_assets(doc: dict) -> tuple[Vocabulary, ClassPromptSet]:
    vocab = Vocabulary.load(doc["vocab"]) if doc.get("vocab") else Vocabulary.default()
    prompts = ClassPromptSet.load(doc["class_prompts"]) if doc.get("class_prompts") else ClassPromptSet.default_unified()
    return vocab, prompts


def _write_run_manifest(out_dir: Path, doc: dict, seed: int, input_paths: list) -> None:
    manifest = {
        "seed": seed,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "inputs_hash": content_hash(input_paths, extras=[json.dumps(doc, sort_keys=True, default=str)]),
        "config": doc,
        "files": sorted(p.name for p in out_dir.iterdir() if p.is_file()),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def cmd_synth(args) -> int:
    doc = load_config(args.config)
    seed = args.seed if args.seed is not None else doc["seed"]
    sy = doc["synth"]
    cfg = SynthConfig(
        n_live=int(sy["live"]), n_physical=int(sy["physical"]), n_digital=int(sy["digital"]),
        image_size=int(sy["image_size"]), alpha=float(sy["alpha"]), seed=int(seed),
    )
    out = _prepare_out_dir(args.out, args.force)
    samples = generate(cfg)
    manifest = write_corpus(samples, out)
    _write_run_manifest(out, doc, int(seed), [args.config])
    print(f"wrote {len(samples)} samples; manifest: {manifest}")
    return 0


def _build_trainer(doc: dict, seed: int | None, scpg: bool | None, caa: bool | None,
                   manifest_path) -> tuple[Trainer, dict]:
    if manifest_path is None:
        raise ConfigError("data.manifest is not set (pass --config with a data section)")
    enc_cfg = build_encoder_config(doc)
    train_cfg = build_train_config(doc, seed=seed, scpg=scpg, caa=caa)
    vocab, prompts = _load_prompt_assets(doc)
    samples = load_manifest(manifest_path)
    train_samples, eval_samples = split(samples, float(doc["data"]["train_fraction"]), train_cfg.seed)
    trainer = Trainer(enc_cfg, train_cfg, train_samples, eval_samples,
                      prompt_set=prompts, vocab=vocab)
    return trainer, doc


def cmd_train(args) -> int:
    doc = load_config(args.config)
    manifest_path = args.manifest or doc["data"]["manifest"]
    scpg = False if args.no_scpg else None
    caa = False if args.no_caa else None
    trainer, doc = _build_trainer(doc, args.seed, scpg, caa, manifest_path)
    out = _prepare_out_dir(args.out, args.force)

    result = trainer.run(out_dir=out)
    if result.checksum_before != result.checksum_after:
        raise SpoofPromptError("frozen backbone changed during training")

    (out / "config.json").write_text(json.dumps({
        **doc,
        "train": {**doc["train"], "scpg": trainer.config.scpg_on, "caa": trainer.config.caa_on},
        "seed": trainer.config.seed,
        "data": {**doc["data"], "manifest": str(manifest_path)},
    }, indent=2, default=str))
    trainer.vocab.save(out / "vocab.txt")
    trainer.prompt_set.save(out / "class_prompts.yaml")
    if result.final_summary is not None:
        records = result.final_records
        write_scores(records, out / "scores_eval.csv")
        write_roc_csv(records, out / "roc_eval.csv")
        report = format_report("trained", result.final_summary,
                               acer_at_eer=acer_at_eer(records, result.final_summary))
        (out / "report.txt").write_text(report + "\n")
        (out / "metrics.json").write_text(json.dumps({
            "acc": result.final_summary.acc, "auc": result.final_summary.auc,
            "eer": result.final_summary.eer, "acer": result.final_summary.acer,
            "acer_at_eer": acer_at_eer(records, result.final_summary),
            "threshold": result.final_summary.threshold,
        }, indent=2))
        print(report)
    _write_run_manifest(out, doc, trainer.config.seed, [args.config, manifest_path])
    print(f"run complete in {result.seconds:.1f}s; artifacts in {out}")
    return 0


def _trainer_from_run(run_dir: Path) -> Trainer:
    config_path = run_dir / "config.json"
    ckpt_path = run_dir / "checkpoint.bin"
    if not config_path.exists() or not ckpt_path.exists():
        raise InputError(f"{run_dir} is not a run directory (missing config.json/checkpoint.bin)")
    doc = json.loads(config_path.read_text())
    enc_cfg = build_encoder_config(doc)
    train_cfg = build_train_config(doc)
    vocab_path = run_dir / "vocab.txt"
    prompts_path = run_dir / "class_prompts.yaml"
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else Vocabulary.default()
    prompts = ClassPromptSet.load(prompts_path) if prompts_path.exists() else ClassPromptSet.default_unified()
    trainer = Trainer(enc_cfg, train_cfg, [], [], prompt_set=prompts, vocab=vocab)
    trainer.load_state(load_checkpoint(ckpt_path))
    return trainer


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    trainer = _trainer_from_run(run_dir)
    samples = load_manifest(args.manifest)
    records = trainer.score_samples(samples)
    summary = summarize(records, trainer.config.threshold)
    out = Path(args.out) if args.out else run_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_scores(records, out / "scores.csv")
    write_roc_csv(records, out / "roc.csv")
    report = format_report("evaluated", summary, acer_at_eer=acer_at_eer(records, summary))
    (out / "report.txt").write_text(report + "\n")
    print(report)
    return 0


def cmd_cluster(args) -> int:
    if args.run:
        trainer = _trainer_from_run(Path(args.run))
        if trainer.bank is None:
            raise InputError("run was trained without context generation (scpg off)")
        print(context_report(trainer.bank))
        return 0
    doc = load_config(args.config)
    seed = args.seed if args.seed is not None else doc["seed"]
    doc["seed"] = int(seed)
    enc_cfg = build_encoder_config(doc)
    train_cfg = build_train_config(doc, seed=int(seed))
    vocab, prompts = _load_prompt_assets(doc)
    trainer = Trainer(enc_cfg, train_cfg, [], [], prompt_set=prompts, vocab=vocab)
    if trainer.bank is None:
        raise InputError("context generation disabled in config (train.scpg false or K=0)")
    print(context_report(trainer.bank))
    return 0


def _ablate_cell(doc: dict, manifest_path: str, seed: int, scpg: bool, caa: bool) -> dict:
    trainer, _ = _build_trainer(doc, seed, scpg, caa, manifest_path)
    result = trainer.run()
    summary = result.final_summary
    return {
        "acc": summary.acc, "auc": summary.auc, "eer": summary.eer,
        "acer": acer_at_eer(result.final_records, summary),
    }


def cmd_ablate(args) -> int:
    doc = load_config(args.config)
    manifest_path = args.manifest or doc["data"]["manifest"]
    if manifest_path is None:
        raise ConfigError("data.manifest is not set")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise InputError("--seeds must list at least one seed")
    threads = max(1, int(os.environ.get("SPLUAD_THREADS", "1")))

    jobs = [(name, scpg, caa, seed) for name, scpg, caa in ABLATION_CELLS for seed in seeds]
    results: dict[tuple[str, int], dict] = {}
    if threads > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {
                pool.submit(_ablate_cell, doc, str(manifest_path), seed, scpg, caa): (name, seed)
                for name, scpg, caa, seed in jobs
            }
            for fut, key in futures.items():
                results[key] = fut.result()
    else:
        for name, scpg, caa, seed in jobs:
            results[(name, seed)] = _ablate_cell(doc, str(manifest_path), seed, scpg, caa)

    header = f"{'SCPG':>4}  {'CAA':>4}  {'ACC':>14}  {'AUC':>14}  {'EER':>14}  {'ACER':>14}"
    lines = [header, "-" * len(header)]
    for name, scpg, caa in ABLATION_CELLS:
        cells = [results[(name, s)] for s in seeds]
        cols = []
        for key in ("acc", "auc", "eer", "acer"):
            vals = np.array([c[key] for c in cells]) * 100.0
            cols.append(f"{vals.mean():6.2f}±{vals.std():5.2f}")
        lines.append(f"{'x' if scpg else '':>4}  {'x' if caa else '':>4}  " + "  ".join(f"{c:>14}" for c in cols))
    table = "\n".join(lines)
    if args.out:
        out = _prepare_out_dir(args.out, args.force)
        (out / "ablation.txt").write_text(table + "\n")
        (out / "ablation.json").write_text(json.dumps(
            {name: {str(s): results[(name, s)] for s in seeds} for name, _, _ in ABLATION_CELLS},
            indent=2))
        _write_run_manifest(out, doc, seeds[0], [args.config, manifest_path])
    print(table)
    return 0


def cmd_report(args) -> int:
    records = read_scores(args.scores)
    summary = summarize(records, args.threshold)
    comparisons = []
    for spec_str in args.compare or []:
        try:
            name, values = spec_str.split("=", 1)
            acc_v, auc_v, eer_v, acer_v = (float(x) for x in values.split(","))
        except ValueError as exc:
            raise InputError(f"bad --compare entry '{spec_str}' (want NAME=acc,auc,eer,acer)") from exc
        comparisons.append((name, acc_v, auc_v, eer_v, acer_v))
    report = format_report(args.name, summary, comparisons=comparisons,
                           acer_at_eer=acer_at_eer(records, summary))
    print(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report + "\n")
        write_roc_csv(records, out / "roc.csv")
    return 0


def _add_common(p, out_required: bool = False, out_default=None):
    p.add_argument("--config", default=None, help="YAML config path")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument("--out", default=out_default, required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="allow overwriting an existing output dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spoofprompt",
                                     description="prompt-tuned unified face-attack detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _add_common(p, out_required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train prompts on a manifest")
    _add_common(p, out_required=True)
    p.add_argument("--manifest", default=None, help="dataset manifest (overrides config data.manifest)")
    p.add_argument("--no-scpg", action="store_true", help="disable context generation")
    p.add_argument("--no-caa", action="store_true", help="disable hard-sample augmentation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a manifest with a trained run")
    _add_common(p)
    p.add_argument("run", help="run directory from train")
    p.add_argument("manifest", help="dataset manifest to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cluster", help="print the context cluster report")
    _add_common(p)
    p.add_argument("--run", default=None, help="run directory (uses its checkpoint)")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("ablate", help="2x2 module ablation over seeds")
    _add_common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="format metrics from a score CSV")
    _add_common(p)
    p.add_argument("scores", help="score CSV from eval")
    p.add_argument("--name", default="scores", help="row label for the table")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--compare", action="append", help="extra row: NAME=acc,auc,eer,acer (rates in [0,1])")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpoofPromptError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: INTERNAL: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
