"""Command-line entry point.

Results go to files or standard output; progress and diagnostics go to
standard error. Exit codes: 0 success, 1 usage or configuration error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .ablation import run_ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .conformer import load_conformers
from .config import RunConfig
from .errors import ConfigError, DataError, NumericFailure, PolyPretrainError
from .finetune import (
    ModalityChoice,
    Normalizer,
    PropertyDataset,
    PropertyModel,
    build_model,
    fit,
    load_dataset,
    prepare_samples,
    r_squared,
    representation,
    rmse,
    run_cross_validation,
    save_dataset,
)
from .numerics import ParamStore
from .pretrain import TaskToggles, run_pretraining
from .psmiles import StarStrategy, Vocabulary, build_vocabulary, detokenize, tokenize, transform_stars
from .synth import heavy_atom_dataset, synthetic_corpus

log = logging.getLogger("polypretrain")

KIND_PRETRAINED = "pretrained"
KIND_PROPERTY = "property-model"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    common.add_argument("--config", type=Path, help="flat JSON configuration file")

    p = _Parser(prog="polypretrain", description="Multimodal polymer pretraining and property regression.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("tokenize", parents=[common], help="print the tokens of a P-SMILES string")
    s.add_argument("psmiles")

    s = sub.add_parser("star-sub", parents=[common], help="rewrite the polymerization stars")
    s.add_argument("--strategy", choices=[x.value for x in StarStrategy], default="substitute")
    s.add_argument("psmiles")

    s = sub.add_parser("pretrain", parents=[common], help="pretrain both encoders")
    s.add_argument("--corpus", type=Path, required=True, help="text file, one P-SMILES per line")
    s.add_argument("--conformers", type=Path, help="conformer JSONL (default: toy chain layout)")
    s.add_argument("--tasks", help="comma list of mlm,denoise,contrast")
    s.add_argument("--steps", type=int)
    s.add_argument("--strategy", choices=[x.value for x in StarStrategy])
    s.add_argument("--out", type=Path, required=True, help="checkpoint path")
    s.add_argument("--trace", type=Path, help="loss trace CSV (default: <out>.trace.csv)")

    def model_args(s, needs_out=True):
        s.add_argument("--data", type=Path, required=True, help="CSV with header psmiles,value")
        s.add_argument("--checkpoint", type=Path, required=True)
        s.add_argument("--modality", choices=[m.value for m in ModalityChoice])
        s.add_argument("--conformers", type=Path, help="conformer JSONL (default: toy chain layout)")
        if needs_out:
            s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("finetune", parents=[common], help="k-fold fine-tuning and evaluation")
    model_args(s)
    s.add_argument("--folds", type=int)
    s.add_argument("--freeze-encoder", action="store_true", default=None)
    s.add_argument("--save-model", type=Path, help="also fit on all records and save the model here")

    s = sub.add_parser("evaluate", parents=[common], help="score a fine-tuned model on a dataset")
    model_args(s, needs_out=False)

    s = sub.add_parser("embed", parents=[common], help="export X_1d / X_3d / both embeddings to CSV")
    model_args(s)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus or heavy-atom dataset")
    s.add_argument("--kind", choices=["corpus", "dataset"], default="corpus")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("ablate", parents=[common], help="task-toggle and star-strategy ablation report")
    s.add_argument("--corpus", type=Path, help="pretraining corpus (default: 200 synthetic polymers)")
    s.add_argument("--data", type=Path, help="property CSV (default: synthetic heavy-atom counts)")
    s.add_argument("--modality", choices=[m.value for m in ModalityChoice])
    s.add_argument("--steps", type=int)
    s.add_argument("--folds", type=int)
    s.add_argument("--out", type=Path, required=True, help="text report; JSON is written next to it")
    return p


# ---------------------------------------------------------------------------
# helpers


def _config(args, **overrides) -> tuple[RunConfig, set[str]]:
    return RunConfig.load(args.config, {"seed": args.seed, **overrides})


def _read_corpus(path: Path) -> list[str]:
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    corpus = [ln for ln in lines if ln and not ln.startswith("#")]
    if not corpus:
        raise DataError(f"{path}: corpus is empty")
    return corpus


def _maybe_conformers(path: Path | None):
    return None if path is None else load_conformers(path)


def _load(path: Path, cfg: RunConfig, explicit: set[str]) -> tuple[ParamStore, dict, RunConfig]:
    """Load a checkpoint; architecture keys the user set explicitly must match it."""
    expected = {k: getattr(cfg, k) for k in cfg.arch() if k in explicit}
    params, manifest = load_checkpoint(path, expected)
    stored = manifest.get("config", {})
    merged = {**cfg.to_dict(), **{k: stored[k] for k in cfg.arch() if k in stored}}
    return params, manifest, RunConfig.from_mapping(merged)


def _vocab(manifest: dict) -> Vocabulary:
    try:
        return Vocabulary.from_list(manifest["meta"]["vocab"])
    except (KeyError, TypeError):
        raise DataError("checkpoint carries no vocabulary") from None


def _property_model(params, manifest, cfg, modality: ModalityChoice) -> PropertyModel:
    meta = manifest.get("meta", {})
    if meta.get("kind") != KIND_PROPERTY:
        raise DataError("checkpoint has no regression head; create one with `finetune --save-model`")
    stored = ModalityChoice(meta["modality"])
    if modality is not stored:
        raise ConfigError(f"model was fine-tuned for modality {stored.value}, not {modality.value}")
    norm = Normalizer(**meta["normalizer"])
    vocab = _vocab(manifest)
    return PropertyModel(params, stored, cfg.seq_config(len(vocab)), cfg.struct_config(), norm)


# ---------------------------------------------------------------------------
# subcommands


def cmd_tokenize(args) -> int:
    toks = tokenize(args.psmiles)
    detokenize(toks)
    print(" ".join(toks))
    return 0


def cmd_star_sub(args) -> int:
    print(transform_stars(args.psmiles, args.strategy))
    return 0


def cmd_pretrain(args) -> int:
    cfg, _ = _config(args, tasks=args.tasks, steps=args.steps, strategy=args.strategy)
    toggles = TaskToggles.parse(cfg.tasks)
    if not toggles.any:
        raise ConfigError("at least one pretraining task must be enabled")
    corpus = _read_corpus(args.corpus)
    vocab = build_vocabulary(corpus)
    res = run_pretraining(
        corpus,
        cfg.pretrain_config(),
        toggles,
        cfg.seq_config(len(vocab)),
        cfg.struct_config(),
        conformers=_maybe_conformers(args.conformers),
        vocab=vocab,
        log_every=0 if args.quiet else 25,
    )
    trace = args.trace or args.out.with_name(args.out.name + ".trace.csv")
    res.write_trace(trace)
    meta = {"kind": KIND_PRETRAINED, "vocab": res.vocab.to_list(), "tasks": toggles.label()}
    save_checkpoint(res.params, args.out, cfg.to_dict(), meta)
    log.info("wrote %s and %s", args.out, trace)
    return 0


def cmd_finetune(args) -> int:
    cfg, explicit = _config(args, modality=args.modality, folds=args.folds, freeze_encoder=args.freeze_encoder)
    ds = load_dataset(args.data)
    params, manifest, cfg = _load(args.checkpoint, cfg, explicit)
    vocab = _vocab(manifest)
    seq_cfg, struct_cfg = cfg.seq_config(len(vocab)), cfg.struct_config()
    ft = cfg.finetune_config()
    conformers = _maybe_conformers(args.conformers)
    report = run_cross_validation(ds, params, vocab, seq_cfg, struct_cfg, ft, conformers)
    args.out.write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(report.to_table())
    if args.save_model:
        modality = ModalityChoice(ft.modality)
        model = build_model(params, modality, seq_cfg, struct_cfg, ft.hidden, ft.seed, ft.freeze_encoder)
        samples = prepare_samples(ds.psmiles, vocab, modality, conformers, ft.strategy)
        fit(model, samples, ds.targets(), ft, np.random.default_rng([ft.seed, ft.folds]))
        meta = {
            "kind": KIND_PROPERTY,
            "vocab": vocab.to_list(),
            "modality": modality.value,
            "normalizer": {"mean": model.normalizer.mean, "std": model.normalizer.std},
            "dataset": ds.name,
        }
        save_checkpoint(model.params, args.save_model, cfg.to_dict(), meta)
        log.info("wrote %s", args.save_model)
    return 0


def cmd_evaluate(args) -> int:
    cfg, explicit = _config(args, modality=args.modality)
    ds = load_dataset(args.data)
    params, manifest, cfg = _load(args.checkpoint, cfg, explicit)
    modality = ModalityChoice(args.modality or manifest.get("meta", {}).get("modality", cfg.modality))
    model = _property_model(params, manifest, cfg, modality)
    samples = prepare_samples(ds.psmiles, _vocab(manifest), modality, _maybe_conformers(args.conformers), cfg.strategy)
    pred, y = model.predict(samples), ds.targets()
    out = {"n": len(ds), "rmse": rmse(pred, y), "r2": r_squared(pred, y) if len(ds) > 1 else None}
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_embed(args) -> int:
    cfg, explicit = _config(args, modality=args.modality)
    ds = load_dataset(args.data, require_values=False)
    params, manifest, cfg = _load(args.checkpoint, cfg, explicit)
    vocab = _vocab(manifest)
    modality = ModalityChoice(cfg.modality)
    samples = prepare_samples(ds.psmiles, vocab, modality, _maybe_conformers(args.conformers), cfg.strategy)
    with torch.no_grad():
        x = representation(samples, params, modality, cfg.seq_config(len(vocab)), cfg.struct_config()).numpy()
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["psmiles", "value", *(f"e{i}" for i in range(x.shape[1]))])
        for (s, v), row in zip(ds.records, x):
            w.writerow([s, "" if v is None else repr(v), *(repr(float(c)) for c in row)])
    log.info("wrote %d x %d embeddings to %s", *x.shape, args.out)
    return 0


def cmd_synth(args) -> int:
    cfg, _ = _config(args)
    corpus = synthetic_corpus(args.n, seed=cfg.seed)
    if args.kind == "corpus":
        args.out.write_text("\n".join(corpus) + "\n", encoding="utf-8")
    else:
        save_dataset(PropertyDataset(heavy_atom_dataset(corpus), name="heavy_atoms"), args.out)
    return 0


def cmd_ablate(args) -> int:
    cfg, explicit = _config(args, modality=args.modality, steps=args.steps, folds=args.folds)
    if "modality" not in explicit:
        # star handling only reaches the model through the 3D branch
        cfg = RunConfig.from_mapping({**cfg.to_dict(), "modality": "both"})
    corpus = _read_corpus(args.corpus) if args.corpus else synthetic_corpus(200, seed=cfg.seed + 1)
    if args.data:
        ds = load_dataset(args.data)
    else:
        held = synthetic_corpus(100, seed=cfg.seed + 3, exclude=set(corpus))
        ds = PropertyDataset(heavy_atom_dataset(held), name="heavy_atoms")
    vocab_size = len(build_vocabulary(list(corpus) + ds.psmiles))
    report = run_ablation(corpus, ds, cfg.pretrain_config(), cfg.finetune_config(), cfg.seq_config(vocab_size), cfg.struct_config())
    args.out.write_text(report.to_text(), encoding="utf-8")
    args.out.with_suffix(".json").write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


COMMANDS = {
    "tokenize": cmd_tokenize,
    "star-sub": cmd_star_sub,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "embed": cmd_embed,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except NumericFailure as e:
        where = "" if e.step is None else f" at step {e.step}"
        print(f"numeric failure{where}: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except PolyPretrainError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())
