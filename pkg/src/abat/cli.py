"""Command-line entry point: ``abat <subcommand> --config PATH [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from .attacks import compute_sigma, run_attack
from .datagen import GenSpec, generate, save_corpus
from .evaluation import EvalReport, eval_attacks, offline_inputs, robustness_test
from .experiment import (
    ConfigError,
    ExperimentConfig,
    Row,
    load_checkpoint_for,
    load_data,
    n_classes,
    report_from_runs,
    run_pipeline,
    run_sweep,
    staged,
    sweep_csv,
    train_cell,
    write_report,
)
from .training import prepare
from .trials import DomainDataset


def _seed(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.raw["seeds"][0]


def _out(args, cfg: ExperimentConfig, sub: str = "") -> Path:
    if args.out:
        return Path(args.out)
    base = Path(cfg.raw["output"])
    return base / sub if sub else base


def cmd_gen_data(args, cfg: ExperimentConfig) -> dict:
    gen = cfg.raw["data"].get("generate")
    if gen is None:
        raise ConfigError("gen-data needs a config whose data section has 'generate'")
    spec = GenSpec(**gen)
    out = _out(args, cfg, "corpus")
    with staged(out) as stage:
        save_corpus(stage, generate(spec), {"config_hash": cfg.hash, "seed": spec.seed, "class_names": spec.class_names})
    return {"corpus": str(out)}


def _row_from_args(args) -> Row:
    method = args.method
    align = args.align if args.align is not None else method == "abat"
    return Row(method, align, args.inner, 0.0 if method == "bt" else args.eps)


def cmd_train(args, cfg: ExperimentConfig) -> dict:
    row = _row_from_args(args)
    row.train_config(cfg.raw["train"])
    seed = _seed(args, cfg)
    src, _, _ = load_data(cfg)
    out = _out(args, cfg, f"seed_{seed}/checkpoints")
    with staged(out) as stage:
        train_cell(cfg, row, seed, src, stage)
    return {"checkpoint": str(out / f"{row.slug}.abm"), "seed": seed}


def _checkpoints(args, cfg: ExperimentConfig, seed: int) -> list[Path]:
    if args.checkpoint:
        return [Path(p) for p in args.checkpoint]
    ck = Path(cfg.raw["output"]) / f"seed_{seed}" / "checkpoints"
    # keep the order of the configured grid
    paths = [ck / f"{row.slug}.abm" for row in cfg.rows if (ck / f"{row.slug}.abm").exists()]
    if not paths:
        raise ConfigError(f"no checkpoints found under {ck}")
    return paths


def _row_of(meta: dict) -> Row:
    t = meta["train"]
    return Row(t["method"], t["align"], t["inner"], 0.0 if t["method"] == "bt" else t["inner_eps"])


def cmd_attack(args, cfg: ExperimentConfig) -> dict:
    seed = _seed(args, cfg)
    src, tgt, _ = load_data(cfg)
    summaries = []
    out = _out(args, cfg, f"seed_{seed}/adversarial")
    with staged(out) as stage:
        for path in _checkpoints(args, cfg, seed):
            model, meta = load_checkpoint_for(cfg, path, src)
            row = _row_of(meta)
            X, y = prepare(src, row.align)
            scale = compute_sigma(X)
            tx, ty = offline_inputs(tgt, row.align)
            attack = eval_attacks([args.eps], seed=seed, queries=cfg.raw["eval"]["queries"], kinds=[args.kind])[0]
            adv = run_attack(model, tx, ty, attack, scale)
            pred = model.classify(adv)
            save_corpus(
                stage / row.slug,
                [DomainDataset("adv", adv.astype(np.float32).astype(np.float64), ty)],
                {"config_hash": cfg.hash, "seed": seed, "attack": attack.to_dict(), "checkpoint": str(path)},
            )
            summaries.append({"checkpoint": str(path), "accuracy": float(np.mean(pred == ty)), "attack": attack.to_dict()})
        (stage / "summary.json").write_text(json.dumps({"config_hash": cfg.hash, "seed": seed, "runs": summaries}, indent=2) + "\n")
    return {"adversarial": str(out)}


def cmd_eval(args, cfg: ExperimentConfig) -> dict:
    seed = _seed(args, cfg)
    src, tgt, desc = load_data(cfg)
    ev = cfg.raw["eval"]
    report = EvalReport(meta={"config_hash": cfg.hash, "seed": seed, "data": desc})
    for path in _checkpoints(args, cfg, seed):
        model, meta = load_checkpoint_for(cfg, path, src)
        row = _row_of(meta)
        X, _ = prepare(src, row.align)
        attacks = eval_attacks(ev["eps"], seed=seed, queries=ev["queries"], kinds=ev["kinds"])
        report.add(robustness_test(model, tgt, attacks, compute_sigma(X), row.align, row.label, n_classes=n_classes(src)))
    out = _out(args, cfg, f"seed_{seed}")
    with staged(out) as stage:
        write_report(report, stage)
    return {"report": str(out / "report.csv")}


def cmd_report(args, cfg: ExperimentConfig) -> dict:
    run_dir = _out(args, cfg)
    merged = report_from_runs(run_dir)
    if merged.meta["config_hash"] != cfg.hash:
        raise ConfigError(f"runs in {run_dir} were produced by config {merged.meta['config_hash']}, not {cfg.hash}")
    with staged(run_dir) as stage:
        write_report(merged, stage)
    return {"report": str(run_dir / "report.csv")}


def cmd_sweep(args, cfg: ExperimentConfig) -> dict:
    from .plotting import plot_sweep

    seeds = [args.seed] if args.seed is not None else cfg.raw["seeds"]
    records = run_sweep(cfg, seeds)
    axis = cfg.raw["sweep"]["axis"]
    out = _out(args, cfg, "sweep")
    with staged(out) as stage:
        (stage / "sweep.csv").write_text(sweep_csv(records, cfg.hash, axis, seeds))
        plot_sweep(records, stage / "sweep.png", axis, cfg.hash)
    return {"sweep": str(out / "sweep.csv")}


def cmd_run(args, cfg: ExperimentConfig) -> dict:
    seeds = [args.seed] if args.seed is not None else None
    out = _out(args, cfg)
    run_pipeline(cfg, out, seeds)
    return {"report": str(out / "report.csv")}


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the synthetic corpus"),
    "train": (cmd_train, "train one model"),
    "attack": (cmd_attack, "craft adversarial target trials for checkpoints"),
    "eval": (cmd_eval, "evaluate checkpoints of one seed"),
    "report": (cmd_report, "merge per-seed reports into the mean table"),
    "sweep": (cmd_sweep, "BCA versus training-set size or model width"),
    "run": (cmd_run, "full pipeline over all seeds"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abat", description="Alignment-based adversarial training experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True, help="experiment config JSON")
        s.add_argument("--seed", type=int, help="run only this seed")
        s.add_argument("--out", help="output directory (overrides the config)")
        if name == "train":
            s.add_argument("--method", choices=["bt", "at", "abat"], default="bt")
            s.add_argument("--eps", type=float, default=0.01, help="inner-attack budget, relative to signal std")
            s.add_argument("--inner", choices=["fgsm", "pgd"], default="pgd")
            s.add_argument("--align", action=argparse.BooleanOptionalAction, default=None)
        if name in ("attack", "eval"):
            s.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
        if name == "attack":
            s.add_argument("--kind", choices=["fgsm", "pgd", "square", "ensemble"], default="pgd")
            s.add_argument("--eps", type=float, default=0.03)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config)
        result = COMMANDS[args.command][0](args, cfg)
    except Exception as exc:  # reported as JSON, never a bare traceback
        err = {
            "error": type(exc).__name__,
            "message": str(exc),
            "command": args.command,
            "where": traceback.extract_tb(exc.__traceback__)[-1].name if exc.__traceback__ else None,
        }
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps({"ok": True, "command": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
