"""Experiment configuration and the seeded train/evaluate/report pipeline."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import compute_sigma
from .datagen import GenSpec, generate, load_corpus
from .evaluation import (
    EvalReport,
    eval_attacks,
    mean_report,
    offline_test,
    online_test,
    robustness_test,
)
from .models import ArchSpec, load_checkpoint, save_checkpoint
from .training import TrainConfig, prepare, train
from .trials import DomainDataset

DEFAULT_GRID = [
    {"method": "bt", "align": False},
    {"method": "at", "inner": "fgsm", "eps": [0.01]},
    {"method": "at", "inner": "pgd", "eps": [0.01]},
    {"method": "bt", "align": True},
    {"method": "abat", "inner": "fgsm", "eps": [0.01, 0.03, 0.05]},
    {"method": "abat", "inner": "pgd", "eps": [0.01, 0.03, 0.05]},
]

DEFAULT_CONFIG = {
    "data": {"generate": GenSpec().to_dict()},
    "split": {"train": ["0"], "test": ["1", "2"]},
    "arch": {"family": "eegnet", "preset": "desk"},
    "train": {"epochs": 100, "batch_size": 32, "lr": 0.01, "lr_after": 0.001, "lr_milestone": 50, "optimizer": "adam"},
    "grid": DEFAULT_GRID,
    "eval": {"eps": [0.01, 0.03, 0.05], "kinds": ["fgsm", "pgd", "ensemble"], "queries": 100, "online": True},
    "sweep": {"axis": "train_fraction", "values": [0.25, 0.5, 0.75, 1.0], "rows": ["bt_ea", "abat_pgd_0.01"], "eps": [0.01, 0.03, 0.05]},
    "seeds": [0, 1, 2],
    "output": "runs/default",
}


class ConfigError(ValueError):
    pass


def config_hash(cfg: dict) -> str:
    """Hash of the config with the output location left out."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:12]


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "data":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class Row:
    """One line of the results table: a training method and its inner attack."""

    method: str
    align: bool
    inner: str = "pgd"
    eps: float = 0.0

    @property
    def label(self) -> str:
        return self.train_config({}).label() + ("+EA" if self.method == "bt" and self.align else "")

    @property
    def slug(self) -> str:
        base = self.method + ("_ea" if self.align and self.method == "bt" else "")
        return base if self.method == "bt" else f"{base}_{self.inner}_{self.eps:g}"

    def train_config(self, shared: dict, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            method=self.method, align=self.align, inner=self.inner, inner_eps=self.eps, seed=seed, **shared
        )


@dataclass
class ExperimentConfig:
    raw: dict
    rows: list[Row] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        raw = _merge(DEFAULT_CONFIG, d)
        if "data" in d:
            raw["data"] = copy.deepcopy(d["data"])
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def validate(self) -> None:
        r = self.raw
        if not r["seeds"]:
            raise ConfigError("seeds must be non-empty")
        data = r["data"]
        if ("generate" in data) == ("corpus" in data):
            raise ConfigError("data needs exactly one of 'generate' or 'corpus'")
        rows = []
        for entry in r["grid"]:
            method = entry.get("method")
            align = entry.get("align", method == "abat")
            inner = entry.get("inner", "pgd")
            if method == "bt":
                rows.append(Row("bt", bool(align)))
                continue
            eps_list = entry.get("eps", [])
            if not eps_list:
                raise ConfigError(f"grid entry {entry} lists no eps")
            for eps in eps_list:
                if not eps > 0:
                    raise ConfigError(f"grid entry {entry}: eps must be > 0")
                rows.append(Row(method, bool(align), inner, float(eps)))
        if len({row.slug for row in rows}) != len(rows):
            raise ConfigError("grid contains duplicate rows")
        for row in rows:
            row.train_config(self.raw["train"])  # raises on bad combinations
        if any(e <= 0 for e in r["eval"]["eps"]):
            raise ConfigError("eval eps must be > 0")
        self.rows = rows

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def arch(self, channels: int, timepoints: int, classes: int, seed: int) -> ArchSpec:
        a = dict(self.raw["arch"])
        preset = a.pop("preset", "desk")
        if preset not in ("desk", "published"):
            raise ConfigError(f"arch preset must be 'desk' or 'published', got {preset!r}")
        family = a.pop("family")
        base = (ArchSpec.desk if preset == "desk" else ArchSpec.published)(family, channels, timepoints, classes, seed=seed)
        return replace(base, **{k: tuple(v) if isinstance(v, list) else v for k, v in a.items()})


# ---------------------------------------------------------------- data


def load_data(cfg: ExperimentConfig) -> tuple[list[DomainDataset], list[DomainDataset], dict]:
    data = cfg.raw["data"]
    if "generate" in data:
        spec = GenSpec(**data["generate"])
        domains = generate(spec)
        desc = {"source": "generated", "spec": spec.to_dict()}
    else:
        domains, manifest = load_corpus(data["corpus"])
        desc = {"source": "corpus", "domains": [d["id"] for d in manifest["domains"]]}
    by_id = {d.domain: d for d in domains}
    split = cfg.raw["split"]
    try:
        src = [by_id[str(i)] for i in split["train"]]
        tgt = [by_id[str(i)] for i in split["test"]]
    except KeyError as exc:
        raise ConfigError(f"split names unknown domain {exc}") from exc
    if {d.domain for d in src} & {d.domain for d in tgt}:
        raise ConfigError("train and test domains overlap")
    return src, tgt, desc


def n_classes(domains: list[DomainDataset]) -> int:
    return int(max(d.y.max() for d in domains)) + 1


# ---------------------------------------------------------------- atomic output


@contextmanager
def staged(out: Path):
    """Write into a staging directory and move files into ``out`` only on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = out.parent / f".{out.name}.staging-{os.getpid()}"
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir()
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    out.mkdir(parents=True, exist_ok=True)
    for src in sorted(stage.rglob("*")):
        if src.is_file():
            dst = out / src.relative_to(stage)
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
    shutil.rmtree(stage, ignore_errors=True)


# ---------------------------------------------------------------- pipeline


def workers() -> int:
    try:
        return max(1, int(os.environ.get("ABAT_THREADS", "1")))
    except ValueError:
        raise ConfigError("ABAT_THREADS must be an integer") from None


def _meta(cfg: ExperimentConfig, seed, **extra) -> dict:
    return {"config_hash": cfg.hash, "seed": seed, **extra}


def train_cell(cfg: ExperimentConfig, row: Row, seed: int, src, out: Path | None):
    arch = cfg.arch(src[0].shape[0], src[0].shape[1], n_classes(src), seed)
    tc = row.train_config(cfg.raw["train"], seed)
    model, log = train(src, tc, arch)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / f"{row.slug}.abm", model, _meta(cfg, seed, row=row.slug, train=tc.to_dict()))
        log.config["config_hash"] = cfg.hash
        log.write(out / f"{row.slug}.log.jsonl")
    return model


def evaluate_cell(cfg: ExperimentConfig, row: Row, model, seed: int, src, tgt) -> tuple[list, dict]:
    ev = cfg.raw["eval"]
    X, _ = prepare(src, row.align)
    scale = compute_sigma(X)
    attacks = eval_attacks(ev["eps"], seed=seed, queries=ev["queries"], kinds=ev["kinds"])
    k = n_classes(src)
    cells = robustness_test(model, tgt, attacks, scale, row.align, method=row.label, n_classes=k)
    online = {}
    if ev.get("online", True):
        online = {
            "method": row.label,
            "offline": offline_test(model, tgt, row.align, n_classes=k).bca,
            "online": online_test(model, tgt, row.align, n_classes=k).bca,
        }
    return cells, online


def _cell_job(args):
    raw, row, seed, out = args
    cfg = ExperimentConfig.from_dict(raw)
    src, tgt, _ = load_data(cfg)
    model = train_cell(cfg, row, seed, src, out)
    return evaluate_cell(cfg, row, model, seed, src, tgt)


def run_seed(cfg: ExperimentConfig, seed: int, out: Path) -> tuple[EvalReport, list[dict]]:
    """Train and evaluate every grid row for one seed; writes checkpoints and logs."""
    src, tgt, desc = load_data(cfg)
    jobs = [(cfg.raw, row, seed, out / "checkpoints") for row in cfg.rows]
    n = min(workers(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = []
        for _, row, _, ck in jobs:
            model = train_cell(cfg, row, seed, src, ck)
            results.append(evaluate_cell(cfg, row, model, seed, src, tgt))
    report = EvalReport(meta=_meta(cfg, seed, data=desc))
    online = []
    for cells, onl in results:
        report.add(cells)
        if onl:
            online.append(onl)
    return report, online


def online_csv(rows: list[dict], meta: dict) -> str:
    lines = ["config_hash,seed,method,offline_bca,online_bca"]
    for r in rows:
        lines.append(f"{meta['config_hash']},{meta['seed']},{r['method']},{r['offline']!r},{r['online']!r}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, directory: Path, stem: str = "report", figure: bool = True) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{stem}.csv").write_text(report.to_csv())
    (directory / f"{stem}.md").write_text(report.to_markdown())
    if figure:
        from .plotting import plot_robustness

        plot_robustness(report, directory / f"{stem}.png")


def merge_seed_reports(cfg_hash: str, reports: list[EvalReport]) -> EvalReport:
    seeds = [r.meta.get("seed") for r in reports]
    return mean_report(reports, {"config_hash": cfg_hash, "seed": "mean", "seeds": seeds})


def run_pipeline(cfg: ExperimentConfig, out: Path | None = None, seeds: list[int] | None = None) -> EvalReport:
    """Full protocol: every seed, every grid row, then the seed-mean table and figures."""
    out = Path(out or cfg.raw["output"])
    seeds = list(seeds if seeds is not None else cfg.raw["seeds"])
    with staged(out) as stage:
        (stage / "config.json").write_text(json.dumps({**cfg.raw, "config_hash": cfg.hash}, indent=2, sort_keys=True) + "\n")
        reports, onlines = [], []
        for seed in seeds:
            sdir = stage / f"seed_{seed}"
            report, online = run_seed(cfg, seed, sdir)
            write_report(report, sdir)
            (sdir / "online.csv").write_text(online_csv(online, report.meta))
            reports.append(report)
            onlines.append(online)
        merged = merge_seed_reports(cfg.hash, reports)
        write_report(merged, stage)
        if onlines and onlines[0]:
            from .plotting import plot_online

            mean_online = [
                {
                    "method": rows[0]["method"],
                    "offline": float(np.mean([r["offline"] for r in rows])),
                    "online": float(np.mean([r["online"] for r in rows])),
                }
                for rows in zip(*onlines)
            ]
            (stage / "online.csv").write_text(online_csv(mean_online, {"config_hash": cfg.hash, "seed": "mean"}))
            plot_online(mean_online, stage / "online.png", cfg.hash)
    return merged


def report_from_runs(run_dir: Path) -> EvalReport:
    """Re-merge the per-seed CSVs of a finished run into the mean table."""
    run_dir = Path(run_dir)
    files = sorted(run_dir.glob("seed_*/report.csv"), key=lambda p: int(p.parent.name.split("_")[1]))
    if not files:
        raise ConfigError(f"{run_dir}: no seed_*/report.csv files")
    reports = []
    for f in files:
        rep = EvalReport.from_csv(f.read_text())
        rep.meta["seed"] = int(f.parent.name.split("_")[1])
        reports.append(rep)
    hashes = {r.meta.get("config_hash") for r in reports}
    if len(hashes) != 1:
        raise ConfigError(f"seed reports come from different configs: {sorted(hashes)}")
    return merge_seed_reports(hashes.pop(), reports)


# ---------------------------------------------------------------- sweeps


def _subset(domains: list[DomainDataset], fraction: float) -> list[DomainDataset]:
    out = []
    for d in domains:
        k = max(1, int(round(fraction * len(d))))
        out.append(DomainDataset(d.domain, d.X[:k], d.y[:k]))
    return out


def run_sweep(cfg: ExperimentConfig, seeds: list[int] | None = None) -> list[dict]:
    """BCA series over training-set fraction or width multiplier.

    Returns one record per (method, epsilon, x) holding the seed-mean BCA
    under the ensemble attack (epsilon 0 is the benign accuracy).
    """
    sw = cfg.raw["sweep"]
    axis = sw["axis"]
    if axis not in ("train_fraction", "width"):
        raise ConfigError(f"sweep axis must be train_fraction or width, got {axis!r}")
    by_slug = {r.slug: r for r in cfg.rows}
    missing = [s for s in sw["rows"] if s not in by_slug]
    if missing:
        raise ConfigError(f"sweep rows {missing} are not in the grid {sorted(by_slug)}")
    rows = [by_slug[s] for s in sw["rows"]]
    seeds = list(seeds if seeds is not None else cfg.raw["seeds"])
    src, tgt, _ = load_data(cfg)
    k = n_classes(src)
    ev = cfg.raw["eval"]
    records = []
    for x in sw["values"]:
        for row in rows:
            per_eps: dict[float, list[float]] = {}
            for seed in seeds:
                data = _subset(src, x) if axis == "train_fraction" else src
                arch = cfg.arch(src[0].shape[0], src[0].shape[1], k, seed)
                if axis == "width":
                    arch = replace(arch, width_multiplier=float(x))
                model, _ = train(data, row.train_config(cfg.raw["train"], seed), arch)
                X, _ = prepare(data, row.align)
                attacks = eval_attacks(sw["eps"], seed=seed, queries=ev["queries"], kinds=("ensemble",))
                for c in robustness_test(model, tgt, attacks, compute_sigma(X), row.align, row.label, n_classes=k):
                    per_eps.setdefault(c.eps, []).append(c.bca)
            for eps, vals in per_eps.items():
                records.append({"method": row.label, "eps": eps, "x": x, "bca": float(np.mean(vals))})
    return records


def sweep_csv(records: list[dict], cfg_hash: str, axis: str, seeds) -> str:
    lines = [f"config_hash,seeds,method,epsilon,{axis},bca"]
    s = ";".join(str(v) for v in seeds)
    for r in records:
        lines.append(f"{cfg_hash},{s},{r['method']},{r['eps']!r},{r['x']!r},{r['bca']!r}")
    return "\n".join(lines) + "\n"


def load_checkpoint_for(cfg: ExperimentConfig, path, src) -> tuple:
    arch = cfg.arch(src[0].shape[0], src[0].shape[1], n_classes(src), 0)
    return load_checkpoint(path, expected_arch=arch)
