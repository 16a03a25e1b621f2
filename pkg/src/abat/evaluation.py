"""Balanced accuracy, offline/online/robustness test protocols and report tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .alignment import AlignmentState, align_domain
from .attacks import AttackConfig, EpsilonScale, check_ball, ensemble_member, run_attack, select_worst
from .trials import DomainDataset

NO_ATTACK = "none"
ATTACK_TITLES = {NO_ATTACK: "No Attack", "fgsm": "FGSM", "pgd": "PGD", "square": "Square", "ensemble": "Ensemble"}
TABLE_KINDS = ("fgsm", "pgd", "ensemble")


class EvaluationError(ValueError):
    pass


def per_class_accuracy(predictions, labels, n_classes: int | None = None) -> np.ndarray:
    """Recall of each class; every class in range must have at least one trial."""
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape or lab.ndim != 1:
        raise EvaluationError(f"predictions {pred.shape} and labels {lab.shape} must be equal-length vectors")
    if lab.size == 0:
        raise EvaluationError("no trials to score")
    classes = np.arange(n_classes) if n_classes is not None else np.unique(lab)
    out = []
    for k in classes:
        mask = lab == k
        if not mask.any():
            raise EvaluationError(f"class {k} has no trials; balanced accuracy is undefined")
        out.append(float(np.mean(pred[mask] == k)))
    return np.array(out)


def bca(predictions, labels, n_classes: int | None = None) -> float:
    """Balanced classification accuracy: the mean of per-class recalls."""
    return float(np.mean(per_class_accuracy(predictions, labels, n_classes)))


# ---------------------------------------------------------------- protocols


@dataclass(frozen=True)
class Cell:
    method: str
    attack: str
    eps: float
    bca: float
    per_class: tuple[float, ...]
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "bca", float(self.bca))
        object.__setattr__(self, "per_class", tuple(float(v) for v in self.per_class))
        if not 0.0 <= self.bca <= 1.0:
            raise EvaluationError(f"BCA {self.bca} outside [0, 1]")

    @property
    def column(self) -> str:
        title = ATTACK_TITLES.get(self.attack, self.attack)
        return title if self.attack == NO_ATTACK else f"{title} {self.eps:g}"


def _check_sessions(sessions: list[DomainDataset]) -> None:
    if not sessions:
        raise EvaluationError("no target sessions")
    for s in sessions:
        if len(s) == 0:
            raise EvaluationError(f"session {s.domain} is empty")
        if np.any(s.y < 0):
            raise EvaluationError(f"session {s.domain} has unlabelled trials")


def offline_inputs(sessions: list[DomainDataset], align: bool) -> tuple[np.ndarray, np.ndarray]:
    """Stack target sessions, aligning each as one batch when ``align``."""
    _check_sessions(sessions)
    X = np.concatenate([align_domain(s.X) if align else s.X for s in sessions])
    return X, np.concatenate([s.y for s in sessions])


def offline_predictions(model, sessions: list[DomainDataset], align: bool) -> tuple[np.ndarray, np.ndarray]:
    X, y = offline_inputs(sessions, align)
    return model.classify(X), y


def offline_test(model, sessions: list[DomainDataset], align: bool, method: str = "", n_classes: int | None = None) -> Cell:
    pred, y = offline_predictions(model, sessions, align)
    k = n_classes or model.arch.classes
    pc = per_class_accuracy(pred, y, k)
    return Cell(method, NO_ATTACK, 0.0, float(pc.mean()), tuple(pc))


def online_predictions(model, session: DomainDataset, align: bool) -> np.ndarray:
    """Classify one session trial by trial, each seeing only its predecessors."""
    state = AlignmentState()
    out = np.empty(len(session), dtype=np.int64)
    for i, x in enumerate(session.X):
        xi = state.update(x) if align else x
        out[i] = model.classify(xi[None])[0]
    return out


def online_test(model, sessions: list[DomainDataset], align: bool, method: str = "", n_classes: int | None = None) -> Cell:
    """Streaming protocol with a fresh alignment state per session."""
    _check_sessions(sessions)
    pred = np.concatenate([online_predictions(model, s, align) for s in sessions])
    y = np.concatenate([s.y for s in sessions])
    pc = per_class_accuracy(pred, y, n_classes or model.arch.classes)
    return Cell(method, "online", 0.0, float(pc.mean()), tuple(pc))


def eval_attacks(eps_grid=(0.01, 0.03, 0.05), seed: int = 0, queries: int = 200, kinds=TABLE_KINDS) -> list[AttackConfig]:
    """The evaluation grid: FGSM, 20-step PGD and the ensemble at each budget."""
    out = []
    for kind in kinds:
        for eps in eps_grid:
            if kind == "pgd":
                out.append(AttackConfig.eval_pgd(eps, seed))
            elif kind == "ensemble":
                out.append(AttackConfig("ensemble", eps, steps=20, step_size_rel=eps / 10, seed=seed, queries=queries))
            elif kind == "square":
                out.append(AttackConfig("square", eps, seed=seed, queries=queries))
            else:
                out.append(AttackConfig(kind, eps, seed=seed))
    return out


def robustness_test(
    model,
    sessions: list[DomainDataset],
    attacks: list[AttackConfig],
    scale: EpsilonScale,
    align: bool,
    method: str = "",
    chunk: int = 128,
    n_classes: int | None = None,
) -> list[Cell]:
    """Benign column plus one cell per attack, all on offline-aligned targets.

    Every adversarial batch is checked against its budget. Member outputs
    already computed for FGSM/PGD cells are reused by ensemble cells.
    """
    X, y = offline_inputs(sessions, align)
    k = n_classes or model.arch.classes
    pc = per_class_accuracy(model.classify(X), y, k)
    cells = [Cell(method, NO_ATTACK, 0.0, float(pc.mean()), tuple(pc))]
    done: dict[AttackConfig, np.ndarray] = {}

    def attacked(cfg: AttackConfig) -> np.ndarray:
        if cfg in done:
            return done[cfg]
        if cfg.kind == "ensemble":
            members = [attacked(ensemble_member(cfg, m)) for m in cfg.members]
            adv = np.concatenate(
                [select_worst(model, X[i : i + chunk], y[i : i + chunk], [m[i : i + chunk] for m in members]) for i in range(0, len(X), chunk)]
            )
        else:
            adv = np.concatenate(
                [run_attack(model, X[i : i + chunk], y[i : i + chunk], cfg, scale, first_index=i) for i in range(0, len(X), chunk)]
            )
        check_ball(adv, X, scale.absolute(cfg.epsilon_rel))
        done[cfg] = adv
        return adv

    for cfg in attacks:
        pc = per_class_accuracy(model.classify(attacked(cfg)), y, k)
        cells.append(Cell(method, cfg.kind, cfg.epsilon_rel, float(pc.mean()), tuple(pc)))
    return cells


# ---------------------------------------------------------------- reports


CSV_FIELDS = ("config_hash", "seed", "method", "attack", "epsilon", "bca", "per_class")


@dataclass
class EvalReport:
    """BCA cells keyed by (method, attack, epsilon), plus run metadata."""

    cells: list[Cell] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, cells) -> None:
        self.cells.extend(cells)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(c.method for c in self.cells))

    def columns(self) -> list[str]:
        """Table columns in canonical order: benign, then each kind by budget."""
        seen = {(c.attack, c.eps): c.column for c in self.cells}
        order = [NO_ATTACK, "fgsm", "pgd", "square", "ensemble"]
        keys = sorted(seen, key=lambda k: (order.index(k[0]) if k[0] in order else len(order), k[0], k[1]))
        return [seen[k] for k in keys]

    def get(self, method: str, attack: str, eps: float = 0.0) -> Cell:
        for c in self.cells:
            if c.method == method and c.attack == attack and math.isclose(c.eps, eps, abs_tol=1e-12):
                return c
        raise KeyError((method, attack, eps))

    def row(self, method: str) -> dict[str, float]:
        vals = {c.column: c.bca for c in self.cells if c.method == method}
        return {col: vals[col] for col in self.columns() if col in vals}

    def average(self, method: str) -> float:
        vals = list(self.row(method).values())
        return float(np.mean(vals))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        h = self.meta.get("config_hash", "")
        for c in self.cells:
            seed = self.meta.get("seed", "") if c.seed is None else c.seed
            w.writerow([h, seed, c.method, c.attack, repr(float(c.eps)), repr(c.bca), ";".join(repr(v) for v in c.per_class)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: dict | None = None) -> "EvalReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        cells = []
        for r in rows:
            cells.append(
                Cell(
                    r["method"],
                    r["attack"],
                    float(r["epsilon"]),
                    float(r["bca"]),
                    tuple(float(v) for v in r["per_class"].split(";") if v),
                    int(r["seed"]) if r["seed"] not in ("", "mean") else None,
                )
            )
        m = dict(meta or {})
        if rows:
            m.setdefault("config_hash", rows[0]["config_hash"])
        return cls(cells, m)

    def to_markdown(self, digits: int = 2) -> str:
        cols = self.columns()
        lines = []
        if self.meta:
            lines.append(f"<!-- config_hash={self.meta.get('config_hash', '')} seeds={self.meta.get('seeds', self.meta.get('seed', ''))} -->")
        lines.append("| Method | " + " | ".join(cols) + " | Avg |")
        lines.append("|---|" + "---:|" * (len(cols) + 1))
        for m in self.methods():
            row = self.row(m)
            vals = [f"{100 * row[c]:.{digits}f}" if c in row else "" for c in cols]
            lines.append(f"| {m} | " + " | ".join(vals) + f" | {100 * self.average(m):.{digits}f} |")
        return "\n".join(lines) + "\n"


def mean_report(reports: list[EvalReport], meta: dict | None = None) -> EvalReport:
    """Cell-wise arithmetic mean over per-seed reports with identical layouts."""
    if not reports:
        raise EvaluationError("no reports to merge")
    keys = [(c.method, c.attack, c.eps) for c in reports[0].cells]
    for r in reports[1:]:
        if [(c.method, c.attack, c.eps) for c in r.cells] != keys:
            raise EvaluationError("per-seed reports have different cells")
    cells = []
    for i, (method, attack, eps) in enumerate(keys):
        group = [r.cells[i] for r in reports]
        b = math.fsum(c.bca for c in group) / len(group)
        pc = tuple(math.fsum(v) / len(group) for v in zip(*(c.per_class for c in group)))
        cells.append(Cell(method, attack, eps, b, pc))
    out_meta = dict(meta or {})
    out_meta.setdefault("seed", "mean")
    return EvalReport(cells, out_meta)
