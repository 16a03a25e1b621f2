"""Benign, adversarial and alignment-based adversarial training.

Three regimes share one loop:

* ``bt``: minimize cross-entropy on benign batches (optionally aligned);
* ``at``: replace every batch by adversarial examples crafted against the
  current weights, on raw data;
* ``abat``: the same, after aligning each training domain.

Adversarial batches are crafted with the model in eval mode and the loss is
computed on the adversarial batch alone.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alignment import align_corpus
from .attacks import AttackConfig, EpsilonScale, compute_sigma, fgsm, pgd
from .evaluation import bca
from .models import ArchSpec, ModelGraph, build, load_checkpoint
from .trials import DomainDataset, pool

METHODS = ("bt", "at", "abat")
OPTIMIZERS = ("adam", "sgd")


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``inner`` is the attack used to craft training batches (ignored for
    ``bt``); an ``inner_eps`` of zero disables it so the run reduces to
    benign training.
    """

    method: str = "bt"
    align: bool = False
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.01
    lr_after: float = 0.001
    lr_milestone: int = 50
    optimizer: str = "adam"
    inner: str = "pgd"
    inner_eps: float = 0.01
    inner_steps: int = 10
    inner_step_frac: float = 0.2
    seed: int = 0
    pretrained_checkpoint: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise TrainingError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "abat" and not self.align:
            raise TrainingError("abat trains on aligned data: set align=true")
        if self.method == "at" and self.align:
            raise TrainingError("at trains on raw data; aligned adversarial training is abat")
        if self.inner not in ("fgsm", "pgd"):
            raise TrainingError(f"inner attack must be fgsm or pgd, got {self.inner!r}")
        if self.inner_eps < 0:
            raise TrainingError("inner_eps must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.inner_steps < 1:
            raise TrainingError("epochs >= 0, batch_size >= 1 and inner_steps >= 1 required")
        if not 0 < self.inner_step_frac <= 1:
            raise TrainingError("inner_step_frac must lie in (0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")

    @property
    def adversarial(self) -> bool:
        return self.method != "bt" and self.inner_eps > 0

    def inner_attack(self) -> AttackConfig | None:
        if not self.adversarial:
            return None
        if self.inner == "fgsm":
            return AttackConfig("fgsm", self.inner_eps)
        return AttackConfig(
            "pgd", self.inner_eps, steps=self.inner_steps, step_size_rel=self.inner_eps * self.inner_step_frac, random_start=True
        )

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``."""
        return self.lr if epoch <= self.lr_milestone else self.lr_after

    def label(self) -> str:
        if self.method == "bt":
            return "BT"
        tag = "ABAT" if self.method == "abat" else "AT"
        return f"{tag}-{self.inner.upper()} {self.inner_eps:g}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainLog:
    config: dict
    sigma: float
    epochs: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def to_jsonl(self) -> str:
        head = {"config": self.config, "sigma": self.sigma}
        return "\n".join(json.dumps(r, sort_keys=True) for r in [head, *self.epochs]) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl())
        return path


class Adam:
    def __init__(self, params: list[ad.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: list[ad.Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data) for p in params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        for p, g, b in zip(self.params, grads, self.buf):
            b *= self.momentum
            b += g
            p.data = p.data - lr * b


def _fingerprint(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def prepare(data: list[DomainDataset], align: bool) -> tuple[np.ndarray, np.ndarray]:
    """Pool labelled domains, aligning each one first when asked."""
    if not data:
        raise TrainingError("no training domains")
    if align:
        data = align_corpus(data)
    X, y = pool(data)
    if np.any(y < 0):
        raise TrainingError("training data contains unlabelled trials")
    return X, y


def craft(model: ModelGraph, xb, yb, attack: AttackConfig, scale: EpsilonScale, seed: int) -> np.ndarray:
    eps = scale.absolute(attack.epsilon_rel)
    with model.evaluating():
        if attack.kind == "fgsm":
            return fgsm(model, xb, yb, eps)
        return pgd(model, xb, yb, eps, scale.absolute(attack.step_size_rel), attack.steps, attack.random_start, seed)


def train(
    data: list[DomainDataset],
    config: TrainConfig,
    arch: ArchSpec,
    init: ModelGraph | None = None,
) -> tuple[ModelGraph, TrainLog]:
    """Train a classifier on the pooled domains in ``data``.

    The model starts from ``init`` when given, else from
    ``config.pretrained_checkpoint``, else from a fresh build of ``arch``.
    Returns the model in eval mode and the per-epoch log.
    """
    X, y = prepare(data, config.align)
    missing = sorted(set(range(arch.classes)) - set(np.unique(y).tolist()))
    if missing:
        raise TrainingError(f"classes {missing} have no training trials")
    if X.shape[1:] != (arch.channels, arch.timepoints):
        raise TrainingError(f"data trials are {X.shape[1:]}, architecture expects {(arch.channels, arch.timepoints)}")
    scale = compute_sigma(X)

    if init is not None:
        model = init
    elif config.pretrained_checkpoint:
        model, _ = load_checkpoint(config.pretrained_checkpoint, expected_arch=arch)
    else:
        model = build(arch)

    params = list(model.parameters().values())
    opt = Adam(params) if config.optimizer == "adam" else SGD(params)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    model.train(np.random.default_rng([config.seed, 2]))
    attack = config.inner_attack()
    log = TrainLog(config.to_dict(), scale.sigma)
    n = len(X)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb, yb = X[idx], y[idx]
            if attack is not None:
                seed = int(np.random.SeedSequence([config.seed, 3, epoch, b]).generate_state(1)[0])
                xb = craft(model, xb, yb, attack, scale, seed)
            loss = ad.cross_entropy(model.forward(xb), yb)
            grads = ad.grad(loss, params)
            opt.step(grads, lr)
            total += loss.item() * len(idx)
            seen += len(idx)
        with model.evaluating():
            train_bca = bca(model.classify(X), y, arch.classes)
        log.epochs.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss": total / seen,
                "train_bca": train_bca,
                "wall": time.perf_counter() - t0,
                "shuffle": _fingerprint(order),
                "params": _fingerprint(*(p.data for p in params)),
            }
        )
    model.eval()
    return model, log


def pretrain_finetune(
    source: list[DomainDataset],
    target: list[DomainDataset],
    config: TrainConfig,
    arch: ArchSpec,
    pretrain_epochs: int | None = None,
) -> tuple[ModelGraph, TrainLog, TrainLog]:
    """Benign pre-training on ``source`` then ``train`` on ``target`` from those weights.

    Pre-training uses the same alignment setting as ``config`` so both
    phases see inputs on the same scale.
    """
    clash = {d.domain for d in source} & {d.domain for d in target}
    if clash:
        raise TrainingError(f"source and target share domain ids {sorted(clash)}")
    phase1 = replace(
        config,
        method="bt",
        epochs=config.epochs if pretrain_epochs is None else pretrain_epochs,
        pretrained_checkpoint=None,
    )
    base, log1 = train(source, phase1, arch)
    model, log2 = train(target, config, arch, init=base)
    return model, log1, log2
