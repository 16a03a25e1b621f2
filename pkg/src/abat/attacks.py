"""White-box and black-box l-infinity attacks on trained classifiers.

Budgets are configured relative to the standard deviation of the training
signal and converted to absolute radii with :func:`compute_sigma`. Every
attack here treats the first array axis as the trial axis; a single
``(channels, time)`` trial with a scalar label is accepted as well and the
result comes back without the batch axis.

Any object with a ``training`` flag and a ``forward(Tensor, track_params)``
method returning (batch, classes) logits can be attacked.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad

KINDS = ("fgsm", "pgd", "square", "ensemble")
BALL_TOL = 1e-12


class AttackError(RuntimeError):
    """An attack could not run or produced an out-of-budget example."""


@dataclass(frozen=True)
class EpsilonScale:
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")

    def absolute(self, rel: float) -> float:
        return rel * self.sigma


@dataclass(frozen=True)
class AttackConfig:
    """One attack with its budget expressed in units of the signal std.

    ``step_size_rel`` defaults to ``epsilon_rel / 10`` for PGD. ``queries``
    is the per-trial budget of the square attack; ``members`` lists the
    constituent kinds of an ensemble.
    """

    kind: str
    epsilon_rel: float
    steps: int = 1
    step_size_rel: float | None = None
    random_start: bool = False
    seed: int = 0
    queries: int = 200
    members: tuple[str, ...] = ("fgsm", "pgd", "square")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if not (self.epsilon_rel > 0 and math.isfinite(self.epsilon_rel)):
            raise ValueError(f"epsilon_rel must be > 0, got {self.epsilon_rel}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size_rel is None:
            object.__setattr__(self, "step_size_rel", self.epsilon_rel if self.kind == "fgsm" else self.epsilon_rel / 10)
        if not 0 < self.step_size_rel <= self.epsilon_rel * (1 + 1e-12):
            raise ValueError(f"step size {self.step_size_rel} must lie in (0, epsilon_rel={self.epsilon_rel}]")
        if self.queries < 0:
            raise ValueError("queries must be non-negative")
        object.__setattr__(self, "members", tuple(self.members))
        if self.kind == "ensemble":
            if not self.members:
                raise ValueError("ensemble needs at least one member")
            bad = [m for m in self.members if m not in KINDS or m == "ensemble"]
            if bad:
                raise ValueError(f"invalid ensemble members {bad}")

    @classmethod
    def eval_pgd(cls, eps: float, seed: int = 0) -> "AttackConfig":
        """20 iterations, step eps/10, random start."""
        return cls("pgd", eps, steps=20, step_size_rel=eps / 10, random_start=True, seed=seed)

    @classmethod
    def train_pgd(cls, eps: float, seed: int = 0) -> "AttackConfig":
        """10 iterations, step eps/5, random start."""
        return cls("pgd", eps, steps=10, step_size_rel=eps / 5, random_start=True, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["members"] = list(self.members)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


# ---------------------------------------------------------------- helpers


def compute_sigma(trials) -> EpsilonScale:
    """Population standard deviation over every entry of every trial."""
    x = np.asarray(trials if not hasattr(trials, "X") else trials.X, dtype=np.float64)
    if x.size == 0:
        raise ValueError("compute_sigma needs at least one value")
    sigma = float(np.std(x))
    if sigma == 0.0:
        raise ValueError("constant data: standard deviation is zero")
    return EpsilonScale(sigma)


def _batched(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    single = y.ndim == 0
    if single:
        X, y = X[None], y[None]
    if len(X) != len(y):
        raise AttackError(f"{len(X)} trials but {len(y)} labels")
    return X, y, single


def _require_eval(model) -> None:
    if getattr(model, "training", False):
        raise AttackError("attacks must run against a model in eval mode")


def loss_and_grad(model, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial cross-entropy and its gradient with respect to the input."""
    x = ad.Tensor(X, requires_grad=True)
    logits = model.forward(x, track_params=False)
    loss = ad.cross_entropy(logits, y, reduction="sum")
    (g,) = ad.grad(loss, [x])
    if not np.all(np.isfinite(g)):
        raise AttackError("input gradient is not finite")
    per = -ad.log_softmax(logits.data)[np.arange(len(y)), y]
    return per, g


def per_trial_loss(model, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    logits = model.forward(ad.Tensor(np.asarray(X, dtype=np.float64)), track_params=False).data
    return -ad.log_softmax(logits)[np.arange(len(y)), np.asarray(y)]


def _logits(model, X: np.ndarray) -> np.ndarray:
    return model.forward(ad.Tensor(X), track_params=False).data


def check_ball(adv: np.ndarray, clean: np.ndarray, eps_abs: float, tol: float = BALL_TOL) -> float:
    """Raise :class:`AttackError` unless ``adv`` lies in the closed ball; returns the max deviation."""
    dev = float(np.max(np.abs(np.asarray(adv) - np.asarray(clean)))) if np.size(adv) else 0.0
    if dev > eps_abs + tol:
        raise AttackError(f"perturbation {dev:.6g} exceeds budget {eps_abs:.6g}")
    return dev


# ---------------------------------------------------------------- gradient attacks


def fgsm(model, X, y, eps_abs: float) -> np.ndarray:
    """One signed-gradient step of size ``eps_abs``."""
    if eps_abs <= 0:
        raise AttackError("eps_abs must be positive")
    _require_eval(model)
    X, y, single = _batched(X, y)
    _, g = loss_and_grad(model, X, y)
    out = X + eps_abs * np.sign(g)
    return out[0] if single else out


def _start_noise(shape, eps_abs: float, seed: int, first_index: int) -> np.ndarray:
    # one stream per trial so results do not depend on batching
    return np.stack(
        [np.random.default_rng([seed, first_index + i]).uniform(-eps_abs, eps_abs, size=shape[1:]) for i in range(shape[0])]
    )


def pgd(
    model,
    X,
    y,
    eps_abs: float,
    alpha_abs: float,
    steps: int,
    random_start: bool = True,
    seed: int = 0,
    first_index: int = 0,
) -> np.ndarray:
    """Projected signed-gradient ascent inside the l-infinity ball.

    ``first_index`` is the global position of the first trial, used to
    derive its random-start stream.
    """
    if eps_abs <= 0:
        raise AttackError("eps_abs must be positive")
    if not 0 < alpha_abs <= eps_abs * (1 + 1e-12):
        raise AttackError(f"step {alpha_abs} must lie in (0, eps={eps_abs}]")
    if steps < 1:
        raise AttackError("steps must be >= 1")
    _require_eval(model)
    X, y, single = _batched(X, y)
    lo, hi = X - eps_abs, X + eps_abs
    adv = X + _start_noise(X.shape, eps_abs, seed, first_index) if random_start else X.copy()
    for _ in range(steps):
        _, g = loss_and_grad(model, adv, y)
        adv = np.clip(adv + alpha_abs * np.sign(g), lo, hi)
    return adv[0] if single else adv


# ---------------------------------------------------------------- square attack

# fraction-halving points of the original schedule, per 10k queries
_SCHEDULE = (10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000)


def _fraction(p_init: float, it: int, budget: int) -> float:
    scaled = it * 10000 / max(budget, 1)
    return p_init / 2 ** sum(scaled > m for m in _SCHEDULE)


@dataclass
class SquareTrace:
    """Bookkeeping of one trial's square-attack run."""

    queries: int = 0
    accepted_losses: list[float] = field(default_factory=list)


def square_attack(
    model,
    X,
    y,
    eps_abs: float,
    queries: int,
    seed: int = 0,
    first_index: int = 0,
    p_init: float = 0.1,
    stop_on_success: bool = True,
    traces: list | None = None,
) -> np.ndarray:
    """Score-based random search over (channel subset x time window) rectangles.

    Starts from the better of the clean trial and a random stripe pattern
    (one +/-eps sign per time sample, shared across channels). Each further
    query redraws a rectangle of random channels over a contiguous window
    with fresh per-channel signs at +/-eps; the proposal is kept only if the
    cross-entropy strictly increases. The rectangle area shrinks
    geometrically as queries are spent. Only logits are used.
    """
    if eps_abs <= 0:
        raise AttackError("eps_abs must be positive")
    _require_eval(model)
    X, y, single = _batched(X, y)
    if queries <= 0:
        return X[0].copy() if single else X.copy()
    n, shape = len(X), X.shape[1:]
    rows, length = (shape[0], shape[-1]) if len(shape) >= 2 else (1, shape[-1])
    rngs = [np.random.default_rng([seed, first_index + i, 7]) for i in range(n)]
    tr = [SquareTrace() for _ in range(n)]

    def evaluate(batch, labels):
        logits = _logits(model, batch)
        loss = -ad.log_softmax(logits)[np.arange(len(batch)), labels]
        return loss, np.argmax(logits, axis=1) != labels

    best = X.copy()
    best_loss, fooled = evaluate(best, y)
    used = np.ones(n, dtype=int)
    if queries >= 2:
        stripes = np.stack(
            [np.broadcast_to(r.choice([-1.0, 1.0], size=(1,) * (len(shape) - 1) + (length,)), shape) for r in rngs]
        )
        cand = X + eps_abs * stripes
        cand_loss, cand_fooled = evaluate(cand, y)
        used += 1
        take = cand_loss > best_loss
        best[take], best_loss[take], fooled[take] = cand[take], cand_loss[take], cand_fooled[take]
    for i in range(n):
        tr[i].accepted_losses.append(float(best_loss[i]))

    it = 0
    while True:
        active = np.flatnonzero(used < queries)
        if stop_on_success:
            active = active[~fooled[active]]
        if active.size == 0:
            break
        frac = _fraction(p_init, it, queries)
        h = min(rows, max(1, round(rows * math.sqrt(frac))))
        w = min(length, max(1, round(length * math.sqrt(frac))))
        cand = best[active].copy()
        for j, i in enumerate(active):
            r = rngs[i]
            chans = r.choice(rows, size=h, replace=False)
            t0 = int(r.integers(0, length - w + 1))
            signs = r.choice([-1.0, 1.0], size=h)
            delta = cand[j] - X[i]
            view = delta.reshape(rows, length) if len(shape) >= 2 else delta.reshape(1, length)
            view[chans, t0 : t0 + w] = eps_abs * signs[:, None]
            cand[j] = X[i] + delta
        cand_loss, cand_fooled = evaluate(cand, y[active])
        used[active] += 1
        take = cand_loss > best_loss[active]
        idx = active[take]
        best[idx], best_loss[idx], fooled[idx] = cand[take], cand_loss[take], cand_fooled[take]
        for i in idx:
            tr[i].accepted_losses.append(float(best_loss[i]))
        it += 1

    for i in range(n):
        tr[i].queries = int(used[i])
    if traces is not None:
        traces.extend(tr)
    best = np.clip(best, X - eps_abs, X + eps_abs)
    return best[0] if single else best


# ---------------------------------------------------------------- ensemble


def select_worst(model, X, y, candidates: list[np.ndarray]) -> np.ndarray:
    """Per trial, pick the candidate that fools the model, else the highest loss.

    Among fooling candidates the highest loss wins; ties go to the earlier
    candidate in the list.
    """
    X, y, single = _batched(X, y)
    cands = [np.asarray(c)[None] if single else np.asarray(c) for c in candidates]
    if not cands:
        raise AttackError("ensemble needs at least one member output")
    losses, wrong = [], []
    for c in cands:
        logits = _logits(model, c)
        losses.append(-ad.log_softmax(logits)[np.arange(len(y)), y])
        wrong.append(np.argmax(logits, axis=1) != y)
    pick = np.zeros(len(y), dtype=int)
    best_wrong, best_loss = wrong[0], losses[0]
    for k in range(1, len(cands)):
        # a fooling member outranks any non-fooling one; strict > keeps the earlier on ties
        better = (wrong[k] & ~best_wrong) | ((wrong[k] == best_wrong) & (losses[k] > best_loss))
        pick[better] = k
        best_wrong = np.where(better, wrong[k], best_wrong)
        best_loss = np.where(better, losses[k], best_loss)
    out = np.stack([cands[k][i] for i, k in enumerate(pick)])
    return out[0] if single else out


def run_attack(
    model,
    X,
    y,
    config: AttackConfig,
    scale: EpsilonScale,
    first_index: int = 0,
) -> np.ndarray:
    """Dispatch ``config`` on a batch, asserting ball containment of the result."""
    eps = scale.absolute(config.epsilon_rel)
    X, y, single = _batched(X, y)
    if config.kind == "fgsm":
        out = fgsm(model, X, y, eps)
    elif config.kind == "pgd":
        out = pgd(
            model, X, y, eps, scale.absolute(config.step_size_rel), config.steps, config.random_start, config.seed, first_index
        )
    elif config.kind == "square":
        out = square_attack(model, X, y, eps, config.queries, config.seed, first_index)
    else:
        outs = [run_attack(model, X, y, ensemble_member(config, m), scale, first_index) for m in config.members]
        out = select_worst(model, X, y, outs)
    check_ball(out, X, eps)
    return out[0] if single else out


def ensemble_member(config: AttackConfig, kind: str) -> AttackConfig:
    """The member configuration an ensemble uses for ``kind``."""
    if kind == "fgsm":
        return AttackConfig("fgsm", config.epsilon_rel, seed=config.seed)
    if kind == "pgd":
        return AttackConfig(
            "pgd", config.epsilon_rel, steps=config.steps, step_size_rel=config.step_size_rel, random_start=True, seed=config.seed
        )
    return AttackConfig("square", config.epsilon_rel, queries=config.queries, seed=config.seed)


def ensemble(model, X, y, eps_abs: float, config: AttackConfig) -> np.ndarray:
    """Worst-case combination of the member attacks listed in ``config``."""
    scale = EpsilonScale(eps_abs / config.epsilon_rel)
    return run_attack(model, X, y, config, scale)
