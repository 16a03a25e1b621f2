"""Acceptance criteria, one test per criterion.

Each test calls ``record`` so the terminal summary prints a PASS/FAIL line
per criterion, including criteria whose tests fail.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np

from abat import autodiff as ad
from abat.alignment import AlignmentState, align_domain
from abat.attacks import AttackConfig, compute_sigma, fgsm, pgd
from abat.datagen import GenSpec, generate
from abat.evaluation import EvalReport, offline_test, online_predictions, robustness_test
from abat.experiment import DEFAULT_CONFIG, ExperimentConfig, Row, load_data, train_cell
from abat.models import FAMILIES, ArchSpec, build
from abat.symlinalg import mean_covariance
from abat.training import prepare
from abat.trials import DomainDataset
from helpers import central_difference, record, rel_error

PUBLISHED_COUNTS = {"eegnet": 1676, "deep": 94079, "shallow": 57804}
EPS_GRID = (0.01, 0.03, 0.05)


def small_model(seed: int, family: str = "eegnet"):
    return build(ArchSpec.desk(family, channels=4, timepoints=64, classes=3, seed=seed)).eval()


def default_config() -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(json.dumps(DEFAULT_CONFIG)))


def seed_reports(run_dir) -> list[EvalReport]:
    return [EvalReport.from_csv(p.read_text()) for p in sorted(run_dir.glob("seed_*/report.csv"))]



def test_01_whitening_identity():
    domains = generate(GenSpec())
    worst, slowest = 0.0, 0.0
    for d in domains:
        t0 = time.perf_counter()
        aligned = align_domain(d)
        slowest = max(slowest, time.perf_counter() - t0)
        worst = max(worst, np.abs(mean_covariance(aligned) - np.eye(d.shape[0])).max())
    ok = worst < 1e-6 and slowest < 1.0
    record(1, ok, f"max deviation {worst:.1e}, slowest domain {slowest * 1e3:.1f} ms")
    assert ok


def test_02_incremental_alignment_matches_batch():
    x = generate(GenSpec(trials_per_domain=30, n_domains=1))[0].X
    state = AlignmentState()
    worst = 0.0
    for n, trial in enumerate(x, start=1):
        state.update(trial)
        worst = max(worst, np.abs(state.mean_cov - mean_covariance(x[:n])).max() / np.abs(state.mean_cov).max())
    record(2, worst < 1e-10, f"max relative deviation {worst:.1e} over 30 updates")
    assert worst < 1e-10


def _micro_net(rng: np.random.Generator):
    """A random small conv net: (loss closure, differentiable leaves, their names)."""
    n = int(rng.integers(2, 4))
    cin = int(rng.integers(1, 3))
    h = int(rng.integers(1, 4))
    w = int(rng.integers(6, 11))
    groups = int(rng.choice([1, cin])) if cin > 1 else 1
    cout = groups * int(rng.integers(1, 3))
    kh = int(rng.integers(1, h + 1))
    kw = int(rng.integers(1, 4))
    leaves = {
        "x": ad.Tensor(rng.standard_normal((n, cin, h, w)), requires_grad=True),
        "w": ad.Tensor(rng.standard_normal((cout, cin // groups, kh, kw)) * 0.7, requires_grad=True),
        "b": ad.Tensor(rng.standard_normal(cout) * 0.1, requires_grad=True),
        "gamma": ad.Tensor(1 + 0.1 * rng.standard_normal(cout), requires_grad=True),
        "beta": ad.Tensor(0.1 * rng.standard_normal(cout), requires_grad=True),
    }
    pad = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
    use_bn = bool(rng.integers(0, 2))
    bn_train = bool(rng.integers(0, 2))
    act = str(rng.choice(["elu", "square_log", "none"]))
    pool = str(rng.choice(["avg", "max"]))
    rm, rv = rng.standard_normal(cout) * 0.1, 1 + rng.random(cout)
    labels = rng.integers(0, 3, size=n)
    out_w = w + pad[0] + pad[1] - kw + 1
    out_w_pooled = (out_w - 2) // 2 + 1
    feat = cout * (h - kh + 1) * out_w_pooled
    leaves["W"] = ad.Tensor(rng.standard_normal((3, feat)) * 0.3, requires_grad=True)
    leaves["c"] = ad.Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)

    def loss():
        z = ad.pad_time(leaves["x"], *pad)
        z = ad.conv2d(z, leaves["w"], leaves["b"], groups=groups)
        if use_bn:
            z = ad.batch_norm(z, leaves["gamma"], leaves["beta"], rm.copy(), rv.copy(), training=bn_train)
        if act == "elu":
            z = ad.elu(z)
        elif act == "square_log":
            z = ad.square(z)
        z = ad.avg_pool_time(z, 2, 2) if pool == "avg" else ad.max_pool_time(z, 2, 2)
        if act == "square_log":
            z = ad.safe_log(z)
        z = ad.linear(ad.flatten(z), leaves["W"], leaves["c"])
        return ad.cross_entropy(z, labels)

    names = [k for k in leaves if use_bn or k not in ("gamma", "beta")]
    return loss, [leaves[k] for k in names], names


def test_03_gradients_match_finite_differences():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        loss, leaves, names = _micro_net(rng)
        analytic = ad.grad(loss(), leaves)
        for leaf, name, g in zip(leaves, names, analytic):
            numeric = central_difference(lambda: loss().item(), leaf.data)
            err = rel_error(g, numeric)
            worst = max(worst, err)
    record(3, worst < 1e-4, f"max relative error {worst:.2e} over 100 nets")
    assert worst < 1e-4


def test_04_single_step_pgd_is_fgsm():
    rng = np.random.default_rng(11)
    families = ["eegnet", "shallow", "deep"]
    worst = 0.0
    for i in range(50):
        model = small_model(i, families[i % 3])
        x = rng.standard_normal((1, 4, 64))
        y = rng.integers(0, 3, size=1)
        eps = float(rng.uniform(0.01, 0.5))
        a = fgsm(model, x, y, eps)
        b = pgd(model, x, y, eps, eps, steps=1, random_start=False)
        worst = max(worst, float(np.abs(a - b).max()))
    record(4, worst <= 1e-12, f"max deviation {worst:.1e} over 50 pairs")
    assert worst <= 1e-12


def test_05_every_attack_output_stays_in_its_ball(default_run):
    cfg, balls = default_run["config"], default_run["balls"]
    ev = cfg.raw["eval"]
    expected = len(cfg.rows) * len(cfg.raw["seeds"]) * len(ev["kinds"]) * len(ev["eps"])
    ok = balls["violations"] == 0 and balls["checked"] >= expected
    record(
        5,
        ok,
        f"{balls['checked']} adversarial batches ({balls['trials']} trials) checked, "
        f"max excess over budget {balls['max_excess']:.1e}",
    )
    assert ok


def hand_count(family: str, c: int = 22, t: int = 1000, k: int = 4) -> int:
    """Layer-by-layer parameter arithmetic for the published configurations."""
    if family == "eegnet":
        f1, d, f2 = 4, 2, 8
        conv = f1 * 68 + f1 * d * c + f1 * d * 16 + f1 * d * f2
        bn = 2 * (f1 + f1 * d + f2)
        return conv + bn + f2 * (t // 4 // 8) * k + k
    if family == "shallow":
        f = 40
        length = (t - 13 + 1 - 35) // 7 + 1
        return (f * 13 + f) + (f * f * c + f) + 2 * f + f * length * k + k
    widths, length = (25, 50, 100), t
    total, prev = 25 * 5 + 25 + 25 * 25 * c + 25, 25
    for i, w in enumerate(widths):
        if i:
            total += w * prev * 5 + w
        total += 2 * w
        length = (length - 4) // 2
        prev = w
    return total + widths[-1] * length * k + k


def test_06_parameter_counts():
    got = {f: build(ArchSpec.published(f)).n_parameters for f in FAMILIES}
    oracle = {f: hand_count(f) for f in FAMILIES}
    ok = got == PUBLISHED_COUNTS == oracle
    record(6, ok, ", ".join(f"{f} {got[f]}" for f in FAMILIES))
    assert got == oracle
    assert got == PUBLISHED_COUNTS


def test_07_alignment_improves_benign_training():
    cfg = default_config()
    src, tgt, _ = load_data(cfg)
    t0 = time.process_time()
    raw_bca, ea_bca = [], []
    for seed in cfg.raw["seeds"]:
        raw = train_cell(cfg, Row("bt", False), seed, src, None)
        ea = train_cell(cfg, Row("bt", True), seed, src, None)
        raw_bca.append(offline_test(raw, tgt, False).bca)
        ea_bca.append(offline_test(ea, tgt, True).bca)
    cpu = time.process_time() - t0
    gain = float(np.mean(ea_bca) - np.mean(raw_bca))
    ok = gain >= 0.05 and cpu <= 10 * 60
    record(7, ok, f"BT {np.mean(raw_bca):.3f} -> BT+EA {np.mean(ea_bca):.3f}, gain {100 * gain:.1f} points, {cpu:.0f} CPU-s")
    assert gain >= 0.05
    assert cpu <= 10 * 60


def test_08_abat_is_more_accurate_and_more_robust():
    cfg = default_config()
    src, tgt, _ = load_data(cfg)
    scale = compute_sigma(prepare(src, True)[0])
    t0 = time.process_time()
    results = {"bt": [], "abat": []}
    for seed in cfg.raw["seeds"]:
        attacks = [AttackConfig.eval_pgd(0.03, seed)]
        for key, row in (("bt", Row("bt", True)), ("abat", Row("abat", True, "pgd", 0.01))):
            model = train_cell(cfg, row, seed, src, None)
            benign, attacked = robustness_test(model, tgt, attacks, scale, True)
            results[key].append((benign.bca, attacked.bca))
    cpu = time.process_time() - t0
    bt, abat = np.mean(results["bt"], axis=0), np.mean(results["abat"], axis=0)
    benign_drop, robust_gain = bt[0] - abat[0], abat[1] - bt[1]
    ok = benign_drop <= 0.01 and robust_gain >= 0.15 and cpu <= 20 * 60
    record(
        8,
        ok,
        f"benign {bt[0]:.3f} -> {abat[0]:.3f}, PGD 0.03 {bt[1]:.3f} -> {abat[1]:.3f}, {cpu:.0f} CPU-s",
    )
    assert benign_drop <= 0.01
    assert robust_gain >= 0.15
    assert cpu <= 20 * 60


def test_09_attack_strength_ordering_on_undefended_model(default_run):
    rep = default_run["report"]
    benign = rep.get("BT", "none").bca
    worst_gap = np.inf
    parts = []
    for eps in EPS_GRID:
        f, p = rep.get("BT", "fgsm", eps).bca, rep.get("BT", "pgd", eps).bca
        worst_gap = min(worst_gap, f - p, benign - f)
        parts.append(f"{eps:g}: {benign:.3f} >= {f:.3f} >= {p:.3f}")
    ok = worst_gap >= -0.02
    record(9, ok, "; ".join(parts))
    assert ok


def test_10_ensemble_dominates_its_members(default_run):
    worst = -np.inf
    cells = 0
    for rep in [default_run["report"], *seed_reports(default_run["dir"])]:
        for m in rep.methods():
            for eps in EPS_GRID:
                members = min(rep.get(m, "fgsm", eps).bca, rep.get(m, "pgd", eps).bca)
                worst = max(worst, rep.get(m, "ensemble", eps).bca - members)
                cells += 1
    ok = worst <= 0.01
    record(10, ok, f"max ensemble minus min(FGSM, PGD) {worst:+.4f} over {cells} cells")
    assert ok


def test_11_repeated_runs_are_byte_identical(default_run, tmp_path):
    config = tmp_path / "default.json"
    config.write_text(json.dumps(DEFAULT_CONFIG))
    second = tmp_path / "second"
    env = {**os.environ, "ABAT_THREADS": "1"}
    proc = subprocess.run(
        [sys.executable, "-m", "abat.cli", "run", "--config", str(config), "--out", str(second)],
        capture_output=True,
        text=True,
        env=env,
    )
    assert proc.returncode == 0, proc.stderr
    first = default_run["dir"]
    names = ["report.csv", "online.csv", *(str(p.relative_to(first)) for p in sorted(first.glob("seed_*/report.csv")))]
    same = [(first / n).read_bytes() == (second / n).read_bytes() for n in names]
    ok = all(same) and len(names) == 2 + len(default_run["config"].raw["seeds"])
    record(11, ok, f"{sum(same)}/{len(names)} CSV files identical")
    assert ok


def test_12_online_protocol_is_causal():
    session = generate(GenSpec(trials_per_domain=48))[2]
    model = build(ArchSpec.desk("eegnet", seed=1)).eval()
    full = online_predictions(model, session, True)
    ok = True
    for cut in (1, 2, 7, 20, len(session) - 1):
        prefix = DomainDataset("p", session.X[:cut], session.y[:cut])
        ok &= np.array_equal(online_predictions(model, prefix, True), full[:cut])
    # future trials cannot leak backwards: perturbing the tail leaves the head intact
    altered = session.X.copy()
    altered[30:] *= 5.0
    ok &= np.array_equal(online_predictions(model, DomainDataset("a", altered, session.y), True)[:30], full[:30])
    record(12, ok, "prefix predictions invariant at cuts 1, 2, 7, 20, N-1 and under tail edits")
    assert ok
