"""Acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see one PASS/FAIL line per
criterion. The checks use oracles that are independent of the package code:
golden voting values live in ``tests/data``, losses are recomputed with
scalar loops, and gradients come from central finite differences.
"""

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from exitwise import MultiExitClassifier
from exitwise.harness import (
    ExitLog,
    dump_exitlog,
    evaluate,
    gen_synthetic,
    layer_accuracies,
    load_exitlog,
    oracle_accuracy,
    pairwise_disagreement,
    sweep,
)
from exitwise.model import ModelConfig, forward, init_model, load_checkpoint, save_checkpoint
from exitwise.objective import ObjectiveConfig, binary_decomposition, multiclass_decomposition
from exitwise.strategies import decide, make_policy, vote_score

from .conftest import random_exitlog
from .gradcheck import max_relative_error, numeric_gradients
from .test_model import analytic_gradients

DATA = Path(__file__).parent / "data"

# two_moons training recipe shared by the diversity and trade-off checks
MOONS = dict(n=2000, noise=0.2)
NET = dict(n_layers=8, hidden_dim=16, epochs=30, lr=3e-3, batch_size=64)
SEEDS = range(5)


def report(name, ok, detail, elapsed=None):
    timing = "" if elapsed is None else f" [{elapsed:.2f}s]"
    print(f"\nACCEPTANCE {'PASS' if ok else 'FAIL'} {name}: {detail}{timing}")
    assert ok, f"{name}: {detail}"


def moons_split(seed):
    return gen_synthetic("two_moons", n_classes=2, seed=seed, **MOONS).split(0.25, seed=seed)


@pytest.fixture(scope="module")
def moons_runs():
    """Trained classifiers for every (seed, lambda) pair, with the test-split log."""
    start = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        train, test = moons_split(seed)
        for lam in (0.0, 0.2):
            clf = MultiExitClassifier(lam=lam, random_state=seed, **NET).fit(train.X, train.y)
            runs[seed, lam] = (clf, clf.exit_log(test.X, test.y))
    return runs, time.perf_counter() - start


def test_voting_golden_values():
    with open(DATA / "voting_values.csv") as fh:
        rows = list(csv.DictReader(fh))
    start = time.perf_counter()
    worst = 0.0
    seen = {}
    for row in rows:
        k, l, expected = float(row["k"]), int(row["layer"]), float(row["value"])
        # within one (k, layer) group the rows list vote counts ceil(l/2)..l
        votes = math.ceil(l / 2) + seen.get((k, l), 0)
        seen[k, l] = seen.get((k, l), 0) + 1
        dists = np.zeros((l, 2))
        dists[:votes, 0] = 1.0
        dists[votes:, 1] = 1.0
        worst = max(worst, abs(vote_score(dists, k) - expected))
    elapsed = time.perf_counter() - start
    spots = [(2, 2, 0.25, 1.6817928305074292), (4, 4, 0.5, 2.0), (12, 12, 0.75, 1.8612097182041991)]
    for l, v, k, expected in spots:
        worst = max(worst, abs(vote_score(np.eye(2)[[0] * v + [1] * (l - v)], k) - expected))
    ks = sorted({float(r["k"]) for r in rows})
    report(
        "voting golden table",
        len(rows) >= 12 and ks == [0.0, 0.25, 0.5, 0.75] and worst <= 1e-9 and elapsed < 1.0,
        f"{len(rows)} points over k={ks}, max abs error {worst:.1e}",
        elapsed,
    )


def _layer_loss_loop(q, p, gold, lam):
    total = -math.log(q[gold])
    for c in range(len(q)):
        total += lam * p[c] * math.log(q[c])
    return total


def test_decomposition_identities():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_bin = worst_multi = 0.0
    for _ in range(1000):
        lam = rng.uniform(1e-6, 1 - 1e-6)
        # binary
        q, p = rng.dirichlet([1, 1]), rng.dirichlet([1, 1])
        gold = int(rng.integers(2))
        distill, tail = binary_decomposition(q, p, gold, lam)
        worst_bin = max(worst_bin, abs(distill + tail - _layer_loss_loop(q, p, gold, lam)))
        # multi-class
        C = int(rng.integers(3, 11))
        q, p = rng.dirichlet(np.ones(C)), rng.dirichlet(np.ones(C))
        gold = int(rng.integers(C))
        worst_multi = max(worst_multi, abs(multiclass_decomposition(q, p, gold, lam) - _layer_loss_loop(q, p, gold, lam)))
    elapsed = time.perf_counter() - start
    report(
        "decomposition identities",
        worst_bin <= 1e-9 and worst_multi <= 1e-9 and elapsed < 1.0,
        f"1000 draws, binary max error {worst_bin:.1e}, multi-class max error {worst_multi:.1e}",
        elapsed,
    )


def test_gradient_oracle():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = init_model(ModelConfig(input_dim=4, hidden_dim=4, num_layers=3, num_classes=3,
                                       activation="tanh", seed=seed))
        X = rng.normal(size=(4, 4))
        y = rng.integers(0, 3, size=4)
        for lam in (0.0, 0.2, 0.5):
            numeric = numeric_gradients(model, X, y, lam)
            analytic = analytic_gradients(model, X, y, ObjectiveConfig(lam=lam))
            worst = max(worst, max_relative_error(analytic, numeric))
    elapsed = time.perf_counter() - start
    report(
        "gradient oracle",
        worst <= 1e-4 and elapsed < 10.0,
        f"20 seeds x lambda in (0, 0.2, 0.5), max relative error {worst:.2e}",
        elapsed,
    )


def _exit_layers(log, policy):
    return np.array([decide(policy, d, g).exit_layer for d, g in zip(log.dists, log.gold)])


def test_strategy_invariants():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    failures = []
    L = 12
    deltas = [6.0, 4.0, 3.0, 2.0, 1.5, 1.0]  # decreasing
    patiences = [8, 6, 4, 3, 2, 1]
    thresholds = [0.05, 0.1, 0.2, 0.4, 0.6, 1.0]  # increasing
    for trial in range(100):
        C = 2 if trial % 2 == 0 else 5
        log = random_exitlog(rng, n=30, L=L, C=C)
        for k in (0.0, 0.5):
            layers = [_exit_layers(log, make_policy("voting", delta=d, k=k)) for d in deltas]
            if any((b > a).any() for a, b in zip(layers, layers[1:])):
                failures.append(f"voting k={k} trial {trial}")
        layers = [_exit_layers(log, make_policy("patience", s=s)) for s in patiences]
        if any((b > a).any() for a, b in zip(layers, layers[1:])):
            failures.append(f"patience trial {trial}")
        layers = [_exit_layers(log, make_policy("entropy", t=t)) for t in thresholds]
        if any((b > a).any() for a, b in zip(layers, layers[1:])):
            failures.append(f"entropy trial {trial}")
        oracle = evaluate(log, make_policy("oracle")).accuracy
        others = [make_policy("voting", delta=2.0, k=0.5), make_policy("patience", s=2),
                  make_policy("entropy", t=0.3), make_policy("maxprob", t=0.8)]
        best = max(evaluate(log, p).accuracy for p in others)
        best = max(best, *layer_accuracies(log))
        if oracle < best:
            failures.append(f"oracle dominance trial {trial}")
    # vote score bound over random vote patterns
    for _ in range(2000):
        l, C = int(rng.integers(1, 25)), int(rng.integers(2, 6))
        k = float(rng.uniform(0, 1))
        dists = np.eye(C)[rng.integers(0, C, size=l)]
        if vote_score(dists, k) > l ** (1 - k) * (1 + 1e-12):
            failures.append(f"vote bound l={l} k={k}")
    elapsed = time.perf_counter() - start
    report(
        "strategy invariants",
        not failures and elapsed < 10.0,
        "monotone in delta/s/t, oracle dominates, V_l <= l^(1-k)" if not failures else "; ".join(failures[:5]),
        elapsed,
    )


def test_diversity_effect(moons_runs):
    runs, elapsed = moons_runs
    disagreement = {lam: [pairwise_disagreement(runs[s, lam][1]) for s in SEEDS] for lam in (0.0, 0.2)}
    oracle_ok = all(oracle_accuracy(log) >= layer_accuracies(log)[-1] for _, log in runs.values())
    mean0, mean2 = np.mean(disagreement[0.0]), np.mean(disagreement[0.2])
    report(
        "diversity effect",
        mean2 > mean0 and oracle_ok and elapsed < 120.0,
        f"mean head disagreement lambda=0.2 {mean2:.5f} vs lambda=0 {mean0:.5f}; "
        f"oracle >= final layer in all runs: {oracle_ok}",
        elapsed,
    )


def test_tradeoff_sweep(moons_runs):
    runs, _ = moons_runs
    log = runs[0, 0.2][1]
    start = time.perf_counter()
    L, worst_ok = log.L, True
    details = []
    for k in (0.0, 0.5):
        bound = L ** (1 - k)
        deltas = np.linspace(bound + 0.5, 0.5, 30)  # decreasing, first point above the bound
        speedups = [evaluate(log, make_policy("voting", delta=d, k=k)).speedup for d in deltas]
        monotone = all(b >= a for a, b in zip(speedups, speedups[1:]))
        endpoint = speedups[0] == 1.0
        inside = [s for s in speedups if 1.3 <= s <= 2.0]
        covers = min(speedups) <= 1.3 and max(speedups) >= 2.0 and bool(inside)
        sorted_ok = [p.speedup for p in sweep(log, "voting", deltas, k=k)] == sorted(speedups)
        worst_ok &= monotone and endpoint and covers and sorted_ok
        details.append(f"k={k}: {min(speedups):.2f}x..{max(speedups):.2f}x, {len(inside)} points in 1.3x-2.0x")
    elapsed = time.perf_counter() - start
    report("trade-off harness", worst_ok and elapsed < 30.0, "; ".join(details), elapsed)


def test_format_round_trips(moons_runs, tmp_path):
    runs, _ = moons_runs
    clf = runs[0, 0.2][0]
    _, test = moons_split(0)
    dump_exitlog(clf.model_, test, tmp_path / "log.txt")
    log = load_exitlog(tmp_path / "log.txt")
    direct = ExitLog(forward(clf.model_, test.X), test.y)
    argmax_ok = np.array_equal(log.layer_predictions(), direct.layer_predictions())
    prob_err = float(np.abs(log.dists - direct.dists).max())
    save_checkpoint(clf.model_, tmp_path / "model.mexm")
    again = load_checkpoint(tmp_path / "model.mexm")
    bitwise = forward(again, test.X).tobytes() == forward(clf.model_, test.X).tobytes()
    report(
        "format round-trips",
        argmax_ok and prob_err <= 1e-9 and bitwise,
        f"exitlog argmax exact: {argmax_ok}, max prob error {prob_err:.1e}; checkpoint forward bitwise: {bitwise}",
    )
