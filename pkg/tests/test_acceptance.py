"""Acceptance checks. Each test records one PASS/FAIL line; the lines are
printed in the pytest terminal summary, or directly when this file is run
as a script (``python tests/test_acceptance.py``).
"""

from __future__ import annotations

import csv
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import random_tree  # noqa: E402
from oracles import brute_force_best_depth, extended_probes  # noqa: E402
from vesselgen.cli import main as cli  # noqa: E402
from vesselgen.corpus import (  # noqa: E402
    SynthParams,
    denormalize_tree,
    generate_synthetic_tree,
    normalize_corpus,
)
from vesselgen.generator import GenerationRequest, sample_trees  # noqa: E402
from vesselgen.mesh import Branch, QuadMesh, build_tube_mesh, catmull_clark  # noqa: E402
from vesselgen.metrics import evaluate_populations, tortuosity  # noqa: E402
from vesselgen.model import LATENT_DIM, TreeBatch, forward_backward, init_model  # noqa: E402
from vesselgen.nn import grad_probes, relative_errors  # noqa: E402
from vesselgen.trainer import TrainConfig, classifier_accuracy, compute_class_weights, evaluate, train  # noqa: E402
from vesselgen.tree import parse_tree, rebalance_root, serialize_tree, trim_depth  # noqa: E402

RESULTS: list[str] = []

# tolerances and sizes, as specified
GRAD_TREES, GRAD_MAX_NODES, GRAD_EPS, GRAD_TOL = 20, 15, 1e-5, 1e-4
GRAD_PROBES = 10  # per tree
OVERFIT_TREES, OVERFIT_MAX_STEPS, OVERFIT_RATIO, OVERFIT_ACC = 10, 5000, 0.05, 0.95
OVERFIT_DEPTH, OVERFIT_LR, OVERFIT_CHECK_EVERY = 7, 1e-3, 100
DIST_TREES, DIST_SAMPLES, DIST_BINS, DIST_MIN_COS = 200, 200, 50, 0.90
DIST_EPOCHS, DIST_LR = 800, 1e-4  # ~30 min of training on one CPU core
MESH_TREES, MESH_ITERS = 50, 4
MAX_DEPTH = 10


def record(n: int, ok: bool, text: str) -> None:
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {text}"
    RESULTS.append(line)
    print(line, flush=True)


def preprocess(trees):
    return [trim_depth(rebalance_root(t), MAX_DEPTH) for t in trees]


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_1_gradient_correctness():
    t0 = time.perf_counter()
    trees, seed = [], 0
    while len(trees) < GRAD_TREES:
        t = rebalance_root(generate_synthetic_tree(SynthParams(max_depth=6, bifurcation_prob=0.3, seed=1000 + seed)))
        seed += 1
        if len(t) <= GRAD_MAX_NODES:
            trees.append(t)
    trees, _ = normalize_corpus(trees)
    cw = compute_class_weights(trees)
    store = init_model(0)
    rng = np.random.default_rng(0)
    ext, f64 = [], []
    for i, t in enumerate(trees):
        noise = rng.standard_normal(LATENT_DIM)
        b = TreeBatch.from_trees([t])
        store.zero_grad()
        forward_backward(store, b, noise[None], cw)
        grads = {n: (l.grad_weights.copy(), l.grad_bias.copy()) for n, l in store.layers.items()}
        store.zero_grad()
        # finite differences of an independent extended-precision loss
        ext.append(extended_probes(store, t, noise, cw, grads, GRAD_PROBES, seed=i, eps=GRAD_EPS))
        # the same probes with the float64 loss, for the record
        f64.append(
            grad_probes(
                lambda s: forward_backward(s, b, noise[None], cw).mean.total,
                store,
                GRAD_PROBES,
                seed=i,
                eps=GRAD_EPS,
                forward=lambda s: forward_backward(s, b, noise[None], cw, backward=False).mean.total,
            )
        )
    ext_err = float(relative_errors(np.concatenate(ext)).max())
    f64_err = float(relative_errors(np.concatenate(f64)).max())
    secs = time.perf_counter() - t0
    ok = ext_err < GRAD_TOL and secs < 120
    record(
        1,
        ok,
        f"max rel err {ext_err:.2e} (< {GRAD_TOL:g}) over {GRAD_TREES} trees x {GRAD_PROBES} probes, eps={GRAD_EPS:g}, "
        f"extended-precision differences; float64 differences give {f64_err:.2e}; {secs:.0f}s (< 120s)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 2. overfit


def test_2_overfit():
    t0 = time.perf_counter()
    raw = [generate_synthetic_tree(SynthParams(max_depth=OVERFIT_DEPTH, seed=s)) for s in range(OVERFIT_TREES)]
    corpus, _ = normalize_corpus(preprocess(raw))
    cw = compute_class_weights(corpus)
    store = init_model(0)
    initial, _ = evaluate(store, corpus, cw)
    recon, acc, steps = initial.recon, 0.0, 0
    config = TrainConfig(epochs=OVERFIT_CHECK_EVERY, batch_size=OVERFIT_TREES, lr=OVERFIT_LR, seed=0)
    while steps < OVERFIT_MAX_STEPS:
        store, _ = train(corpus, config, store=store)
        steps = store.step
        recon = evaluate(store, corpus, cw)[0].recon
        acc = classifier_accuracy(store, corpus)
        if recon < OVERFIT_RATIO * initial.recon and acc > OVERFIT_ACC:
            break
    secs = time.perf_counter() - t0
    ratio = recon / initial.recon
    ok = ratio < OVERFIT_RATIO and acc > OVERFIT_ACC and steps <= OVERFIT_MAX_STEPS and secs < 600
    record(
        2,
        ok,
        f"recon {initial.recon:.4f} -> {recon:.4f} ({100 * ratio:.1f}% < 5%), accuracy {acc:.3f} (> {OVERFIT_ACC}), "
        f"{steps} steps (<= {OVERFIT_MAX_STEPS}), lr {OVERFIT_LR:g}, {secs:.0f}s (< 600s)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 3. distribution similarity; the trained model also feeds 4 and 6


@pytest.fixture(scope="module")
def trained():
    raw = [generate_synthetic_tree(SynthParams(seed=s)) for s in range(DIST_TREES)]
    corpus, stats = normalize_corpus(preprocess(raw))
    t0 = time.perf_counter()
    store, reports = train(corpus, TrainConfig(epochs=DIST_EPOCHS, batch_size=10, lr=DIST_LR, seed=0), norm_stats=stats)
    secs = time.perf_counter() - t0
    samples = sample_trees(GenerationRequest(DIST_SAMPLES, seed=1, max_depth=MAX_DEPTH), store, stats)
    real = [denormalize_tree(t, stats) for t in corpus]
    return {"store": store, "stats": stats, "real": real, "samples": samples, "seconds": secs, "reports": reports}


def test_3_distribution_similarity(trained):
    rep = evaluate_populations(trained["real"], trained["samples"], DIST_BINS)
    sims = rep.similarities()
    ok = all(v >= DIST_MIN_COS for v in sims.values())
    sizes = np.mean([len(t) for t in trained["samples"]])
    real_sizes = np.mean([len(t) for t in trained["real"]])
    record(
        3,
        ok,
        "cosine " + ", ".join(f"{k} {v:.3f}" for k, v in sims.items()) + f" (each >= {DIST_MIN_COS}); {DIST_BINS} bins, "
        f"{DIST_TREES} trees / {DIST_SAMPLES} samples, {DIST_EPOCHS} epochs in {trained['seconds'] / 60:.1f} min; "
        f"mean nodes real {real_sizes:.1f} vs sampled {sizes:.1f}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 4. mesh validity


def test_4_mesh_validity(trained):
    t0 = time.perf_counter()
    cube = QuadMesh(
        np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)]),
        np.array([[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]]),
    )
    c1 = catmull_clark(cube, 1)
    cube_ok = (len(c1.vertices), len(c1.faces)) == (26, 24)
    failures = []
    for i, tree in enumerate(trained["samples"][:MESH_TREES]):
        try:
            m = build_tube_mesh(tree)
            closed, chi = m.is_closed(), m.euler_characteristic()
            for _ in range(MESH_ITERS):
                m = catmull_clark(m, 1)
                closed = closed and m.is_closed()
                if m.euler_characteristic() != chi:
                    failures.append(f"{i}: chi changed")
                    break
            if not closed:
                failures.append(f"{i}: open")
        except ValueError as exc:
            failures.append(f"{i}: {exc}")
    secs = time.perf_counter() - t0
    ok = cube_ok and not failures and secs < 300
    record(
        4,
        ok,
        f"{MESH_TREES - len(failures)}/{MESH_TREES} sampled trees closed with chi preserved over {MESH_ITERS} iterations; "
        f"cube -> {len(c1.vertices)} vertices / {len(c1.faces)} faces (26/24); {secs:.0f}s (< 300s)"
        + (f"; failures: {failures[:5]}" if failures else ""),
    )
    assert ok


# ---------------------------------------------------------------------------
# 5. metric oracles


def test_5_metric_oracles():
    straight = tortuosity(Branch(np.array([[0, 0, 0], [1, 2, 3.0]]), np.ones(2)))
    th = np.linspace(0, np.pi, 1000)
    semi = tortuosity(Branch(np.column_stack([np.cos(th), np.sin(th), np.zeros_like(th)]), np.ones(1000)))
    rng = np.random.default_rng(5)
    trees = [random_tree(rng, int(rng.integers(2, 40))) for _ in range(30)]
    sims = evaluate_populations(trees, trees, DIST_BINS).similarities()
    worst = math.inf
    for _ in range(1000):
        n = int(rng.integers(2, 50))
        worst = min(worst, tortuosity(Branch(np.cumsum(rng.normal(size=(n, 3)), axis=0), np.ones(n))))
    ok = straight == 1.0 and abs(semi - math.pi / 2) < 1e-4 and all(v == 1.0 for v in sims.values()) and worst >= 1.0
    record(
        5,
        ok,
        f"straight {straight!r}; semicircle |err| {abs(semi - math.pi / 2):.2e} (< 1e-4); identical populations "
        + str({k: v for k, v in sims.items()})
        + f"; min over 1000 random branches {worst:.6f} (>= 1)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6. structural oracles


def test_6_structural_oracles(trained):
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(100):
        t = random_tree(rng, int(rng.integers(1, 51)))
        if rebalance_root(t).depth() != brute_force_best_depth(t):
            mismatches += 1
    bad_roundtrips = 0
    for _ in range(1000):
        t = random_tree(rng, int(rng.integers(1, 60)))
        text = serialize_tree(t)
        back = parse_tree(text)
        same = serialize_tree(back) == text and all(np.array_equal(back.nodes[i].features, n.features) for i, n in t.nodes.items())
        bad_roundtrips += not same
    trim_max = max(trim_depth(random_tree(rng, int(rng.integers(1, 200))), MAX_DEPTH).depth() for _ in range(200))
    gen_max = max(t.depth() for t in trained["samples"])
    synth_max = max(generate_synthetic_tree(SynthParams(seed=s)).depth() for s in range(200))
    ok = mismatches == 0 and bad_roundtrips == 0 and trim_max <= MAX_DEPTH and gen_max <= MAX_DEPTH and synth_max <= MAX_DEPTH
    record(
        6,
        ok,
        f"rebalance vs brute force: {100 - mismatches}/100 match; round-trips bit-exact: {1000 - bad_roundtrips}/1000; "
        f"max depth after trim {trim_max}, sampled {gen_max}, synthetic {synth_max} (<= {MAX_DEPTH})",
    )
    assert ok


# ---------------------------------------------------------------------------
# 7. determinism


def _pipeline(root: Path) -> None:
    assert cli(["gen-data", "--output", str(root / "raw"), "--count", "20", "--seed", "7"]) == 0
    assert cli(["preprocess", "--input", str(root / "raw"), "--output", str(root / "norm")]) == 0
    assert cli(["train", "--input", str(root / "norm"), "--output", str(root / "model"), "--epochs", "2", "--seed", "3"]) == 0
    assert cli(["sample", "--input", str(root / "model"), "--output", str(root / "synth"), "--count", "10", "--seed", "4"]) == 0


def _loss_rows(path: Path) -> list[dict]:
    with path.open() as fh:
        return [{k: v for k, v in row.items() if k != "seconds"} for row in csv.DictReader(fh)]


def test_7_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(a)
    _pipeline(b)
    diffs, n_files = [], 0
    for sub in ("raw", "norm", "synth"):
        for p in sorted((a / sub).glob("*.json")):
            if p.name == "manifest.json":
                continue
            n_files += 1
            if p.read_bytes() != (b / sub / p.name).read_bytes():
                diffs.append(f"{sub}/{p.name}")
    if (a / "model" / "checkpoint.json").read_bytes() != (b / "model" / "checkpoint.json").read_bytes():
        diffs.append("checkpoint")
    if _loss_rows(a / "model" / "losses.csv") != _loss_rows(b / "model" / "losses.csv"):
        diffs.append("loss csv")
    ok = not diffs
    record(7, ok, f"{n_files} tree/stat files, checkpoint and loss CSV values byte-identical across reruns" + (f"; differ: {diffs}" if diffs else ""))
    assert ok


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    print("\n".join(RESULTS))
    sys.exit(code)
