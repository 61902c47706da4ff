import json

import numpy as np
import pytest

from conftest import random_tree
from vesselgen.corpus import (
    STATS_FILE,
    CenterlinePolyline,
    NormStats,
    SynthParams,
    denormalize_tree,
    generate_synthetic_tree,
    load_corpus,
    normalize_corpus,
    polyline_to_tree,
    select_bifurcation_radius,
    write_tree,
)
from vesselgen.tree import TreeError, compute_stats, serialize_tree, validate_tree


def test_normalize_maps_to_unit_range(rng):
    trees = [random_tree(rng, 20) for _ in range(5)]
    normed, stats = normalize_corpus(trees)
    allf = np.concatenate([t.feature_matrix() for t in normed])
    assert allf.min() >= 0 and allf.max() <= 1
    np.testing.assert_allclose(allf.min(axis=0), 0)
    np.testing.assert_allclose(allf.max(axis=0), 1)


def test_denormalize_inverts(rng):
    trees = [random_tree(rng, 15) for _ in range(3)]
    normed, stats = normalize_corpus(trees)
    for a, b in zip(trees, normed):
        np.testing.assert_allclose(denormalize_tree(b, stats).feature_matrix(), a.feature_matrix(), rtol=0, atol=1e-12)


def test_constant_attribute_maps_to_zero(rng):
    t = random_tree(rng, 10)
    for n in t.nodes.values():
        n.r = 0.5
    normed, stats = normalize_corpus([t])
    assert all(n.r == 0.0 for n in normed[0].nodes.values())
    assert stats.min[3] == stats.max[3] == 0.5


def test_normalize_rejects_empty_and_nonfinite(rng):
    with pytest.raises(ValueError):
        normalize_corpus([])
    t = random_tree(rng, 3)
    next(iter(t.nodes.values())).x = float("nan")
    with pytest.raises(ValueError):
        normalize_corpus([t])


def test_norm_stats_json_roundtrip():
    s = NormStats([0, 1, 2, 0.1], [1, 2, 3, 0.9])
    back = NormStats.from_json(s.to_json())
    assert np.array_equal(back.min, s.min) and np.array_equal(back.max, s.max)
    with pytest.raises(ValueError):
        NormStats([1, 0, 0, 0], [0, 0, 0, 0])


def test_bifurcation_radius_is_minimum():
    assert select_bifurcation_radius([0.8, 0.5, 0.7]) == 0.5
    with pytest.raises(ValueError):
        select_bifurcation_radius([])
    with pytest.raises(ValueError):
        select_bifurcation_radius([0.5, 0.0])


def test_polyline_shares_junction_with_min_radius():
    trunk = CenterlinePolyline([[0, 0, 0], [0, 0, 1]], [1.0, 0.9])
    a = CenterlinePolyline([[0, 0, 1], [1, 0, 2]], [0.6, 0.5])
    b = CenterlinePolyline([[0, 0, 1], [-1, 0, 2]], [0.7, 0.6])
    trunk.children = [a, b]
    t = polyline_to_tree(trunk)
    validate_tree(t)
    assert len(t) == 4
    junction = t.nodes[1]
    assert junction.r == 0.6
    assert t.nodes[junction.left].x == 1.0  # first-listed child on the left
    assert t.nodes[junction.right].x == -1.0


def test_polyline_errors():
    p = CenterlinePolyline([[0, 0, 0], [0, 0, 1]], [1, 1])
    p.children = [CenterlinePolyline([[0, 0, 1], [0, 0, 2]], [1, 1]) for _ in range(3)]
    with pytest.raises(TreeError, match="non-binary"):
        polyline_to_tree(p)
    q = CenterlinePolyline([[0, 0, 0], [0, 0, 1]], [1, 1])
    q.children = [q]
    with pytest.raises(TreeError, match="loop"):
        polyline_to_tree(q)
    with pytest.raises(ValueError):
        CenterlinePolyline([[0, 0, 0]], [1])


def test_synthetic_tree_is_valid_and_bounded():
    for s in range(30):
        t = generate_synthetic_tree(SynthParams(seed=s))
        validate_tree(t)
        assert t.depth() <= 10


def test_synthetic_tree_deterministic():
    a = generate_synthetic_tree(SynthParams(seed=7))
    b = generate_synthetic_tree(SynthParams(seed=7))
    assert serialize_tree(a) == serialize_tree(b)
    assert serialize_tree(a) != serialize_tree(generate_synthetic_tree(SynthParams(seed=8)))


def test_synthetic_radius_decays_at_bifurcations():
    t = generate_synthetic_tree(SynthParams(seed=3, bifurcation_prob=1.0, max_depth=4))
    assert len(t) == 15
    for n in t.nodes.values():
        for c in n.children():
            assert t.nodes[c].r == pytest.approx(0.8 * n.r)


def test_synthetic_straight_without_jitter():
    t = generate_synthetic_tree(SynthParams(seed=1, bifurcation_prob=0.0, tortuosity_jitter=0.0, max_depth=6))
    pts = t.feature_matrix()[:, :3]
    assert compute_stats(t).node_count == 6
    np.testing.assert_allclose(pts[:, :2], 0, atol=1e-12)


@pytest.mark.parametrize("field, value", [("max_depth", 0), ("bifurcation_prob", 1.5), ("radius_decay", 1.0), ("radius_root", 0.0)])
def test_synth_params_validation(field, value):
    with pytest.raises(ValueError):
        SynthParams(**{field: value})


def test_load_corpus_detects_normalized(tmp_path, rng):
    trees = [random_tree(rng, 8) for _ in range(3)]
    normed, stats = normalize_corpus(trees)
    for i, t in enumerate(normed):
        write_tree(t, tmp_path / f"{i}.json")
    (tmp_path / STATS_FILE).write_text(stats.to_json())
    (tmp_path / "manifest.json").write_text(json.dumps({"x": 1}))
    loaded, s = load_corpus(tmp_path)
    assert len(loaded) == 3 and s is not None
    raw, _ = load_corpus(tmp_path, denormalize=True)
    np.testing.assert_allclose(raw[0].feature_matrix(), trees[0].feature_matrix(), atol=1e-12)
