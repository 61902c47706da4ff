import json

import numpy as np
import pytest

from vesselgen.cli import main
from vesselgen.corpus import load_corpus, read_tree, tree_files
from vesselgen.mesh import parse_obj
from vesselgen.tree import validate_tree


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert run("gen-data", "--output", d / "raw", "--count", 12, "--seed", 7, "--max-depth", 5) == 0
    assert run("preprocess", "--input", d / "raw", "--output", d / "norm") == 0
    assert run("train", "--input", d / "norm", "--output", d / "model", "--epochs", 1, "--batch", 4) == 0
    assert run("sample", "--input", d / "model", "--output", d / "synth", "--count", 3, "--seed", 1, "--max-depth", 5) == 0
    return d


def test_gen_data_manifest_and_determinism(pipeline, tmp_path):
    files = tree_files(pipeline / "raw")
    assert len(files) == 12
    man = json.loads((pipeline / "raw" / "manifest.json").read_text())
    assert set(man["params"]) == {"max_depth", "bifurcation_prob", "radius_root", "radius_decay", "segment_length_mean", "tortuosity_jitter", "seed"}
    assert man["params"]["seed"] == 7 and man["params"]["max_depth"] == 5
    assert run("gen-data", "--output", tmp_path, "--count", 12, "--seed", 7, "--max-depth", 5) == 0
    for p in files:
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_gen_data_rejects_zero_count(tmp_path):
    assert run("gen-data", "--output", tmp_path / "x", "--count", 0) == 1
    assert not (tmp_path / "x").exists()


def test_preprocess_output_normalized(pipeline):
    trees, stats = load_corpus(pipeline / "norm")
    assert stats is not None and len(trees) == 12
    f = np.concatenate([t.feature_matrix() for t in trees])
    assert f.min() >= 0 and f.max() <= 1
    assert max(t.depth() for t in trees) <= 10


def test_preprocess_logs_rejections(tmp_path, caplog):
    src = tmp_path / "src"
    src.mkdir()
    (src / "bad.json").write_text("{broken")
    assert run("gen-data", "--output", src, "--count", 2, "--seed", 1) == 0
    with caplog.at_level("WARNING"):
        assert run("preprocess", "--input", src, "--output", tmp_path / "out") == 0
    assert any("bad.json" in r.message for r in caplog.records)
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["kept"] == 2 and man["rejected"][0]["file"] == "bad.json"


def test_preprocess_all_rejected(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    (src / "a.json").write_text("[]")
    assert run("preprocess", "--input", src, "--output", tmp_path / "out") == 2


def test_train_writes_checkpoint_and_csv(pipeline):
    ck = json.loads((pipeline / "model" / "checkpoint.json").read_text())
    assert ck["params"]["step"] == 3
    assert ck["extra"]["config"]["lr"] == 1e-4 and ck["extra"]["config"]["batch_size"] == 4
    lines = (pipeline / "model" / "losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,recon,topo,kl,total,accuracy,seconds" and len(lines) == 2


def test_train_resume_continues_step(pipeline, tmp_path):
    assert run("train", "--input", pipeline / "norm", "--output", tmp_path, "--epochs", 1, "--batch", 4, "--resume", pipeline / "model" / "checkpoint.json") == 0
    ck = json.loads((tmp_path / "checkpoint.json").read_text())
    assert ck["params"]["step"] == 6
    assert (tmp_path / "losses.csv").read_text().splitlines()[1].startswith("2,")


def test_train_requires_normalized_input(pipeline, tmp_path):
    assert run("train", "--input", pipeline / "raw", "--output", tmp_path, "--epochs", 1) == 1


def test_sample_outputs_valid_and_deterministic(pipeline, tmp_path):
    files = tree_files(pipeline / "synth")
    assert len(files) == 3
    for p in files:
        validate_tree(read_tree(p))
    assert run("sample", "--input", pipeline / "model", "--output", tmp_path, "--count", 3, "--seed", 1, "--max-depth", 5) == 0
    for p in files:
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_sample_missing_checkpoint(tmp_path):
    assert run("sample", "--input", tmp_path, "--output", tmp_path / "o", "--count", 1) == 1


def test_mesh_sidecars(pipeline, tmp_path):
    assert run("mesh", "--input", pipeline / "raw", "--output", tmp_path, "--subdiv", 0) == 0
    objs = sorted(tmp_path.glob("*.obj"))
    assert len(objs) == 12
    for p in objs:
        side = json.loads(p.with_suffix(".json").read_text())
        assert side["closed"] is True and side["subdivisions"] == 0
        m = parse_obj(p.read_text())
        assert len(m.faces) == side["faces"]


def test_mesh_normalized_input_is_denormalized(pipeline, tmp_path):
    assert run("mesh", "--input", pipeline / "norm", "--output", tmp_path, "--subdiv", 1) == 0
    a = parse_obj((tmp_path / "0000.obj").read_text())
    assert np.ptp(a.vertices[:, 2]) > 1.5  # raw units, not the unit cube


def test_eval_identical_and_report(pipeline, tmp_path, capsys):
    assert run("eval", "--input", pipeline / "raw", "--synth", pipeline / "raw", "--output", tmp_path) == 0
    out = capsys.readouterr().out
    assert "radius: 1.0000" in out and "length: 1.0000" in out and "tortuosity: 1.0000" in out
    rep = json.loads((tmp_path / "report.json").read_text())
    assert set(rep["metrics"]) == {"radius", "length", "tortuosity"}
    assert all(len(m["bin_edges"]) == 51 for m in rep["metrics"].values())


def test_eval_against_samples(pipeline):
    assert run("eval", "--input", pipeline / "norm", "--synth", pipeline / "synth", "--bins", 20) == 0


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"count": 3, "seed": 5, "max_depth": 4}))
    assert run("gen-data", "--config", cfg, "--output", tmp_path / "a", "--count", 2) == 0
    assert len(tree_files(tmp_path / "a")) == 2
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["params"]["seed"] == 5


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"cuont": 3}))
    assert run("gen-data", "--config", cfg, "--output", tmp_path / "a") == 1
    assert not (tmp_path / "a").exists()


def test_invalid_flag_usage(tmp_path, capsys):
    assert run("gen-data", "--output", tmp_path / "a", "--bogus", 1) == 1
    assert "usage" in capsys.readouterr().err
    assert not (tmp_path / "a").exists()
    assert run("gen-data", "--count", "abc", "--output", tmp_path / "a") == 1
    assert main([]) == 1
