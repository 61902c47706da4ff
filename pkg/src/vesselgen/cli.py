"""Command-line pipeline: gen-data, preprocess, train, sample, mesh, eval.

Each stage reads and writes plain files so stages can be rerun on their own.
Settings come from a flat JSON file (``--config``) overridden by flags.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    STATS_FILE,
    SynthParams,
    generate_synthetic_tree,
    load_corpus,
    normalize_corpus,
    read_tree,
    tree_files,
    write_tree,
)
from .generator import GenerationRequest, load_model, sample_trees, write_samples
from .mesh import DEFAULT_SUBDIVISIONS, MeshError, ResampleParams, build_tube_mesh, catmull_clark, export_obj
from .metrics import DEFAULT_BINS, evaluate_populations
from .nn import DivergenceError, load_checkpoint
from .model import ARCHITECTURE
from .trainer import TrainConfig, train
from .tree import TreeError, rebalance_root, trim_depth

log = logging.getLogger("vesselgen")

MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.json"
LOSS_CSV = "losses.csv"
REPORT = "report.json"

# flag name -> config key
FLAGS = {
    "seed": int,
    "count": int,
    "epochs": int,
    "batch": int,
    "lr": float,
    "alpha": float,
    "gamma": float,
    "max_depth": int,
    "subdiv": int,
    "bins": int,
}
RENAMED = {"batch": "batch_size", "subdiv": "subdivisions"}
PATH_KEYS = ("input", "output", "synth", "resume", "checkpoint")
_DEFAULTS = {"count": 100, "subdivisions": DEFAULT_SUBDIVISIONS, "bins": DEFAULT_BINS}
CONFIG_KEYS = (
    set(TrainConfig.field_names())
    | {f.name for f in fields(SynthParams)}
    | {f.name for f in fields(ResampleParams)}
    | {f.name for f in fields(GenerationRequest)}
    | set(_DEFAULTS)
    | set(PATH_KEYS)
)


class ValidationError(Exception):
    """Bad configuration or input; maps to exit code 1."""


def _pick(cfg: dict, cls) -> dict:
    return {f.name: cfg[f.name] for f in fields(cls) if f.name in cfg}


def load_config(path: Path | None, overrides: dict) -> dict:
    """Merge the JSON file at ``path`` with flag ``overrides`` (flags win)."""
    cfg: dict = {}
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ValidationError("config must be a flat JSON object")
        unknown = sorted(set(cfg) - CONFIG_KEYS)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        nested = [k for k, v in cfg.items() if isinstance(v, (dict, list))]
        if nested:
            raise ValidationError(f"config must be flat; nested values for {', '.join(nested)}")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    for k, v in _DEFAULTS.items():
        cfg.setdefault(k, v)
    return cfg


def _require(cfg: dict, key: str) -> Path:
    if cfg.get(key) is None:
        raise ValidationError(f"--{key} is required")
    return Path(cfg[key])


def _existing_dir(cfg: dict, key: str) -> Path:
    p = _require(cfg, key)
    if not p.is_dir():
        raise ValidationError(f"{key} directory {p} does not exist")
    return p


def _output_dir(cfg: dict) -> Path:
    p = _require(cfg, "output")
    if p.exists() and not p.is_dir():
        raise ValidationError(f"output {p} exists and is not a directory")
    return p


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _tree_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def cmd_gen_data(cfg: dict) -> int:
    out = _output_dir(cfg)
    count = int(cfg["count"])
    if count < 1:
        raise ValidationError("count must be >= 1")
    try:
        params = SynthParams(**{**_pick(cfg, SynthParams), "seed": int(cfg.get("seed", 0))})
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(count - 1)))
    for i in range(count):
        tree = generate_synthetic_tree(replace(params, seed=_tree_seed(params.seed, i)))
        write_tree(tree, out / f"{i:0{width}d}.json")
    _write_json(out / MANIFEST, {"stage": "gen-data", "version": __version__, "count": count, "params": params.to_dict(), "per_tree_seed": "SeedSequence([seed, index])"})
    log.info("wrote %d trees to %s", count, out)
    return 0


def cmd_preprocess(cfg: dict) -> int:
    src = _existing_dir(cfg, "input")
    out = _output_dir(cfg)
    max_depth = int(cfg.get("max_depth", 10))
    files = tree_files(src)
    if not files:
        raise ValidationError(f"no tree files in {src}")
    kept, names, rejected = [], [], []
    for p in files:
        try:
            tree = trim_depth(rebalance_root(read_tree(p)), max_depth)
        except (TreeError, ValueError) as exc:
            log.warning("rejected %s: %s", p.name, exc)
            rejected.append({"file": p.name, "reason": str(exc)})
            continue
        kept.append(tree)
        names.append(p.name)
    if not kept:
        log.error("all %d trees rejected", len(files))
        return 2
    normed, stats = normalize_corpus(kept)
    out.mkdir(parents=True, exist_ok=True)
    for name, t in zip(names, normed):
        write_tree(t, out / name)
    (out / STATS_FILE).write_text(stats.to_json() + "\n")
    _write_json(out / MANIFEST, {"stage": "preprocess", "version": __version__, "input": str(src), "max_depth": max_depth, "kept": len(kept), "rejected": rejected})
    log.info("kept %d of %d trees", len(kept), len(files))
    return 0


def cmd_train(cfg: dict) -> int:
    src = _existing_dir(cfg, "input")
    out = _output_dir(cfg)
    if not (src / STATS_FILE).exists():
        raise ValidationError(f"{src} holds no {STATS_FILE}; run preprocess first")
    try:
        config = TrainConfig(**_pick(cfg, TrainConfig))
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    corpus, stats = load_corpus(src)
    if not corpus:
        raise ValidationError(f"no trees in {src}")
    store = None
    if cfg.get("resume") is not None:
        try:
            store, _, _ = load_checkpoint(Path(cfg["resume"]), ARCHITECTURE)
        except (OSError, ValueError, KeyError) as exc:
            raise ValidationError(f"cannot resume from {cfg['resume']}: {exc}") from exc
        log.info("resuming at step %d", store.step)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT

    def report(r):
        log.info("epoch %d total %.5f recon %.5f acc %.3f", r.epoch, r.loss.total, r.loss.recon, r.accuracy)

    try:
        store, _ = train(corpus, config, norm_stats=stats, store=store, checkpoint_path=ckpt, csv_path=out / LOSS_CSV, callback=report)
    except DivergenceError as exc:
        log.error("training diverged: %s; last good state in %s", exc, ckpt)
        return 2
    log.info("checkpoint written to %s (step %d)", ckpt, store.step)
    return 0


def _checkpoint_path(cfg: dict) -> Path:
    key = "checkpoint" if cfg.get("checkpoint") is not None else "input"
    p = _require(cfg, key)
    if p.is_dir():
        p = p / CHECKPOINT
    if not p.is_file():
        raise ValidationError(f"checkpoint {p} does not exist")
    return p


def cmd_sample(cfg: dict) -> int:
    ckpt = _checkpoint_path(cfg)
    out = _output_dir(cfg)
    try:
        req = GenerationRequest(int(cfg["count"]), int(cfg.get("seed", 0)), int(cfg.get("max_depth", 10)), ckpt)
        store, stats = load_model(ckpt)
    except (ValueError, KeyError) as exc:
        raise ValidationError(str(exc)) from exc
    trees = sample_trees(req, store, stats)
    write_samples(trees, out)
    _write_json(out / MANIFEST, {"stage": "sample", "version": __version__, "checkpoint": str(ckpt), "step": store.step, "count": req.count, "seed": req.seed, "max_depth": req.max_depth})
    log.info("wrote %d samples to %s", len(trees), out)
    return 0


def cmd_mesh(cfg: dict) -> int:
    src = _existing_dir(cfg, "input")
    out = _output_dir(cfg)
    subdiv = int(cfg["subdivisions"])
    if subdiv < 0:
        raise ValidationError("subdiv must be >= 0")
    try:
        params = ResampleParams(**_pick(cfg, ResampleParams))
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    files = tree_files(src)
    if not files:
        raise ValidationError(f"no tree files in {src}")
    trees, _ = load_corpus(src, denormalize=True)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for p, tree in zip(files, trees):
        try:
            mesh = catmull_clark(build_tube_mesh(tree, params), subdiv)
        except (MeshError, TreeError) as exc:
            log.error("%s: %s", p.name, exc)
            failed += 1
            continue
        (out / (p.stem + ".obj")).write_text(export_obj(mesh))
        _write_json(out / (p.stem + ".json"), {**mesh.stats(), "subdivisions": subdiv, "source": p.name})
    log.info("meshed %d of %d trees", len(files) - failed, len(files))
    return 2 if failed else 0


def cmd_eval(cfg: dict) -> int:
    real_dir = _existing_dir(cfg, "input")
    synth_dir = _existing_dir(cfg, "synth")
    bins = int(cfg["bins"])
    if bins < 1:
        raise ValidationError("bins must be >= 1")
    real, _ = load_corpus(real_dir, denormalize=True)
    synth, _ = load_corpus(synth_dir, denormalize=True)
    if not real or not synth:
        raise ValidationError("both populations need at least one tree")
    report = evaluate_populations(real, synth, bins)
    doc = {**report.to_dict(), "real": str(real_dir), "synth": str(synth_dir), "bins": bins}
    out = cfg.get("output")
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / REPORT, doc)
    for m, s in report.similarities().items():
        print(f"{m}: {s:.4f}")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic vessel corpus"),
    "preprocess": (cmd_preprocess, "rebalance, trim and normalize a corpus"),
    "train": (cmd_train, "train the tree autoencoder"),
    "sample": (cmd_sample, "sample new trees from a checkpoint"),
    "mesh": (cmd_mesh, "mesh trees into subdivided quad surfaces"),
    "eval": (cmd_eval, "compare real and synthetic populations"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat JSON config; flags override it")
    common.add_argument("--input", type=Path, help="input directory (checkpoint directory for sample)")
    common.add_argument("--output", type=Path, help="output directory")
    for name, typ in FLAGS.items():
        common.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    common.add_argument("--synth", type=Path, help="eval: synthetic corpus directory")
    common.add_argument("--resume", type=Path, help="train: checkpoint to continue from")
    common.add_argument("--checkpoint", type=Path, help="sample: checkpoint file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vesselgen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse prints usage itself; map its exit status onto ours
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {RENAMED.get(k, k): getattr(args, k) for k in FLAGS}
    overrides.update({k: getattr(args, k) for k in PATH_KEYS})
    fn = COMMANDS[args.command][0]
    try:
        return fn(load_config(args.config, overrides))
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except (OSError, RuntimeError, TreeError, MeshError, ValueError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
