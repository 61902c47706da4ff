"""Sample new vessel trees from the latent prior of a trained model."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import NormStats, denormalize_tree, write_tree
from .model import ARCHITECTURE, LATENT_DIM, decode_tree_free
from .nn import ParameterStore, load_checkpoint
from .tree import TreeError, VesselTree, validate_tree

MAX_RETRIES = 10


class GenerationError(RuntimeError):
    pass


@dataclass
class GenerationRequest:
    count: int
    seed: int = 0
    max_depth: int = 10
    checkpoint: Path | str | None = None

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


def load_model(checkpoint: Path | str) -> tuple[ParameterStore, NormStats]:
    store, stats, _ = load_checkpoint(Path(checkpoint), ARCHITECTURE)
    if stats is None:
        raise ValueError("checkpoint carries no normalization stats")
    return store, NormStats.from_dict(stats)


def sample_one(store: ParameterStore, stats: NormStats, seed: int, index: int, max_depth: int = 10) -> VesselTree:
    """Sample ``index`` of a run seeded with ``seed``; the stream
    ``(seed, index)`` is independent of every other sample."""
    rng = np.random.default_rng([seed, index])
    for _ in range(MAX_RETRIES):
        z = rng.standard_normal(LATENT_DIM)
        tree = denormalize_tree(decode_tree_free(z, store, max_depth), stats)
        try:
            validate_tree(tree)
        except TreeError:
            continue  # non-positive radius after denormalization
        return tree
    raise GenerationError(f"sample {index}: no valid tree after {MAX_RETRIES} draws")


def sample_trees(request: GenerationRequest, store: ParameterStore | None = None, stats: NormStats | None = None) -> list[VesselTree]:
    """Draw ``request.count`` trees from N(0, I). A loaded model may be passed
    in directly instead of through ``request.checkpoint``."""
    if store is None or stats is None:
        if request.checkpoint is None:
            raise ValueError("a checkpoint or a loaded model is required")
        store, stats = load_model(request.checkpoint)
    return [sample_one(store, stats, request.seed, i, request.max_depth) for i in range(request.count)]


def write_samples(trees: list[VesselTree], out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(trees) - 1)))
    paths = []
    for i, t in enumerate(trees):
        p = out_dir / f"{i:0{width}d}.json"
        write_tree(t, p)
        paths.append(p)
    return paths
