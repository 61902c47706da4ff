"""Training loop with gradient accumulation over mini-batches of trees."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import NormStats
from .model import (
    DEFAULT_ALPHA,
    DEFAULT_GAMMA,
    LATENT_DIM,
    LossBreakdown,
    TreeBatch,
    forward_backward,
    init_model,
    loss_total,
)
from .nn import AdamHyper, DivergenceError, ParameterStore, adam_step, save_checkpoint
from .tree import TreeStats, VesselTree, compute_stats

log = logging.getLogger(__name__)

CSV_FIELDS = ["epoch", "recon", "topo", "kl", "total", "accuracy", "seconds"]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 10
    lr: float = 1e-4
    alpha: float = DEFAULT_ALPHA
    gamma: float = DEFAULT_GAMMA
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    max_depth: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EpochReport:
    epoch: int
    loss: LossBreakdown
    accuracy: float
    seconds: float

    def row(self) -> dict:
        return {
            "epoch": self.epoch,
            "recon": repr(self.loss.recon),
            "topo": repr(self.loss.topo),
            "kl": repr(self.loss.kl),
            "total": repr(self.loss.total),
            "accuracy": repr(self.accuracy),
            "seconds": f"{self.seconds:.3f}",
        }


def class_counts(corpus: Sequence[VesselTree]) -> np.ndarray:
    counts = np.zeros(3, dtype=np.int64)
    for t in corpus:
        for n in t.nodes.values():
            counts[len(n.children())] += 1
    return counts


def compute_class_weights(corpus: Sequence[VesselTree]) -> np.ndarray:
    """Inverse class counts, rescaled to sum to 3."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    counts = class_counts(corpus)
    if np.any(counts == 0):
        raise ValueError(f"class absent from corpus (counts {counts.tolist()}); weights undefined")
    inv = 1.0 / counts
    return inv * 3.0 / inv.sum()


def node_weight(stats: TreeStats, node: int) -> float:
    if node not in stats.subtree_size:
        raise KeyError(f"unknown node id {node}")
    return stats.subtree_size[node] / stats.node_count


def classifier_accuracy(model: ParameterStore, corpus: Sequence[VesselTree], batch_size: int = 50) -> float:
    """Teacher-forced fraction of nodes whose predicted class is the true child
    count. Uses ``z = mu`` (no sampling noise)."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    correct = total = 0
    w = np.ones(3)
    for i in range(0, len(corpus), batch_size):
        batch = TreeBatch.from_trees(corpus[i : i + batch_size])
        res = forward_backward(model, batch, np.zeros((batch.size, LATENT_DIM)), w, backward=False)
        correct += res.correct
        total += res.nodes
    return correct / total


def evaluate(model: ParameterStore, corpus: Sequence[VesselTree], class_weights, alpha=DEFAULT_ALPHA, gamma=DEFAULT_GAMMA, batch_size: int = 50):
    """Mean deterministic (noise-free) loss and accuracy over ``corpus``."""
    parts = []
    correct = total = 0
    for i in range(0, len(corpus), batch_size):
        batch = TreeBatch.from_trees(corpus[i : i + batch_size])
        res = forward_backward(model, batch, np.zeros((batch.size, LATENT_DIM)), class_weights, alpha, gamma, backward=False)
        parts.extend(res.per_tree)
        correct += res.correct
        total += res.nodes
    mean = loss_total(
        float(np.mean([p.recon for p in parts])),
        float(np.mean([p.topo for p in parts])),
        float(np.mean([p.kl for p in parts])),
        alpha,
        gamma,
    )
    return mean, correct / total


def train_step(store: ParameterStore, trees: Sequence[VesselTree], noise: np.ndarray, class_weights, config: TrainConfig, hyper: AdamHyper):
    """Accumulate the batch-mean gradient over ``trees`` and apply one Adam update."""
    store.zero_grad()
    res = forward_backward(store, TreeBatch.from_trees(trees), noise, class_weights, config.alpha, config.gamma)
    if not np.isfinite(res.mean.total):
        raise DivergenceError(f"non-finite loss at step {store.step + 1}")
    adam_step(store, hyper)
    return res


def train(
    corpus: Sequence[VesselTree],
    config: TrainConfig,
    *,
    norm_stats: NormStats | None = None,
    store: ParameterStore | None = None,
    checkpoint_path: Path | None = None,
    csv_path: Path | None = None,
    callback: Callable[[EpochReport], None] | None = None,
) -> tuple[ParameterStore, list[EpochReport]]:
    """Fit the model to a normalized corpus.

    Each epoch shuffles the corpus with the seeded generator, splits it into
    batches of ``batch_size`` trees and takes one Adam step per batch. Fresh
    standard-normal noise is drawn per tree. Epoch ``k`` draws from the stream
    ``(seed, k)`` so a resumed run continues exactly where it stopped. On
    divergence the parameters from before the failing step are written to
    ``checkpoint_path`` and the error re-raised.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    corpus = list(corpus)
    if store is None:
        store = init_model(config.seed)
    hyper = AdamHyper(lr=config.lr)
    class_weights = compute_class_weights(corpus)
    reports: list[EpochReport] = []
    start_epoch = int(store.step // max(1, -(-len(corpus) // config.batch_size)))
    extra = {"config": asdict(config), "class_weights": class_weights.tolist()}

    if csv_path is not None:
        csv_path = Path(csv_path)
        if not csv_path.exists() or store.step == 0:
            with csv_path.open("w", newline="") as fh:
                csv.DictWriter(fh, CSV_FIELDS).writeheader()

    for e in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, start_epoch + e])
        order = rng.permutation(len(corpus))
        losses, correct, total = [], 0, 0
        for i in range(0, len(order), config.batch_size):
            trees = [corpus[j] for j in order[i : i + config.batch_size]]
            noise = rng.standard_normal((len(trees), LATENT_DIM))
            try:
                res = train_step(store, trees, noise, class_weights, config, hyper)
            except DivergenceError:
                # adam_step refuses non-finite gradients before touching the store
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, store, norm_stats, extra)
                raise
            losses.extend(res.per_tree)
            correct += res.correct
            total += res.nodes
        mean = loss_total(
            float(np.mean([p.recon for p in losses])),
            float(np.mean([p.topo for p in losses])),
            float(np.mean([p.kl for p in losses])),
            config.alpha,
            config.gamma,
        )
        report = EpochReport(start_epoch + e + 1, mean, correct / total, time.perf_counter() - t0)
        reports.append(report)
        if csv_path is not None:
            with csv_path.open("a", newline="") as fh:
                csv.DictWriter(fh, CSV_FIELDS).writerow(report.row())
        if callback is not None:
            callback(report)
        log.debug("epoch %d recon %.5f topo %.5f kl %.3f acc %.3f", report.epoch, mean.recon, mean.topo, mean.kl, report.accuracy)
        if checkpoint_path is not None and config.checkpoint_every and report.epoch % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, store, norm_stats, extra)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, store, norm_stats, extra)
    return store, reports
