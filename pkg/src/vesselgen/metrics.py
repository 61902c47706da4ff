"""Vessel morphometry and population comparison.

Per tree: tortuosity of every branch (arc length over chord), total
centerline length and mean node radius. Populations are compared through
histograms on shared bins and their cosine similarity.
"""

from __future__ import annotations

import csv
import io
import math
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mesh import Branch, extract_branches
from .tree import VesselTree

log = logging.getLogger(__name__)

METRICS = ("radius", "length", "tortuosity")
DEFAULT_BINS = 50


def tortuosity(branch: Branch) -> float:
    """Arc length over chord. Arc >= chord by the triangle inequality, so
    round-off below 1 is clamped."""
    pts = branch.points
    if len(pts) < 2:
        raise ValueError("tortuosity needs at least 2 points")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    chord = float(np.linalg.norm((pts[-1] - pts[0])[None], axis=1)[0])
    if chord == 0.0:
        raise ValueError("branch endpoints coincide; tortuosity undefined")
    return max(1.0, float(seg.sum()) / chord)


def total_length(tree: VesselTree) -> float:
    """Sum of parent-child edge lengths."""
    total = 0.0
    for n in tree.nodes.values():
        for c in n.children():
            total += float(np.linalg.norm(tree.nodes[c].position - n.position))
    return total


def average_radius(tree: VesselTree) -> float:
    return float(np.mean([n.r for n in tree.nodes.values()]))


@dataclass
class VesselMetrics:
    tortuosities: list[float]
    total_length: float
    avg_radius: float


def vessel_metrics(tree: VesselTree) -> VesselMetrics:
    torts = []
    for br in extract_branches(tree):
        try:
            torts.append(tortuosity(br))
        except ValueError:
            log.warning("skipping branch %s->%s with coincident endpoints", br.start, br.end)
    return VesselMetrics(torts, total_length(tree), average_radius(tree))


@dataclass
class MetricHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    metric: str = ""
    overflow: int = 0

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)


def build_histogram(values: Sequence[float], bins: int, range: tuple[float, float], metric: str = "") -> MetricHistogram:
    """Uniform bins over ``range``; bins are right-open except the last.
    Values outside the range are left out and tallied in ``overflow``."""
    lo, hi = map(float, range)
    if bins < 1 or not lo < hi:
        raise ValueError("need bins >= 1 and lo < hi")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    edges = np.linspace(lo, hi, bins + 1)
    inside = (v >= lo) & (v <= hi)
    counts, _ = np.histogram(v[inside], bins=edges)
    return MetricHistogram(edges, counts, metric, int((~inside).sum()))


def cosine_similarity(a: MetricHistogram, b: MetricHistogram) -> float:
    """Cosine of the angle between two count vectors on identical bins.

    Counts are integers, so the products are formed exactly; proportional
    histograms (Cauchy-Schwarz equality) give exactly 1.0.
    """
    if a.bin_edges.shape != b.bin_edges.shape or not np.array_equal(a.bin_edges, b.bin_edges):
        raise ValueError("histograms have different bin edges")
    x, y = [int(v) for v in a.counts], [int(v) for v in b.counts]
    dot = sum(p * q for p, q in zip(x, y))
    xx, yy = sum(p * p for p in x), sum(q * q for q in y)
    if xx == 0 or yy == 0:
        return 0.0
    if dot * dot == xx * yy:
        return 1.0
    return float(min(1.0, dot / (math.sqrt(xx) * math.sqrt(yy))))


def population_values(trees: Sequence[VesselTree]) -> dict[str, list[float]]:
    """Radius and length per tree; tortuosity pooled over all branches."""
    out = {m: [] for m in METRICS}
    for t in trees:
        vm = vessel_metrics(t)
        out["radius"].append(vm.avg_radius)
        out["length"].append(vm.total_length)
        out["tortuosity"].extend(vm.tortuosities)
    return out


@dataclass
class EvaluationReport:
    metrics: dict[str, dict] = field(default_factory=dict)
    n_real: int = 0
    n_synth: int = 0

    def similarities(self) -> dict[str, float]:
        return {m: d["cosine_similarity"] for m, d in self.metrics.items()}

    def to_dict(self) -> dict:
        return {
            "n_real": self.n_real,
            "n_synth": self.n_synth,
            "tortuosity_pooling": "per-branch values pooled over all trees",
            "metrics": self.metrics,
        }


def evaluate_populations(real: Sequence[VesselTree], synth: Sequence[VesselTree], bins: int = DEFAULT_BINS) -> EvaluationReport:
    """Histogram each metric for both populations on the pooled min/max range
    and report their cosine similarities."""
    if len(real) == 0 or len(synth) == 0:
        raise ValueError("both populations must be non-empty")
    rv, sv = population_values(real), population_values(synth)
    report = EvaluationReport(n_real=len(real), n_synth=len(synth))
    for m in METRICS:
        pooled = np.asarray(rv[m] + sv[m], dtype=np.float64)
        if pooled.size == 0:
            lo, hi = 0.0, 1.0
        else:
            lo, hi = float(pooled.min()), float(pooled.max())
        if not lo < hi:
            lo, hi = lo - 0.5, hi + 0.5
        ha = build_histogram(rv[m], bins, (lo, hi), m)
        hb = build_histogram(sv[m], bins, (lo, hi), m)
        report.metrics[m] = {
            "bin_edges": ha.bin_edges.tolist(),
            "counts_real": ha.counts.tolist(),
            "counts_synth": hb.counts.tolist(),
            "overflow_real": ha.overflow,
            "overflow_synth": hb.overflow,
            "range": [lo, hi],
            "n_values_real": len(rv[m]),
            "n_values_synth": len(sv[m]),
            "cosine_similarity": cosine_similarity(ha, hb),
        }
    return report


def metrics_csv(trees: Sequence[VesselTree], names: Sequence[str] | None = None) -> str:
    """One row per tree: name, total length, average radius, branch count and
    mean branch tortuosity."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["tree", "total_length", "avg_radius", "branches", "mean_tortuosity"])
    for i, t in enumerate(trees):
        vm = vessel_metrics(t)
        mt = float(np.mean(vm.tortuosities)) if vm.tortuosities else float("nan")
        w.writerow([names[i] if names else i, repr(vm.total_length), repr(vm.avg_radius), len(vm.tortuosities), repr(mt)])
    return buf.getvalue()
