"""Training corpora: min-max normalization, centerline ingestion and a
procedural vessel generator used as desk-scale training data."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tree import Node, TreeError, VesselTree, parse_tree, serialize_tree

log = logging.getLogger(__name__)

STATS_FILE = "norm_stats.json"

# half-angle between the two daughter directions at a synthetic bifurcation
BRANCH_HALF_ANGLE = np.pi / 6


@dataclass
class NormStats:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if self.min.shape != (4,) or self.max.shape != (4,):
            raise ValueError("NormStats needs 4-vectors for min and max")
        if np.any(self.min > self.max):
            raise ValueError("NormStats min exceeds max")

    def to_json(self) -> str:
        return json.dumps({"min": self.min.tolist(), "max": self.max.tolist()})

    @classmethod
    def from_dict(cls, doc: dict) -> NormStats:
        return cls(doc["min"], doc["max"])

    @classmethod
    def from_json(cls, text: str) -> NormStats:
        return cls.from_dict(json.loads(text))


def _map_features(tree: VesselTree, fn) -> VesselTree:
    out = tree.copy()
    for n in out.nodes.values():
        n.x, n.y, n.z, n.r = (float(v) for v in fn(n.features))
    return out


def normalize_tree(tree: VesselTree, stats: NormStats) -> VesselTree:
    span = stats.max - stats.min
    safe = np.where(span > 0, span, 1.0)

    def fn(f):
        return np.where(span > 0, (f - stats.min) / safe, 0.0)

    return _map_features(tree, fn)


def normalize_corpus(trees: Sequence[VesselTree]) -> tuple[list[VesselTree], NormStats]:
    """Map every attribute to [0, 1] using corpus-wide per-attribute min/max.

    Attributes that are constant over the corpus map to 0.
    """
    if len(trees) == 0:
        raise ValueError("cannot normalize an empty corpus")
    allf = np.concatenate([t.feature_matrix() for t in trees])
    if not np.all(np.isfinite(allf)):
        raise ValueError("corpus has non-finite features")
    stats = NormStats(allf.min(axis=0), allf.max(axis=0))
    return [normalize_tree(t, stats) for t in trees], stats


def denormalize_tree(tree: VesselTree, stats: NormStats | None) -> VesselTree:
    if stats is None:
        raise ValueError("normalization stats are required")
    if not isinstance(stats, NormStats):
        stats = NormStats(*stats)
    span = stats.max - stats.min
    return _map_features(tree, lambda f: stats.min + f * span)


def select_bifurcation_radius(candidates: Sequence[float]) -> float:
    """Pick the cross-section radius to keep at a bifurcation: the smallest."""
    vals = [float(c) for c in candidates]
    if not vals:
        raise ValueError("no cross-section candidates")
    if any(not v > 0 for v in vals):
        raise ValueError("cross-section radii must be positive")
    return min(vals)


@dataclass
class CenterlinePolyline:
    points: np.ndarray  # (n, 3)
    radii: np.ndarray  # (n,)
    children: list[CenterlinePolyline] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        if len(self.points) < 2:
            raise ValueError("a polyline needs at least 2 points")
        if len(self.radii) != len(self.points):
            raise ValueError("one radius per point required")
        if np.any(self.radii <= 0):
            raise ValueError("radii must be positive")


def polyline_to_tree(root: CenterlinePolyline, *, tol: float = 1e-9) -> VesselTree:
    """Chain centerline points into a binary tree, one node per point.

    A child polyline whose first point coincides with the parent's last point
    shares that junction node; the junction keeps the smallest of the
    candidate radii.
    """
    nodes: dict[int, Node] = {}
    seen: set[int] = set()

    def add(poly: CenterlinePolyline, attach: int | None) -> None:
        if id(poly) in seen:
            raise TreeError("loop detected in centerline branch links")
        seen.add(id(poly))
        if len(poly.children) > 2:
            raise TreeError(f"non-binary junction with {len(poly.children)} child branches")
        pts, rad = poly.points, poly.radii
        start = 0
        if attach is not None:
            j = nodes[attach]
            if np.linalg.norm(pts[0] - j.position) <= tol:
                j.r = select_bifurcation_radius([j.r, rad[0]])
                start = 1
        prev = attach
        for p, r in zip(pts[start:], rad[start:]):
            nid = len(nodes)
            nodes[nid] = Node(nid, *map(float, p), float(r))
            if prev is not None:
                pn = nodes[prev]
                if pn.right is None:
                    pn.right = nid
                else:
                    pn.left = nid
            prev = nid
        for child in poly.children:
            add(child, prev)

    add(root, None)
    # a single branch child lands in `right`; two children fill right then left,
    # swap so the first-listed child is on the left
    for n in nodes.values():
        if n.left is not None:
            n.left, n.right = n.right, n.left
    return VesselTree(0, nodes)


@dataclass
class SynthParams:
    max_depth: int = 10
    bifurcation_prob: float = 0.35
    radius_root: float = 1.0
    radius_decay: float = 0.8
    segment_length_mean: float = 2.0
    tortuosity_jitter: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 <= self.bifurcation_prob <= 1:
            raise ValueError("bifurcation_prob must lie in [0, 1]")
        if not self.radius_root > 0:
            raise ValueError("radius_root must be positive")
        if not 0 < self.radius_decay < 1:
            raise ValueError("radius_decay must lie in (0, 1)")
        if not self.segment_length_mean > 0:
            raise ValueError("segment_length_mean must be positive")
        if self.tortuosity_jitter < 0:
            raise ValueError("tortuosity_jitter must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _perpendicular(d: np.ndarray) -> np.ndarray:
    a = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    p = np.cross(d, a)
    return p / np.linalg.norm(p)


def _rotate(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    # Rodrigues; axis is unit length and perpendicular to v here
    return v * np.cos(angle) + np.cross(axis, v) * np.sin(angle) + axis * np.dot(axis, v) * (1 - np.cos(angle))


def _jitter(d: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    if sigma == 0:
        return d
    u = _perpendicular(d)
    axis = _rotate(u, d, rng.uniform(0, 2 * np.pi))
    out = _rotate(d, axis, rng.normal(0.0, sigma))
    return out / np.linalg.norm(out)


def generate_synthetic_tree(params: SynthParams) -> VesselTree:
    """Grow a random binary vessel tree.

    Every node below ``max_depth`` gets one child, or two with probability
    ``bifurcation_prob``. Directions follow a persistent random walk; daughter
    radii shrink by ``radius_decay`` at each bifurcation.
    """
    rng = np.random.default_rng(params.seed)
    nodes: dict[int, Node] = {}
    nodes[0] = Node(0, 0.0, 0.0, 0.0, params.radius_root)
    # (node id, depth, heading)
    stack = [(0, 1, np.array([0.0, 0.0, 1.0]))]
    while stack:
        nid, depth, heading = stack.pop()
        if depth >= params.max_depth:
            continue
        parent = nodes[nid]
        if rng.random() < params.bifurcation_prob:
            axis = _rotate(_perpendicular(heading), heading, rng.uniform(0, 2 * np.pi))
            headings = [_rotate(heading, axis, BRANCH_HALF_ANGLE), _rotate(heading, axis, -BRANCH_HALF_ANGLE)]
            r = parent.r * params.radius_decay
        else:
            headings = [heading]
            r = parent.r
        kids = []
        for h in headings:
            h = _jitter(h, rng, params.tortuosity_jitter)
            step = params.segment_length_mean * rng.uniform(0.75, 1.25)
            pos = parent.position + step * h
            cid = len(nodes)
            nodes[cid] = Node(cid, *map(float, pos), float(r))
            kids.append((cid, depth + 1, h))
        if len(kids) == 1:
            parent.right = kids[0][0]
        else:
            parent.left, parent.right = kids[0][0], kids[1][0]
        stack.extend(reversed(kids))
    return VesselTree(0, nodes)


def write_tree(tree: VesselTree, path: Path) -> None:
    Path(path).write_text(serialize_tree(tree) + "\n")


def read_tree(path: Path, *, positive_radius: bool = True) -> VesselTree:
    return parse_tree(Path(path).read_text(), positive_radius=positive_radius)


def tree_files(directory: Path) -> list[Path]:
    d = Path(directory)
    return sorted(p for p in d.glob("*.json") if p.name not in {STATS_FILE, "manifest.json"})


def load_corpus(directory: Path, *, denormalize: bool = False) -> tuple[list[VesselTree], NormStats | None]:
    """Load every tree file in ``directory``.

    A directory holding ``norm_stats.json`` is treated as normalized; with
    ``denormalize=True`` its trees are mapped back to raw units.
    """
    d = Path(directory)
    stats_path = d / STATS_FILE
    stats = NormStats.from_json(stats_path.read_text()) if stats_path.exists() else None
    trees = [read_tree(p, positive_radius=stats is None) for p in tree_files(d)]
    if denormalize and stats is not None:
        trees = [denormalize_tree(t, stats) for t in trees]
    return trees, stats
