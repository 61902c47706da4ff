"""Binary vessel tree: data model, JSON I/O and structural algorithms.

Each node is one centerline sample carrying ``(x, y, z, r)``. A node has at
most two children; a lone child always sits in the ``right`` slot.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


class TreeError(ValueError):
    """Raised for malformed or structurally invalid trees."""


@dataclass
class Node:
    id: int
    x: float
    y: float
    z: float
    r: float
    left: int | None = None
    right: int | None = None

    @property
    def features(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.r], dtype=np.float64)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def children(self) -> list[int]:
        return [c for c in (self.left, self.right) if c is not None]


@dataclass
class TreeStats:
    depth: int
    node_count: int
    subtree_size: dict[int, int]
    class_label: dict[int, int]


@dataclass
class VesselTree:
    root: int
    nodes: dict[int, Node] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def children(self, node_id: int) -> list[int]:
        return self.nodes[node_id].children()

    def preorder(self) -> Iterator[Node]:
        """Depth-first, parent before children, left before right."""
        stack = [self.root]
        while stack:
            n = self.nodes[stack.pop()]
            yield n
            for c in (n.right, n.left):
                if c is not None:
                    stack.append(c)

    def postorder(self) -> list[Node]:
        """Children before parents (reversed preorder)."""
        return list(self.preorder())[::-1]

    def depths(self) -> dict[int, int]:
        """Node depth counted in nodes, root = 1."""
        d = {self.root: 1}
        for n in self.preorder():
            for c in n.children():
                d[c] = d[n.id] + 1
        return d

    def depth(self) -> int:
        return max(self.depths().values())

    def parents(self) -> dict[int, int | None]:
        p: dict[int, int | None] = {self.root: None}
        for n in self.nodes.values():
            for c in n.children():
                p[c] = n.id
        return p

    def feature_matrix(self) -> np.ndarray:
        """Features in preorder, shape (n, 4)."""
        return np.array([n.features for n in self.preorder()])

    def copy(self) -> VesselTree:
        return VesselTree(
            self.root,
            {i: Node(n.id, n.x, n.y, n.z, n.r, n.left, n.right) for i, n in self.nodes.items()},
        )

    def with_features(self, features: dict[int, np.ndarray]) -> VesselTree:
        out = self.copy()
        for i, f in features.items():
            n = out.nodes[i]
            n.x, n.y, n.z, n.r = (float(v) for v in f)
        return out


def validate_tree(tree: VesselTree, *, positive_radius: bool = True) -> None:
    """Check the structural and numeric invariants of ``tree``.

    ``positive_radius=False`` admits ``r == 0``, which occurs for normalized
    trees (the corpus minimum maps to zero).
    """
    nodes = tree.nodes
    if tree.root not in nodes:
        raise TreeError(f"root {tree.root} is not a node")
    parent: dict[int, int] = {}
    for n in nodes.values():
        kids = n.children()
        if len(kids) == 2 and kids[0] == kids[1]:
            raise TreeError(f"node {n.id} lists child {kids[0]} twice")
        for c in kids:
            if c not in nodes:
                raise TreeError(f"node {n.id} references missing child {c}")
            if c == tree.root:
                raise TreeError(f"cycle: root {c} is a child of node {n.id}")
            if c in parent:
                raise TreeError(f"node {c} has multiple parents ({parent[c]}, {n.id})")
            parent[c] = n.id
    # every node reachable from root, no cycles
    seen = set()
    queue = deque([tree.root])
    while queue:
        i = queue.popleft()
        if i in seen:
            raise TreeError(f"cycle through node {i}")
        seen.add(i)
        queue.extend(nodes[i].children())
    if len(seen) != len(nodes):
        missing = sorted(set(nodes) - seen)
        raise TreeError(f"nodes unreachable from root (cycle or second root): {missing[:5]}")
    for n in nodes.values():
        vals = (n.x, n.y, n.z, n.r)
        if not all(math.isfinite(v) for v in vals):
            raise TreeError(f"node {n.id} has non-finite features")
        if positive_radius and not n.r > 0:
            raise TreeError(f"node {n.id} has non-positive radius {n.r}")
        if not positive_radius and n.r < 0:
            raise TreeError(f"node {n.id} has negative radius {n.r}")
        if n.left is not None and n.right is None:
            raise TreeError(f"node {n.id} has a lone left child")


def _as_int(value, what: str) -> int | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise TreeError(f"{what} must be an integer or null, got {value!r}")
    return value


def tree_from_dict(doc: dict, *, positive_radius: bool = True) -> VesselTree:
    if not isinstance(doc, dict) or "root" not in doc or "nodes" not in doc:
        raise TreeError("document needs 'root' and 'nodes'")
    root = _as_int(doc["root"], "root")
    if root is None:
        raise TreeError("missing root")
    nodes: dict[int, Node] = {}
    for rec in doc["nodes"]:
        try:
            nid = _as_int(rec["id"], "id")
            vals = [float(rec[k]) for k in ("x", "y", "z", "r")]
        except (KeyError, TypeError) as exc:
            raise TreeError(f"bad node record {rec!r}: {exc}") from None
        if nid in nodes:
            raise TreeError(f"duplicate node id {nid}")
        left = _as_int(rec.get("left"), "left")
        right = _as_int(rec.get("right"), "right")
        if left is not None and right is None:
            left, right = None, left
        nodes[nid] = Node(nid, *vals, left=left, right=right)
    tree = VesselTree(root, nodes)
    validate_tree(tree, positive_radius=positive_radius)
    return tree


def parse_tree(text: str, *, positive_radius: bool = True) -> VesselTree:
    """Parse and validate a tree JSON document.

    Raises
    ------
    TreeError
        On malformed JSON, duplicate ids, cycles, multiple parents, a missing
        root, or bad feature values.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TreeError(f"malformed JSON: {exc}") from None
    return tree_from_dict(doc, positive_radius=positive_radius)


def tree_to_dict(tree: VesselTree) -> dict:
    recs = []
    for n in tree.preorder():
        left, right = n.left, n.right
        if left is not None and right is None:
            left, right = None, left
        recs.append({"id": n.id, "x": n.x, "y": n.y, "z": n.z, "r": n.r, "left": left, "right": right})
    return {"root": tree.root, "nodes": recs}


def serialize_tree(tree: VesselTree) -> str:
    # json writes floats with repr(), which round-trips bit-exactly
    return json.dumps(tree_to_dict(tree), indent=1)


def _adjacency(tree: VesselTree) -> dict[int, list[int]]:
    adj: dict[int, list[int]] = {i: [] for i in tree.nodes}
    for n in tree.nodes.values():
        for c in n.children():
            adj[n.id].append(c)
            adj[c].append(n.id)
    return adj


def _eccentricities(adj: dict[int, list[int]]) -> dict[int, int]:
    """Tree depth (in nodes) obtained by rooting at each node, O(n) rerooting DP."""
    start = min(adj)
    order, parent = [start], {start: None}
    for i in order:
        for j in adj[i]:
            if j != parent[i]:
                parent[j] = i
                order.append(j)
    down = {}  # longest downward path, in edges
    for i in reversed(order):
        down[i] = max((down[j] + 1 for j in adj[i] if j != parent[i]), default=0)
    up = {start: 0}  # longest path that leaves i through its parent
    for i in order:
        kids = [j for j in adj[i] if j != parent[i]]
        for j in kids:
            sib = max((down[k] + 1 for k in kids if k != j), default=0)
            up[j] = 1 + max(up[i], sib)
    return {i: max(down[i], up[i]) + 1 for i in adj}


def reroot(tree: VesselTree, new_root: int) -> VesselTree:
    """Re-root at ``new_root`` keeping the undirected adjacency.

    Original child slots are kept where possible; the former parent fills the
    free slot and lone children are moved to the right slot.
    """
    if new_root == tree.root:
        return tree.copy()
    parents = tree.parents()
    path = [new_root]
    while parents[path[-1]] is not None:
        path.append(parents[path[-1]])
    out = tree.copy()
    # flip every edge on the path new_root -> old root
    for child, par in zip(path[:-1], path[1:]):
        pn = out.nodes[par]
        if pn.left == child:
            pn.left = None
        elif pn.right == child:
            pn.right = None
        cn = out.nodes[child]
        if cn.left is not None and cn.right is not None:
            raise TreeError(f"re-rooting at {new_root} gives node {child} three children")
        if cn.right is None:
            cn.right = par
        else:
            cn.left = par
    for n in out.nodes.values():
        if n.left is not None and n.right is None:
            n.left, n.right = None, n.left
    out.root = new_root
    return out


def rebalance_root(tree: VesselTree) -> VesselTree:
    """Re-root the tree where the maximum root-to-leaf depth is smallest.

    Only nodes with at most two neighbours are candidates, so the result stays
    binary. Ties go to the smallest node id.
    """
    if len(tree) == 1:
        return tree.copy()
    adj = _adjacency(tree)
    ecc = _eccentricities(adj)
    candidates = [i for i in adj if len(adj[i]) <= 2]
    if not candidates:
        raise TreeError("no binary re-rooting exists")
    best = min(candidates, key=lambda i: (ecc[i], i))
    return reroot(tree, best)


def trim_depth(tree: VesselTree, max_depth: int) -> VesselTree:
    """Drop every node deeper than ``max_depth`` (root depth = 1)."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    depths = tree.depths()
    keep = {i for i, d in depths.items() if d <= max_depth}
    out = VesselTree(tree.root, {})
    for i in keep:
        n = tree.nodes[i]
        left = n.left if n.left in keep else None
        right = n.right if n.right in keep else None
        out.nodes[i] = Node(n.id, n.x, n.y, n.z, n.r, left, right)
    return out


def compute_stats(tree: VesselTree) -> TreeStats:
    size: dict[int, int] = {}
    label: dict[int, int] = {}
    for n in tree.postorder():
        kids = n.children()
        label[n.id] = len(kids)
        size[n.id] = 1 + sum(size[c] for c in kids)
    return TreeStats(depth=tree.depth(), node_count=len(tree), subtree_size=size, class_label=label)
