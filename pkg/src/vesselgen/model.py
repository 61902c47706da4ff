"""Recursive variational autoencoder over binary vessel trees.

The encoder folds a tree bottom-up into one 128-d code; a Gaussian bottleneck
produces ``z``; the decoder unfolds ``z`` top-down, predicting per-node
features and a 3-way child-count class.

Training runs on a :class:`TreeBatch`, which stacks the nodes of several
trees and processes one tree level at a time (heights for the encoder, depths
for the decoder). Every layer is applied row-wise, so this is the same
computation as visiting the trees node by node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import DenseLayer, ParameterStore, dense_backward, dense_forward, init_parameters
from .tree import Node, TreeStats, VesselTree, compute_stats

LATENT_DIM = 128
NUM_CLASSES = 3
DEFAULT_ALPHA = 0.3
DEFAULT_GAMMA = 0.001

# (name, in_dim, out_dim); order is the checkpoint order
ARCHITECTURE: list[tuple[str, int, int]] = [
    ("enc.fc1", 4, 512),
    ("enc.fc2", 512, 128),
    ("enc.right_fc1", 128, 512),
    ("enc.right_fc2", 512, 128),
    ("enc.left_fc1", 128, 512),
    ("enc.left_fc2", 512, 128),
    ("enc.fc3", 256, 128),
    ("sample_enc.fc1", 128, 512),
    ("sample_enc.fc2mu", 512, 128),
    ("sample_enc.fc2var", 512, 128),
    ("sample_dec.fc1", 128, 256),
    ("sample_dec.fc2", 256, 128),
    ("dec.fc1", 128, 256),
    ("dec.fc_left1", 256, 256),
    ("dec.fc_left2", 256, 128),
    ("dec.fc_right1", 256, 256),
    ("dec.fc_right2", 256, 128),
    ("dec.fc2", 256, 128),
    ("dec.fc3", 128, 4),
    ("cls.fc1", 128, 256),
    ("cls.fc2", 256, 256),
    ("cls.fc3", 256, 3),
]

_SIDES = ("left", "right")


def init_model(seed: int) -> ParameterStore:
    return init_parameters(ARCHITECTURE, seed)


def _fwd(store, name, x, act="leaky_relu"):
    return dense_forward(store.layers[name], x, act)


def _bwd(store, name, cache, up):
    return dense_backward(store.layers[name], cache, up)


@dataclass
class LossBreakdown:
    recon: float
    topo: float
    kl: float
    total: float
    alpha: float = DEFAULT_ALPHA
    gamma: float = DEFAULT_GAMMA


def loss_total(recon: float, topo: float, kl: float, alpha: float = DEFAULT_ALPHA, gamma: float = DEFAULT_GAMMA) -> LossBreakdown:
    return LossBreakdown(recon, topo, kl, recon + alpha * topo + gamma * kl, alpha, gamma)


def loss_kl(mu: np.ndarray, log_var: np.ndarray) -> float:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over dimensions."""
    mu, log_var = np.asarray(mu, dtype=np.float64), np.asarray(log_var, dtype=np.float64)
    return float(-0.5 * np.sum(1.0 + log_var - mu * mu - np.exp(log_var)))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# ---------------------------------------------------------------------------
# batched tree layout


@dataclass
class TreeBatch:
    """Nodes of several trees stacked into arrays.

    Rows follow each tree's preorder, trees concatenated. ``left``/``right``
    hold row indices (-1 when absent).
    """

    trees: list[VesselTree]
    node_ids: list[list[int]]
    features: np.ndarray
    left: np.ndarray
    right: np.ndarray
    tree_index: np.ndarray
    roots: np.ndarray
    labels: np.ndarray
    subtree_weight: np.ndarray  # subtree_size / node_count
    node_counts: np.ndarray
    enc_levels: list[np.ndarray] = field(repr=False)
    dec_levels: list[np.ndarray] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.trees)

    @classmethod
    def from_trees(cls, trees: Sequence[VesselTree]) -> TreeBatch:
        ids, feats, left, right, tix, roots = [], [], [], [], [], []
        labels, weights, counts, depth, height = [], [], [], [], []
        for t_i, tree in enumerate(trees):
            order = [n.id for n in tree.preorder()]
            base = len(feats)
            row = {nid: base + k for k, nid in enumerate(order)}
            stats = compute_stats(tree)
            depths = tree.depths()
            h: dict[int, int] = {}
            for n in tree.postorder():
                h[n.id] = 1 + max((h[c] for c in n.children()), default=-1)
            roots.append(row[tree.root])
            counts.append(len(order))
            ids.append(order)
            for nid in order:
                n = tree.nodes[nid]
                feats.append(n.features)
                left.append(row[n.left] if n.left is not None else -1)
                right.append(row[n.right] if n.right is not None else -1)
                tix.append(t_i)
                labels.append(stats.class_label[nid])
                weights.append(stats.subtree_size[nid] / stats.node_count)
                depth.append(depths[nid] - 1)
                height.append(h[nid])
        depth_a, height_a = np.array(depth), np.array(height)
        return cls(
            trees=list(trees),
            node_ids=ids,
            features=np.array(feats, dtype=np.float64).reshape(-1, 4),
            left=np.array(left, dtype=np.int64),
            right=np.array(right, dtype=np.int64),
            tree_index=np.array(tix, dtype=np.int64),
            roots=np.array(roots, dtype=np.int64),
            labels=np.array(labels, dtype=np.int64),
            subtree_weight=np.array(weights, dtype=np.float64),
            node_counts=np.array(counts, dtype=np.int64),
            enc_levels=[np.flatnonzero(height_a == k) for k in range(height_a.max() + 1)],
            dec_levels=[np.flatnonzero(depth_a == k) for k in range(depth_a.max() + 1)],
        )

    def children(self, side: str) -> np.ndarray:
        return self.left if side == "left" else self.right


# ---------------------------------------------------------------------------
# forward passes (batched). Each returns outputs plus the caches its
# backward counterpart needs.


def _encode(store: ParameterStore, b: TreeBatch):
    n = len(b.features)
    a1, c1 = _fwd(store, "enc.fc1", b.features)
    phi, c2 = _fwd(store, "enc.fc2", a1)
    code = np.zeros((n, LATENT_DIM))
    agg = np.zeros((n, LATENT_DIM))
    levels = []
    for idx in b.enc_levels:
        sides = {}
        for side in _SIDES:
            kids_of = b.children(side)
            has = idx[kids_of[idx] >= 0]
            if has.size:
                kids = kids_of[has]
                h, ca = _fwd(store, f"enc.{side}_fc1", code[kids])
                g, cb = _fwd(store, f"enc.{side}_fc2", h)
                agg[has] += g
                sides[side] = (has, kids, ca, cb)
        out, c3 = _fwd(store, "enc.fc3", np.concatenate([phi[idx], agg[idx]], axis=1))
        code[idx] = out
        levels.append((idx, sides, c3))
    return code[b.roots], (c1, c2, levels, n)


def _encode_backward(store: ParameterStore, b: TreeBatch, caches, d_root: np.ndarray) -> None:
    c1, c2, levels, n = caches
    d_code = np.zeros((n, LATENT_DIM))
    d_code[b.roots] = d_root
    d_phi = np.zeros((n, LATENT_DIM))
    d_agg = np.zeros((n, LATENT_DIM))
    for idx, sides, c3 in reversed(levels):
        d_cat = _bwd(store, "enc.fc3", c3, d_code[idx])
        d_phi[idx] += d_cat[:, :LATENT_DIM]
        d_agg[idx] = d_cat[:, LATENT_DIM:]
        for side in reversed(_SIDES):
            if side in sides:
                has, kids, ca, cb = sides[side]
                d_h = _bwd(store, f"enc.{side}_fc2", cb, d_agg[has])
                d_code[kids] += _bwd(store, f"enc.{side}_fc1", ca, d_h)
    d_a1 = _bwd(store, "enc.fc2", c2, d_phi)
    _bwd(store, "enc.fc1", c1, d_a1)


def _sample(store: ParameterStore, code: np.ndarray, noise: np.ndarray):
    h, c1 = _fwd(store, "sample_enc.fc1", code)
    mu, cmu = _fwd(store, "sample_enc.fc2mu", h, "identity")
    log_var, clv = _fwd(store, "sample_enc.fc2var", h, "identity")
    std = np.exp(0.5 * log_var)
    z = mu + std * noise
    return z, mu, log_var, (c1, cmu, clv, std, noise)


def _sample_backward(store, caches, d_z, d_mu, d_log_var) -> np.ndarray:
    c1, cmu, clv, std, noise = caches
    d_mu = d_mu + d_z
    d_log_var = d_log_var + d_z * noise * 0.5 * std
    d_h = _bwd(store, "sample_enc.fc2mu", cmu, d_mu) + _bwd(store, "sample_enc.fc2var", clv, d_log_var)
    return _bwd(store, "sample_enc.fc1", c1, d_h)


def _root_code(store: ParameterStore, z: np.ndarray):
    g1, c1 = _fwd(store, "sample_dec.fc1", z)
    r, c2 = _fwd(store, "sample_dec.fc2", g1)
    return r, (c1, c2)


def _root_code_backward(store, caches, d_r) -> np.ndarray:
    c1, c2 = caches
    return _bwd(store, "sample_dec.fc1", c1, _bwd(store, "sample_dec.fc2", c2, d_r))


def _decode_forced(store: ParameterStore, b: TreeBatch, root_codes: np.ndarray):
    """Teacher-forced decoding: recurse exactly into the children the target has."""
    n = len(b.features)
    dcode = np.zeros((n, LATENT_DIM))
    dcode[b.roots] = root_codes
    feats = np.zeros((n, 4))
    logits = np.zeros((n, NUM_CLASSES))
    levels = []
    for idx in b.dec_levels:
        c = dcode[idx]
        h, ch = _fwd(store, "dec.fc1", c)
        f2, cf2 = _fwd(store, "dec.fc2", h)
        f3, cf3 = _fwd(store, "dec.fc3", f2, "identity")
        k1, ck1 = _fwd(store, "cls.fc1", c)
        k2, ck2 = _fwd(store, "cls.fc2", k1)
        k3, ck3 = _fwd(store, "cls.fc3", k2, "identity")
        feats[idx] = f3
        logits[idx] = k3
        sides = {}
        for side in _SIDES:
            kids_of = b.children(side)
            mask = kids_of[idx] >= 0
            if mask.any():
                a, ca = _fwd(store, f"dec.fc_{side}1", h[mask])
                out, cb = _fwd(store, f"dec.fc_{side}2", a)
                kids = kids_of[idx][mask]
                dcode[kids] = out
                sides[side] = (mask, kids, ca, cb)
        levels.append((idx, h.shape, sides, ch, cf2, cf3, ck1, ck2, ck3))
    return feats, logits, (levels, n)


def _decode_forced_backward(store, b: TreeBatch, caches, d_feats, d_logits) -> np.ndarray:
    levels, n = caches
    d_dcode = np.zeros((n, LATENT_DIM))
    for idx, h_shape, sides, ch, cf2, cf3, ck1, ck2, ck3 in reversed(levels):
        d_h = np.zeros(h_shape)
        for side in reversed(_SIDES):
            if side in sides:
                mask, kids, ca, cb = sides[side]
                d_a = _bwd(store, f"dec.fc_{side}2", cb, d_dcode[kids])
                d_h[mask] += _bwd(store, f"dec.fc_{side}1", ca, d_a)
        d_f2 = _bwd(store, "dec.fc3", cf3, d_feats[idx])
        d_h += _bwd(store, "dec.fc2", cf2, d_f2)
        d_c = _bwd(store, "dec.fc1", ch, d_h)
        d_k2 = _bwd(store, "cls.fc3", ck3, d_logits[idx])
        d_k1 = _bwd(store, "cls.fc2", ck2, d_k2)
        d_c += _bwd(store, "cls.fc1", ck1, d_k1)
        d_dcode[idx] += d_c
    return d_dcode[b.roots]


@dataclass
class BatchResult:
    per_tree: list[LossBreakdown]
    mean: LossBreakdown
    features: np.ndarray
    logits: np.ndarray
    mu: np.ndarray
    log_var: np.ndarray
    correct: int
    nodes: int


def forward_backward(
    store: ParameterStore,
    batch: TreeBatch,
    noise: np.ndarray,
    class_weights: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    gamma: float = DEFAULT_GAMMA,
    backward: bool = True,
) -> BatchResult:
    """Loss of every tree in ``batch``; with ``backward`` the gradient of the
    batch-mean total loss is accumulated into ``store``.

    ``noise`` has shape (batch size, 128) and feeds the reparameterization.
    """
    noise = np.asarray(noise, dtype=np.float64).reshape(batch.size, LATENT_DIM)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    root_code, enc_c = _encode(store, batch)
    z, mu, log_var, samp_c = _sample(store, root_code, noise)
    r, root_c = _root_code(store, z)
    feats, logits, dec_c = _decode_forced(store, batch, r)

    tix, counts, B = batch.tree_index, batch.node_counts, batch.size
    err = feats - batch.features
    norms = np.sqrt(np.sum(err * err, axis=1))
    recon = np.bincount(tix, norms, minlength=B) / counts
    logp = log_softmax(logits)
    ce = -logp[np.arange(len(logits)), batch.labels]
    w = class_weights[batch.labels] * batch.subtree_weight
    topo = np.bincount(tix, w * ce, minlength=B)
    kl = -0.5 * np.sum(1.0 + log_var - mu * mu - np.exp(log_var), axis=1)
    per_tree = [loss_total(float(recon[i]), float(topo[i]), float(kl[i]), alpha, gamma) for i in range(B)]
    mean = loss_total(float(recon.mean()), float(topo.mean()), float(kl.mean()), alpha, gamma)
    correct = int(np.sum(np.argmax(logits, axis=1) == batch.labels))

    if backward:
        safe = np.where(norms > 0, norms, 1.0)
        d_feats = np.where(norms[:, None] > 0, err / safe[:, None], 0.0) / (counts[tix] * B)[:, None]
        onehot = np.zeros_like(logits)
        onehot[np.arange(len(logits)), batch.labels] = 1.0
        d_logits = (alpha / B) * w[:, None] * (np.exp(logp) - onehot)
        d_mu = (gamma / B) * mu
        d_log_var = (gamma / B) * 0.5 * (np.exp(log_var) - 1.0)
        d_r = _decode_forced_backward(store, batch, dec_c, d_feats, d_logits)
        d_z = _root_code_backward(store, root_c, d_r)
        d_code = _sample_backward(store, samp_c, d_z, d_mu, d_log_var)
        _encode_backward(store, batch, enc_c, d_code)

    return BatchResult(per_tree, mean, feats, logits, mu, log_var, correct, len(feats))


# ---------------------------------------------------------------------------
# single-tree API


def _check_normalized(tree: VesselTree, tol: float = 1e-6) -> None:
    f = tree.feature_matrix()
    if np.any(f < -tol) or np.any(f > 1 + tol):
        raise ValueError("tree features must be normalized to [0, 1]")


def encode_tree(tree: VesselTree, params: ParameterStore) -> np.ndarray:
    """Root code (128,) of a normalized tree."""
    _check_normalized(tree)
    code, _ = _encode(params, TreeBatch.from_trees([tree]))
    return code[0]


def latent_sample(code: np.ndarray, params: ParameterStore, noise: np.ndarray):
    """Return ``(z, mu, log_var)`` with ``z = mu + exp(log_var / 2) * noise``."""
    z, mu, log_var, _ = _sample(params, np.asarray(code, dtype=np.float64), np.asarray(noise, dtype=np.float64))
    return z, mu, log_var


def decode_root(z: np.ndarray, params: ParameterStore) -> np.ndarray:
    r, _ = _root_code(params, np.asarray(z, dtype=np.float64))
    return r


def decode_node(code: np.ndarray, params: ParameterStore):
    """Return ``(features, logits, left_code, right_code)`` for one node code."""
    code = np.asarray(code, dtype=np.float64)
    h, _ = _fwd(params, "dec.fc1", code)
    f2, _ = _fwd(params, "dec.fc2", h)
    feats, _ = _fwd(params, "dec.fc3", f2, "identity")
    k1, _ = _fwd(params, "cls.fc1", code)
    k2, _ = _fwd(params, "cls.fc2", k1)
    logits, _ = _fwd(params, "cls.fc3", k2, "identity")
    codes = []
    for side in _SIDES:
        a, _ = _fwd(params, f"dec.fc_{side}1", h)
        c, _ = _fwd(params, f"dec.fc_{side}2", a)
        codes.append(c)
    return feats, logits, codes[0], codes[1]


@dataclass
class DecodedTree:
    features: dict[int, np.ndarray]  # node id -> normalized 4-vector
    logits: dict[int, np.ndarray]
    topology: VesselTree
    visits: int = 0


def decode_tree_teacher_forced(z: np.ndarray, target: VesselTree, params: ParameterStore) -> DecodedTree:
    """Decode ``z`` following the topology of ``target``."""
    out = DecodedTree({}, {}, target)

    def visit(node: Node, code: np.ndarray) -> None:
        feats, logits, lcode, rcode = decode_node(code, params)
        out.features[node.id] = feats
        out.logits[node.id] = logits
        out.visits += 1
        if node.left is not None:
            visit(target.nodes[node.left], lcode)
        if node.right is not None:
            visit(target.nodes[node.right], rcode)

    visit(target.nodes[target.root], decode_root(z, params))
    return out


def decode_tree_free(z: np.ndarray, params: ParameterStore, max_depth: int = 10) -> VesselTree:
    """Grow a tree from ``z`` with the classifier choosing each node's
    child count (0 leaf, 1 right child only, 2 both). Nodes at ``max_depth``
    become leaves; features are clamped to [0, 1]."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    nodes: dict[int, Node] = {}
    queue = [(0, decode_root(z, params), 1)]
    while queue:
        nid, code, depth = queue.pop(0)
        feats, logits, lcode, rcode = decode_node(code, params)
        f = np.clip(feats, 0.0, 1.0)
        node = Node(nid, *map(float, f))
        nodes[nid] = node
        label = int(np.argmax(logits)) if depth < max_depth else 0
        if label == 2:
            node.left = len(nodes) + len(queue)
            queue.append((node.left, lcode, depth + 1))
        if label >= 1:
            node.right = len(nodes) + len(queue)
            queue.append((node.right, rcode, depth + 1))
    return VesselTree(0, nodes)


def loss_recon(decoded: DecodedTree, target: VesselTree) -> float:
    """Mean over nodes of the Euclidean reconstruction error."""
    if set(decoded.features) != set(target.nodes):
        raise ValueError("decoded tree does not align with the target")
    errs = [np.linalg.norm(decoded.features[i] - target.nodes[i].features) for i in target.nodes]
    return float(np.mean(errs))


def loss_topo(decoded: DecodedTree, target: VesselTree, stats: TreeStats, class_weights: np.ndarray) -> float:
    """Class- and subtree-weighted cross entropy of the child-count classifier."""
    total = 0.0
    for i in target.nodes:
        c = stats.class_label[i]
        if c not in (0, 1, 2):
            raise ValueError(f"invalid class label {c}")
        logp = log_softmax(np.asarray(decoded.logits[i], dtype=np.float64))
        total += class_weights[c] * (stats.subtree_size[i] / stats.node_count) * -logp[c]
    return float(total)
