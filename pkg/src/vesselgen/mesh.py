"""Vessel tree to surface mesh.

Pipeline: split the tree into branches, resample each branch with a step that
shrinks with curvature and grows with radius, sweep square cross-sections
along rotation-minimizing frames, close bifurcations with a small box whose
faces the daughter tubes grow out of, then smooth with Catmull-Clark.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from ._kernels import cc_points, rmf_normals
from .tree import VesselTree

RING_ANGLES = np.pi / 4 + np.arange(4) * np.pi / 2
DEFAULT_SUBDIVISIONS = 4


class MeshError(ValueError):
    pass


@dataclass
class Branch:
    points: np.ndarray  # (n, 3)
    radii: np.ndarray  # (n,)
    start: int | None = None  # node ids at both ends
    end: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return len(self.points)

    def arc_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


def extract_branches(tree: VesselTree) -> list[Branch]:
    """Maximal chains between the root, bifurcations and leaves.

    A bifurcation node ends its parent branch and starts each child branch.
    """
    branches = []
    for n in tree.preorder():
        is_key = n.id == tree.root or len(n.children()) == 2
        if not is_key:
            continue
        for c in n.children():
            chain = [n.id, c]
            while len(tree.nodes[chain[-1]].children()) == 1:
                chain.append(tree.nodes[chain[-1]].children()[0])
            pts = np.array([tree.nodes[i].position for i in chain])
            rad = np.array([tree.nodes[i].r for i in chain])
            branches.append(Branch(pts, rad, chain[0], chain[-1]))
    return branches


@dataclass
class ResampleParams:
    k_r: float = 0.5
    k_c: float = 2.0
    s_min: float | None = None  # None: 0.05 * median radius
    s_max: float | None = None  # None: 2.0 * median radius

    def __post_init__(self):
        if not self.k_r > 0 or self.k_c < 0:
            raise ValueError("need k_r > 0 and k_c >= 0")
        if self.s_min is not None and self.s_max is not None and not 0 < self.s_min <= self.s_max:
            raise ValueError("need 0 < s_min <= s_max")

    def resolved(self, median_radius: float) -> ResampleParams:
        return replace(
            self,
            s_min=self.s_min if self.s_min is not None else 0.05 * median_radius,
            s_max=self.s_max if self.s_max is not None else 2.0 * median_radius,
        )


def discrete_curvature(points: np.ndarray) -> np.ndarray:
    """Turning angle over mean adjacent segment length at interior vertices;
    end vertices copy their neighbour."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    kappa = np.zeros(n)
    if n < 3:
        return kappa
    seg = np.diff(points, axis=0)
    length = np.linalg.norm(seg, axis=1)
    a, b = seg[:-1], seg[1:]
    cos = np.einsum("ij,ij->i", a, b) / (length[:-1] * length[1:])
    angle = np.arccos(np.clip(cos, -1.0, 1.0))
    kappa[1:-1] = angle / (0.5 * (length[:-1] + length[1:]))
    kappa[0], kappa[-1] = kappa[1], kappa[-2]
    return kappa


def resample_branch(branch: Branch, params: ResampleParams, *, substeps: int = 16) -> Branch:
    """Arc-length resampling with local step ``clamp(k_r r / (1 + k_c kappa), s_min, s_max)``.

    The number of segments is the ceiling of the integrated sampling density
    and samples are spaced evenly in that density, so both endpoints are kept
    exactly.
    """
    if params.s_min is None or params.s_max is None:
        params = params.resolved(float(np.median(branch.radii)))
    pts, rad = branch.points, branch.radii
    seglen = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(seglen <= 0):
        raise MeshError("branch has coincident consecutive points")
    s = np.concatenate([[0.0], np.cumsum(seglen)])
    kappa = discrete_curvature(pts)
    fine = np.concatenate([np.linspace(s[i], s[i + 1], substeps, endpoint=False) for i in range(len(seglen))] + [[s[-1]]])
    step = np.clip(params.k_r * np.interp(fine, s, rad) / (1.0 + params.k_c * np.interp(fine, s, kappa)), params.s_min, params.s_max)
    dens = 1.0 / step
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(fine))])
    nseg = max(1, math.ceil(cum[-1] - 1e-9))
    s_new = np.interp(np.linspace(0.0, cum[-1], nseg + 1), cum, fine)
    s_new[0], s_new[-1] = 0.0, s[-1]
    new_pts = np.column_stack([np.interp(s_new, s, pts[:, d]) for d in range(3)])
    new_pts[0], new_pts[-1] = pts[0], pts[-1]
    return Branch(new_pts, np.interp(s_new, s, rad), branch.start, branch.end)


# ---------------------------------------------------------------------------
# quad meshes


@dataclass
class QuadMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 4) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 4)

    def edge_table(self):
        """Unique undirected edges (E, 2), per-face edge ids (F, 4) and the
        number of faces on each edge."""
        a = self.faces
        b = np.roll(self.faces, -1, axis=1)
        pairs = np.sort(np.stack([a, b], axis=-1).reshape(-1, 2), axis=1)
        if len(pairs) == 0:
            return np.zeros((0, 2), np.int64), np.zeros((0, 4), np.int64), np.zeros(0, np.int64)
        n = np.int64(max(len(self.vertices), int(pairs.max()) + 1))
        keys, inverse, counts = np.unique(pairs[:, 0] * n + pairs[:, 1], return_inverse=True, return_counts=True)
        edges = np.stack([keys // n, keys % n], axis=1)
        return edges, inverse.reshape(-1, 4), counts

    def is_closed(self) -> bool:
        return bool(np.all(self.edge_table()[2] == 2))

    def euler_characteristic(self) -> int:
        edges = self.edge_table()[0]
        used = len(np.unique(self.faces)) if len(self.faces) else 0
        return used - len(edges) + len(self.faces)

    def connected_components(self) -> int:
        """Components of the face graph, faces linked through shared vertices."""
        if len(self.faces) == 0:
            return 0
        parent = np.arange(len(self.vertices))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for f in self.faces:
            r0 = find(f[0])
            for v in f[1:]:
                rv = find(v)
                if rv != r0:
                    parent[rv] = r0
        return len({find(v) for v in np.unique(self.faces)})

    def stats(self) -> dict:
        return {
            "vertices": int(len(self.vertices)),
            "faces": int(len(self.faces)),
            "euler_characteristic": int(self.euler_characteristic()),
            "closed": self.is_closed(),
        }


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if not n > 1e-12:
        raise MeshError("degenerate direction (zero-length segment)")
    return v / n


def _any_perpendicular(t: np.ndarray) -> np.ndarray:
    a = np.array([0.0, 0.0, 1.0]) if abs(t[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    return _unit(np.cross(t, a))


def _tangents(points: np.ndarray) -> np.ndarray:
    t = np.empty_like(points)
    t[0] = points[1] - points[0]
    t[-1] = points[-1] - points[-2]
    t[1:-1] = points[2:] - points[:-2]
    return np.array([_unit(v) for v in t])


@dataclass
class _Face:
    """A square port on a joint box: ring vertex ids, centre and frame."""

    ring: list[int]
    center: np.ndarray
    normal: np.ndarray
    u: np.ndarray


class _Builder:
    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.faces: list[tuple[int, int, int, int]] = []

    def ring(self, center, t, u, r) -> list[int]:
        v = np.cross(t, u)
        base = len(self.verts)
        for a in RING_ANGLES:
            self.verts.append(center + r * (math.cos(a) * u + math.sin(a) * v))
        return list(range(base, base + 4))

    def bridge(self, a: list[int], b: list[int]) -> None:
        for k in range(4):
            k1 = (k + 1) % 4
            self.faces.append((a[k], a[k1], b[k1], b[k]))

    def port(self, ids: list[int], center, normal, u_hint) -> _Face:
        """Order four box-face vertices counter-clockwise about ``normal``,
        starting at angle pi/4 from ``u_hint``."""
        u = _unit(u_hint - np.dot(u_hint, normal) * normal)
        v = np.cross(normal, u)
        ang = [math.atan2(np.dot(self.verts[i] - center, v), np.dot(self.verts[i] - center, u)) % (2 * math.pi) for i in ids]
        ordered = [i for _, i in sorted(zip(ang, ids))]
        return _Face(ordered, center, normal, u)


def _joint_box(b: _Builder, bottom: list[int] | None, c, t, u, r) -> list[_Face]:
    """Box around a bifurcation at ``c`` with axis ``t``; returns its free
    faces as ports. With ``bottom`` given, a parent tube already ends in the
    bottom face, otherwise that face is a free port too."""
    h = r / math.sqrt(2.0)
    ports = []
    if bottom is None:
        bottom = b.ring(c - h * t, t, u, r)
        ports.append(b.port(bottom, c - h * t, -t, u))
    top = b.ring(c + h * t, t, u, r)
    v = np.cross(t, u)
    ports.append(_Face(top, c + h * t, t, u))
    for k in range(4):
        phi = RING_ANGLES[k] + math.pi / 4
        n = math.cos(phi) * u + math.sin(phi) * v
        ids = [bottom[k], bottom[(k + 1) % 4], top[(k + 1) % 4], top[k]]
        ports.append(b.port(ids, c + h * n, n, t))
    return ports


def build_tube_mesh(tree: VesselTree, params: ResampleParams | None = None, ring_sides: int = 4) -> QuadMesh:
    """Closed quad surface around the tree's centerline.

    Each branch gets square rings on a rotation-minimizing frame. Every
    bifurcation becomes a box: the parent tube ends in its bottom face and
    each daughter grows from the free face best aligned with its direction.
    Unused box faces and leaf/root ends are capped with single quads.
    """
    if ring_sides != 4:
        raise ValueError("only square cross-sections (ring_sides=4) are supported")
    params = (params or ResampleParams()).resolved(float(np.median([n.r for n in tree.nodes.values()])))
    b = _Builder()
    branches = extract_branches(tree)
    if not branches:
        return QuadMesh(np.zeros((0, 3)), np.zeros((0, 4), np.int64))

    # merge coincident consecutive samples before resampling
    cleaned = []
    for br in branches:
        keep = np.concatenate([[True], np.linalg.norm(np.diff(br.points, axis=0), axis=1) > 1e-12])
        if keep.sum() < 2:
            raise MeshError(f"branch {br.start}->{br.end} has zero length")
        cleaned.append(resample_branch(Branch(br.points[keep], br.radii[keep], br.start, br.end), params))

    by_start: dict[int, list[Branch]] = {}
    for br in cleaned:
        by_start.setdefault(br.start, []).append(br)
    ports: dict[int, dict[int, _Face]] = {}  # joint id -> child end id -> port

    def open_joint(jid: int, bottom: list[int] | None, t, u) -> None:
        node = tree.nodes[jid]
        c, r = node.position, node.r
        faces = _joint_box(b, bottom, c, t, u, r)
        kids = by_start[jid]
        dirs = [_unit(br.points[1] - br.points[0]) for br in kids]
        score = np.array([[np.dot(d, f.normal) for f in faces] for d in dirs])
        assign = {}
        first = np.unravel_index(np.argmax(score), score.shape)
        assign[first[0]] = first[1]
        for ci in range(len(kids)):
            if ci not in assign:
                row = score[ci].copy()
                row[list(assign.values())] = -np.inf
                assign[ci] = int(np.argmax(row))
        used = set(assign.values())
        ports[jid] = {kids[ci].end: faces[fi] for ci, fi in assign.items()}
        for fi, f in enumerate(faces):
            if fi not in used:
                b.faces.append(tuple(f.ring))

    def sweep(br: Branch) -> None:
        pts, rad = br.points, br.radii
        tans = _tangents(pts)
        start_joint = len(tree.nodes[br.start].children()) == 2
        end_joint = len(tree.nodes[br.end].children()) == 2
        keep = np.ones(len(pts), dtype=bool)
        if start_joint:
            port = ports[br.start][br.end]
            hs = tree.nodes[br.start].r / math.sqrt(2.0)
            inner = np.einsum("ij,j->i", pts - pts[0], port.normal) < 1.25 * hs
            keep[1:-1] &= ~inner[1:-1]
        if end_joint:
            he = tree.nodes[br.end].r / math.sqrt(2.0)
            inner = np.einsum("ij,j->i", pts[-1] - pts, tans[-1]) < 1.25 * he
            keep[1:-1] &= ~inner[1:-1]
        idx = np.flatnonzero(keep)
        pos = pts[idx].copy()
        tan = tans[idx].copy()
        r = rad[idx].copy()
        if start_joint:
            pos[0], tan[0] = port.center, port.normal
            normal0 = port.u
        else:
            normal0 = _any_perpendicular(tan[0])
        if end_joint:
            pos[-1] = pts[-1] - he * tans[-1]
            r[-1] = tree.nodes[br.end].r
        normals = rmf_normals(pos, tan, normal0)
        rings = []
        for i in range(len(pos)):
            if i == 0 and start_joint:
                rings.append(port.ring)
            else:
                rings.append(b.ring(pos[i], tan[i], normals[i], r[i]))
        if not start_joint:
            b.faces.append(tuple(rings[0][::-1]))
        for a, c in zip(rings[:-1], rings[1:]):
            b.bridge(a, c)
        if end_joint:
            open_joint(br.end, rings[-1], tan[-1], normals[-1])
        else:
            b.faces.append(tuple(rings[-1]))

    root = tree.nodes[tree.root]
    if len(root.children()) == 2:
        kids = by_start[tree.root]
        d = [_unit(br.points[1] - br.points[0]) for br in kids]
        s = d[0] + d[1]
        t = _unit(s) if np.linalg.norm(s) > 1e-6 else _any_perpendicular(d[0])
        open_joint(tree.root, None, t, _any_perpendicular(t))

    # preorder over branches: a parent branch always precedes its children
    stack = list(reversed(by_start[tree.root]))
    while stack:
        br = stack.pop()
        sweep(br)
        stack.extend(reversed(by_start.get(br.end, [])))
    return QuadMesh(np.array(b.verts), np.array(b.faces, dtype=np.int64))


def catmull_clark(mesh: QuadMesh, iterations: int = DEFAULT_SUBDIVISIONS) -> QuadMesh:
    """Catmull-Clark subdivision of a closed quad mesh.

    New vertex order: repositioned originals, then edge points, then face
    points. Each face (a, b, c, d) becomes four quads with the same winding.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    for _ in range(iterations):
        if len(mesh.faces) == 0:
            return mesh
        edges, face_edges, counts = mesh.edge_table()
        if np.any(counts != 2):
            raise MeshError("mesh is not closed: found a boundary or non-manifold edge")
        order = np.argsort(face_edges.ravel(), kind="stable")
        edge_faces = (order // 4).reshape(-1, 2)
        new_v, edge_pts, face_pts = cc_points(mesh.vertices, mesh.faces, edges, edge_faces)
        nv, ne = len(mesh.vertices), len(edges)
        fp = nv + ne + np.arange(len(mesh.faces))
        e = nv + face_edges
        f = mesh.faces
        quads = np.stack(
            [
                np.stack([f[:, 0], e[:, 0], fp, e[:, 3]], axis=1),
                np.stack([f[:, 1], e[:, 1], fp, e[:, 0]], axis=1),
                np.stack([f[:, 2], e[:, 2], fp, e[:, 1]], axis=1),
                np.stack([f[:, 3], e[:, 3], fp, e[:, 2]], axis=1),
            ],
            axis=1,
        ).reshape(-1, 4)
        mesh = QuadMesh(np.concatenate([new_v, edge_pts, face_pts]), quads)
    return mesh


def export_obj(mesh: QuadMesh) -> str:
    lines = ["# vesselgen quad mesh", f"# {len(mesh.vertices)} vertices, {len(mesh.faces)} faces"]
    lines += ["v {:.9g} {:.9g} {:.9g}".format(*v) for v in mesh.vertices]
    lines += ["f {} {} {} {}".format(*(f + 1)) for f in mesh.faces]
    return "\n".join(lines) + "\n"


def parse_obj(text: str) -> QuadMesh:
    verts, faces = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
    return QuadMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 4))


def mesh_stats_json(mesh: QuadMesh) -> str:
    return json.dumps(mesh.stats(), indent=1)
