"""Hot loops of the mesh pipeline.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature and summation order. Numba is used when it imports and
``VESSELGEN_DISABLE_NUMBA`` is unset or ``0``; set it to ``1`` to force the
numpy path.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get("VESSELGEN_DISABLE_NUMBA", "0") in ("", "0")


# ---------------------------------------------------------------------------
# Catmull-Clark accumulation
#
# inputs: vertices (V, 3), faces (F, 4), edges (E, 2) with edge_faces (E, 2)
# output: (new vertex positions (V, 3), edge points (E, 3), face points (F, 3))


def _cc_points_numpy(vertices, faces, edges, edge_faces):
    nv = len(vertices)
    face_pts = vertices[faces].mean(axis=1)
    edge_pts = (vertices[edges[:, 0]] + vertices[edges[:, 1]] + face_pts[edge_faces[:, 0]] + face_pts[edge_faces[:, 1]]) / 4.0
    mids = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])

    f_sum = np.zeros((nv, 3))
    f_cnt = np.zeros(nv)
    np.add.at(f_sum, faces.ravel(), np.repeat(face_pts, 4, axis=0))
    np.add.at(f_cnt, faces.ravel(), 1.0)
    r_sum = np.zeros((nv, 3))
    valence = np.zeros(nv)
    ends = edges.T.ravel()  # all first endpoints, then all second endpoints
    np.add.at(r_sum, ends, np.concatenate([mids, mids]))
    np.add.at(valence, ends, 1.0)

    n = valence[:, None]
    F = f_sum / np.maximum(f_cnt, 1.0)[:, None]
    R = r_sum / np.maximum(valence, 1.0)[:, None]
    new_v = (F + 2.0 * R + (n - 3.0) * vertices) / np.maximum(n, 1.0)
    return new_v, edge_pts, face_pts


def _cc_points_loops(vertices, faces, edges, edge_faces):
    nv = vertices.shape[0]
    nf = faces.shape[0]
    ne = edges.shape[0]
    face_pts = np.zeros((nf, 3))
    for f in range(nf):
        for k in range(4):
            for d in range(3):
                face_pts[f, d] += vertices[faces[f, k], d]
        for d in range(3):
            face_pts[f, d] /= 4.0
    edge_pts = np.zeros((ne, 3))
    f_sum = np.zeros((nv, 3))
    f_cnt = np.zeros(nv)
    r_sum = np.zeros((nv, 3))
    valence = np.zeros(nv)
    for f in range(nf):
        for k in range(4):
            v = faces[f, k]
            for d in range(3):
                f_sum[v, d] += face_pts[f, d]
            f_cnt[v] += 1.0
    for side in range(2):
        for e in range(ne):
            a = edges[e, 0]
            b = edges[e, 1]
            v = edges[e, side]
            for d in range(3):
                r_sum[v, d] += 0.5 * (vertices[a, d] + vertices[b, d])
            valence[v] += 1.0
    for e in range(ne):
        a = edges[e, 0]
        b = edges[e, 1]
        f0 = edge_faces[e, 0]
        f1 = edge_faces[e, 1]
        for d in range(3):
            edge_pts[e, d] = (vertices[a, d] + vertices[b, d] + face_pts[f0, d] + face_pts[f1, d]) / 4.0
    new_v = np.empty((nv, 3))
    for v in range(nv):
        n = valence[v]
        fc = max(f_cnt[v], 1.0)
        nn = max(n, 1.0)
        for d in range(3):
            new_v[v, d] = (f_sum[v, d] / fc + 2.0 * r_sum[v, d] / nn + (n - 3.0) * vertices[v, d]) / nn
    return new_v, edge_pts, face_pts


# ---------------------------------------------------------------------------
# rotation-minimizing frames by double reflection
#
# inputs: positions (n, 3), unit tangents (n, 3), initial unit normal (3,)
# output: normals (n, 3), each perpendicular to its tangent


def _rmf_loops(positions, tangents, normal0):
    n = positions.shape[0]
    out = np.empty((n, 3))
    for d in range(3):
        out[0, d] = normal0[d]
    for i in range(n - 1):
        v1 = positions[i + 1] - positions[i]
        c1 = v1[0] * v1[0] + v1[1] * v1[1] + v1[2] * v1[2]
        r = out[i].copy()
        t = tangents[i].copy()
        if c1 > 1e-300:
            kr = 2.0 / c1 * (v1[0] * r[0] + v1[1] * r[1] + v1[2] * r[2])
            kt = 2.0 / c1 * (v1[0] * t[0] + v1[1] * t[1] + v1[2] * t[2])
            r = r - kr * v1
            t = t - kt * v1
        v2 = tangents[i + 1] - t
        c2 = v2[0] * v2[0] + v2[1] * v2[1] + v2[2] * v2[2]
        if c2 > 1e-300:
            k2 = 2.0 / c2 * (v2[0] * r[0] + v2[1] * r[1] + v2[2] * r[2])
            r = r - k2 * v2
        # re-orthonormalize against drift
        tn = tangents[i + 1]
        dot = r[0] * tn[0] + r[1] * tn[1] + r[2] * tn[2]
        r = r - dot * tn
        norm = np.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
        for d in range(3):
            out[i + 1, d] = r[d] / norm
    return out


def _rmf_numpy(positions, tangents, normal0):
    # the recurrence is sequential; vectorize only the per-step algebra
    n = len(positions)
    out = np.empty((n, 3))
    out[0] = normal0
    v1s = np.diff(positions, axis=0)
    c1s = np.einsum("ij,ij->i", v1s, v1s)
    for i in range(n - 1):
        v1, c1 = v1s[i], c1s[i]
        r, t = out[i], tangents[i]
        if c1 > 1e-300:
            r = r - (2.0 / c1) * np.dot(v1, r) * v1
            t = t - (2.0 / c1) * np.dot(v1, t) * v1
        v2 = tangents[i + 1] - t
        c2 = np.dot(v2, v2)
        if c2 > 1e-300:
            r = r - (2.0 / c2) * np.dot(v2, r) * v2
        r = r - np.dot(r, tangents[i + 1]) * tangents[i + 1]
        out[i + 1] = r / np.linalg.norm(r)
    return out


if HAVE_NUMBA:
    _cc_points_jit = njit(cache=True)(_cc_points_loops)
    _rmf_jit = njit(cache=True)(_rmf_loops)


def cc_points(vertices, faces, edges, edge_faces):
    args = (
        np.ascontiguousarray(vertices, dtype=np.float64),
        np.ascontiguousarray(faces, dtype=np.int64),
        np.ascontiguousarray(edges, dtype=np.int64),
        np.ascontiguousarray(edge_faces, dtype=np.int64),
    )
    if numba_enabled():
        return _cc_points_jit(*args)
    return _cc_points_numpy(*args)


def rmf_normals(positions, tangents, normal0):
    args = (
        np.ascontiguousarray(positions, dtype=np.float64),
        np.ascontiguousarray(tangents, dtype=np.float64),
        np.ascontiguousarray(normal0, dtype=np.float64),
    )
    if numba_enabled():
        return _rmf_jit(*args)
    return _rmf_numpy(*args)
