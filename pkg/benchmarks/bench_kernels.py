"""Time the numba and numpy paths of the mesh kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Inputs are realistic: a tube mesh of a default synthetic tree after two
subdivision steps (Catmull-Clark accumulation) and a long helix
(rotation-minimizing frames).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from vesselgen import _kernels
from vesselgen.corpus import SynthParams, generate_synthetic_tree
from vesselgen.mesh import build_tube_mesh, catmull_clark
from vesselgen.tree import rebalance_root


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def cc_inputs():
    tree = rebalance_root(generate_synthetic_tree(SynthParams(seed=0)))
    mesh = catmull_clark(build_tube_mesh(tree), 2)
    edges, face_edges, _ = mesh.edge_table()
    order = np.argsort(face_edges.ravel(), kind="stable")
    return mesh.vertices, mesh.faces, edges, (order // 4).reshape(-1, 2)


def rmf_inputs(n=20000):
    th = np.linspace(0, 40 * np.pi, n)
    pts = np.column_stack([np.cos(th), np.sin(th), 0.05 * th])
    tan = np.gradient(pts, axis=0)
    tan /= np.linalg.norm(tan, axis=1)[:, None]
    n0 = np.cross(tan[0], [0.0, 0.0, 1.0])
    return pts, tan, n0 / np.linalg.norm(n0)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    cases = [
        ("cc_points", cc_inputs(), _kernels._cc_points_numpy, getattr(_kernels, "_cc_points_jit", None)),
        ("rmf_normals", rmf_inputs(), _kernels._rmf_numpy, getattr(_kernels, "_rmf_jit", None)),
    ]
    print(f"{'kernel':<12} {'size':>9} {'numpy s':>10} {'numba s':>10} {'speedup':>8}")
    for name, inputs, np_fn, jit_fn in cases:
        size = len(inputs[1]) if name == "cc_points" else len(inputs[0])
        t_np = best_of(np_fn, inputs, args.repeat)
        if jit_fn is None:
            print(f"{name:<12} {size:>9} {t_np:>10.4f} {'n/a':>10} {'':>8}")
            continue
        jit_fn(*inputs)  # compile outside the timing
        t_jit = best_of(jit_fn, inputs, args.repeat)
        for a, b in zip(as_tuple(np_fn(*inputs)), as_tuple(jit_fn(*inputs))):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        print(f"{name:<12} {size:>9} {t_np:>10.4f} {t_jit:>10.4f} {t_np / t_jit:>7.1f}x")


if __name__ == "__main__":
    main()
