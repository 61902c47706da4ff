import numpy as np
import pytest

from vesselgen.tree import Node, VesselTree


def random_tree(rng: np.random.Generator, n: int, *, id_offset: int = 0) -> VesselTree:
    """Random binary tree with ``n`` nodes; ids are shuffled so they carry no
    structure. Positions are a random walk, radii in (0.1, 1)."""
    ids = rng.permutation(n) + id_offset
    nodes = {int(ids[0]): Node(int(ids[0]), 0.0, 0.0, 0.0, float(rng.uniform(0.1, 1)))}
    open_slots = [int(ids[0])]
    for k in range(1, n):
        par = nodes[open_slots[int(rng.integers(len(open_slots)))]]
        nid = int(ids[k])
        step = rng.normal(size=3)
        nodes[nid] = Node(nid, par.x + step[0], par.y + step[1], par.z + step[2], float(rng.uniform(0.1, 1)))
        if par.right is None:
            par.right = nid
        else:
            par.left = nid
            open_slots.remove(par.id)
        open_slots.append(nid)
    return VesselTree(int(ids[0]), nodes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
