"""Synthetic graph families for desk-scale experiments.

Six structural families: cycles, stars, cliques, paths, grids and binary
trees. Node features are a one-hot of the (capped) node degree plus
Gaussian noise, so the structure is visible to a mean aggregator.
"""

from __future__ import annotations

import numpy as np

from .graphs import Dataset, GraphData

FAMILIES = ("cycle", "star", "clique", "path", "grid", "tree")
DEGREE_CAP = 5


def family_edges(family: str, rng: np.random.Generator, min_nodes: int = 6, max_nodes: int = 14) -> tuple[int, list[tuple[int, int]]]:
    """Node count and edge list of one random member of ``family``."""
    n = int(rng.integers(min_nodes, max_nodes + 1))
    if family == "cycle":
        return n, [(i, (i + 1) % n) for i in range(n)]
    if family == "star":
        return n, [(0, i) for i in range(1, n)]
    if family == "clique":
        n = int(rng.integers(4, 9))
        return n, [(i, j) for i in range(n) for j in range(i + 1, n)]
    if family == "path":
        return n, [(i, i + 1) for i in range(n - 1)]
    if family == "grid":
        rows = int(rng.integers(2, 4))
        cols = int(rng.integers(3, 5))
        idx = lambda r, c: r * cols + c  # noqa: E731
        edges = [(idx(r, c), idx(r, c + 1)) for r in range(rows) for c in range(cols - 1)]
        edges += [(idx(r, c), idx(r + 1, c)) for r in range(rows - 1) for c in range(cols)]
        return rows * cols, edges
    if family == "tree":
        return n, [((i - 1) // 2, i) for i in range(1, n)]
    raise ValueError(f"unknown family {family!r}")


def degree_features(n: int, edges: list[tuple[int, int]], rng: np.random.Generator, noise: float) -> np.ndarray:
    deg = np.zeros(n, dtype=np.int64)
    for u, v in edges:
        deg[u] += 1
        deg[v] += 1
    x = np.eye(DEGREE_CAP + 1)[np.minimum(deg, DEGREE_CAP)]
    return x + noise * rng.standard_normal(x.shape)


def make_family_dataset(
    per_family: int = 100,
    seed: int = 0,
    noise: float = 0.1,
    families: tuple[str, ...] = FAMILIES,
    edge_noise: float = 0.0,
) -> Dataset:
    """Class id ``i`` is ``families[i]``; with ``edge_noise`` each graph gets
    that fraction of its edge count added as random extra edges."""
    rng = np.random.default_rng(seed)
    graphs = []
    for cid, fam in enumerate(families):
        for _ in range(per_family):
            n, edges = family_edges(fam, rng)
            extra = int(round(edge_noise * len(edges)))
            edge_set = {tuple(sorted(e)) for e in edges}
            for _ in range(extra):
                u, v = rng.choice(n, size=2, replace=False)
                edge_set.add((int(min(u, v)), int(max(u, v))))
            edges = sorted(edge_set)
            feats = degree_features(n, edges, rng, noise)
            graphs.append(GraphData(n, np.array(edges, dtype=np.int64).reshape(-1, 2), feats, cid, len(graphs)))
    return Dataset(tuple(graphs), DEGREE_CAP + 1, "synthetic", "attributes")
