"""Graph construction for spatial and view-level message passing.

Two graph families are built here: a KNN graph over the feature-grid
cells (spatial adjacency at patch granularity) and a small graph over
views (star topology anchored on the original view in the 1-shot case,
fully connected when each branch holds several real views).  Every node
carries a self-loop so attention always includes the node itself.

Graphs are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Graph:
    """Directed edge list over ``num_nodes`` nodes.

    Edge (src, dst) carries a message from src to dst; attention
    normalizes over each node's in-neighborhood.  Edges are unique.
    """

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    self_loops: bool = True
    _arrays: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.num_nodes <= 0:
            raise ValueError("graph needs at least one node")
        seen = set()
        for s, d in self.edges:
            if not (0 <= s < self.num_nodes and 0 <= d < self.num_nodes):
                raise ValueError(f"edge ({s}, {d}) out of range")
            if (s, d) in seen:
                raise ValueError(f"duplicate edge ({s}, {d})")
            seen.add((s, d))

    @property
    def src(self) -> np.ndarray:
        if "src" not in self._arrays:
            e = np.array(self.edges, dtype=np.intp).reshape(-1, 2)
            self._arrays["src"] = np.ascontiguousarray(e[:, 0])
            self._arrays["dst"] = np.ascontiguousarray(e[:, 1])
        return self._arrays["src"]

    @property
    def dst(self) -> np.ndarray:
        self.src
        return self._arrays["dst"]

    def dump(self) -> str:
        """Debug dump: one "src dst" line per edge, sorted lexicographically."""
        return "\n".join(sorted(f"{s} {d}" for s, d in self.edges)) + "\n"


def _with_self_loops(edges: list[tuple[int, int]], n: int) -> tuple:
    return tuple(edges + [(i, i) for i in range(n)])


def knn_spatial_graph(height: int, width: int, k: int) -> Graph:
    """KNN graph over grid cells at integer (row, col) coordinates.

    Nodes are numbered in row-major order.  Each node gets exactly ``k``
    outgoing edges to its k nearest distinct neighbors by Euclidean
    distance, with ties broken by the smaller row-major index, plus a
    self-loop.  Deterministic: two calls yield identical edge lists.
    """
    n = height * width
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, {n - 1}] for a {height}x{width} grid, got {k}")
    rows, cols = np.divmod(np.arange(n), width)
    coords = np.stack([rows, cols], axis=1).astype(np.float64)
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    # squared distances between integer grid points are exact, so a stable
    # sort breaks ties by the smaller row-major index
    order = np.argsort(d2, axis=1, kind="stable")
    edges = []
    for i in range(n):
        edges.extend((i, int(j)) for j in order[i, :k])
    return Graph(n, _with_self_loops(edges, n))


def star_view_graph(num_views: int) -> Graph:
    """Star topology over views with the original view (node 0) as hub.

    ``num_views`` counts all nodes (original plus pseudo-views), so the
    graph has bidirectional edges {(0, r), (r, 0)} for r = 1..R plus a
    self-loop on every node.
    """
    if num_views < 1:
        raise ValueError("need at least one view")
    edges = []
    for r in range(1, num_views):
        edges.append((0, r))
        edges.append((r, 0))
    return Graph(num_views, _with_self_loops(edges, num_views))


def full_view_graph(num_views: int) -> Graph:
    """Fully connected view graph: all ordered pairs plus self-loops."""
    if num_views < 1:
        raise ValueError("need at least one view")
    edges = [(i, j) for i in range(num_views) for j in range(num_views) if i != j]
    return Graph(num_views, _with_self_loops(edges, num_views))
