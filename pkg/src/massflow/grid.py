"""Grid-aligned graph: raster cells as nodes, 8-neighbor-plus-self adjacency.

Node indexing is row-major, left to right and top to bottom, so node
j = row * n_cols + col. Every downstream consumer (LP columns, raster I/O,
arrow export) relies on this ordering; do not change it.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a rectangular raster of cells.

    cell_width is the horizontal cell size (x direction, along columns),
    cell_height the vertical one (y direction, along rows).  origin is the
    center of cell (0, 0), the top-left cell; y decreases with row index.
    """

    n_rows: int
    n_cols: int
    cell_width: float = 1.0
    cell_height: float = 1.0
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.cell_width <= 0 or self.cell_height <= 0:
            raise ValueError("cell sizes must be positive")

    def node_count(self):
        return self.n_rows * self.n_cols

    def node_coords(self):
        """(N, 2) array of cell-center coordinates in node order."""
        r, c = np.divmod(np.arange(self.node_count()), self.n_cols)
        x = self.origin[0] + c * self.cell_width
        y = self.origin[1] - r * self.cell_height
        return np.column_stack([x, y])


@dataclass(frozen=True, eq=False)
class GraphTopology:
    """Adjacency of the grid graph in flattened CSR-like form.

    neighbors[offsets[j]:offsets[j+1]] is the sorted list s_j of nodes
    reachable from j in one step: j itself plus its <= 8 grid neighbors.
    """

    spec: GridSpec
    neighbors: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)

    def neighbor_list(self, j):
        return self.neighbors[self.offsets[j] : self.offsets[j + 1]]

    def arc_count(self):
        return len(self.neighbors)


def build_topology(spec: GridSpec) -> GraphTopology:
    """Enumerate, per node, itself plus all in-bounds 8-neighbors.

    Lists are ordered node by node and, within a node, by ascending node
    index, so the flattened array matches the variable ordering of the
    adjacent-only transport problem.
    """
    nr, nc = spec.n_rows, spec.n_cols
    rows, cols = np.divmod(np.arange(nr * nc), nc)
    chunks = []
    counts = np.empty(nr * nc, dtype=np.int64)
    # 3x3 stencil offsets; (0,0) keeps the self-loop in the list
    dr = np.array([-1, -1, -1, 0, 0, 0, 1, 1, 1])
    dc = np.array([-1, 0, 1, -1, 0, 1, -1, 0, 1])
    rr = rows[:, None] + dr[None, :]
    cc = cols[:, None] + dc[None, :]
    ok = (rr >= 0) & (rr < nr) & (cc >= 0) & (cc < nc)
    idx = rr * nc + cc
    for j in range(nr * nc):
        nb = np.sort(idx[j][ok[j]])
        chunks.append(nb)
        counts[j] = len(nb)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return GraphTopology(spec=spec, neighbors=np.concatenate(chunks), offsets=offsets)


def movement_count(spec: GridSpec) -> int:
    """Closed-form size of the adjacent-only variable vector.

    Decomposes the grid into 4 corners (4 moves each), edge nodes (6 each)
    and interior nodes (9 each); undefined below 2x2.
    """
    nr, nc = spec.n_rows, spec.n_cols
    if nr < 2 or nc < 2:
        raise ValueError("movement_count requires a grid of at least 2x2")
    n = nr * nc
    edge = 2 * (nr + nc - 4)  # non-corner boundary nodes
    return 16 + 12 * (nr + nc - 4) + 9 * (n - 4 - edge)
