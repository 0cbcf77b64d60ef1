"""Uniform tensor-product grids and finite-difference building blocks.

Conventions used throughout the package:

* Node indexing is 0-based and covers the *full* grid, boundary nodes
  included.  A field is a 1-D float array with one value per grid node
  (2-D grids are flattened in row-major ``(i, j)`` order).
* Difference operators return full-length arrays whose boundary entries
  are zero: Dirichlet nodes carry no equation.  Interior views are taken
  explicitly through ``grid.interior``.
* Restriction to a reduced point set selects rows of the full grid by
  index, in the order the indices were chosen.  Linear combinations of
  restricted columns are always summed in ascending column order so that
  repeated runs are bit-reproducible.
"""

from dataclasses import dataclass, field

import numpy as np


class Grid1D:
    """Uniform 1-D grid with ``num_interior`` interior nodes.

    The domain ``[x_left, x_right]`` is split into ``num_interior + 1``
    equal intervals, giving ``num_interior + 2`` nodes including the two
    boundary nodes and spacing ``h = (x_right - x_left) / (num_interior + 1)``.
    """

    def __init__(self, x_left, x_right, num_interior):
        if num_interior < 1:
            raise ValueError(f"need at least one interior node, got {num_interior}")
        if not x_left < x_right:
            raise ValueError(f"degenerate domain [{x_left}, {x_right}]")
        self.x_left = float(x_left)
        self.x_right = float(x_right)
        self.num_interior = int(num_interior)
        self.h = (self.x_right - self.x_left) / (self.num_interior + 1)
        self.nodes = self.x_left + self.h * np.arange(self.num_interior + 2)
        self.nodes[-1] = self.x_right
        self.interior = np.arange(1, self.num_interior + 1)

    @property
    def num_nodes(self):
        return self.num_interior + 2

    @property
    def ndim(self):
        return 1

    def __repr__(self):
        return f"Grid1D([{self.x_left}, {self.x_right}], K={self.num_interior})"


class Grid2D:
    """Uniform 2-D tensor grid, flattened row-major over ``(i, j)``.

    Axis 0 (index ``i``, coordinate ``x1``) has ``k1`` interior nodes and
    spacing ``h1``; axis 1 (index ``j``, coordinate ``x2``) has ``k2``
    interior nodes and spacing ``h2``.  The flat index of node ``(i, j)``
    is ``i * (k2 + 2) + j``.
    """

    def __init__(self, bounds1, bounds2, k1, k2):
        if k1 < 1 or k2 < 1:
            raise ValueError(f"need at least one interior node per axis, got ({k1}, {k2})")
        (a1, b1), (a2, b2) = bounds1, bounds2
        if not (a1 < b1 and a2 < b2):
            raise ValueError(f"degenerate domain {bounds1} x {bounds2}")
        self.bounds1 = (float(a1), float(b1))
        self.bounds2 = (float(a2), float(b2))
        self.k1 = int(k1)
        self.k2 = int(k2)
        self.h1 = (b1 - a1) / (k1 + 1)
        self.h2 = (b2 - a2) / (k2 + 1)
        self.nodes1 = a1 + self.h1 * np.arange(k1 + 2)
        self.nodes1[-1] = b1
        self.nodes2 = a2 + self.h2 * np.arange(k2 + 2)
        self.nodes2[-1] = b2
        ii, jj = np.meshgrid(np.arange(1, k1 + 1), np.arange(1, k2 + 1), indexing="ij")
        self.interior = (ii * (k2 + 2) + jj).ravel()

    @property
    def num_nodes(self):
        return (self.k1 + 2) * (self.k2 + 2)

    @property
    def shape(self):
        return (self.k1 + 2, self.k2 + 2)

    @property
    def ndim(self):
        return 2

    def flat_index(self, i, j):
        return i * (self.k2 + 2) + j

    def coords(self):
        """Node coordinate arrays (x1, x2), each of length ``num_nodes``."""
        x1, x2 = np.meshgrid(self.nodes1, self.nodes2, indexing="ij")
        return x1.ravel(), x2.ravel()

    def __repr__(self):
        return f"Grid2D({self.bounds1} x {self.bounds2}, K=({self.k1}, {self.k2}))"


def build_grid_1d(x_left, x_right, num_interior):
    """Uniform 1-D grid; thin constructor wrapper kept for symmetry."""
    return Grid1D(x_left, x_right, num_interior)


def build_grid_2d(bounds1, bounds2, k1, k2):
    return Grid2D(bounds1, bounds2, k1, k2)


@dataclass(frozen=True)
class RestrictionMap:
    """Ordered selection of full-grid node indices (rows of the grid).

    Order is meaningful: it is the order in which collocation points were
    chosen, and it fixes the row order of every restricted block.
    """

    indices: np.ndarray
    num_nodes: int = field(default=0)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        object.__setattr__(self, "indices", idx)
        if idx.ndim != 1:
            raise ValueError("indices must be one-dimensional")
        if len(np.unique(idx)) != idx.size:
            raise ValueError("restriction indices must be distinct")
        if self.num_nodes and idx.size and (idx.min() < 0 or idx.max() >= self.num_nodes):
            raise ValueError("restriction index out of grid bounds")

    def __len__(self):
        return self.indices.size


def restrict(vec, rmap):
    """Select entries of a full-grid vector: ``out[j] = vec[indices[j]]``."""
    vec = np.asarray(vec)
    if rmap.num_nodes and vec.shape[0] != rmap.num_nodes:
        raise ValueError(f"field length {vec.shape[0]} != grid size {rmap.num_nodes}")
    return vec[rmap.indices]


def _check_len(vec, grid):
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (grid.num_nodes,):
        raise ValueError(f"field shape {vec.shape} does not match grid with {grid.num_nodes} nodes")
    return vec


def apply_dx_central(vec, grid):
    """Centered first difference, zero at the boundary nodes.

    out[i] = (vec[i+1] - vec[i-1]) / (2h) for interior i.
    """
    vec = _check_len(vec, grid)
    out = np.zeros_like(vec)
    out[1:-1] = (vec[2:] - vec[:-2]) / (2.0 * grid.h)
    return out


def apply_dxx(vec, grid):
    """Centered second difference, zero at the boundary nodes.

    out[i] = (vec[i-1] - 2 vec[i] + vec[i+1]) / h^2 for interior i.
    """
    vec = _check_len(vec, grid)
    out = np.zeros_like(vec)
    out[1:-1] = (vec[:-2] - 2.0 * vec[1:-1] + vec[2:]) / (grid.h * grid.h)
    return out


def apply_laplacian_5pt(vec, grid):
    """Five-point Laplacian on a 2-D tensor grid, zero at boundary nodes.

    Dirichlet data is read from the boundary entries of ``vec``.
    """
    vec = _check_len(vec, grid)
    u = vec.reshape(grid.shape)
    out = np.zeros_like(u)
    out[1:-1, 1:-1] = (u[:-2, 1:-1] - 2.0 * u[1:-1, 1:-1] + u[2:, 1:-1]) / (grid.h1 * grid.h1) + (
        u[1:-1, :-2] - 2.0 * u[1:-1, 1:-1] + u[1:-1, 2:]
    ) / (grid.h2 * grid.h2)
    return out.ravel()
