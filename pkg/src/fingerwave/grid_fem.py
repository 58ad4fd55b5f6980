"""Structured P1 triangulation of the rectangle (0, L) x (0, H) and assembly.

Nodes are numbered row by row: node ``j * (nx + 1) + i`` sits at
``(y, z) = (i * L / nx, j * H / nz)``.  Cells left of ``y = L/2`` are split
along the rising diagonal and cells right of it along the falling one, so the
mesh maps onto itself under ``y -> L - y`` whenever ``nx`` is even.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

BOTTOM = 1
TOP = 2
LEFT = 4
RIGHT = 8

_LOCAL_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


class GridError(ValueError):
    """Invalid grid dimensions or mismatched field sizes."""


@dataclass(frozen=True)
class Grid:
    L: float
    H: float
    nx: int
    nz: int
    nodes: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    tags: np.ndarray = field(repr=False)
    # per-triangle geometry, cached at construction
    areas: np.ndarray = field(repr=False)
    grads: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def hy(self) -> float:
        return self.L / self.nx

    @property
    def hz(self) -> float:
        return self.H / self.nz

    @property
    def y(self) -> np.ndarray:
        return self.nodes[:, 0]

    @property
    def z(self) -> np.ndarray:
        return self.nodes[:, 1]

    def node(self, i: int, j: int) -> int:
        return j * (self.nx + 1) + i

    def row(self, j: int) -> np.ndarray:
        """Node indices of horizontal mesh line ``j`` ordered by increasing y."""
        start = j * (self.nx + 1)
        return np.arange(start, start + self.nx + 1)

    def nodes_tagged(self, tag: int) -> np.ndarray:
        return np.flatnonzero(self.tags & tag)

    def as_rows(self, values: np.ndarray) -> np.ndarray:
        """View nodal values as an ``(nz + 1, nx + 1)`` array, row ``j`` at z_j."""
        return np.asarray(values).reshape(self.nz + 1, self.nx + 1)

    def reflection(self) -> np.ndarray:
        """Permutation mapping each node to its mirror image under y -> L - y."""
        j, i = np.divmod(np.arange(self.n_nodes), self.nx + 1)
        return j * (self.nx + 1) + (self.nx - i)

    def check_field(self, values, name: str = "field") -> np.ndarray:
        arr = np.asarray(values, dtype=float)
        if arr.ndim == 0:
            return np.full(self.n_nodes, float(arr))
        if arr.shape != (self.n_nodes,):
            raise GridError(
                f"{name} has shape {arr.shape}, grid has {self.n_nodes} nodes"
            )
        return arr


def build_grid(L: float, H: float, nx: int, nz: int) -> Grid:
    if not (L > 0 and H > 0):
        raise GridError(f"domain sizes must be positive, got L={L}, H={H}")
    if int(nx) != nx or int(nz) != nz or nx < 1 or nz < 1:
        raise GridError(f"cell counts must be integers >= 1, got nx={nx}, nz={nz}")
    nx, nz = int(nx), int(nz)
    L, H = float(L), float(H)

    jj, ii = np.meshgrid(np.arange(nz + 1), np.arange(nx + 1), indexing="ij")
    nodes = np.column_stack([ii.ravel() * (L / nx), jj.ravel() * (H / nz)])
    # exact end points, no accumulated rounding
    nodes[ii.ravel() == nx, 0] = L
    nodes[jj.ravel() == nz, 1] = H

    tags = np.zeros(nodes.shape[0], dtype=np.int64)
    tags[jj.ravel() == 0] |= BOTTOM
    tags[jj.ravel() == nz] |= TOP
    tags[ii.ravel() == 0] |= LEFT
    tags[ii.ravel() == nx] |= RIGHT

    cj, ci = np.meshgrid(np.arange(nz), np.arange(nx), indexing="ij")
    ci, cj = ci.ravel(), cj.ravel()
    a = cj * (nx + 1) + ci
    b = a + 1
    c = b + nx + 1
    d = a + nx + 1
    rising = 2 * ci < nx
    tri = np.empty((2 * ci.size, 3), dtype=np.int64)
    tri[0::2] = np.where(rising[:, None], np.column_stack([a, b, c]), np.column_stack([a, b, d]))
    tri[1::2] = np.where(rising[:, None], np.column_stack([a, c, d]), np.column_stack([b, c, d]))

    areas, grads = _geometry(nodes, tri)
    if np.any(areas <= 0):
        raise GridError("triangulation produced a non-positive area")
    return Grid(L, H, nx, nz, nodes, tri, tags, areas, grads)


def _geometry(nodes: np.ndarray, tri: np.ndarray):
    p = nodes[tri]  # (nt, 3, 2)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    areas = 0.5 * det
    # gradient of barycentric coordinate k is rot90(opposite edge) / (2 * area)
    grads = np.empty((tri.shape[0], 3, 2))
    for k in range(3):
        q1 = p[:, (k + 1) % 3]
        q2 = p[:, (k + 2) % 3]
        grads[:, k, 0] = (q1[:, 1] - q2[:, 1]) / det
        grads[:, k, 1] = (q2[:, 0] - q1[:, 0]) / det
    return areas, grads


def element_average(grid: Grid, values) -> np.ndarray:
    """Per-triangle mean of the three vertex values (constants pass through)."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.triangles.shape[0], float(arr))
    arr = grid.check_field(arr)
    return arr[grid.triangles].mean(axis=1)


def _scatter(grid: Grid, local: np.ndarray) -> sp.csr_matrix:
    tri = grid.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = grid.n_nodes
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    return mat


def assemble_mass(grid: Grid, weight=1.0) -> sp.csr_matrix:
    """Consistent P1 mass matrix with elementwise-averaged weight."""
    w = element_average(grid, weight)
    if not np.all(np.isfinite(w)):
        raise GridError("mass weight must be finite")
    local = (w * grid.areas)[:, None, None] * _LOCAL_MASS
    return _scatter(grid, local)


def lumped_mass(grid: Grid) -> np.ndarray:
    """Row sums of the unit-weight consistent mass matrix, i.e. the integrals of the hats."""
    out = np.zeros(grid.n_nodes)
    np.add.at(out, grid.triangles.ravel(), np.repeat(grid.areas / 3.0, 3))
    return out


def assemble_stiffness(grid: Grid, coeff) -> sp.csr_matrix:
    a = element_average(grid, coeff)
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise GridError("stiffness coefficient must be finite and positive")
    g = grid.grads
    local = np.einsum("t,tid,tjd->tij", a * grid.areas, g, g)
    return _scatter(grid, local)


def assemble_dz(grid: Grid) -> sp.csr_matrix:
    """Matrix with entries ``D[i, j] = integral of (d/dz phi_j) * phi_i``."""
    dz = grid.grads[:, :, 1]  # (nt, 3): d/dz of each local basis function
    local = (grid.areas / 3.0)[:, None, None] * np.broadcast_to(dz[:, None, :], (dz.shape[0], 3, 3))
    return _scatter(grid, local)


def assemble_gravity_load(grid: Grid, coeff, g: float) -> np.ndarray:
    """Vector with entries ``integral of a * g * d/dz phi_i`` (a elementwise averaged)."""
    a = element_average(grid, coeff)
    contrib = (g * a * grid.areas)[:, None] * grid.grads[:, :, 1]
    out = np.zeros(grid.n_nodes)
    np.add.at(out, grid.triangles.ravel(), contrib.ravel())
    return out


def assemble_flux_sensitivity(grid: Grid, p, dcoeff, g: float) -> sp.csr_matrix:
    """Derivative of ``K(a) p + G(a)`` with respect to the nodal coefficient values.

    Entry ``[i, j]`` is ``d/da_j`` of ``integral of abar (grad p + g e_z) . grad phi_i``
    where ``abar`` is the vertex mean, scaled by ``dcoeff[j]`` (the chain-rule
    factor ``da_j / ds_j``).
    """
    p = grid.check_field(p, "pressure")
    da = grid.check_field(dcoeff, "coefficient derivative")
    tri = grid.triangles
    gp = element_gradients(grid, p)
    gp[:, 1] += g
    flux = np.einsum("tid,td->ti", grid.grads, gp) * grid.areas[:, None]
    local = flux[:, :, None] * (da[tri] / 3.0)[:, None, :]
    return _scatter(grid, local)


def element_gradients(grid: Grid, values) -> np.ndarray:
    """Elementwise-constant gradient ``(nt, 2)`` of a P1 field."""
    v = grid.check_field(values)
    return np.einsum("ti,tid->td", v[grid.triangles], grid.grads)


def nested_dissection(grid: Grid, leaf: int = 16) -> np.ndarray:
    """Node ordering from recursive bisection of the lattice by full grid lines.

    Each mesh edge joins nodes in adjacent rows and columns at most, so one
    grid line separates the two halves.  Separators are numbered after the
    parts they split, which keeps LU fill near ``O(n log n)``.
    """
    nx1, nz1 = grid.nx + 1, grid.nz + 1
    out: list[np.ndarray] = []
    stack = [(0, nx1, 0, nz1, False)]
    # explicit stack instead of recursion; a True flag marks a deferred separator
    while stack:
        i0, i1, j0, j1, is_sep = stack.pop()
        w, h = i1 - i0, j1 - j0
        if w <= 0 or h <= 0:
            continue
        if is_sep or w * h <= leaf:
            jj, ii = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1), indexing="ij")
            out.append((jj * nx1 + ii).ravel())
            continue
        if w >= h:
            m = (i0 + i1) // 2
            parts = [(i0, m, j0, j1, False), (m + 1, i1, j0, j1, False), (m, m + 1, j0, j1, True)]
        else:
            m = (j0 + j1) // 2
            parts = [(i0, i1, j0, m, False), (i0, i1, m + 1, j1, False), (i0, i1, m, m + 1, True)]
        stack.extend(reversed(parts))
    return np.concatenate(out)


@dataclass
class LinearSystem:
    """Reduced system ``matrix @ x = rhs`` over the free degrees of freedom.

    ``dof_map[node]`` is the system index of a node, or -1 for Dirichlet nodes.
    With a merged top, every Top node carries the same index.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dof_map: np.ndarray
    dirichlet_values: np.ndarray
    top_dof: int | None = None

    @property
    def n_dofs(self) -> int:
        return self.matrix.shape[0]

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Nodal vector from a reduced solution (Dirichlet values reinserted)."""
        full = self.dirichlet_values.copy()
        free = self.dof_map >= 0
        full[free] = np.asarray(x)[self.dof_map[free]]
        return full

    def restrict(self, full: np.ndarray) -> np.ndarray:
        """Reduced vector from a nodal one (top value taken from the first Top node)."""
        x = np.zeros(self.n_dofs)
        free = np.flatnonzero(self.dof_map >= 0)
        # reversed so the first node of a merged group wins
        x[self.dof_map[free[::-1]]] = np.asarray(full)[free[::-1]]
        return x


def dof_map_for(grid: Grid, dirichlet_nodes, merge_top: bool) -> tuple[np.ndarray, int | None]:
    n = grid.n_nodes
    fixed = np.zeros(n, dtype=bool)
    fixed[np.asarray(dirichlet_nodes, dtype=np.int64)] = True
    top = (grid.tags & TOP).astype(bool)
    if merge_top and np.any(fixed & top):
        raise GridError("Dirichlet nodes overlap the merged Top boundary")
    dof_map = np.full(n, -1, dtype=np.int64)
    ordinary = ~fixed & ~top if merge_top else ~fixed
    count = int(ordinary.sum())
    dof_map[ordinary] = np.arange(count)
    top_dof = None
    if merge_top:
        top_dof = count
        dof_map[top] = top_dof
    return dof_map, top_dof


def prolongation(dof_map: np.ndarray) -> sp.csr_matrix:
    free = np.flatnonzero(dof_map >= 0)
    n_dofs = int(dof_map.max()) + 1 if free.size else 0
    return sp.csr_matrix(
        (np.ones(free.size), (free, dof_map[free])), shape=(dof_map.size, n_dofs)
    )


def reduce_system(
    matrix,
    rhs,
    grid: Grid,
    dirichlet: dict[int, float] | tuple[np.ndarray, np.ndarray] | None = None,
    merge_top: bool = False,
    top_load: float = 0.0,
) -> LinearSystem:
    """Eliminate Dirichlet nodes and optionally merge the Top boundary into one DOF.

    ``dirichlet`` is either a ``{node: value}`` mapping or a pair of arrays
    ``(nodes, values)``.  ``top_load`` is added to the merged DOF's right-hand
    side.
    """
    n = grid.n_nodes
    matrix = sp.csr_matrix(matrix)
    rhs = np.asarray(rhs, dtype=float)
    if matrix.shape != (n, n) or rhs.shape != (n,):
        raise GridError("matrix/rhs sizes do not match the grid")
    if dirichlet is None:
        d_nodes, d_vals = np.empty(0, dtype=np.int64), np.empty(0)
    elif isinstance(dirichlet, dict):
        d_nodes = np.fromiter(dirichlet.keys(), dtype=np.int64, count=len(dirichlet))
        d_vals = np.fromiter(dirichlet.values(), dtype=float, count=len(dirichlet))
    else:
        d_nodes = np.asarray(dirichlet[0], dtype=np.int64)
        d_vals = np.broadcast_to(np.asarray(dirichlet[1], dtype=float), d_nodes.shape)

    dof_map, top_dof = dof_map_for(grid, d_nodes, merge_top)
    lifted = np.zeros(n)
    lifted[d_nodes] = d_vals
    P = prolongation(dof_map)
    red_mat = (P.T @ matrix @ P).tocsr()
    red_mat.sum_duplicates()
    red_rhs = P.T @ (rhs - matrix @ lifted)
    if merge_top:
        red_rhs[top_dof] += top_load
    return LinearSystem(red_mat, red_rhs, dof_map, lifted, top_dof)
