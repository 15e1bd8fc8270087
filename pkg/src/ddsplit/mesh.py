"""Conforming P1 meshes for nonoverlapping decompositions.

Supported geometries: 1D intervals split at interior cut points (point
interfaces) and 2D axis-aligned strip decompositions of a rectangle
(straight vertical interfaces). Subdomain meshes are built so interface
node coordinates agree *bitwise* across the two sides, which lets the
merge step match nodes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import SparseSpd

# Energy-Gram shift for subdomains without Dirichlet contact: K + delta * M.
# Without it the Dirichlet energy is only a seminorm on such a subdomain.
FLOATING_REGULARIZATION = 1e-10

IfaceKey = tuple[int, int]


@dataclass
class SubdomainGrid:
    """One subdomain's P1 mesh plus boundary bookkeeping.

    ``interface_nodes`` maps a global interface key (i, j), i < j, to the
    ordered local node ids lying on that interface. In 2D the list includes
    the two pinned endpoint nodes (they are shared mesh nodes); their trace
    rows are zero, so the matching dual components never move.
    """

    index: int
    nodes: np.ndarray                      # (n_nodes, dim)
    elements: np.ndarray                   # (n_el, dim+1) node ids
    dirichlet: np.ndarray                  # (n_nodes,) bool
    interface_nodes: dict[IfaceKey, np.ndarray] = field(default_factory=dict)
    floating: bool = False
    dof_index: np.ndarray = field(init=False)
    n_dofs: int = field(init=False)

    def __post_init__(self):
        self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        if not np.all(np.isfinite(self.nodes)):
            raise ValueError("grid has non-finite node coordinates")
        self.elements = np.asarray(self.elements, dtype=int)
        self.dirichlet = np.asarray(self.dirichlet, dtype=bool)
        if self.elements.size and (
            self.elements.min() < 0 or self.elements.max() >= len(self.nodes)
        ):
            raise ValueError("element refers to a node id out of range")
        self.dof_index = np.full(len(self.nodes), -1, dtype=int)
        free = np.flatnonzero(~self.dirichlet)
        self.dof_index[free] = np.arange(len(free))
        self.n_dofs = len(free)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


@dataclass
class Interface:
    """Shared boundary between subdomains ``left < right``.

    ``weights`` is the diagonal of the interface L2 Gram (trapezoid rule in
    2D, the single weight 1.0 for a 1D point interface); all entries are
    strictly positive.
    """

    left: int
    right: int
    coords: np.ndarray      # (n_iface_nodes, dim)
    weights: np.ndarray     # (n_iface_nodes,) > 0

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights <= 0.0):
            raise ValueError("interface weights must be positive")

    @property
    def key(self) -> IfaceKey:
        return (self.left, self.right)

    @property
    def n_nodes(self) -> int:
        return len(self.weights)

    def mass_matrix(self) -> SparseSpd:
        return SparseSpd(sp.diags(self.weights).tocsr())


@dataclass
class TraceMap:
    """Nodal restriction of one subdomain's free dofs onto an interface."""

    matrix: sp.csr_matrix   # (n_iface_nodes, n_dofs)


def trace_apply(tmap: TraceMap, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (tmap.matrix.shape[1],):
        raise ValueError(
            f"vector of shape {u.shape} does not match trace domain "
            f"dimension {tmap.matrix.shape[1]}"
        )
    return tmap.matrix @ u


@dataclass
class Partition:
    """Nonoverlapping decomposition: subdomains, interfaces, trace maps."""

    subdomains: list[SubdomainGrid]
    interfaces: dict[IfaceKey, Interface]
    traces: dict[tuple[IfaceKey, int], TraceMap]

    @property
    def m(self) -> int:
        return len(self.subdomains)

    @property
    def keys(self) -> list[IfaceKey]:
        return sorted(self.interfaces)

    def j_plus(self, i: int) -> list[int]:
        """Neighbors j with (i, j) in K, i.e. i is the designated left side."""
        return [b for (a, b) in self.keys if a == i]

    def j_minus(self, i: int) -> list[int]:
        """Neighbors j with (j, i) in K."""
        return [a for (a, b) in self.keys if b == i]

    def trace(self, i: int, j: int) -> TraceMap:
        """Trace map of subdomain i onto interface {i, j}."""
        key = (min(i, j), max(i, j))
        return self.traces[(key, i)]


def _trace_map(grid: SubdomainGrid, iface_nodes: np.ndarray) -> TraceMap:
    rows, cols, vals = [], [], []
    for r, node in enumerate(iface_nodes):
        d = grid.dof_index[node]
        if d >= 0:
            rows.append(r)
            cols.append(d)
            vals.append(1.0)
    mat = sp.csr_matrix(
        (vals, (rows, cols)), shape=(len(iface_nodes), grid.n_dofs)
    )
    return TraceMap(matrix=mat)


# ---------------------------------------------------------------------------
# 1D builders


def interval_grid(
    index: int,
    x_left: float,
    x_right: float,
    n_elements: int,
    dirichlet_left: bool,
    dirichlet_right: bool,
    iface_left: IfaceKey | None = None,
    iface_right: IfaceKey | None = None,
) -> SubdomainGrid:
    """Uniform P1 mesh of (x_left, x_right) with n_elements segments."""
    if n_elements < 2:
        raise ValueError("each subdomain needs at least 2 elements")
    if not x_right > x_left:
        raise ValueError("degenerate interval")
    xs = np.linspace(x_left, x_right, n_elements + 1)
    nodes = xs.reshape(-1, 1)
    elements = np.column_stack([np.arange(n_elements), np.arange(1, n_elements + 1)])
    dirichlet = np.zeros(n_elements + 1, dtype=bool)
    dirichlet[0] = dirichlet_left
    dirichlet[-1] = dirichlet_right
    interface_nodes: dict[IfaceKey, np.ndarray] = {}
    if iface_left is not None:
        interface_nodes[iface_left] = np.array([0])
    if iface_right is not None:
        interface_nodes[iface_right] = np.array([n_elements])
    floating = not dirichlet.any()
    return SubdomainGrid(
        index=index,
        nodes=nodes,
        elements=elements,
        dirichlet=dirichlet,
        interface_nodes=interface_nodes,
        floating=floating,
    )


def build_partition_1d(
    length: float,
    cuts: list[float],
    elements_per_subdomain: list[int],
    allow_floating: bool = False,
) -> Partition:
    """Split (0, length) at the given cuts into uniform subdomain meshes.

    Interior subdomains (present for 2+ cuts) have no Dirichlet contact and
    are rejected unless ``allow_floating`` is set, in which case their energy
    Gram is later regularized with ``FLOATING_REGULARIZATION`` times the mass.
    """
    if length <= 0:
        raise ValueError("length must be positive")
    cuts = [float(c) for c in cuts]
    bounds = [0.0] + cuts + [float(length)]
    if not all(bounds[i] < bounds[i + 1] for i in range(len(bounds) - 1)):
        raise ValueError(f"cuts must be strictly increasing inside (0, {length})")
    m = len(bounds) - 1
    if m < 2:
        raise ValueError("a decomposition needs at least one cut")
    if len(elements_per_subdomain) != m:
        raise ValueError(
            f"got {len(elements_per_subdomain)} element counts for {m} subdomains"
        )

    grids = []
    for i in range(m):
        iface_left = (i - 1, i) if i > 0 else None
        iface_right = (i, i + 1) if i < m - 1 else None
        grid = interval_grid(
            index=i,
            x_left=bounds[i],
            x_right=bounds[i + 1],
            n_elements=int(elements_per_subdomain[i]),
            dirichlet_left=(i == 0),
            dirichlet_right=(i == m - 1),
            iface_left=iface_left,
            iface_right=iface_right,
        )
        if grid.floating and not allow_floating:
            raise ValueError(
                f"subdomain {i} has no Dirichlet contact; pass "
                "allow_floating=True to regularize its energy Gram"
            )
        grids.append(grid)

    interfaces = {}
    traces = {}
    for i in range(m - 1):
        key = (i, i + 1)
        interfaces[key] = Interface(
            left=i,
            right=i + 1,
            coords=np.array([[bounds[i + 1]]]),
            weights=np.array([1.0]),
        )
        traces[(key, i)] = _trace_map(grids[i], grids[i].interface_nodes[key])
        traces[(key, i + 1)] = _trace_map(grids[i + 1], grids[i + 1].interface_nodes[key])
    return Partition(subdomains=grids, interfaces=interfaces, traces=traces)


def global_grid_1d(length: float, n_elements: int) -> SubdomainGrid:
    """Uniform mesh of (0, length) with Dirichlet conditions at both ends."""
    return interval_grid(
        index=-1,
        x_left=0.0,
        x_right=float(length),
        n_elements=n_elements,
        dirichlet_left=True,
        dirichlet_right=True,
    )


# ---------------------------------------------------------------------------
# 2D strip builders


def strip_grid(
    index: int,
    x_left: float,
    x_right: float,
    nx: int,
    height: float,
    ny: int,
    dirichlet_left: bool,
    dirichlet_right: bool,
    iface_left: IfaceKey | None = None,
    iface_right: IfaceKey | None = None,
) -> SubdomainGrid:
    """Structured triangulated strip [x_left, x_right] x [0, height].

    Each grid cell is split into two triangles along the lower-left to
    upper-right diagonal. Node ids run x-fastest, bottom row first.
    """
    if nx < 1 or ny < 2:
        raise ValueError("strip needs nx >= 1 and ny >= 2 cells")
    if not x_right > x_left or height <= 0:
        raise ValueError("degenerate strip")
    xs = np.linspace(x_left, x_right, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)            # row iy, column ix
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(ix, iy):
        return iy * (nx + 1) + ix

    tris = []
    for iy in range(ny):
        for ix in range(nx):
            a = nid(ix, iy)
            b = nid(ix + 1, iy)
            c = nid(ix, iy + 1)
            d = nid(ix + 1, iy + 1)
            tris.append((a, b, d))
            tris.append((a, d, c))
    elements = np.array(tris, dtype=int)

    dirichlet = np.zeros(len(nodes), dtype=bool)
    dirichlet[nodes[:, 1] == 0.0] = True
    dirichlet[nodes[:, 1] == ys[-1]] = True
    if dirichlet_left:
        dirichlet[nodes[:, 0] == xs[0]] = True
    if dirichlet_right:
        dirichlet[nodes[:, 0] == xs[-1]] = True

    interface_nodes: dict[IfaceKey, np.ndarray] = {}
    if iface_left is not None:
        interface_nodes[iface_left] = np.array([nid(0, iy) for iy in range(ny + 1)])
    if iface_right is not None:
        interface_nodes[iface_right] = np.array([nid(nx, iy) for iy in range(ny + 1)])
    return SubdomainGrid(
        index=index,
        nodes=nodes,
        elements=elements,
        dirichlet=dirichlet,
        interface_nodes=interface_nodes,
        floating=False,
    )


def build_partition_2d_strips(
    width: float,
    height: float,
    cuts: list[float],
    resolution,
) -> Partition:
    """Decompose (0,width) x (0,height) into vertical strips at the cuts.

    ``resolution`` is either one ``(nx, ny)`` pair applied to every strip or a
    list of per-strip pairs. The vertical cell count ``ny`` must agree across
    strips (conforming interfaces); a mismatch raises.
    """
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    cuts = [float(c) for c in cuts]
    bounds = [0.0] + cuts + [float(width)]
    if not all(bounds[i] < bounds[i + 1] for i in range(len(bounds) - 1)):
        raise ValueError(f"cuts must be strictly increasing inside (0, {width})")
    m = len(bounds) - 1
    if m < 2:
        raise ValueError("a decomposition needs at least one cut")

    res = list(resolution)
    if len(res) == 2 and all(np.isscalar(r) for r in res):
        res = [tuple(res)] * m
    if len(res) != m:
        raise ValueError(f"got {len(res)} resolutions for {m} strips")
    nys = {int(r[1]) for r in res}
    if len(nys) != 1:
        raise ValueError(
            f"nonconforming interface resolutions: ny values {sorted(nys)} differ"
        )
    ny = nys.pop()

    grids = []
    for i in range(m):
        iface_left = (i - 1, i) if i > 0 else None
        iface_right = (i, i + 1) if i < m - 1 else None
        grids.append(
            strip_grid(
                index=i,
                x_left=bounds[i],
                x_right=bounds[i + 1],
                nx=int(res[i][0]),
                height=height,
                ny=ny,
                dirichlet_left=(i == 0),
                dirichlet_right=(i == m - 1),
                iface_left=iface_left,
                iface_right=iface_right,
            )
        )

    ys = np.linspace(0.0, height, ny + 1)
    dy = height / ny
    weights = np.full(ny + 1, dy)
    weights[0] = dy / 2.0
    weights[-1] = dy / 2.0
    interfaces = {}
    traces = {}
    for i in range(m - 1):
        key = (i, i + 1)
        coords = np.column_stack([np.full(ny + 1, bounds[i + 1]), ys])
        interfaces[key] = Interface(
            left=i, right=i + 1, coords=coords, weights=weights.copy()
        )
        traces[(key, i)] = _trace_map(grids[i], grids[i].interface_nodes[key])
        traces[(key, i + 1)] = _trace_map(grids[i + 1], grids[i + 1].interface_nodes[key])
    return Partition(subdomains=grids, interfaces=interfaces, traces=traces)


def global_grid_2d(width: float, height: float, nx: int, ny: int) -> SubdomainGrid:
    """Structured triangulated rectangle with Dirichlet on the whole boundary."""
    return strip_grid(
        index=-1,
        x_left=0.0,
        x_right=float(width),
        nx=nx,
        height=float(height),
        ny=ny,
        dirichlet_left=True,
        dirichlet_right=True,
    )


# ---------------------------------------------------------------------------
# P1 assembly


def _element_geometry(grid: SubdomainGrid, el: np.ndarray):
    """Return (measure, local stiffness, local mass) for one element."""
    pts = grid.nodes[el]
    if grid.dim == 1:
        h = pts[1, 0] - pts[0, 0]
        if h <= 0:
            raise ValueError("degenerate element: nonpositive length")
        k = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
        mloc = h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
        return h, k, mloc
    x, y = pts[:, 0], pts[:, 1]
    # Signed doubled area; positive for counterclockwise node order.
    det = (x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0])
    area = det / 2.0
    if area <= 0:
        raise ValueError("degenerate element: nonpositive area")
    b = np.array([y[1] - y[2], y[2] - y[0], y[0] - y[1]])
    c = np.array([x[2] - x[1], x[0] - x[2], x[1] - x[0]])
    k = (np.outer(b, b) + np.outer(c, c)) / (4.0 * area)
    mloc = area / 12.0 * (np.ones((3, 3)) + np.eye(3))
    return area, k, mloc


def _assemble_full(grid: SubdomainGrid, which: str) -> sp.csr_matrix:
    n = grid.n_nodes
    rows, cols, vals = [], [], []
    for el in grid.elements:
        _, k, mloc = _element_geometry(grid, el)
        loc = k if which == "stiffness" else mloc
        for a in range(len(el)):
            for b in range(len(el)):
                rows.append(el[a])
                cols.append(el[b])
                vals.append(loc[a, b])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _reduce(full: sp.csr_matrix, grid: SubdomainGrid) -> sp.csr_matrix:
    free = np.flatnonzero(~grid.dirichlet)
    return full[free][:, free].tocsr()


def assemble_stiffness(grid: SubdomainGrid) -> SparseSpd:
    """P1 stiffness on the free dofs (Dirichlet rows/columns eliminated).

    SPD whenever the grid has Dirichlet contact; for floating grids use
    :func:`energy_gram`, which adds the mass shift.
    """
    full = _assemble_full(grid, "stiffness")
    return SparseSpd(_reduce(full, grid))


def assemble_mass(grid: SubdomainGrid) -> SparseSpd:
    """Consistent P1 mass matrix on the free dofs."""
    full = _assemble_full(grid, "mass")
    return SparseSpd(_reduce(full, grid))


def energy_gram(grid: SubdomainGrid) -> SparseSpd:
    """Gram matrix of the subdomain energy inner product.

    Equals the stiffness for grids with Dirichlet contact; floating grids get
    stiffness + FLOATING_REGULARIZATION * mass so the Gram stays SPD.
    """
    k = _assemble_full(grid, "stiffness")
    if grid.floating:
        k = k + FLOATING_REGULARIZATION * _assemble_full(grid, "mass")
    return SparseSpd(_reduce(k, grid))


def node_values(grid: SubdomainGrid, f) -> np.ndarray:
    """Evaluate a source term at every grid node.

    ``f`` may be a scalar constant, a callable of (x[, y]), or an array of
    nodal values.
    """
    if callable(f):
        return np.array([float(f(*pt)) for pt in grid.nodes])
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.n_nodes, float(arr))
    if arr.shape != (grid.n_nodes,):
        raise ValueError(
            f"nodal source has shape {arr.shape}, expected ({grid.n_nodes},)"
        )
    return arr


def assemble_load(grid: SubdomainGrid, f) -> np.ndarray:
    """Consistent load vector b_k = integral of (P1 interpolant of f) * phi_k,
    restricted to the free dofs."""
    vals = node_values(grid, f)
    if not np.all(np.isfinite(vals)):
        raise ValueError("source term evaluates to non-finite values")
    full = _assemble_full(grid, "mass") @ vals
    return full[~grid.dirichlet]


@dataclass
class GradientOp:
    """Elementwise P1 gradient: free-dof vector -> per-element gradient."""

    vols: np.ndarray              # (n_el,) element measures
    comps: list[sp.csr_matrix]    # one (n_el, n_dofs) matrix per coordinate

    def gradients(self, u: np.ndarray) -> list[np.ndarray]:
        return [d @ u for d in self.comps]


def gradient_operator(grid: SubdomainGrid) -> GradientOp:
    n_el = len(grid.elements)
    vols = np.zeros(n_el)
    data = [([], [], []) for _ in range(grid.dim)]
    for e, el in enumerate(grid.elements):
        pts = grid.nodes[el]
        if grid.dim == 1:
            h = pts[1, 0] - pts[0, 0]
            vols[e] = h
            coeffs = [np.array([-1.0, 1.0]) / h]
        else:
            x, y = pts[:, 0], pts[:, 1]
            det = (x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0])
            area = det / 2.0
            vols[e] = area
            coeffs = [
                np.array([y[1] - y[2], y[2] - y[0], y[0] - y[1]]) / det,
                np.array([x[2] - x[1], x[0] - x[2], x[1] - x[0]]) / det,
            ]
        for d in range(grid.dim):
            for a, node in enumerate(el):
                dof = grid.dof_index[node]
                if dof >= 0:
                    data[d][0].append(e)
                    data[d][1].append(dof)
                    data[d][2].append(coeffs[d][a])
    comps = [
        sp.csr_matrix((vals, (rows, cols)), shape=(n_el, grid.n_dofs))
        for rows, cols, vals in data
    ]
    return GradientOp(vols=vols, comps=comps)


# ---------------------------------------------------------------------------
# Merging a partition back into one global grid


@dataclass
class MergedPartition:
    """Global grid for the undecomposed domain plus local->global maps."""

    grid: SubdomainGrid
    node_maps: list[np.ndarray]   # per subdomain: local node id -> global node id
    dof_maps: list[np.ndarray]    # per subdomain: local dof -> global dof


def merge_partition(partition: Partition) -> MergedPartition:
    """Glue the subdomain meshes into one conforming global mesh.

    Nodes are matched by exact coordinates, which the builders guarantee at
    interfaces. The global Dirichlet set is the union of the subdomain ones,
    i.e. the outer boundary of the full domain.
    """
    coord_to_gid: dict[tuple, int] = {}
    g_nodes: list[tuple] = []
    g_dirichlet: list[bool] = []
    node_maps = []
    for grid in partition.subdomains:
        local_map = np.zeros(grid.n_nodes, dtype=int)
        for ell, pt in enumerate(grid.nodes):
            key = tuple(float(c) for c in pt)
            gid = coord_to_gid.get(key)
            if gid is None:
                gid = len(g_nodes)
                coord_to_gid[key] = gid
                g_nodes.append(key)
                g_dirichlet.append(bool(grid.dirichlet[ell]))
            else:
                g_dirichlet[gid] = g_dirichlet[gid] or bool(grid.dirichlet[ell])
            local_map[ell] = gid
        node_maps.append(local_map)

    g_elements = np.vstack(
        [nm[grid.elements] for grid, nm in zip(partition.subdomains, node_maps)]
    )
    merged = SubdomainGrid(
        index=-1,
        nodes=np.array(g_nodes),
        elements=g_elements,
        dirichlet=np.array(g_dirichlet),
        interface_nodes={},
        floating=False,
    )
    dof_maps = []
    for grid, nm in zip(partition.subdomains, node_maps):
        dm = np.full(grid.n_dofs, -1, dtype=int)
        for ell in range(grid.n_nodes):
            d = grid.dof_index[ell]
            if d >= 0:
                dm[d] = merged.dof_index[nm[ell]]
        dof_maps.append(dm)
    return MergedPartition(grid=merged, node_maps=node_maps, dof_maps=dof_maps)
