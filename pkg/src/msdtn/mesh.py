"""Coarse partitions, conforming fine meshes, restrictions and the coarse trace basis.

The domain is the unit interval or the unit square, split into equal
axis-aligned subdomains.  The fine mesh is a uniform grid (1D) or a
structured triangulation (2D) that is conforming with the partition, so
every restriction between dof subsets can be expressed with plain index
arrays.  All builders return plain data containers; nothing here is
mutated after construction, so the objects are safe to share between
threads.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

# Vertex classification flags.
INTERIOR = 0  # strictly inside one subdomain
SKELETON = 1  # on the skeleton but not on the domain boundary
BOUNDARY = 2  # on the domain boundary


@dataclass
class CoarsePartition:
    """Nonoverlapping rectangular partition of the unit domain.

    Attributes
    ----------
    dim : 1 or 2
    n_sub_per_axis : int
        Number of subdomains along each axis.
    subdomain_boxes : ndarray, shape (n_sub, dim, 2)
        Lower/upper bounds of each subdomain per axis.
    coarse_nodes : ndarray, shape (n_nodes, dim)
        Corner points of the coarse cells.
    coarse_node_interior : ndarray of bool, shape (n_nodes,)
        True for coarse nodes not lying on the domain boundary.
    skeleton_edges : ndarray, shape (n_edges, 2)
        Pairs of coarse node ids bounding each coarse edge (empty in 1D,
        where the skeleton consists of the subdomain endpoints).
    subdomain_corners : ndarray, shape (n_sub, 2) or (n_sub, 4)
        Coarse node ids on each subdomain boundary in the canonical local
        order: [left, right] in 1D, counterclockwise from the lower-left
        corner in 2D.  The order is fixed so that one surrogate model can
        serve every subdomain.
    """

    dim: int
    n_sub_per_axis: int
    subdomain_boxes: np.ndarray
    coarse_nodes: np.ndarray
    coarse_node_interior: np.ndarray
    skeleton_edges: np.ndarray
    subdomain_corners: np.ndarray

    @property
    def n_subdomains(self) -> int:
        return len(self.subdomain_boxes)

    @property
    def n_coarse_nodes(self) -> int:
        return len(self.coarse_nodes)


@dataclass
class FineMesh:
    """Conforming P1 mesh over the partitioned domain.

    Vertices are ordered lexicographically (x fastest in 2D), elements are
    segments (1D) or positively oriented triangles (2D).  ``vertex_flags``
    classifies every vertex as INTERIOR, SKELETON or BOUNDARY, where
    BOUNDARY wins over SKELETON on the outer boundary.
    """

    dim: int
    vertices: np.ndarray
    elements: np.ndarray
    owner_subdomain: np.ndarray
    vertex_flags: np.ndarray
    partition: CoarsePartition
    cells_per_subdomain: int
    _region_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)


@dataclass
class Restriction:
    """Boolean restriction operator picking ``indices`` out of a source vector.

    Rows are ordered by ascending source index, which makes every
    restriction deterministic and makes composition bookkeeping exact
    integer arithmetic.
    """

    source_size: int
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= self.source_size:
                raise ValueError("restriction indices out of source range")
            if np.unique(self.indices).size != self.indices.size:
                raise ValueError("restriction indices must be distinct")

    @property
    def target_size(self) -> int:
        return len(self.indices)

    def restrict(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v)[self.indices]

    def extend(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.source_size, dtype=np.asarray(v).dtype)
        out[self.indices] = v
        return out

    def extend_add(self, v: np.ndarray, out: np.ndarray) -> np.ndarray:
        out[self.indices] += v
        return out

    def as_matrix(self) -> np.ndarray:
        mat = np.zeros((self.target_size, self.source_size), dtype=np.int64)
        mat[np.arange(self.target_size), self.indices] = 1
        return mat

    def positions_of(self, other: "Restriction") -> np.ndarray:
        """Positions of ``other``'s indices inside this restriction's rows.

        Requires ``other`` to select a subset of this restriction (both over
        the same source).
        """
        if other.source_size != self.source_size:
            raise ValueError("restrictions act on different sources")
        pos = np.searchsorted(self.indices, other.indices)
        if pos.size and (
            pos.max() >= self.target_size
            or not np.array_equal(self.indices[pos], other.indices)
        ):
            raise ValueError("not a subset restriction")
        return pos


@dataclass
class CoarseBasis:
    """Values of the coarse hat basis at the fine skeleton dofs.

    ``phi`` has one row per fine skeleton dof (ascending global order,
    matching ``restriction(mesh, "skeleton")``) and one column per coarse
    node.  ``local_blocks[i]`` holds the same values restricted to the
    boundary dofs of subdomain ``i`` (rows in ascending global order) and
    to its corner nodes in the canonical local order.
    """

    phi: np.ndarray
    skeleton: Restriction
    local_blocks: list

    @property
    def n_skeleton_dofs(self) -> int:
        return self.phi.shape[0]

    @property
    def n_coarse_nodes(self) -> int:
        return self.phi.shape[1]


def build_partition(dim: int, n_sub_per_axis: int) -> CoarsePartition:
    """Partition the unit domain into equal boxes with their coarse nodes."""
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if n_sub_per_axis < 1:
        raise ValueError("n_sub_per_axis must be >= 1")
    n = n_sub_per_axis

    if dim == 1:
        boxes = np.array([[[i / n, (i + 1) / n]] for i in range(n)])
        nodes = np.array([[g / n] for g in range(n + 1)])
        interior = np.array([0 < g < n for g in range(n + 1)])
        edges = np.zeros((0, 2), dtype=np.int64)
        corners = np.array([[i, i + 1] for i in range(n)], dtype=np.int64)
        return CoarsePartition(1, n, boxes, nodes, interior, edges, corners)

    boxes = np.array(
        [
            [[jx / n, (jx + 1) / n], [jy / n, (jy + 1) / n]]
            for jy in range(n)
            for jx in range(n)
        ]
    )
    nodes = np.array([[gx / n, gy / n] for gy in range(n + 1) for gx in range(n + 1)])
    gx = np.arange((n + 1) ** 2) % (n + 1)
    gy = np.arange((n + 1) ** 2) // (n + 1)
    interior = (gx > 0) & (gx < n) & (gy > 0) & (gy < n)

    def nid(ix, iy):
        return iy * (n + 1) + ix

    edges = []
    for iy in range(n):
        for ix in range(n + 1):  # vertical edges
            edges.append((nid(ix, iy), nid(ix, iy + 1)))
    for iy in range(n + 1):
        for ix in range(n):  # horizontal edges
            edges.append((nid(ix, iy), nid(ix + 1, iy)))
    edges = np.array(edges, dtype=np.int64)

    corners = np.array(
        [
            [nid(jx, jy), nid(jx + 1, jy), nid(jx + 1, jy + 1), nid(jx, jy + 1)]
            for jy in range(n)
            for jx in range(n)
        ],
        dtype=np.int64,
    )
    return CoarsePartition(2, n, boxes, nodes, interior, edges, corners)


def build_fine_mesh(partition: CoarsePartition, fine_cells_per_subdomain: int) -> FineMesh:
    """Uniform grid (1D) or right-diagonal structured triangulation (2D).

    Each subdomain carries ``fine_cells_per_subdomain`` cells per axis; in
    2D every quad cell is split along the lower-left/upper-right diagonal
    into two triangles, which makes the mesh conforming across subdomain
    boundaries by construction.
    """
    if fine_cells_per_subdomain < 1:
        raise ValueError("fine_cells_per_subdomain must be >= 1")
    n = partition.n_sub_per_axis
    m = fine_cells_per_subdomain
    ncells = n * m

    if partition.dim == 1:
        nv = ncells + 1
        vertices = (np.arange(nv) / ncells).reshape(-1, 1)
        elements = np.column_stack([np.arange(ncells), np.arange(1, nv)])
        owner = np.arange(ncells) // m
        flags = np.full(nv, INTERIOR, dtype=np.int8)
        flags[::m] = SKELETON
        flags[0] = BOUNDARY
        flags[-1] = BOUNDARY
        mesh = FineMesh(1, vertices, elements.astype(np.int64), owner.astype(np.int64),
                        flags, partition, m)
        _validate_mesh(mesh)
        return mesh

    nv_axis = ncells + 1
    ix = np.tile(np.arange(nv_axis), nv_axis)
    iy = np.repeat(np.arange(nv_axis), nv_axis)
    vertices = np.column_stack([ix / ncells, iy / ncells])

    elements = []
    owner = []
    for cy in range(ncells):
        for cx in range(ncells):
            v00 = cy * nv_axis + cx
            v10 = v00 + 1
            v01 = v00 + nv_axis
            v11 = v01 + 1
            elements.append((v00, v10, v11))
            elements.append((v00, v11, v01))
            owner.extend([(cy // m) * n + (cx // m)] * 2)
    elements = np.array(elements, dtype=np.int64)
    owner = np.array(owner, dtype=np.int64)

    on_skel = (ix % m == 0) | (iy % m == 0)
    on_bnd = (ix == 0) | (ix == ncells) | (iy == 0) | (iy == ncells)
    flags = np.where(on_bnd, BOUNDARY, np.where(on_skel, SKELETON, INTERIOR)).astype(np.int8)

    mesh = FineMesh(2, vertices, elements, owner, flags, partition, m)
    _validate_mesh(mesh)
    return mesh


def _validate_mesh(mesh: FineMesh) -> None:
    vols = element_volumes(mesh)
    if not (vols > 0).all():
        raise ValueError("mesh has degenerate elements")


def element_volumes(mesh: FineMesh) -> np.ndarray:
    """Lengths (1D) or areas (2D) of all elements."""
    pts = mesh.vertices[mesh.elements]
    if mesh.dim == 1:
        return pts[:, 1, 0] - pts[:, 0, 0]
    e1 = pts[:, 1, :] - pts[:, 0, :]
    e2 = pts[:, 2, :] - pts[:, 0, :]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _vertex_grid_coords(mesh: FineMesh):
    ncells = mesh.partition.n_sub_per_axis * mesh.cells_per_subdomain
    if mesh.dim == 1:
        return (np.arange(mesh.n_vertices),)
    nv_axis = ncells + 1
    idx = np.arange(mesh.n_vertices)
    return idx % nv_axis, idx // nv_axis


def restriction(mesh: FineMesh, region) -> Restriction:
    """Restriction from the full vertex set to a dof region.

    ``region`` is one of the strings ``"omega_bar"``, ``"omega"``,
    ``"boundary"``, ``"skeleton"``, ``"skeleton_interior"`` or a tuple
    ``(kind, i)`` with kind in ``"subdomain"`` (open), ``"subdomain_boundary"``
    or ``"subdomain_closure"``.  Rows are in ascending global index order.
    An empty region yields a 0-row restriction.
    """
    key = region if isinstance(region, str) else tuple(region)
    cached = mesh._region_cache.get(key)
    if cached is not None:
        return cached

    flags = mesh.vertex_flags
    if region == "omega_bar":
        mask = np.ones(mesh.n_vertices, dtype=bool)
    elif region == "omega":
        mask = flags != BOUNDARY
    elif region == "boundary":
        mask = flags == BOUNDARY
    elif region == "skeleton":
        mask = flags != INTERIOR
    elif region == "skeleton_interior":
        mask = flags == SKELETON
    elif isinstance(region, tuple) and len(region) == 2:
        kind, i = region
        i = int(i)
        if not 0 <= i < mesh.partition.n_subdomains:
            raise ValueError(f"subdomain index {i} out of range")
        m = mesh.cells_per_subdomain
        n = mesh.partition.n_sub_per_axis
        if mesh.dim == 1:
            (gx,) = _vertex_grid_coords(mesh)
            lo, hi = i * m, (i + 1) * m
            closure = (gx >= lo) & (gx <= hi)
            inner = (gx > lo) & (gx < hi)
        else:
            gx, gy = _vertex_grid_coords(mesh)
            jx, jy = i % n, i // n
            closure = (
                (gx >= jx * m) & (gx <= (jx + 1) * m)
                & (gy >= jy * m) & (gy <= (jy + 1) * m)
            )
            inner = (
                (gx > jx * m) & (gx < (jx + 1) * m)
                & (gy > jy * m) & (gy < (jy + 1) * m)
            )
        if kind == "subdomain_closure":
            mask = closure
        elif kind == "subdomain":
            mask = inner
        elif kind == "subdomain_boundary":
            mask = closure & ~inner
        else:
            raise ValueError(f"unknown region kind {kind!r}")
    else:
        raise ValueError(f"unknown region {region!r}")

    res = Restriction(mesh.n_vertices, np.where(mask)[0])
    mesh._region_cache[key] = res
    return res


def build_coarse_basis(partition: CoarsePartition, mesh: FineMesh) -> CoarseBasis:
    """Hat-function values at the skeleton dofs plus per-subdomain blocks.

    In 1D the skeleton dofs coincide with the coarse nodes and ``phi`` is
    an identity.  In 2D each fine skeleton vertex lies on at least one
    coarse edge and receives the two linear hat values of that edge's
    endpoints (a delta row at the coarse nodes themselves).
    """
    skel = restriction(mesh, "skeleton")
    n_coarse = partition.n_coarse_nodes
    phi = np.zeros((skel.target_size, n_coarse))

    m = mesh.cells_per_subdomain
    n = partition.n_sub_per_axis
    if partition.dim == 1:
        for row, v in enumerate(skel.indices):
            phi[row, v // m] = 1.0
    else:
        gx_all, gy_all = _vertex_grid_coords(mesh)
        for row, v in enumerate(skel.indices):
            ix, iy = int(gx_all[v]), int(gy_all[v])
            on_vert = ix % m == 0
            on_horz = iy % m == 0
            if on_vert and on_horz:
                phi[row, (iy // m) * (n + 1) + ix // m] = 1.0
            elif on_vert:
                gxc = ix // m
                gyc = iy // m
                t = (iy - gyc * m) / m
                phi[row, gyc * (n + 1) + gxc] = 1.0 - t
                phi[row, (gyc + 1) * (n + 1) + gxc] = t
            else:
                gxc = ix // m
                gyc = iy // m
                t = (ix - gxc * m) / m
                phi[row, gyc * (n + 1) + gxc] = 1.0 - t
                phi[row, gyc * (n + 1) + gxc + 1] = t

    local_blocks = []
    for i in range(partition.n_subdomains):
        bnd = restriction(mesh, ("subdomain_boundary", i))
        rows = skel.positions_of(bnd)
        cols = partition.subdomain_corners[i]
        local_blocks.append(phi[np.ix_(rows, cols)].copy())

    return CoarseBasis(phi, skel, local_blocks)


def dump_mesh(mesh: FineMesh, directory: str) -> None:
    """Write vertices.csv and elements.csv for debugging."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "vertices.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id"] + [f"x{k}" for k in range(mesh.dim)] + ["flag"])
        for vid, (pt, fl) in enumerate(zip(mesh.vertices, mesh.vertex_flags)):
            w.writerow([vid] + [repr(float(c)) for c in pt] + [int(fl)])
    with open(os.path.join(directory, "elements.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id"] + [f"v{k}" for k in range(mesh.dim + 1)] + ["owner"])
        for eid, (el, ow) in enumerate(zip(mesh.elements, mesh.owner_subdomain)):
            w.writerow([eid] + [int(v) for v in el] + [int(ow)])
