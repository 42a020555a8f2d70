"""Isosurface extraction and coarse mesh selection.

Marching cubes runs on the decoded density volume (values at voxel centers),
thresholded at the density whose per-voxel-edge opacity equals iso_alpha.
Extracted vertices live in contracted coordinates and carry appearance
initialised from the field. Coarse selection keeps only geometry near the
camera region and drops contraction-stretched slivers and floater patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ._mc_tables import CORNER_OFFSETS, EDGES, EDGE_AXIS, TRI_TABLE
from .errors import InvalidArgumentError
from .field import F_DIM
from .grid import DOMAIN_HALF, DecodedGrid, VoxelGrid, sample_decoded


@dataclass
class TriMesh:
    """Indexed triangle mesh with per-vertex appearance and per-face stats."""

    vertices: np.ndarray  # (V, 3) contracted coordinates
    faces: np.ndarray  # (F, 3) int
    vertex_diffuse: np.ndarray  # (V, 3) in [0, 1]
    vertex_feature: np.ndarray  # (V, F_DIM) in [0, 1]
    face_error: np.ndarray = None  # (F,)
    face_normal_change: np.ndarray = None  # (F,) degrees
    face_observed: np.ndarray = None  # (F,) bool

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        v = self.vertices.shape[0]
        f = self.faces.shape[0]
        if self.vertex_diffuse is None:
            self.vertex_diffuse = np.full((v, 3), 0.5)
        if self.vertex_feature is None:
            self.vertex_feature = np.full((v, F_DIM), 0.5)
        self.vertex_diffuse = np.asarray(self.vertex_diffuse, dtype=np.float64).reshape(v, 3)
        self.vertex_feature = np.asarray(self.vertex_feature, dtype=np.float64).reshape(v, F_DIM)
        if self.face_error is None:
            self.face_error = np.zeros(f)
        if self.face_normal_change is None:
            self.face_normal_change = np.zeros(f)
        if self.face_observed is None:
            self.face_observed = np.zeros(f, dtype=bool)
        if f and (self.faces.min() < 0 or self.faces.max() >= v):
            raise InvalidArgumentError("TriMesh: face index out of range")

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(
            vertices=np.zeros((0, 3)),
            faces=np.zeros((0, 3), dtype=np.int64),
            vertex_diffuse=np.zeros((0, 3)),
            vertex_feature=np.zeros((0, F_DIM)),
        )

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def face_normals(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        n = np.cross(b - a, c - a)
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(lens, 1e-30)

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_key_array(self) -> np.ndarray:
        """(3F,) sorted-vertex-pair keys, one per face edge."""
        f = self.faces
        edges = np.stack(
            [f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1
        ).reshape(-1, 2)
        lo = edges.min(axis=1).astype(np.int64)
        hi = edges.max(axis=1).astype(np.int64)
        return lo * np.int64(self.n_vertices) + hi

    def keep_faces(self, mask) -> "TriMesh":
        """Subset faces, drop unused vertices, reindex."""
        faces = self.faces[mask]
        used = np.zeros(self.n_vertices, dtype=bool)
        used[faces.reshape(-1)] = True
        remap = np.cumsum(used) - 1
        return TriMesh(
            vertices=self.vertices[used],
            faces=remap[faces],
            vertex_diffuse=self.vertex_diffuse[used],
            vertex_feature=self.vertex_feature[used],
            face_error=self.face_error[mask],
            face_normal_change=self.face_normal_change[mask],
            face_observed=self.face_observed[mask],
        )

    def copy(self) -> "TriMesh":
        return TriMesh(
            vertices=self.vertices.copy(),
            faces=self.faces.copy(),
            vertex_diffuse=self.vertex_diffuse.copy(),
            vertex_feature=self.vertex_feature.copy(),
            face_error=self.face_error.copy(),
            face_normal_change=self.face_normal_change.copy(),
            face_observed=self.face_observed.copy(),
        )

    def compute_normal_change(self) -> np.ndarray:
        """Max dihedral-angle deviation (degrees) to edge-adjacent faces."""
        nrm = self.face_normals()
        keys = self.edge_key_array()
        face_of_edge = np.repeat(np.arange(self.n_faces), 3)
        order = np.argsort(keys, kind="stable")
        keys_sorted = keys[order]
        faces_sorted = face_of_edge[order]
        out = np.zeros(self.n_faces)
        i = 0
        m = len(keys_sorted)
        while i < m:
            j = i + 1
            while j < m and keys_sorted[j] == keys_sorted[i]:
                j += 1
            group = faces_sorted[i:j]
            if len(group) > 1:
                for a_i in group:
                    for b_i in group:
                        if a_i == b_i:
                            continue
                        cosang = np.clip(nrm[a_i] @ nrm[b_i], -1.0, 1.0)
                        ang = np.degrees(np.arccos(cosang))
                        if ang > out[a_i]:
                            out[a_i] = ang
            i = j
        self.face_normal_change = out
        return out


@dataclass
class SelectionConfig:
    bound_fraction: float = 0.9
    max_edge_len: float = 0.125  # contracted units; default 4 voxel edges at R=128
    min_patch_tris: int = 16

    def __post_init__(self):
        if not (0 < self.bound_fraction <= 1):
            raise InvalidArgumentError("SelectionConfig: bound_fraction in (0, 1]")
        if self.max_edge_len <= 0:
            raise InvalidArgumentError("SelectionConfig: max_edge_len must be > 0")
        if self.min_patch_tris < 1:
            raise InvalidArgumentError("SelectionConfig: min_patch_tris >= 1")

    @classmethod
    def for_resolution(cls, resolution: int, **kw) -> "SelectionConfig":
        kw.setdefault("max_edge_len", 4.0 * (2.0 * DOMAIN_HALF / resolution))
        return cls(**kw)


def iso_sigma(iso_alpha: float, voxel_edge: float) -> float:
    """Density whose opacity over one voxel edge equals iso_alpha."""
    return -np.log1p(-iso_alpha) / voxel_edge


def marching_cubes(grid, iso_alpha: float = 0.5) -> TriMesh:
    """Extract the iso_alpha opacity isosurface of the decoded density field.

    Vertices are linearly interpolated along lattice edges and shared between
    cells, so the mesh is watertight wherever the field is.
    """
    if not (0.0 < iso_alpha < 1.0):
        raise InvalidArgumentError("marching_cubes: iso_alpha must lie in (0, 1)")
    decoded = grid.decode() if isinstance(grid, VoxelGrid) else grid
    r = decoded.resolution
    if r < 2:
        raise InvalidArgumentError("marching_cubes: grid resolution must be >= 2")
    vol = decoded.sigma_volume().astype(np.float64)
    iso = iso_sigma(iso_alpha, decoded.voxel_edge)
    inside = vol > iso

    # per-cell case index from the 8 corners
    case = np.zeros((r - 1, r - 1, r - 1), dtype=np.int32)
    for c in range(8):
        ox, oy, oz = CORNER_OFFSETS[c]
        case |= (
            inside[ox : r - 1 + ox, oy : r - 1 + oy, oz : r - 1 + oz].astype(np.int32)
            << c
        )

    # crossed lattice edges -> vertex positions; edge id = cell-lin * 3 + axis
    edge = decoded.voxel_edge
    origin = -DOMAIN_HALF + 0.5 * edge
    vert_id = np.full(r**3 * 3, -1, dtype=np.int64)
    positions = []
    for axis in range(3):
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[axis] = slice(0, r - 1)
        sl_hi[axis] = slice(1, r)
        v0 = vol[tuple(sl_lo)]
        v1 = vol[tuple(sl_hi)]
        crossed = inside[tuple(sl_lo)] != inside[tuple(sl_hi)]
        idx = np.argwhere(crossed)
        if idx.size == 0:
            continue
        a = v0[crossed]
        b = v1[crossed]
        t = (iso - a) / (b - a)
        pos = origin + idx.astype(np.float64) * edge
        pos[:, axis] += t * edge
        lin = (idx[:, 0] * r + idx[:, 1]) * r + idx[:, 2]
        start = sum(p.shape[0] for p in positions)
        vert_id[lin * 3 + axis] = start + np.arange(idx.shape[0])
        positions.append(pos)
    if not positions:
        return TriMesh.empty()
    vertices = np.concatenate(positions)

    # triangles: group active cells by case, emit table triangles vectorized
    active = np.argwhere((case != 0) & (case != 255))
    cell_case = case[active[:, 0], active[:, 1], active[:, 2]]
    tri_chunks = []
    for c_val in np.unique(cell_case):
        tris = TRI_TABLE[c_val]
        if not tris:
            continue
        cells = active[cell_case == c_val]
        for tri in tris:
            ids = []
            for e in tri:
                c0, _c1 = EDGES[e]
                off = CORNER_OFFSETS[c0]
                axis = EDGE_AXIS[e]
                lin = (
                    (cells[:, 0] + off[0]) * r + (cells[:, 1] + off[1])
                ) * r + (cells[:, 2] + off[2])
                ids.append(vert_id[lin * 3 + axis])
            tri_chunks.append(np.stack(ids, axis=1))
    if not tri_chunks:
        return TriMesh.empty()
    faces = np.concatenate(tri_chunks)
    if np.any(faces < 0):
        raise InvalidArgumentError("marching_cubes: internal edge bookkeeping failure")

    # drop degenerate (duplicate-vertex) faces, e.g. from zero-length edges
    ok = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 2] != faces[:, 0])
    )
    faces = faces[ok]

    app = sample_decoded(decoded, vertices)
    mesh = TriMesh(
        vertices=vertices,
        faces=faces,
        vertex_diffuse=np.clip(app[:, 1:4], 0.0, 1.0),
        vertex_feature=np.clip(app[:, 4:], 0.0, 1.0),
    )
    return mesh


def coarse_select(mesh: TriMesh, cfg: SelectionConfig) -> TriMesh:
    """Keep near-region faces with short edges in non-trivial patches.

    Applies the patch-size rule to a fixed point so the operation is
    idempotent even when face removal splinters new small components.
    """
    if mesh.n_faces == 0:
        return mesh.copy()
    v = mesh.vertices
    far_vertex = np.max(np.abs(v), axis=1) > cfg.bound_fraction
    keep = ~np.any(far_vertex[mesh.faces], axis=1)

    a = v[mesh.faces[:, 0]]
    b = v[mesh.faces[:, 1]]
    c = v[mesh.faces[:, 2]]
    max_edge = np.maximum(
        np.linalg.norm(a - b, axis=1),
        np.maximum(np.linalg.norm(b - c, axis=1), np.linalg.norm(c - a, axis=1)),
    )
    keep &= max_edge <= cfg.max_edge_len

    out = mesh.keep_faces(keep)
    while out.n_faces:
        labels = _face_components(out)
        counts = np.bincount(labels)
        small = counts[labels] < cfg.min_patch_tris
        if not np.any(small):
            break
        out = out.keep_faces(~small)
    return out


def _face_components(mesh: TriMesh) -> np.ndarray:
    """Connected-component label per face; faces touch when they share an edge."""
    keys = mesh.edge_key_array()
    face_of_edge = np.repeat(np.arange(mesh.n_faces), 3)
    order = np.argsort(keys, kind="stable")
    keys_sorted = keys[order]
    faces_sorted = face_of_edge[order]
    starts = np.flatnonzero(np.r_[True, keys_sorted[1:] != keys_sorted[:-1]])
    ends = np.r_[starts[1:], len(keys_sorted)]
    rows = []
    cols = []
    for s, e in zip(starts, ends):
        if e - s > 1:
            group = faces_sorted[s:e]
            rows.extend(group[:-1])
            cols.extend(group[1:])
    n = mesh.n_faces
    adj = coo_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(n, n)
    )
    _n_comp, labels = connected_components(adj, directed=False)
    return labels


def save_obj(path, mesh: TriMesh) -> None:
    with open(path, "w") as f:
        for p in mesh.vertices:
            f.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for tri in mesh.faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def load_obj(path) -> TriMesh:
    verts = []
    faces = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
    return TriMesh(
        vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        vertex_diffuse=None,
        vertex_feature=None,
    )
