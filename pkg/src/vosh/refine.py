"""Surface appearance refinement and error-driven remeshing.

Vertex positions and topology are frozen during refinement, so the G-buffers
of all training views are rasterized once; each optimization step is then a
sparse interpolation matrix times the vertex attributes, pushed through the
shading head. Only pixels whose rays hit the surface contribute loss.

Remeshing runs afterwards: faces whose tracked error sits above a high
quantile get mid-point subdivision (with conforming splits of neighbors);
edge-adjacent face pairs that are mutually flat and low-error are decimated
by collapsing the shared edge to its midpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix

from .errors import ContractViolationError, InvalidArgumentError
from .field import F_DIM
from .grid import DecodedGrid, VoxelGrid, logit, sample_decoded, sigmoid
from .mesh import TriMesh
from .mlp import MlpHead, shade, shade_backward
from .raster import rasterize
from .raymarch import decode_reference
from .train import AdamParams


@dataclass
class RemeshConfig:
    subdivide_error_quantile: float = 0.9
    merge_normal_angle_max: float = 10.0  # degrees
    merge_error_quantile: float = 0.3
    max_rounds: int = 1

    def __post_init__(self):
        for q in (self.subdivide_error_quantile, self.merge_error_quantile):
            if not (0.0 < q < 1.0):
                raise InvalidArgumentError("RemeshConfig: quantiles must lie in (0, 1)")
        if not (0.0 < self.merge_normal_angle_max < 90.0):
            raise InvalidArgumentError("RemeshConfig: merge angle must lie in (0, 90)")
        if self.max_rounds < 0:
            raise InvalidArgumentError("RemeshConfig: max_rounds must be >= 0")


def _gbuffer_pixels(mesh: TriMesh, views):
    """Rasterize each view once; stack hit-pixel records across views.

    Returns (interp csr (P, V), gt (P, 3), dirs (P, 3), face_ids (P,),
    gbuffers list).
    """
    rows = []
    cols = []
    vals = []
    gts = []
    dirs = []
    fids = []
    gbuffers = []
    offset = 0
    for cam, img in views:
        gb = rasterize(mesh, cam)
        gbuffers.append(gb)
        hit = gb.hit_mask
        n = int(hit.sum())
        if n == 0:
            continue
        fid = gb.face_id[hit].astype(np.int64)
        bary = gb.bary[hit]
        tri = mesh.faces[fid]
        px = np.arange(offset, offset + n)
        for k in range(3):
            rows.append(px)
            cols.append(tri[:, k])
            vals.append(bary[:, k])
        gts.append(np.asarray(img)[hit])
        dirs.append(cam.pixel_dirs()[hit])
        fids.append(fid)
        offset += n
    if offset == 0:
        interp = csr_matrix((0, mesh.n_vertices))
        return interp, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), gbuffers
    interp = csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(offset, mesh.n_vertices),
    )
    return interp, np.concatenate(gts), np.concatenate(dirs), np.concatenate(fids), gbuffers


def refine_appearance(
    mesh: TriMesh,
    grid,
    head: MlpHead,
    dataset,
    iters: int = 300,
    lr: float = 0.05,
    init_from_grid: bool = True,
):
    """Fit per-vertex appearance to the training views through rasterization.

    Returns (refined mesh, per-face mean-squared pixel error). The head is
    held fixed; geometry never changes. Faces no view ever rasterizes keep
    error 0 and are flagged unobserved.
    """
    if mesh.n_faces == 0:
        raise InvalidArgumentError("refine_appearance: mesh is empty")
    views = dataset.train_views() if hasattr(dataset, "train_views") else list(dataset)
    if not views:
        raise InvalidArgumentError("refine_appearance: no training views")
    out = mesh.copy()
    if init_from_grid and grid is not None:
        decoded = grid if isinstance(grid, DecodedGrid) else decode_reference(grid)
        app = sample_decoded(decoded, out.vertices)
        out.vertex_diffuse = np.clip(app[:, 1:4], 0.0, 1.0)
        out.vertex_feature = np.clip(app[:, 4:], 0.0, 1.0)

    interp, gt, dirs, fids, _gbuffers = _gbuffer_pixels(out, views)
    n_px = gt.shape[0]
    raw = np.concatenate(
        [logit(out.vertex_diffuse), logit(out.vertex_feature)], axis=1
    )
    if n_px:
        params = {"raw": raw}
        opt = AdamParams(params, lr)
        for _ in range(max(iters, 0)):
            attrs = sigmoid(raw)
            px = interp @ attrs
            pred, cache = shade(head, px[:, :3], px[:, 3:], dirs)
            err = pred - gt
            g_pred = (2.0 / err.size) * err
            g_cd, g_f, _g_head = shade_backward(head, cache, g_pred)
            g_px = np.concatenate([g_cd, g_f], axis=1)
            g_attrs = interp.T @ g_px
            g_raw = g_attrs * attrs * (1.0 - attrs)
            opt.step(params, {"raw": g_raw})
        attrs = sigmoid(raw)
        out.vertex_diffuse = attrs[:, :3]
        out.vertex_feature = attrs[:, 3:]
        px = interp @ attrs
        pred, _ = shade(head, px[:, :3], px[:, 3:], dirs)
        sq = np.mean((pred - gt) ** 2, axis=1)
        err_sum = np.bincount(fids, weights=sq, minlength=out.n_faces)
        err_cnt = np.bincount(fids, minlength=out.n_faces)
        observed = err_cnt > 0
        face_error = np.zeros(out.n_faces)
        face_error[observed] = err_sum[observed] / err_cnt[observed]
    else:
        observed = np.zeros(out.n_faces, dtype=bool)
        face_error = np.zeros(out.n_faces)
    out.face_error = face_error
    out.face_observed = observed
    out.compute_normal_change()
    return out, face_error


# ---------------------------------------------------------------------------
# remeshing


def _subdivide(mesh: TriMesh, split_faces: np.ndarray) -> TriMesh:
    """Mid-point subdivision of the marked faces plus conforming splits.

    Midpoints are shared between neighbors through an edge registry. Faces
    with 1 or 2 split edges are bisected/trisected so the mesh stays
    conforming; attributes at midpoints are endpoint averages, face stats are
    inherited from the parent.
    """
    verts = [mesh.vertices]
    diff = [mesh.vertex_diffuse]
    feat = [mesh.vertex_feature]
    next_vid = mesh.n_vertices
    midpoint = {}

    split_edge = set()
    for f in np.flatnonzero(split_faces):
        tri = mesh.faces[f]
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            split_edge.add((min(a, b), max(a, b)))

    def mid(a, b):
        nonlocal next_vid
        key = (min(a, b), max(a, b))
        vid = midpoint.get(key)
        if vid is None:
            vid = next_vid
            next_vid += 1
            midpoint[key] = vid
            verts.append((mesh.vertices[a] + mesh.vertices[b])[None] / 2.0)
            diff.append((mesh.vertex_diffuse[a] + mesh.vertex_diffuse[b])[None] / 2.0)
            feat.append((mesh.vertex_feature[a] + mesh.vertex_feature[b])[None] / 2.0)
        return vid

    faces = []
    stats = []  # (error, normal_change, observed) inherited
    born = []  # faces created this round are exempt from this round's merges

    def emit(tri, src, fresh):
        faces.append(tri)
        stats.append(src)
        born.append(fresh)

    for f in range(mesh.n_faces):
        a, b, c = (int(x) for x in mesh.faces[f])
        src = (mesh.face_error[f], mesh.face_normal_change[f], mesh.face_observed[f])
        splits = [
            (min(a, b), max(a, b)) in split_edge,
            (min(b, c), max(b, c)) in split_edge,
            (min(c, a), max(c, a)) in split_edge,
        ]
        n_split = sum(splits)
        if n_split == 0:
            emit((a, b, c), src, False)
        elif n_split == 3:
            mab, mbc, mca = mid(a, b), mid(b, c), mid(c, a)
            emit((a, mab, mca), src, True)
            emit((mab, b, mbc), src, True)
            emit((mca, mbc, c), src, True)
            emit((mab, mbc, mca), src, True)
        else:
            # rotate so the first edge (a, b) is split
            while not splits[0]:
                a, b, c = b, c, a
                splits = splits[1:] + splits[:1]
            mab = mid(a, b)
            if n_split == 1:
                emit((a, mab, c), src, True)
                emit((mab, b, c), src, True)
            else:
                if splits[1]:
                    mbc = mid(b, c)
                    emit((a, mab, c), src, True)
                    emit((mab, mbc, c), src, True)
                    emit((mab, b, mbc), src, True)
                else:
                    mca = mid(c, a)
                    emit((a, mab, mca), src, True)
                    emit((mab, b, c), src, True)
                    emit((mab, c, mca), src, True)

    out = TriMesh(
        vertices=np.concatenate(verts),
        faces=np.asarray(faces, dtype=np.int64),
        vertex_diffuse=np.clip(np.concatenate(diff), 0.0, 1.0),
        vertex_feature=np.clip(np.concatenate(feat), 0.0, 1.0),
        face_error=np.array([s[0] for s in stats], dtype=np.float64),
        face_normal_change=np.array([s[1] for s in stats], dtype=np.float64),
        face_observed=np.array([s[2] for s in stats], dtype=bool),
    )
    return out, np.asarray(born, dtype=bool)


def _collapse_edges(mesh: TriMesh, err_thresh: float, angle_max: float, exempt=None) -> TriMesh:
    """Greedy midpoint edge collapse of flat, low-error face pairs.

    A collapse is skipped when it would flip or degenerate any surviving
    face, or when either endpoint was already involved this round. Faces in
    exempt (freshly subdivided) never participate.
    """
    mesh.compute_normal_change()
    normals = mesh.face_normals()
    faces = mesh.faces
    nv = mesh.n_vertices
    if exempt is None:
        exempt = np.zeros(mesh.n_faces, dtype=bool)

    edge_map = {}
    for f in range(mesh.n_faces):
        tri = faces[f]
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            edge_map.setdefault((min(a, b), max(a, b)), []).append(f)

    candidates = []
    for (a, b), fs in edge_map.items():
        if len(fs) != 2:
            continue
        f1, f2 = fs
        if exempt[f1] or exempt[f2]:
            continue
        if mesh.face_error[f1] > err_thresh or mesh.face_error[f2] > err_thresh:
            continue
        cosang = np.clip(normals[f1] @ normals[f2], -1.0, 1.0)
        if np.degrees(np.arccos(cosang)) >= angle_max:
            continue
        candidates.append((a, b))
    candidates.sort()

    vert_faces = {}
    for f in range(mesh.n_faces):
        for vid in faces[f]:
            vert_faces.setdefault(int(vid), []).append(f)

    positions = mesh.vertices.copy()
    vdiff = mesh.vertex_diffuse.copy()
    vfeat = mesh.vertex_feature.copy()
    remap = np.arange(nv, dtype=np.int64)
    dead_face = np.zeros(mesh.n_faces, dtype=bool)
    touched = np.zeros(nv, dtype=bool)

    for a, b in candidates:
        if touched[a] or touched[b]:
            continue
        shared = [f for f in edge_map[(a, b)]]
        mid_pos = (positions[a] + positions[b]) / 2.0
        ok = True
        moved = set(vert_faces[a]) | set(vert_faces[b])
        for f in moved:
            if dead_face[f] or f in shared:
                continue
            tri = [remap[int(v)] for v in faces[f]]
            if a in tri and b in tri:
                ok = False  # non-manifold configuration
                break
            before = [positions[v] for v in tri]
            after = [mid_pos if v in (a, b) else positions[v] for v in tri]
            n0 = np.cross(before[1] - before[0], before[2] - before[0])
            n1 = np.cross(after[1] - after[0], after[2] - after[0])
            if np.linalg.norm(n1) < 1e-18 or n0 @ n1 <= 0:
                ok = False
                break
        if not ok:
            continue
        positions[a] = mid_pos
        vdiff[a] = (vdiff[a] + vdiff[b]) / 2.0
        vfeat[a] = (vfeat[a] + vfeat[b]) / 2.0
        remap[b] = a
        for f in shared:
            dead_face[f] = True
        vert_faces[a] = [f for f in moved if not dead_face[f]]
        touched[a] = touched[b] = True

    new_faces = remap[faces]
    degen = (
        (new_faces[:, 0] == new_faces[:, 1])
        | (new_faces[:, 1] == new_faces[:, 2])
        | (new_faces[:, 2] == new_faces[:, 0])
    )
    keep = ~dead_face & ~degen
    out = TriMesh(
        vertices=positions,
        faces=new_faces[keep],
        vertex_diffuse=vdiff,
        vertex_feature=vfeat,
        face_error=mesh.face_error[keep],
        face_normal_change=mesh.face_normal_change[keep],
        face_observed=mesh.face_observed[keep],
    )
    return out.keep_faces(np.ones(out.n_faces, dtype=bool))  # compact vertices


def remesh(mesh: TriMesh, cfg: RemeshConfig) -> TriMesh:
    """Error-driven subdivision plus flatness-driven decimation."""
    if mesh.n_faces and (mesh.face_error is None or mesh.face_normal_change is None):
        raise ContractViolationError("remesh: per-face stats must be populated")
    out = mesh.copy()
    for _ in range(cfg.max_rounds):
        if out.n_faces == 0:
            break
        errors = out.face_error
        q_hi = float(np.quantile(errors, cfg.subdivide_error_quantile))
        q_lo = float(np.quantile(errors, cfg.merge_error_quantile))
        split = errors > q_hi
        fresh = None
        if np.any(split):
            out, fresh = _subdivide(out, split)
        out = _collapse_edges(out, q_lo, cfg.merge_normal_angle_max, exempt=fresh)
    return out
