"""Software rasterization of the surface component.

Meshes store vertices in contracted coordinates; rasterization happens in
world space (the two coincide inside the unit ball, where coarse selection
keeps the mesh). Output is a G-buffer of face ids, camera-space depth, and
perspective-correct barycentrics; appearance buffers are interpolated from
per-vertex attributes on demand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .field import F_DIM, uncontract
from .mesh import TriMesh
from .scene import Camera

MISS = -1


@dataclass
class GBuffer:
    """Per-pixel rasterization output. Miss pixels: face_id == -1, depth inf,
    zero barycentrics and appearance."""

    face_id: np.ndarray  # (H, W) int32
    depth: np.ndarray  # (H, W) float64 camera-space z, +inf on miss
    bary: np.ndarray  # (H, W, 3) float64
    camera: Camera

    @property
    def hit_mask(self) -> np.ndarray:
        return self.face_id >= 0

    def interpolate(self, mesh: TriMesh):
        """(diffuse (H,W,3), feature (H,W,F_DIM)) from current vertex attrs."""
        h, w = self.face_id.shape
        diffuse = np.zeros((h, w, 3))
        feature = np.zeros((h, w, F_DIM))
        hit = self.hit_mask
        fid = self.face_id[hit]
        bary = self.bary[hit]
        tri = mesh.faces[fid]
        for k in range(3):
            diffuse[hit] += bary[:, k : k + 1] * mesh.vertex_diffuse[tri[:, k]]
            feature[hit] += bary[:, k : k + 1] * mesh.vertex_feature[tri[:, k]]
        return diffuse, feature

    def hit_points_world(self, mesh: TriMesh) -> np.ndarray:
        """World-space surface points for hit pixels, shape (n_hits, 3)."""
        hit = self.hit_mask
        fid = self.face_id[hit]
        bary = self.bary[hit]
        tri = mesh.faces[fid]
        world = uncontract(mesh.vertices)
        pts = np.zeros((fid.shape[0], 3))
        for k in range(3):
            pts += bary[:, k : k + 1] * world[tri[:, k]]
        return pts

    def ray_t(self, mesh: TriMesh) -> np.ndarray:
        """(H, W) ray parameter of the surface hit (+inf on miss), measured
        along the unit pixel directions used by the ray marcher."""
        h, w = self.face_id.shape
        t = np.full((h, w), np.inf)
        hit = self.hit_mask
        if not np.any(hit):
            return t
        pts = self.hit_points_world(mesh)
        dirs = self.camera.pixel_dirs()[hit]
        t[hit] = np.einsum("nc,nc->n", pts - self.camera.position, dirs)
        return t


def rasterize(mesh: TriMesh, camera: Camera) -> GBuffer:
    """Z-buffered perspective rasterization; lowest face id wins depth ties."""
    h, w = camera.height, camera.width
    face_id = np.full((h, w), MISS, dtype=np.int32)
    depth = np.full((h, w), np.inf, dtype=np.float64)
    bary = np.zeros((h, w, 3), dtype=np.float64)
    if mesh.n_faces == 0:
        return GBuffer(face_id=face_id, depth=depth, bary=bary, camera=camera)
    world = uncontract(mesh.vertices)
    verts_cam = (world - camera.position) @ camera.rotation.T
    _kernels.rasterize_faces(
        np.ascontiguousarray(verts_cam),
        np.ascontiguousarray(mesh.faces),
        camera.focal,
        camera.focal,
        camera.width / 2.0,
        camera.height / 2.0,
        w,
        h,
        face_id,
        depth,
        bary,
    )
    return GBuffer(face_id=face_id, depth=depth, bary=bary, camera=camera)
