"""Binary containers: baked assets, training checkpoints, and the occupancy
pyramid.

Container framing (little-endian throughout):
    magic (4 bytes) | u32 version | u32 section count
    then per section: tag (4 bytes) | u64 payload length | payload | u32 CRC32

Baked assets quantize field channels to 8 bits (density log-scale over
[0, SIGMA_MAX], appearance linear) and store only alive cells, sorted by
linear index. Checkpoints reuse the framing with full-precision payloads.
The byte layout is documented field-by-field in docs/ASSET_FORMAT.md.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    InvalidArgumentError,
    TruncatedAssetError,
    VersionMismatchError,
)
from .field import F_DIM
from .grid import DecodedGrid, N_CHANNELS, VoxelGrid
from .hybrid import Vosh
from .mesh import TriMesh
from .mlp import PARAM_SHAPES, MlpHead

ASSET_MAGIC = b"VOSH"
CKPT_MAGIC = b"VSHC"
VERSION = 1
SIGMA_MAX = 1000.0
_LOG_SCALE = np.log1p(SIGMA_MAX)

MLP_PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")


# ---------------------------------------------------------------------------
# framing


def write_container(magic: bytes, sections) -> bytes:
    out = [magic, struct.pack("<II", VERSION, len(sections))]
    for tag, payload in sections:
        if len(tag) != 4:
            raise InvalidArgumentError("section tags must be 4 bytes")
        out.append(tag)
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
        out.append(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    return b"".join(out)


def read_container(data: bytes, magic: bytes) -> dict:
    if len(data) < 4:
        raise TruncatedAssetError("container shorter than its magic")
    if data[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedAssetError("container header truncated")
    version, n_sections = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported container version {version}")
    sections = {}
    off = 12
    for _ in range(n_sections):
        if off + 12 > len(data):
            raise TruncatedAssetError("section header truncated")
        tag = data[off : off + 4]
        (length,) = struct.unpack_from("<Q", data, off + 4)
        off += 12
        if off + length + 4 > len(data):
            raise TruncatedAssetError(f"section {tag!r} payload truncated")
        payload = data[off : off + length]
        off += length
        (crc,) = struct.unpack_from("<I", data, off)
        off += 4
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ChecksumError(f"section {tag!r} failed its CRC check")
        sections[tag] = payload
    return sections


def _need(sections: dict, tag: bytes) -> bytes:
    if tag not in sections:
        raise TruncatedAssetError(f"missing section {tag!r}")
    return sections[tag]


# ---------------------------------------------------------------------------
# quantization


def quantize_density(sigma) -> np.ndarray:
    s = np.clip(np.asarray(sigma, dtype=np.float64), 0.0, SIGMA_MAX)
    return np.round(255.0 * np.log1p(s) / _LOG_SCALE).astype(np.uint8)


def dequantize_density(q) -> np.ndarray:
    return np.expm1(np.asarray(q, dtype=np.float64) / 255.0 * _LOG_SCALE)


def quantize_appearance(v) -> np.ndarray:
    return np.round(255.0 * np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def dequantize_appearance(q) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# occupancy pyramid


@dataclass
class OccupancyPyramid:
    """Binary masks; level 0 at grid resolution, each next level 2x coarser
    via max-pooling. A coarse cell is true iff any of its 8 children is."""

    levels: list  # list of (res^3,) bool arrays

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def resolutions(self) -> list:
        n = round(len(self.levels[0]) ** (1 / 3))
        # recover exactly despite cube-root rounding
        res = 1
        while res**3 < len(self.levels[0]):
            res *= 2
        return [res >> k for k in range(self.n_levels)]

    def packed(self) -> np.ndarray:
        """Concatenated uint8 (one byte per cell) plus offsets, kernel-ready."""
        flat = np.concatenate([lvl.astype(np.uint8) for lvl in self.levels])
        offsets = np.zeros(self.n_levels, dtype=np.int64)
        acc = 0
        for i, lvl in enumerate(self.levels):
            offsets[i] = acc
            acc += len(lvl)
        return flat, offsets


def build_occupancy_pyramid(grid) -> OccupancyPyramid:
    """Max-pool the alive mask down to 8^3; level count log2(R) - 2, min 1."""
    if isinstance(grid, (VoxelGrid, DecodedGrid)):
        r = grid.resolution
        alive = grid.alive
    else:
        alive = np.asarray(grid).reshape(-1)
        r = round(len(alive) ** (1 / 3))
        while r**3 < len(alive):
            r += 1
    if r & (r - 1) or r < 2:
        raise InvalidArgumentError("occupancy pyramid needs a power-of-two resolution")
    n_levels = max(int(np.log2(r)) - 2, 1)
    levels = [np.ascontiguousarray(alive.reshape(-1)).astype(bool)]
    vol = alive.reshape(r, r, r)
    for _ in range(n_levels - 1):
        h = vol.shape[0] // 2
        vol = (
            vol.reshape(h, 2, h, 2, h, 2).max(axis=(1, 3, 5))
        )
        levels.append(vol.reshape(-1).copy())
    return OccupancyPyramid(levels=levels)


# ---------------------------------------------------------------------------
# baked asset


@dataclass
class VoshAsset:
    """Loaded asset: the hybrid representation plus its pyramid and manifest."""

    vosh: Vosh
    pyramid: OccupancyPyramid
    manifest: dict


def _pack_bits(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8)).tobytes()


def _unpack_bits(data: bytes, n: int) -> np.ndarray:
    arr = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n)
    return arr.astype(bool)


def bake(vosh: Vosh) -> bytes:
    """Serialize a Vosh to the deterministic binary asset."""
    grid = vosh.grid
    r = grid.resolution
    alive = grid.alive
    cells = np.flatnonzero(alive).astype(np.uint32)  # sorted by construction
    ch = grid.channels[cells.astype(np.int64)]
    qdata = np.empty((len(cells), N_CHANNELS), dtype=np.uint8)
    qdata[:, 0] = quantize_density(ch[:, 0])
    qdata[:, 1:] = quantize_appearance(ch[:, 1:])

    pyramid = build_occupancy_pyramid(grid)

    mesh = vosh.mesh
    mesh_payload = b"".join(
        [
            struct.pack("<II", mesh.n_vertices, mesh.n_faces),
            mesh.vertices.astype("<f4").tobytes(),
            mesh.faces.astype("<u4").tobytes(),
            quantize_appearance(
                np.concatenate([mesh.vertex_diffuse, mesh.vertex_feature], axis=1)
            ).tobytes(),
        ]
    )

    pyra_parts = [struct.pack("<I", pyramid.n_levels)]
    for res, lvl in zip(pyramid.resolutions(), pyramid.levels):
        pyra_parts.append(struct.pack("<I", res))
        pyra_parts.append(_pack_bits(lvl))

    occg = struct.pack("<I", vosh.r_mesh)
    if vosh.r_mesh:
        occg += _pack_bits(vosh.mesh_occupancy)

    mlp_payload = b"".join(
        vosh.head.params()[k].astype("<f4").tobytes() for k in MLP_PARAM_ORDER
    )

    manifest = {
        "version": VERSION,
        "resolution": r,
        "f_dim": F_DIM,
        "sigma_max": SIGMA_MAX,
        "density_quantization": "8-bit log1p over [0, sigma_max]",
        "appearance_quantization": "8-bit linear over [0, 1]",
        "n_cells": int(len(cells)),
        "n_vertices": int(mesh.n_vertices),
        "n_faces": int(mesh.n_faces),
        "pyramid_levels": pyramid.n_levels,
        "r_mesh": vosh.r_mesh,
        "mlp": {k: list(PARAM_SHAPES[k]) for k in MLP_PARAM_ORDER},
    }
    sections = [
        (b"MANI", json.dumps(manifest, sort_keys=True).encode()),
        (b"VOXC", struct.pack("<I", len(cells)) + cells.astype("<u4").tobytes()),
        (b"VOXD", qdata.tobytes()),
        (b"PYRA", b"".join(pyra_parts)),
        (b"MESH", mesh_payload),
        (b"OCCG", occg),
        (b"MLPW", mlp_payload),
    ]
    return write_container(ASSET_MAGIC, sections)


def load(data: bytes) -> VoshAsset:
    """Parse a baked asset; inverse of bake up to quantization."""
    sections = read_container(data, ASSET_MAGIC)
    manifest = json.loads(_need(sections, b"MANI").decode())
    r = int(manifest["resolution"])

    voxc = _need(sections, b"VOXC")
    if len(voxc) < 4:
        raise TruncatedAssetError("VOXC section too short")
    (n_cells,) = struct.unpack_from("<I", voxc, 0)
    if len(voxc) != 4 + 4 * n_cells:
        raise TruncatedAssetError("VOXC cell list length mismatch")
    cells = np.frombuffer(voxc, dtype="<u4", count=n_cells, offset=4).astype(np.int64)
    if n_cells and np.any(np.diff(cells) <= 0):
        raise InvalidArgumentError("VOXC cell indices must be strictly increasing")
    if n_cells and (cells[0] < 0 or cells[-1] >= r**3):
        raise InvalidArgumentError("VOXC cell index out of range")

    voxd = _need(sections, b"VOXD")
    if len(voxd) != n_cells * N_CHANNELS:
        raise TruncatedAssetError("VOXD payload length mismatch")
    qdata = np.frombuffer(voxd, dtype=np.uint8).reshape(n_cells, N_CHANNELS)

    channels = np.zeros((r**3, N_CHANNELS), dtype=np.float32)
    channels[cells, 0] = dequantize_density(qdata[:, 0]).astype(np.float32)
    channels[cells, 1:] = dequantize_appearance(qdata[:, 1:]).astype(np.float32)
    alive = np.zeros(r**3, dtype=bool)
    alive[cells] = True

    pyra = _need(sections, b"PYRA")
    if len(pyra) < 4:
        raise TruncatedAssetError("PYRA section too short")
    (n_levels,) = struct.unpack_from("<I", pyra, 0)
    off = 4
    levels = []
    for _ in range(n_levels):
        if off + 4 > len(pyra):
            raise TruncatedAssetError("PYRA level header truncated")
        (res,) = struct.unpack_from("<I", pyra, off)
        off += 4
        nbytes = (res**3 + 7) // 8
        if off + nbytes > len(pyra):
            raise TruncatedAssetError("PYRA level bits truncated")
        levels.append(_unpack_bits(pyra[off : off + nbytes], res**3))
        off += nbytes
    pyramid = OccupancyPyramid(levels=levels)

    meshp = _need(sections, b"MESH")
    if len(meshp) < 8:
        raise TruncatedAssetError("MESH section too short")
    nv, nf = struct.unpack_from("<II", meshp, 0)
    off = 8
    need = nv * 12 + nf * 12 + nv * (3 + F_DIM)
    if len(meshp) != 8 + need:
        raise TruncatedAssetError("MESH payload length mismatch")
    verts = np.frombuffer(meshp, dtype="<f4", count=nv * 3, offset=off).reshape(nv, 3)
    off += nv * 12
    faces = np.frombuffer(meshp, dtype="<u4", count=nf * 3, offset=off).reshape(nf, 3)
    off += nf * 12
    qapp = np.frombuffer(meshp, dtype=np.uint8, count=nv * (3 + F_DIM), offset=off)
    qapp = qapp.reshape(nv, 3 + F_DIM)
    app = dequantize_appearance(qapp)
    mesh = TriMesh(
        vertices=verts.astype(np.float64),
        faces=faces.astype(np.int64),
        vertex_diffuse=app[:, :3],
        vertex_feature=app[:, 3:],
    )

    occg = _need(sections, b"OCCG")
    if len(occg) < 4:
        raise TruncatedAssetError("OCCG section too short")
    (r_mesh,) = struct.unpack_from("<I", occg, 0)
    if r_mesh:
        nbytes = (r_mesh**3 + 7) // 8
        if len(occg) != 4 + nbytes:
            raise TruncatedAssetError("OCCG bits truncated")
        occ = _unpack_bits(occg[4:], r_mesh**3)
    else:
        occ = np.zeros(0, dtype=bool)

    mlpw = _need(sections, b"MLPW")
    params = {}
    off = 0
    for k in MLP_PARAM_ORDER:
        shape = PARAM_SHAPES[k]
        n = int(np.prod(shape))
        if off + 4 * n > len(mlpw):
            raise TruncatedAssetError("MLPW payload truncated")
        params[k] = (
            np.frombuffer(mlpw, dtype="<f4", count=n, offset=off)
            .astype(np.float64)
            .reshape(shape)
        )
        off += 4 * n
    head = MlpHead(**params)

    vosh = Vosh(
        grid=DecodedGrid(r, channels, alive),
        mesh=mesh,
        head=head,
        mesh_occupancy=occ,
        r_mesh=int(r_mesh),
    )
    return VoshAsset(vosh=vosh, pyramid=pyramid, manifest=manifest)


def save_asset(path, vosh: Vosh) -> dict:
    """Write the asset plus its sidecar manifest; returns the manifest."""
    data = bake(vosh)
    with open(path, "wb") as f:
        f.write(data)
    manifest = json.loads(read_container(data, ASSET_MAGIC)[b"MANI"].decode())
    with open(str(path) + ".manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_asset(path) -> VoshAsset:
    with open(path, "rb") as f:
        return load(f.read())


# ---------------------------------------------------------------------------
# checkpoints (full precision, sparse over alive cells)


def _grid_sections(grid: VoxelGrid) -> list:
    cells = np.flatnonzero(grid.alive).astype(np.uint32)
    raw = grid.raw[cells.astype(np.int64)]
    return [
        (b"GRDC", struct.pack("<II", grid.resolution, len(cells)) + cells.astype("<u4").tobytes()),
        (b"GRDR", raw.astype("<f4").tobytes()),
    ]


def _grid_from_sections(sections: dict) -> VoxelGrid:
    grdc = _need(sections, b"GRDC")
    r, n_cells = struct.unpack_from("<II", grdc, 0)
    cells = np.frombuffer(grdc, dtype="<u4", count=n_cells, offset=8).astype(np.int64)
    raw_payload = _need(sections, b"GRDR")
    raw = np.frombuffer(raw_payload, dtype="<f4").reshape(n_cells, N_CHANNELS)
    grid = VoxelGrid.create(int(r))
    grid.alive[:] = False
    grid.alive[cells] = True
    grid.raw[cells] = raw
    return grid


def _head_sections(head: MlpHead) -> list:
    payload = b"".join(head.params()[k].astype("<f8").tobytes() for k in MLP_PARAM_ORDER)
    return [(b"MLPW", payload)]


def _head_from_sections(sections: dict) -> MlpHead:
    mlpw = _need(sections, b"MLPW")
    params = {}
    off = 0
    for k in MLP_PARAM_ORDER:
        shape = PARAM_SHAPES[k]
        n = int(np.prod(shape))
        params[k] = np.frombuffer(mlpw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    return MlpHead(**params)


def _mesh_sections(mesh: TriMesh) -> list:
    payload = b"".join(
        [
            struct.pack("<II", mesh.n_vertices, mesh.n_faces),
            mesh.vertices.astype("<f8").tobytes(),
            mesh.faces.astype("<u4").tobytes(),
            mesh.vertex_diffuse.astype("<f8").tobytes(),
            mesh.vertex_feature.astype("<f8").tobytes(),
            mesh.face_error.astype("<f8").tobytes(),
            mesh.face_normal_change.astype("<f8").tobytes(),
            np.packbits(mesh.face_observed.astype(np.uint8)).tobytes(),
        ]
    )
    return [(b"MESH", payload)]


def _mesh_from_sections(sections: dict) -> TriMesh:
    p = _need(sections, b"MESH")
    nv, nf = struct.unpack_from("<II", p, 0)
    off = 8

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(p, dtype=dtype, count=count, offset=off).reshape(shape).copy()
        off += count * np.dtype(dtype).itemsize
        return arr

    verts = take("<f8", nv * 3, (nv, 3))
    faces = take("<u4", nf * 3, (nf, 3)).astype(np.int64)
    vdiff = take("<f8", nv * 3, (nv, 3))
    vfeat = take("<f8", nv * F_DIM, (nv, F_DIM))
    ferr = take("<f8", nf, (nf,))
    fnc = take("<f8", nf, (nf,))
    nbytes = (nf + 7) // 8
    observed = np.unpackbits(
        np.frombuffer(p, dtype=np.uint8, count=nbytes, offset=off), count=nf
    ).astype(bool)
    return TriMesh(
        vertices=verts,
        faces=faces,
        vertex_diffuse=vdiff,
        vertex_feature=vfeat,
        face_error=ferr,
        face_normal_change=fnc,
        face_observed=observed,
    )


def save_checkpoint(path, *, meta: dict, grid=None, head=None, mesh=None, occupancy=None, r_mesh=0) -> None:
    sections = [(b"META", json.dumps(meta, sort_keys=True).encode())]
    if grid is not None:
        sections += _grid_sections(grid)
    if head is not None:
        sections += _head_sections(head)
    if mesh is not None:
        sections += _mesh_sections(mesh)
    if occupancy is not None:
        occ = struct.pack("<I", r_mesh)
        if r_mesh:
            occ += np.packbits(occupancy.astype(np.uint8)).tobytes()
        sections.append((b"OCCG", occ))
    with open(path, "wb") as f:
        f.write(write_container(CKPT_MAGIC, sections))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        sections = read_container(f.read(), CKPT_MAGIC)
    out = {"meta": json.loads(_need(sections, b"META").decode())}
    if b"GRDC" in sections:
        out["grid"] = _grid_from_sections(sections)
    if b"MLPW" in sections:
        out["head"] = _head_from_sections(sections)
    if b"MESH" in sections:
        out["mesh"] = _mesh_from_sections(sections)
    if b"OCCG" in sections:
        occg = sections[b"OCCG"]
        (r_mesh,) = struct.unpack_from("<I", occg, 0)
        out["r_mesh"] = int(r_mesh)
        if r_mesh:
            out["occupancy"] = np.unpackbits(
                np.frombuffer(occg, dtype=np.uint8, offset=4), count=r_mesh**3
            ).astype(bool)
        else:
            out["occupancy"] = np.zeros(0, dtype=bool)
    return out
