"""Analytic test scenes, the reference ray tracer, and posed datasets.

Scenes are built from a JSON-able descriptor: a list of primitives (sphere,
axis-aligned box, finite axis-aligned rectangle) carrying procedural albedo
functions and an optional direction-dependent tint. The reference tracer does
first-hit Lambertian shading only, so every dataset pixel has a closed-form
expected value.

World coordinates are z-up; all content must fit in ||x||_inf <= 4.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DescriptorError, InvalidArgumentError
from .images import load_png, save_png

WORLD_BOUND = 4.0
DEFAULT_CAMERA_RADIUS = 2.5

_EPS = 1e-9


# ---------------------------------------------------------------------------
# albedo / tint


def _eval_albedo(spec: dict, pts: np.ndarray) -> np.ndarray:
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return np.broadcast_to(np.asarray(spec["color"], dtype=np.float64), pts.shape).copy()
    if kind == "checker":
        scale = float(spec.get("scale", 2.0))
        c0 = np.asarray(spec["colors"][0], dtype=np.float64)
        c1 = np.asarray(spec["colors"][1], dtype=np.float64)
        parity = np.floor(pts * scale).sum(axis=-1).astype(np.int64) & 1
        return np.where(parity[..., None] == 0, c0, c1)
    if kind == "gradient":
        axis = np.asarray(spec.get("axis", [0, 0, 1]), dtype=np.float64)
        c0 = np.asarray(spec["colors"][0], dtype=np.float64)
        c1 = np.asarray(spec["colors"][1], dtype=np.float64)
        t = np.clip((pts @ axis + 1.0) * 0.5, 0.0, 1.0)
        return c0 + t[..., None] * (c1 - c0)
    raise DescriptorError(f"unknown albedo kind: {kind!r}")


def _validate_albedo(spec: dict) -> None:
    kind = spec.get("kind", "constant")
    if kind == "constant":
        cols = [spec.get("color")]
    elif kind in ("checker", "gradient"):
        cols = spec.get("colors", [])
        if len(cols) != 2:
            raise DescriptorError(f"albedo {kind!r} needs exactly 2 colors")
    else:
        raise DescriptorError(f"unknown albedo kind: {kind!r}")
    for c in cols:
        arr = np.asarray(c, dtype=np.float64)
        if arr.shape != (3,) or np.any(arr < 0) or np.any(arr > 1):
            raise DescriptorError("albedo colors must be RGB in [0, 1]")


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    kind: str
    params: dict
    albedo: dict
    tint: dict | None

    def extent(self) -> float:
        p = self.params
        if self.kind == "sphere":
            return float(np.max(np.abs(p["center"])) + p["radius"])
        if self.kind == "box":
            return float(np.max(np.abs(np.asarray(p["center"])) + np.asarray(p["half_extents"])))
        if self.kind == "rect":
            axis = p["axis"]
            lo = np.zeros(3)
            lo[axis] = abs(p["offset"])
            other = [a for a in range(3) if a != axis]
            for o_axis, c, h in zip(other, p["center2"], p["half_extents"]):
                lo[o_axis] = abs(c) + h
            return float(np.max(lo))
        raise DescriptorError(f"unknown primitive kind: {self.kind!r}")


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple
    background: np.ndarray
    march_bound: float
    descriptor: dict

    def centroid(self) -> np.ndarray:
        if not self.primitives:
            return np.zeros(3)
        acc = np.zeros(3)
        for prim in self.primitives:
            p = prim.params
            if prim.kind == "sphere" or prim.kind == "box":
                acc += np.asarray(p["center"], dtype=np.float64)
            else:
                c = np.zeros(3)
                c[p["axis"]] = p["offset"]
                other = [a for a in range(3) if a != p["axis"]]
                c[other[0]], c[other[1]] = p["center2"]
                acc += c
        return acc / len(self.primitives)


def make_scene(descriptor: dict) -> AnalyticScene:
    """Validate a descriptor and build the scene. Deterministic pure data."""
    if not isinstance(descriptor, dict):
        raise DescriptorError("scene descriptor must be a mapping")
    bg = np.asarray(descriptor.get("background", [0.0, 0.0, 0.0]), dtype=np.float64)
    if bg.shape != (3,) or np.any(bg < 0) or np.any(bg > 1):
        raise DescriptorError("background must be RGB in [0, 1]")
    march_bound = float(descriptor.get("march_bound", WORLD_BOUND))
    prims = []
    for spec in descriptor.get("primitives", []):
        kind = spec.get("kind")
        if kind == "sphere":
            params = {
                "center": np.asarray(spec["center"], dtype=np.float64),
                "radius": float(spec["radius"]),
            }
            if params["radius"] <= 0:
                raise DescriptorError("sphere radius must be positive")
        elif kind == "box":
            params = {
                "center": np.asarray(spec["center"], dtype=np.float64),
                "half_extents": np.asarray(spec["half_extents"], dtype=np.float64),
            }
            if np.any(params["half_extents"] <= 0):
                raise DescriptorError("box half_extents must be positive")
        elif kind == "rect":
            axis = int(spec["axis"])
            if axis not in (0, 1, 2):
                raise DescriptorError("rect axis must be 0, 1, or 2")
            params = {
                "axis": axis,
                "offset": float(spec["offset"]),
                "center2": tuple(float(v) for v in spec.get("center2", (0.0, 0.0))),
                "half_extents": tuple(float(v) for v in spec["half_extents"]),
            }
            if any(h <= 0 for h in params["half_extents"]):
                raise DescriptorError("rect half_extents must be positive")
        else:
            raise DescriptorError(f"unknown primitive kind: {kind!r}")
        albedo = spec.get("albedo", {"kind": "constant", "color": [0.5, 0.5, 0.5]})
        _validate_albedo(albedo)
        tint = spec.get("tint")
        if tint is not None:
            ax = np.asarray(tint.get("axis", [0, 0, 1]), dtype=np.float64)
            if ax.shape != (3,) or np.linalg.norm(ax) < _EPS:
                raise DescriptorError("tint axis must be a nonzero 3-vector")
        prim = Primitive(kind=kind, params=params, albedo=albedo, tint=tint)
        if prim.extent() > WORLD_BOUND:
            raise DescriptorError(
                f"primitive {kind!r} extends past ||x||_inf <= {WORLD_BOUND}"
            )
        prims.append(prim)
    return AnalyticScene(
        primitives=tuple(prims),
        background=bg,
        march_bound=march_bound,
        descriptor=json.loads(json.dumps(descriptor)),
    )


def load_scene(path) -> AnalyticScene:
    with open(path) as f:
        return make_scene(json.load(f))


def save_scene(path, scene: AnalyticScene) -> None:
    with open(path, "w") as f:
        json.dump(scene.descriptor, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# intersection


def _intersect_sphere(params, origins, dirs):
    oc = origins - params["center"]
    b = np.einsum("...c,...c->...", oc, dirs)
    c = np.einsum("...c,...c->...", oc, oc) - params["radius"] ** 2
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > _EPS, t0, t1)
    return np.where(ok & (t > _EPS), t, np.inf)


def _intersect_box(params, origins, dirs):
    lo = np.asarray(params["center"]) - np.asarray(params["half_extents"])
    hi = np.asarray(params["center"]) + np.asarray(params["half_extents"])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > _EPS)
    t = np.where(tmin > _EPS, tmin, tmax)
    return np.where(hit & (t > _EPS), t, np.inf)


def _intersect_rect(params, origins, dirs):
    axis = params["axis"]
    other = [a for a in range(3) if a != axis]
    da = dirs[..., axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (params["offset"] - origins[..., axis]) / da
    ok = (np.abs(da) > _EPS) & (t > _EPS)
    for o_axis, c, h in zip(other, params["center2"], params["half_extents"]):
        coord = origins[..., o_axis] + t * dirs[..., o_axis]
        ok = ok & (np.abs(coord - c) <= h)
    return np.where(ok, t, np.inf)


_INTERSECTORS = {"sphere": _intersect_sphere, "box": _intersect_box, "rect": _intersect_rect}


def trace_rays(scene: AnalyticScene, origins, dirs) -> np.ndarray:
    """Vectorized first-hit shading. origins/dirs (..., 3) -> colors (..., 3)."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    best_t = np.full(origins.shape[:-1], np.inf)
    best_idx = np.full(origins.shape[:-1], -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t = _INTERSECTORS[prim.kind](prim.params, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, i, best_idx)
    colors = np.broadcast_to(scene.background, origins.shape).copy()
    for i, prim in enumerate(scene.primitives):
        mask = best_idx == i
        if not np.any(mask):
            continue
        pts = origins[mask] + best_t[mask][..., None] * dirs[mask]
        shade = _eval_albedo(prim.albedo, pts)
        if prim.tint is not None:
            ax = np.asarray(prim.tint["axis"], dtype=np.float64)
            ax = ax / np.linalg.norm(ax)
            strength = float(prim.tint.get("strength", 0.1))
            col = np.asarray(prim.tint.get("color", [1.0, 1.0, 1.0]), dtype=np.float64)
            fac = 0.5 + 0.5 * (-dirs[mask] @ ax)
            shade = shade + strength * fac[..., None] * col
        colors[mask] = np.clip(shade, 0.0, 1.0)
    return colors


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. rotation rows are (right, down, forward) in world space."""

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    width: int
    height: int

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        rot = np.asarray(self.rotation, dtype=np.float64)
        if pos.shape != (3,) or rot.shape != (3, 3):
            raise InvalidArgumentError("Camera: bad position/rotation shape")
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-6:
            raise InvalidArgumentError("Camera: rotation must be orthonormal")
        if self.width < 8 or self.height < 8:
            raise InvalidArgumentError("Camera: resolution must be at least 8x8")
        if self.focal <= 0:
            raise InvalidArgumentError("Camera: focal must be positive")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)

    @classmethod
    def look_at(cls, position, target, focal, width, height) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward = forward / np.linalg.norm(forward)
        up = np.array([0.0, 0.0, 1.0])
        if abs(forward @ up) > 0.999:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(position=position, rotation=rot, focal=float(focal), width=int(width), height=int(height))

    def pixel_dirs(self) -> np.ndarray:
        """World-space unit directions through all pixel centers, (H, W, 3)."""
        u = (np.arange(self.width) + 0.5 - self.width / 2.0) / self.focal
        v = (np.arange(self.height) + 0.5 - self.height / 2.0) / self.focal
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        return d_cam @ self.rotation  # R^T applied from the right

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "rotation": self.rotation.reshape(-1).tolist(),
            "focal": self.focal,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            position=np.asarray(d["position"], dtype=np.float64),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            focal=float(d["focal"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def trace_reference(scene: AnalyticScene, camera: Camera, pixel) -> np.ndarray:
    """Ground-truth RGB of one pixel; the oracle every stage is judged against."""
    u, v = int(pixel[0]), int(pixel[1])
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise InvalidArgumentError(f"pixel {(u, v)} outside {camera.width}x{camera.height}")
    d = camera.pixel_dirs()[v, u]
    return trace_rays(scene, camera.position[None], d[None])[0]


def render_view(scene: AnalyticScene, camera: Camera) -> np.ndarray:
    dirs = camera.pixel_dirs()
    origins = np.broadcast_to(camera.position, dirs.shape)
    return trace_rays(scene, origins, dirs)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class MultiViewDataset:
    views: list  # list of (Camera, float image (H, W, 3))
    splits: list  # "train" | "heldout" per view

    def __post_init__(self):
        if not any(s == "heldout" for s in self.splits):
            raise InvalidArgumentError("dataset needs at least one held-out view")
        for (cam, img), _ in zip(self.views, self.splits):
            if img.shape != (cam.height, cam.width, 3):
                raise InvalidArgumentError("dataset image does not match camera resolution")

    def train_views(self):
        return [v for v, s in zip(self.views, self.splits) if s == "train"]

    def heldout_views(self):
        return [v for v, s in zip(self.views, self.splits) if s == "heldout"]


def hemisphere_cameras(
    n_views: int,
    *,
    target,
    radius=DEFAULT_CAMERA_RADIUS,
    focal_factor=1.1,
    width=128,
    height=128,
    seed=0,
    min_elevation=0.15,
) -> list:
    """Golden-sequence upper-hemisphere poses with a small seeded jitter.

    Elevation follows a low-discrepancy sequence, so the trailing held-out
    views cover the same elevation range as the training prefix.
    """
    rng = np.random.default_rng(seed)
    golden = (1.0 + 5.0**0.5) / 2.0
    conj = golden - 1.0
    cams = []
    for i in range(n_views):
        z = min_elevation + (0.9 - min_elevation) * ((0.5 + i * conj) % 1.0)
        phi = 2.0 * np.pi * ((i / golden) % 1.0) + rng.uniform(-0.05, 0.05)
        rho = np.sqrt(max(1.0 - z * z, 0.0))
        pos = np.asarray(target) + radius * np.array(
            [rho * np.cos(phi), rho * np.sin(phi), z]
        )
        cams.append(
            Camera.look_at(pos, target, focal=focal_factor * max(width, height), width=width, height=height)
        )
    return cams


def render_dataset(scene: AnalyticScene, n_views: int, resolution, seed=0) -> MultiViewDataset:
    """Posed dataset from the reference tracer; last ceil(n/8) views held out."""
    if n_views < 2:
        raise InvalidArgumentError("render_dataset: need at least 2 views")
    width, height = resolution
    cams = hemisphere_cameras(
        n_views, target=scene.centroid(), width=width, height=height, seed=seed
    )
    n_held = -(-n_views // 8)
    views = []
    splits = []
    for i, cam in enumerate(cams):
        views.append((cam, render_view(scene, cam)))
        splits.append("heldout" if i >= n_views - n_held else "train")
    return MultiViewDataset(views=views, splits=splits)


def save_dataset(dirpath, dataset: MultiViewDataset) -> None:
    root = Path(dirpath)
    (root / "images").mkdir(parents=True, exist_ok=True)
    meta = {"views": []}
    for i, ((cam, img), split) in enumerate(zip(dataset.views, dataset.splits)):
        name = f"view_{i:03d}.png"
        save_png(root / "images" / name, img)
        entry = cam.to_dict()
        entry["split"] = split
        entry["image"] = name
        meta["views"].append(entry)
    with open(root / "cameras.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_dataset(dirpath) -> MultiViewDataset:
    root = Path(dirpath)
    with open(root / "cameras.json") as f:
        meta = json.load(f)
    views = []
    splits = []
    for entry in meta["views"]:
        cam = Camera.from_dict(entry)
        img = load_png(root / "images" / entry["image"])
        views.append((cam, img))
        splits.append(entry["split"])
    return MultiViewDataset(views=views, splits=splits)
