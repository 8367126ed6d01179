"""Cameras, synthetic multiview ground truth, dataset manifests and images.

The scene lives in [-1,1]^3.  Synthetic instances are analytic sphere/box
arrangements rendered by exact ray intersection with flat albedo over a
white background, so ground truth is multiview consistent by construction
and view independence is exactly testable (a Lambert shading flag exists
for harder tests).  Manifests follow the common "transforms" convention:
one structured-text file per instance with an intrinsics block and
per-frame row-major 4x4 camera-to-world matrices plus relative image paths.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

WORLD_BOUND = 1.0  # scene cube is [-WORLD_BOUND, WORLD_BOUND]^3


class DatasetError(Exception):
    """Base for dataset ingestion failures."""


class ManifestNotFoundError(DatasetError):
    pass


class ManifestFormatError(DatasetError):
    pass


class PoseOrthonormalityError(DatasetError):
    pass


class ImageDecodeError(DatasetError):
    pass


# -- cameras -------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    focal: float
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.focal <= 0:
            raise ValueError("intrinsics must be positive")

    @property
    def principal(self) -> tuple[float, float]:
        return (self.width / 2.0 if self.cx is None else self.cx,
                self.height / 2.0 if self.cy is None else self.cy)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


def check_pose(pose: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    """Validate a 4x4 right-handed camera-to-world matrix."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ManifestFormatError("pose must be a 4x4 matrix")
    if not np.allclose(pose[3], [0, 0, 0, 1], atol=tol):
        raise ManifestFormatError("pose last row must be (0,0,0,1)")
    r = pose[:3, :3]
    if not np.allclose(r @ r.T, np.eye(3), atol=tol):
        raise PoseOrthonormalityError("rotation block is not orthonormal")
    return pose


def look_at_pose(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix looking from eye at target (camera looks down -z)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -fwd
    pose[:3, 3] = eye
    return pose


def ring_poses(n_azimuth: int, elevation_deg: float = 20.0,
               radius: float = 2.5) -> list[np.ndarray]:
    """Evenly spaced look-at poses on one elevation ring around the origin."""
    poses = []
    el = np.deg2rad(elevation_deg)
    for i in range(n_azimuth):
        az = 2.0 * np.pi * i / n_azimuth
        eye = radius * np.array([np.cos(el) * np.cos(az),
                                 np.sin(el),
                                 np.cos(el) * np.sin(az)])
        poses.append(look_at_pose(eye))
    return poses


def hemisphere_poses(n_azimuth: int = 24, elevations_deg=(10.0, 35.0),
                     radius: float = 2.5) -> list[np.ndarray]:
    """Predefined upper-hemisphere pose set (rings of azimuths per elevation)."""
    poses = []
    for el in elevations_deg:
        poses.extend(ring_poses(n_azimuth, el, radius))
    return poses


def pixel_directions(intr: CameraIntrinsics, pose: np.ndarray) -> np.ndarray:
    """World-space unit directions through every pixel center, [H*W, 3]."""
    cx, cy = intr.principal
    u = (np.arange(intr.width) + 0.5 - cx) / intr.focal
    v = -(np.arange(intr.height) + 0.5 - cy) / intr.focal
    uu, vv = np.meshgrid(u, v)
    dirs = np.stack([uu, vv, -np.ones_like(uu)], axis=-1).reshape(-1, 3)
    dirs = dirs @ np.asarray(pose)[:3, :3].T
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def ray_cube_bounds(origins: np.ndarray, dirs: np.ndarray,
                    bound: float = WORLD_BOUND):
    """Slab intersection with the scene cube: (near, far, hit mask)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(dirs != 0.0, 1.0 / dirs, np.inf)
    t0 = (-bound - origins) * inv
    t1 = (bound - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    near = np.maximum(tmin, 1e-4)
    hit = tmax > near
    return near, tmax, hit


def camera_ray(intr: CameraIntrinsics, pose: np.ndarray,
               pixel: tuple[int, int]) -> Ray:
    """Ray through one pixel center; near/far from scene-cube intersection."""
    u, v = pixel
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValueError("pixel out of bounds")
    pose = np.asarray(pose, dtype=np.float64)
    cx, cy = intr.principal
    d_cam = np.array([(u + 0.5 - cx) / intr.focal,
                      -(v + 0.5 - cy) / intr.focal,
                      -1.0])
    d = pose[:3, :3] @ d_cam
    d /= np.linalg.norm(d)
    origin = pose[:3, 3].copy()
    near, far, hit = ray_cube_bounds(origin[None], d[None])
    if not hit[0]:
        near, far = np.array([0.0]), np.array([0.0])
    return Ray(origin=origin, direction=d, near=float(near[0]), far=float(far[0]))


def camera_rays(intr: CameraIntrinsics, pose: np.ndarray):
    """All pixel rays of a view: origins [P,3], dirs [P,3], near, far, hit."""
    pose = check_pose(pose)
    dirs = pixel_directions(intr, pose)
    origins = np.broadcast_to(pose[:3, 3], dirs.shape).copy()
    near, far, hit = ray_cube_bounds(origins, dirs)
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 0.0)
    return origins, dirs, near, far, hit


# -- synthetic scenes ------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    kind: str                 # "sphere" | "box"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # sphere: (r, r, r); box: half extents
    albedo: tuple[float, float, float]

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        c = np.asarray(self.center)
        s = np.asarray(self.size)
        if np.any(np.abs(c) + s > WORLD_BOUND + 1e-9):
            raise ValueError("primitive extends outside scene bounds")
        if np.any(s <= 0):
            raise ValueError("primitive size must be positive")
        a = np.asarray(self.albedo)
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("albedo must be in [0,1]")


def sphere(center, radius: float, albedo) -> Primitive:
    return Primitive("sphere", tuple(center), (radius,) * 3, tuple(albedo))


def box(center, half_extents, albedo) -> Primitive:
    return Primitive("box", tuple(center), tuple(half_extents), tuple(albedo))


@dataclass(frozen=True)
class SceneSpec:
    """A primitive arrangement; empty specs render to pure background."""
    primitives: tuple[Primitive, ...] = ()


def _sphere_hits(origins, dirs, center, radius):
    oc = origins - center
    b = np.einsum("ij,ij->i", dirs, oc)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = np.where(-b - sq > 1e-6, -b - sq, -b + sq)
    return np.where(ok & (t > 1e-6), t, np.inf)


def _box_hits(origins, dirs, center, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(dirs != 0.0, 1.0 / dirs, np.inf)
    lo = (center - half - origins) * inv
    hi = (center + half - origins) * inv
    tmin = np.minimum(lo, hi).max(axis=-1)
    tmax = np.maximum(lo, hi).min(axis=-1)
    t = np.where(tmin > 1e-6, tmin, tmax)
    return np.where((tmax >= tmin) & (t > 1e-6), t, np.inf)


def _surface_normal(prim: Primitive, points: np.ndarray) -> np.ndarray:
    c = np.asarray(prim.center)
    if prim.kind == "sphere":
        n = points - c
    else:
        rel = (points - c) / np.asarray(prim.size)
        n = np.zeros_like(points)
        axis = np.argmax(np.abs(rel), axis=-1)
        n[np.arange(len(points)), axis] = np.sign(
            rel[np.arange(len(points)), axis])
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def render_analytic(spec: SceneSpec, intr: CameraIntrinsics, pose: np.ndarray,
                    lambert: bool = False,
                    background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact nearest-hit rendering of a primitive scene, [H,W,3] in [0,1]."""
    pose = check_pose(pose)
    dirs = pixel_directions(intr, pose)
    origins = np.broadcast_to(pose[:3, 3], dirs.shape)
    best_t = np.full(len(dirs), np.inf)
    color = np.tile(np.asarray(background, dtype=np.float64), (len(dirs), 1))
    for prim in spec.primitives:
        c = np.asarray(prim.center, dtype=np.float64)
        if prim.kind == "sphere":
            t = _sphere_hits(origins, dirs, c, prim.size[0])
        else:
            t = _box_hits(origins, dirs, c, np.asarray(prim.size))
        closer = t < best_t
        if not closer.any():
            continue
        shade = np.asarray(prim.albedo, dtype=np.float64)
        if lambert:
            pts = origins[closer] + t[closer, None] * dirs[closer]
            n = _surface_normal(prim, pts)
            lam = np.clip(-np.einsum("ij,ij->i", n, dirs[closer]), 0.0, 1.0)
            color[closer] = shade * (0.25 + 0.75 * lam)[:, None]
        else:
            color[closer] = shade
        best_t = np.where(closer, t, best_t)
    img = color.reshape(intr.height, intr.width, 3)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- datasets ---------------------------------------------------------------------

@dataclass
class View:
    pose: np.ndarray
    image: np.ndarray  # [H,W,3] float32 in [0,1]


@dataclass
class Instance:
    instance_id: str
    views: list[View]
    spec: SceneSpec | None = None


@dataclass
class SceneDataset:
    intrinsics: CameraIntrinsics
    instances: list[Instance] = field(default_factory=list)

    def instance_ids(self) -> list[str]:
        return [inst.instance_id for inst in self.instances]

    def by_id(self, instance_id: str) -> Instance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)


def generate_synthetic_dataset(specs: dict[str, SceneSpec],
                               poses: list[np.ndarray],
                               intrinsics: CameraIntrinsics,
                               lambert: bool = False) -> SceneDataset:
    if not specs:
        raise ValueError("no scene specs given")
    instances = []
    for inst_id, spec in specs.items():
        views = [View(pose=np.asarray(p, dtype=np.float64),
                      image=render_analytic(spec, intrinsics, p, lambert=lambert))
                 for p in poses]
        instances.append(Instance(inst_id, views, spec))
    return SceneDataset(intrinsics=intrinsics, instances=instances)


# -- images -----------------------------------------------------------------------

def write_image(image: np.ndarray, path: str) -> None:
    """Save a [H,W,3] float image in [0,1] as 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), "RGB").save(path)


def read_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise
    except Exception as exc:  # Pillow raises various decode errors
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    return arr / 255.0


# -- manifests ----------------------------------------------------------------------

def save_manifest(dataset: SceneDataset, root: str) -> None:
    """One structured-text file per instance plus PNG frames."""
    os.makedirs(root, exist_ok=True)
    intr = dataset.intrinsics
    cx, cy = intr.principal
    for inst in dataset.instances:
        img_dir = os.path.join(root, inst.instance_id)
        os.makedirs(img_dir, exist_ok=True)
        frames = []
        for i, view in enumerate(inst.views):
            rel = os.path.join(inst.instance_id, f"frame_{i:04d}.png")
            write_image(view.image, os.path.join(root, rel))
            frames.append({"camera_to_world": np.asarray(view.pose).reshape(-1).tolist(),
                           "image": rel})
        doc = {"intrinsics": {"width": intr.width, "height": intr.height,
                              "focal": intr.focal, "cx": cx, "cy": cy},
               "frames": frames}
        with open(os.path.join(root, f"{inst.instance_id}.json"), "w") as f:
            json.dump(doc, f, indent=1)


def load_manifest(root: str) -> SceneDataset:
    """Load a dataset directory, eagerly validating poses and images."""
    if not os.path.isdir(root):
        raise ManifestNotFoundError(f"no dataset directory at {root}")
    files = sorted(f for f in os.listdir(root) if f.endswith(".json"))
    if not files:
        raise ManifestNotFoundError(f"no instance manifests in {root}")
    intr = None
    instances = []
    for fname in files:
        with open(os.path.join(root, fname)) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as exc:
                raise ManifestFormatError(f"{fname}: invalid JSON") from exc
        try:
            ib = doc["intrinsics"]
            this_intr = CameraIntrinsics(int(ib["width"]), int(ib["height"]),
                                         float(ib["focal"]),
                                         float(ib["cx"]), float(ib["cy"]))
            frames = doc["frames"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestFormatError(f"{fname}: {exc}") from exc
        if intr is None:
            intr = this_intr
        views = []
        for fr in frames:
            mat = np.asarray(fr.get("camera_to_world", []), dtype=np.float64)
            if mat.size != 16:
                raise ManifestFormatError(
                    f"{fname}: camera_to_world must have 16 entries")
            pose = check_pose(mat.reshape(4, 4))
            img_path = os.path.join(root, fr["image"])
            if not os.path.exists(img_path):
                raise ImageDecodeError(f"missing image file {img_path}")
            image = read_image(img_path)
            if (image.shape[0], image.shape[1]) != (this_intr.height, this_intr.width):
                raise ManifestFormatError(
                    f"{fname}: image size does not match intrinsics")
            views.append(View(pose=pose, image=image))
        instances.append(Instance(fname[:-5], views))
    return SceneDataset(intrinsics=intr, instances=instances)
