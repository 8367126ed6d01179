"""Quality and geometry metrics plus storage accounting.

PSNR is capped at 100 dB for (near-)identical images.  SSIM is the
standard windowed form: 11x11 Gaussian window (sigma 1.5), C1=0.01^2,
C2=0.03^2, computed on an internal grayscale conversion and averaged over
windows.  Geometry goes density grid -> marching cubes -> area-weighted
surface sampling -> symmetric squared Chamfer distance.  The compression
report amortizes the fixed meta-network cost over instances: each extra
instance costs only its two codes.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .field import NerfParams, field_eval
from .scene_io import WORLD_BOUND
from .training import PriorModel, nearest_ids

PSNR_CAP = 100.0


# -- image metrics -----------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0,1]; capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shape mismatch")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def ssim(a: np.ndarray, b: np.ndarray, sigma: float = 1.5,
         c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Mean structural similarity with an 11x11 Gaussian window."""
    if np.asarray(a).shape != np.asarray(b).shape:
        raise ValueError("image shape mismatch")
    x = _to_gray(a)
    y = _to_gray(b)
    if min(x.shape) < 11:
        raise ValueError("image smaller than the 11x11 SSIM window")
    # truncate at radius 5 -> 11 taps, matching the conventional window
    blur = lambda im: gaussian_filter(im, sigma, truncate=5.0 / sigma,
                                      mode="reflect")
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    # average only fully-covered windows (drop the half-window border)
    return float(np.mean((num / den)[5:-5, 5:-5]))


# -- meshes -----------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray   # [V,3]
    faces: np.ndarray      # [F,3] int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise ValueError("non-finite mesh vertex")
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0


def save_obj(mesh: Mesh, path: str) -> None:
    """ASCII OBJ export (v/f records, 1-based indices)."""
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for tri in mesh.faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def density_grid(params: NerfParams, resolution: int,
                 chunk: int = 65536) -> np.ndarray:
    """Density sampled on an R^3 lattice spanning the scene cube."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    axis = np.linspace(0.0, 1.0, resolution)
    xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    dirs = np.tile(np.array([0.0, 0.0, -1.0]), (len(pts), 1))
    out = np.empty(len(pts), dtype=np.float32)
    for s in range(0, len(pts), chunk):
        e = min(s + chunk, len(pts))
        sigma, _ = field_eval(params, pts[s:e], dirs[s:e])
        out[s:e] = sigma
    return out.reshape(resolution, resolution, resolution)


def grid_to_mesh(volume: np.ndarray, threshold: float) -> Mesh:
    """Marching cubes over a density lattice; vertices in scene coordinates."""
    r = volume.shape[0]
    if volume.max() <= threshold or volume.min() >= threshold:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = 2.0 * WORLD_BOUND / (r - 1)
    verts, faces, _, _ = marching_cubes(volume, level=threshold,
                                        spacing=(spacing,) * 3)
    return Mesh(verts - WORLD_BOUND, faces)


def extract_mesh(params: NerfParams, resolution: int = 96,
                 threshold: float = 10.0) -> Mesh:
    """Density grid -> iso-surface mesh (empty mesh when nothing crosses)."""
    return grid_to_mesh(density_grid(params, resolution), threshold)


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform sampling of n points on the mesh surface."""
    if mesh.empty:
        raise ValueError("cannot sample an empty mesh")
    v = mesh.vertices
    tri = v[mesh.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    pick = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = tri[pick]
    return ((1 - r1)[:, None] * t[:, 0]
            + (r1 * (1 - r2))[:, None] * t[:, 1]
            + (r1 * r2)[:, None] * t[:, 2])


def chamfer(mesh_a: Mesh, mesh_b: Mesh, n: int = 4096, seed: int = 0) -> float:
    """Symmetric mean squared nearest-neighbour distance between surfaces."""
    rng_a = np.random.default_rng(seed)
    rng_b = np.random.default_rng(seed)
    pa = sample_surface(mesh_a, n, rng_a)
    pb = sample_surface(mesh_b, n, rng_b)
    return chamfer_points(pa, pb)


def chamfer_points(pa: np.ndarray, pb: np.ndarray) -> float:
    da, _ = cKDTree(pb).query(pa, k=1)
    db, _ = cKDTree(pa).query(pb, k=1)
    return float(np.mean(da ** 2) + np.mean(db ** 2))


# -- retrieval ----------------------------------------------------------------------

def retrieval_accuracy(delta, prior: PriorModel, dataset, embed,
                       k: int = 1) -> float:
    """Fraction of (instance, view) pairs whose top-k query hits the true id."""
    hits, total = 0, 0
    for inst in dataset.instances:
        for view in inst.views:
            ids = nearest_ids(delta, embed(view.image), prior.codebook, k)
            hits += inst.instance_id in ids
            total += 1
    if total == 0:
        raise ValueError("dataset has no views")
    return hits / total


# -- storage accounting ----------------------------------------------------------------

@dataclass
class CompressionReport:
    n_instances: int
    prior_bytes: int               # meta-net + codebooks
    omega_bytes: int
    per_instance_marginal_bytes: int
    baseline_instance_bytes: int   # one independently stored field instance
    baseline_total_bytes: int
    ratio: float                   # prior_bytes / baseline_total_bytes

    def lines(self) -> list[str]:
        return [f"{k}={getattr(self, k)}" for k in self.__dataclass_fields__]


def compression_report(prior: PriorModel,
                       per_instance_baseline_params: int) -> CompressionReport:
    return compression_report_at(prior, per_instance_baseline_params,
                                 len(prior.codebook))


def compression_report_at(prior: PriorModel, per_instance_baseline_params: int,
                          n_instances: int) -> CompressionReport:
    """Storage ratio if the prior held n_instances (fixed meta-net amortized)."""
    if n_instances < 1:
        raise ValueError("need at least one instance")
    cfg = prior.omega.hyper
    code_bytes = 4 * (cfg.shape_dim + cfg.color_dim)
    omega_bytes = 4 * prior.omega.param_count()
    prior_bytes = omega_bytes + n_instances * code_bytes
    baseline_instance = 4 * per_instance_baseline_params
    baseline_total = n_instances * baseline_instance
    return CompressionReport(
        n_instances=n_instances,
        prior_bytes=prior_bytes,
        omega_bytes=omega_bytes,
        per_instance_marginal_bytes=code_bytes,
        baseline_instance_bytes=baseline_instance,
        baseline_total_bytes=baseline_total,
        ratio=prior_bytes / baseline_total)


def nerf_param_count(params: NerfParams) -> int:
    return sum(a.size for a in params.named_arrays().values())


# -- aggregate report --------------------------------------------------------------------

@dataclass
class MetricsReport:
    per_view_psnr: list[float] = dc_field(default_factory=list)
    per_view_ssim: list[float] = dc_field(default_factory=list)
    chamfer: float | None = None
    retrieval_top1: float | None = None
    compression: CompressionReport | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.per_view_psnr)) if self.per_view_psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.per_view_ssim)) if self.per_view_ssim else float("nan")

    def lines(self) -> list[str]:
        out = [f"mean_psnr={self.mean_psnr:.4f}", f"mean_ssim={self.mean_ssim:.6f}"]
        for i, (p, s) in enumerate(zip(self.per_view_psnr, self.per_view_ssim)):
            out.append(f"view{i}_psnr={p:.4f}")
            out.append(f"view{i}_ssim={s:.6f}")
        if self.chamfer is not None:
            out.append(f"chamfer={self.chamfer:.6f}")
        if self.retrieval_top1 is not None:
            out.append(f"retrieval_top1={self.retrieval_top1:.4f}")
        if self.compression is not None:
            out.extend(self.compression.lines())
        return out

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("\n".join(self.lines()) + "\n")

    def save_json(self, path: str) -> None:
        import json
        doc = {"per_view_psnr": self.per_view_psnr,
               "per_view_ssim": self.per_view_ssim,
               "mean_psnr": self.mean_psnr,
               "mean_ssim": self.mean_ssim,
               "chamfer": self.chamfer,
               "retrieval_top1": self.retrieval_top1}
        if self.compression is not None:
            doc["compression"] = {k: getattr(self.compression, k)
                                  for k in self.compression.__dataclass_fields__}
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)
