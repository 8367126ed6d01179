"""Radiance field evaluation and volumetric rendering.

A field instance is a small MLP (5 affine layers, width 64) fed by the
multi-resolution hash encoding: three trunk layers map the encoding to a
density logit plus a 15-dim geometry feature, two color layers map the
geometry feature concatenated with a frequency-encoded view direction to
rgb.  Density goes through softplus (bounded gradients keep hypernetwork
training stable), color through sigmoid.  A positional-encoding fallback
with a deeper 8-layer trunk exists for the no-hash-encoding ablation.

Rays live in the [-1,1]^3 scene cube and sample positions are affinely
mapped to the unit cube before encoding.  Stratified jitter is drawn from
a counter-based stream keyed by pixel index, so chunked or parallel
renders are bit-identical to serial ones.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import checkpoints
from .hashgrid import HashGridConfig, encode, init_tables
from .scene_io import (CameraIntrinsics, Ray, WORLD_BOUND, camera_rays,
                       check_pose)


@dataclass(frozen=True)
class FieldConfig:
    width: int = 64
    trunk_layers: int = 3
    geo_features: int = 15
    dir_bands: int = 4
    use_hash: bool = True
    posenc_bands: int = 10  # only used when use_hash is False

    def posenc_fallback(self) -> "FieldConfig":
        # deeper trunk compensates for the weaker input encoding
        return replace(self, use_hash=False, trunk_layers=8)


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 48
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    stratified: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_ray < 1:
            raise ValueError("samples_per_ray must be >= 1")


def input_encoding_dim(field_cfg: FieldConfig, grid_cfg: HashGridConfig) -> int:
    if field_cfg.use_hash:
        return grid_cfg.output_dim
    return 3 + 6 * field_cfg.posenc_bands


def layer_dims(field_cfg: FieldConfig, grid_cfg: HashGridConfig):
    """(trunk, color) lists of (fan_in, fan_out) for every affine layer."""
    w = field_cfg.width
    d_in = input_encoding_dim(field_cfg, grid_cfg)
    trunk = [(d_in, w)]
    trunk += [(w, w)] * (field_cfg.trunk_layers - 2)
    trunk += [(w, 1 + field_cfg.geo_features)]
    d_dir = 3 + 6 * field_cfg.dir_bands
    color = [(field_cfg.geo_features + d_dir, w), (w, 3)]
    return trunk, color


@checkpoints.register("nerf")
@dataclass
class NerfParams:
    """One instance's field parameters: MLP weights plus hash tables.

    Entries are numpy arrays canonically; tensorize() produces a tape-bound
    twin whose entries are autodiff tensors.
    """
    trunk: list          # [(W, b)] per trunk layer
    color: list          # [(W, b)] per color layer
    tables: list | None  # per-level [T,F] arrays, None for the posenc fallback
    grid: HashGridConfig
    field: FieldConfig

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for group, layers in (("trunk", self.trunk), ("color", self.color)):
            for i, (w, b) in enumerate(layers):
                out[f"{group}.{i}.w"] = w
                out[f"{group}.{i}.b"] = b
        for i, t in enumerate(self.tables or []):
            out[f"table.{i}"] = t
        return out

    def to_state(self):
        return {"grid": _cfg_dict(self.grid), "field": _cfg_dict(self.field)}, \
            self.named_arrays()

    @classmethod
    def from_state(cls, meta, arrays):
        grid = HashGridConfig(**meta["grid"])
        field_cfg = FieldConfig(**meta["field"])
        trunk, color = [], []
        for group, store in (("trunk", trunk), ("color", color)):
            i = 0
            while f"{group}.{i}.w" in arrays:
                store.append((arrays[f"{group}.{i}.w"], arrays[f"{group}.{i}.b"]))
                i += 1
        tables = None
        if field_cfg.use_hash:
            tables = []
            i = 0
            while f"table.{i}" in arrays:
                tables.append(arrays[f"table.{i}"])
                i += 1
        return cls(trunk=trunk, color=color, tables=tables,
                   grid=grid, field=field_cfg)


def _cfg_dict(cfg) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def init_nerf_params(grid_cfg: HashGridConfig, field_cfg: FieldConfig,
                     rng: np.random.Generator) -> NerfParams:
    """Standard single-instance initialization (fan-in scaled weights)."""
    trunk_dims, color_dims = layer_dims(field_cfg, grid_cfg)

    def init_layer(fan_in, fan_out):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
        return w.astype(np.float32), np.zeros(fan_out, dtype=np.float32)

    trunk = [init_layer(*d) for d in trunk_dims]
    color = [init_layer(*d) for d in color_dims]
    tables = init_tables(grid_cfg, rng) if field_cfg.use_hash else None
    return NerfParams(trunk=trunk, color=color, tables=tables,
                      grid=grid_cfg, field=field_cfg)


def tensorize(tape: ad.Tape, params: NerfParams,
              trainable: bool = False) -> NerfParams:
    """Wrap a numpy NerfParams onto a tape (leaves, optionally trainable)."""
    wrap = lambda a: tape.tensor(a, requires_grad=trainable)
    return NerfParams(
        trunk=[(wrap(w), wrap(b)) for w, b in params.trunk],
        color=[(wrap(w), wrap(b)) for w, b in params.color],
        tables=None if params.tables is None else [wrap(t) for t in params.tables],
        grid=params.grid, field=params.field)


def detach(params: NerfParams) -> NerfParams:
    """Copy a tensorized NerfParams back to plain float32 arrays."""
    grab = lambda t: np.asarray(t.data, dtype=np.float32).copy()
    return NerfParams(
        trunk=[(grab(w), grab(b)) for w, b in params.trunk],
        color=[(grab(w), grab(b)) for w, b in params.color],
        tables=None if params.tables is None else [grab(t) for t in params.tables],
        grid=params.grid, field=params.field)


# -- input encodings -----------------------------------------------------------

def direction_encode(dirs: np.ndarray, bands: int) -> np.ndarray:
    """[d, sin(2^k pi d), cos(2^k pi d)] frequency encoding of unit directions."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    norms = np.linalg.norm(dirs, axis=-1)
    if np.any(norms < 1e-8):
        raise ValueError("zero direction vector")
    if not np.allclose(norms, 1.0, atol=1e-5):
        raise ValueError("directions must be unit length")
    return frequency_encode(dirs, bands)


def frequency_encode(x: np.ndarray, bands: int) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    parts = [x]
    for k in range(bands):
        ang = (2.0 ** k) * np.pi * x
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    return np.concatenate(parts, axis=-1)


# -- field evaluation -----------------------------------------------------------

def field_eval_batch(tape: ad.Tape, params_t: NerfParams, x,
                     dirs: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
    """Tape-recorded field forward: positions in the unit cube -> (sigma, rgb).

    x may be an [K,3] array or an existing tape tensor (gradient checks
    differentiate through it); parameter entries must be tensors on `tape`.
    """
    cfg = params_t.field
    if cfg.use_hash:
        xt = x if isinstance(x, ad.Tensor) else tape.constant(x)
        enc = encode(xt, params_t.tables, params_t.grid)
    else:
        xd = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
        if xd.size and (xd.min() < 0.0 or xd.max() > 1.0):
            raise ValueError("position outside the unit cube")
        enc = tape.constant(frequency_encode(xd, cfg.posenc_bands))

    h = enc
    for w, b in params_t.trunk[:-1]:
        h = ad.relu(ad.affine(h, w, b))
    out = ad.affine(h, *params_t.trunk[-1])
    k = out.data.shape[0]
    sigma = ad.softplus(ad.reshape(ad.slice_last(out, 0, 1), (k,)))
    geo = ad.slice_last(out, 1, 1 + cfg.geo_features)

    denc = tape.constant(direction_encode(dirs, cfg.dir_bands))
    h = ad.concat([geo, denc], axis=-1)
    for w, b in params_t.color[:-1]:
        h = ad.relu(ad.affine(h, w, b))
    rgb = ad.sigmoid(ad.affine(h, *params_t.color[-1]))
    return sigma, rgb


def field_eval(params: NerfParams, x: np.ndarray,
               dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Plain-array field forward on a throwaway tape: (sigma [K], rgb [K,3])."""
    tape = ad.Tape(np.float32)
    pt = tensorize(tape, params)
    sigma, rgb = field_eval_batch(tape, pt, np.atleast_2d(x), np.atleast_2d(dirs))
    return sigma.data.copy(), rgb.data.copy()


# -- ray sampling ------------------------------------------------------------------

def scene_to_unit(points: np.ndarray) -> np.ndarray:
    """Affine map of the [-1,1]^3 scene cube onto the unit cube."""
    return np.clip((points + WORLD_BOUND) / (2.0 * WORLD_BOUND), 0.0, 1.0)


def sample_points(origins, dirs, near, far, hit, n_samples: int,
                  jitter: np.ndarray | None = None):
    """Bin sampling along a ray batch.

    Returns unit-cube positions [R,S,3] and deltas [R,S].  Midpoints when
    jitter is None, otherwise jitter in [0,1) places the sample inside its
    bin.  Missed rays get zero deltas and a dummy in-cube position, so they
    composite to pure background and contribute no gradient.
    """
    r = len(origins)
    width = ((far - near) / n_samples)[:, None]
    offs = (np.full((r, n_samples), 0.5) if jitter is None else jitter)
    ts = near[:, None] + width * (np.arange(n_samples) + offs)
    deltas = np.diff(ts, axis=1)
    deltas = np.concatenate([deltas, width], axis=1)
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    miss = ~hit
    if miss.any():
        pts[miss] = 0.0
        deltas[miss] = 0.0
    return scene_to_unit(pts), deltas.astype(np.float64)


def sample_ray(ray: Ray, config: RenderConfig,
               rng: np.random.Generator | None = None):
    """Spec surface for one ray: (ts, deltas, unit-cube positions)."""
    if ray.near >= ray.far:
        raise ValueError("ray near must be < far")
    n = config.samples_per_ray
    width = (ray.far - ray.near) / n
    if config.stratified:
        rng = rng or np.random.default_rng(config.seed)
        offs = rng.random(n)
    else:
        offs = np.full(n, 0.5)
    ts = ray.near + width * (np.arange(n) + offs)
    deltas = np.concatenate([np.diff(ts), [width]])
    pts = ray.origin[None] + ts[:, None] * ray.direction[None]
    return ts, deltas, scene_to_unit(pts)


# -- compositing ----------------------------------------------------------------------

def volume_render(sigma: ad.Tensor, rgb: ad.Tensor, deltas: np.ndarray,
                  background) -> tuple[ad.Tensor, ad.Tensor]:
    """Alpha compositing along the sample axis.

    sigma [R,S] and rgb [R,S,3] are tape tensors, deltas [R,S] are
    constants.  Returns (pixel rgb [R,3], opacity [R]); the background is
    blended with the residual transmittance.
    """
    tape = sigma.tape
    if sigma.data.shape != deltas.shape or rgb.data.shape[:2] != sigma.data.shape:
        raise ad.ShapeError("volume_render operands disagree on [rays, samples]")
    if sigma.data.min() < 0:
        raise ValueError("negative density")
    if deltas.min() < 0:
        raise ValueError("negative sample spacing")

    sdelta = ad.mul(sigma, tape.constant(deltas))
    alpha = ad.add_const(ad.mul_const(ad.exp(ad.mul_const(sdelta, -1.0)), -1.0), 1.0)
    trans = ad.exp(ad.mul_const(ad.exclusive_cumsum(sdelta, axis=1), -1.0))
    weights = ad.mul(trans, alpha)

    pix = ad.sum_axis(ad.scale_rows(rgb, weights), axis=1)
    opacity = ad.sum_axis(weights, axis=1)
    residual = ad.add_const(ad.mul_const(opacity, -1.0), 1.0)
    bg = tape.constant(np.tile(np.asarray(background, dtype=np.float64),
                               (sigma.data.shape[0], 1)))
    pix = ad.add(pix, ad.scale_rows(bg, residual))
    return pix, opacity


def render_rays(tape: ad.Tape, params_t: NerfParams, origins, dirs, near, far,
                hit, config: RenderConfig, jitter=None):
    """Field forward + compositing for a ray batch; all rays share one tape."""
    r = len(origins)
    s = config.samples_per_ray
    pts, deltas = sample_points(origins, dirs, near, far, hit, s, jitter)
    dirs_rep = np.repeat(dirs, s, axis=0)
    sigma, rgb = field_eval_batch(tape, params_t, pts.reshape(-1, 3), dirs_rep)
    sigma = ad.reshape(sigma, (r, s))
    rgb = ad.reshape(rgb, (r, s, 3))
    return volume_render(sigma, rgb, deltas, config.background)


def _pixel_jitter(config: RenderConfig, n_pixels: int) -> np.ndarray | None:
    if not config.stratified:
        return None
    # counter-based stream keyed only by (seed, pixel index): render order,
    # chunking and thread count cannot change the jitter
    gen = np.random.Generator(np.random.Philox(config.seed))
    return gen.random((n_pixels, config.samples_per_ray))


def render_image(params: NerfParams, intrinsics: CameraIntrinsics,
                 pose: np.ndarray, config: RenderConfig,
                 chunk: int = 4096, threads: int = 1) -> np.ndarray:
    """Render a full view to an [H,W,3] float image."""
    pose = check_pose(pose)
    origins, dirs, near, far, hit = camera_rays(intrinsics, pose)
    n = len(origins)
    jitter = _pixel_jitter(config, n)

    spans = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]

    def run(span):
        # each chunk owns a throwaway tape: tapes are worker-confined
        a, b = span
        tape = ad.Tape(np.float32)
        params_t = tensorize(tape, params)
        pix, _ = render_rays(tape, params_t, origins[a:b], dirs[a:b],
                             near[a:b], far[a:b], hit[a:b], config,
                             None if jitter is None else jitter[a:b])
        return pix.data

    if threads > 1 and len(spans) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, spans))
    else:
        parts = [run(sp) for sp in spans]
    img = np.concatenate(parts, axis=0).reshape(intrinsics.height,
                                                intrinsics.width, 3)
    return np.clip(img, 0.0, 1.0).astype(np.float32)
