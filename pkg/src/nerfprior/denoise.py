"""Render -> denoise -> finetune quality pass.

A predicted field instance is rendered from m predefined upper-hemisphere
poses, each frame is pushed through an image-level denoiser, and the field
parameters (MLP weights and hash tables, never the meta-network) are then
finetuned on the denoised set from the known poses.  Because the input set
is already multiview consistent and the field is only finetuned, geometry
is preserved; the pipeline reports rather than assumes this (callers
compare Chamfer before/after).

The denoiser backbone is a small convolutional autoencoder (3 down / 3 up,
3x3 kernels) with additive skip connections at matching resolutions and a
global residual path, trained with an L2 objective on (rendered, ground
truth) pairs.  The final layer is zero-initialized, so an untrained
denoiser behaves as the identity and training only has to learn the
correction.  An identity variant exists for pipeline tests, and a
directory exchange lets any external denoiser be dropped in frame-by-frame.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import checkpoints
from .field import NerfParams, RenderConfig, render_image, render_rays, tensorize
from .field import detach as detach_params
from .scene_io import (CameraIntrinsics, camera_rays, hemisphere_poses,
                       read_image, write_image)
from .training import rng_stream

# encoder/decoder channel plan; three 2x downsamples need extents % 8 == 0
_ENC_CHANNELS = [(3, 16), (16, 32), (32, 32)]
_DEC_CHANNELS = [(32, 32), (32, 32), (32, 3)]


@dataclass
class DenoiseConfig:
    poses: list = dc_field(default_factory=lambda: hemisphere_poses(24, (10.0, 35.0)))
    finetune_steps: int = 500
    finetune_lr: float = 1e-4
    rays_per_batch: int = 512
    samples_per_ray: int = 48
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.poses) < 1:
            raise ValueError("need at least one predefined pose")


@dataclass
class DenoiserTrainConfig:
    steps: int = 400
    lr: float = 2e-3
    batch: int = 4
    seed: int = 0


@checkpoints.register("denoiser")
@dataclass
class DenoiserParams:
    convs: list          # [(W[3,3,cin,cout], b[cout])], encoder then decoder
    identity: bool = False

    def to_state(self):
        arrays = {}
        for i, (w, b) in enumerate(self.convs):
            arrays[f"conv.{i}.w"] = w
            arrays[f"conv.{i}.b"] = b
        return {"identity": bool(self.identity)}, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        convs = []
        i = 0
        while f"conv.{i}.w" in arrays:
            convs.append((arrays[f"conv.{i}.w"], arrays[f"conv.{i}.b"]))
            i += 1
        return cls(convs=convs, identity=bool(meta["identity"]))

    @classmethod
    def identity_denoiser(cls) -> "DenoiserParams":
        return cls(convs=[], identity=True)


def init_denoiser(seed: int = 0) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    plan = _ENC_CHANNELS + _DEC_CHANNELS
    convs = []
    for k, (cin, cout) in enumerate(plan):
        # zero-init the last layer: the fresh denoiser is exactly the identity
        scale = 0.0 if k == len(plan) - 1 else np.sqrt(2.0 / (9 * cin))
        w = rng.normal(0.0, 1.0, (3, 3, cin, cout)) * scale
        convs.append((w.astype(np.float32), np.zeros(cout, dtype=np.float32)))
    return DenoiserParams(convs=convs)


def _denoiser_forward(tape: ad.Tape, convs_t, x: ad.Tensor) -> ad.Tensor:
    e1 = ad.relu(ad.conv2d(x, *convs_t[0]))                  # H,   16
    e2 = ad.relu(ad.conv2d(ad.avg_pool2(e1), *convs_t[1]))   # H/2, 32
    e3 = ad.relu(ad.conv2d(ad.avg_pool2(e2), *convs_t[2]))   # H/4, 32
    h = ad.avg_pool2(e3)                                     # H/8, 32
    d1 = ad.relu(ad.conv2d(ad.upsample2(h), *convs_t[3]))    # H/4, 32
    d1 = ad.add(d1, e3)
    d2 = ad.relu(ad.conv2d(ad.upsample2(d1), *convs_t[4]))   # H/2, 32
    d2 = ad.add(d2, e2)
    correction = ad.conv2d(ad.upsample2(d2), *convs_t[5])    # H,   3
    return ad.add(x, correction)


def denoise(denoiser: DenoiserParams, image: np.ndarray) -> np.ndarray:
    """Run one [H,W,3] image through the denoiser (identity passes through)."""
    if denoiser.identity:
        return np.asarray(image, dtype=np.float32).copy()
    h, w = image.shape[:2]
    if h % 8 or w % 8:
        raise ad.ShapeError("denoiser needs image extents divisible by 8")
    tape = ad.Tape(np.float32)
    convs_t = [(tape.constant(cw), tape.constant(cb)) for cw, cb in denoiser.convs]
    out = _denoiser_forward(tape, convs_t, tape.constant(image[None]))
    return np.clip(out.data[0], 0.0, 1.0)


def train_denoiser(pairs: list[tuple[np.ndarray, np.ndarray]],
                   config: DenoiserTrainConfig, log=None) -> DenoiserParams:
    """Fit the autoencoder to map rendered frames onto their ground truth."""
    if not pairs:
        raise ValueError("no training pairs")
    shapes = {(a.shape, b.shape) for a, b in pairs}
    if len({s for pair in shapes for s in pair}) != 1:
        raise ad.ShapeError("all denoiser training images must share one shape")

    rng = rng_stream(config.seed, "denoiser")
    den = init_denoiser(int(rng.integers(2 ** 31)))
    states = [(ad.AdamState.for_param(w, lr=config.lr),
               ad.AdamState.for_param(b, lr=config.lr)) for w, b in den.convs]
    xs = np.stack([a for a, _ in pairs]).astype(np.float32)
    ys = np.stack([b for _, b in pairs]).astype(np.float32)
    for step in range(config.steps):
        idx = rng.integers(0, len(pairs), config.batch)
        tape = ad.Tape(np.float32)
        convs_t = [(tape.tensor(w, requires_grad=True),
                    tape.tensor(b, requires_grad=True)) for w, b in den.convs]
        out = _denoiser_forward(tape, convs_t, tape.constant(xs[idx]))
        loss = ad.mse(out, tape.constant(ys[idx]))
        tape.backward(loss)
        for (w, b), (tw, tb), (sw, sb) in zip(den.convs, convs_t, states):
            ad.adam_step(w, tape.grad_of(tw).astype(np.float32), sw)
            ad.adam_step(b, tape.grad_of(tb).astype(np.float32), sb)
        if log is not None and (step % 100 == 0 or step == config.steps - 1):
            log(f"step={step} loss={loss.data.item():.6f}")
    return den


# -- directory exchange -----------------------------------------------------------

def write_view_set(images: list[np.ndarray], directory: str) -> None:
    """Dump rendered views as numbered 8-bit PNGs for an external denoiser."""
    os.makedirs(directory, exist_ok=True)
    for i, img in enumerate(images):
        write_image(img, os.path.join(directory, f"view_{i:04d}.png"))


def read_view_set(directory: str, count: int) -> list[np.ndarray]:
    return [read_image(os.path.join(directory, f"view_{i:04d}.png"))
            for i in range(count)]


# -- the pipeline ------------------------------------------------------------------

def render_predefined_views(params: NerfParams, intrinsics: CameraIntrinsics,
                            config: DenoiseConfig) -> list[np.ndarray]:
    rc = RenderConfig(samples_per_ray=config.samples_per_ray,
                      background=tuple(config.background))
    return [render_image(params, intrinsics, pose, rc) for pose in config.poses]


def finetune_on_views(params: NerfParams, intrinsics: CameraIntrinsics,
                      poses: list[np.ndarray], images: list[np.ndarray],
                      config: DenoiseConfig, log=None) -> NerfParams:
    """Photometric finetuning of one instance's parameters on fixed views."""
    out = detach_params(tensorize(ad.Tape(np.float32), params))  # deep copy
    bundles = []
    for pose, img in zip(poses, images):
        origins, dirs, near, far, hit = camera_rays(intrinsics, pose)
        bundles.append((origins, dirs, near, far, hit,
                        img.reshape(-1, 3).astype(np.float64)))
    arrays = out.named_arrays()
    states = {k: ad.AdamState.for_param(v, lr=config.finetune_lr)
              for k, v in arrays.items()}
    rng = rng_stream(config.seed, "finetune")
    rc = RenderConfig(samples_per_ray=config.samples_per_ray,
                      background=tuple(config.background))
    for step in range(config.finetune_steps):
        origins, dirs, near, far, hit, pixels = \
            bundles[int(rng.integers(0, len(bundles)))]
        idx = rng.integers(0, len(pixels), config.rays_per_batch)
        jitter = rng.random((config.rays_per_batch, config.samples_per_ray))
        tape = ad.Tape(np.float32)
        pt = tensorize(tape, out, trainable=True)
        pix, _ = render_rays(tape, pt, origins[idx], dirs[idx], near[idx],
                             far[idx], hit[idx], rc, jitter)
        d = ad.sub(pix, tape.constant(pixels[idx]))
        loss = ad.mean_all(ad.mul(d, d))
        tape.backward(loss)
        for name, t in pt.named_arrays().items():
            ad.adam_step(arrays[name], tape.grad_of(t).astype(np.float32),
                         states[name])
        if log is not None and (step % 100 == 0
                                or step == config.finetune_steps - 1):
            log(f"step={step} loss={loss.data.item():.6f}")
    return out


def denoise_and_finetune(params: NerfParams, denoiser: DenoiserParams,
                         intrinsics: CameraIntrinsics, config: DenoiseConfig,
                         denoised_dir: str | None = None,
                         log=None) -> NerfParams:
    """Full quality pass: render m poses, denoise frame-by-frame, finetune.

    When denoised_dir is given, frames found there (numbered PNGs) replace
    the built-in denoiser's output, allowing any external backbone.
    """
    rendered = render_predefined_views(params, intrinsics, config)
    if denoised_dir is not None:
        improved = read_view_set(denoised_dir, len(rendered))
    else:
        improved = [denoise(denoiser, img) for img in rendered]
    if config.finetune_steps == 0:
        return detach_params(tensorize(ad.Tape(np.float32), params))
    return finetune_on_views(params, intrinsics, config.poses, improved,
                             config, log=log)
