"""Prior training, test-time code optimization, and the embedding query net.

The prior is trained auto-decoder style: each step picks a random instance,
decodes its field parameters from the current codes through the meta-net,
renders a random ray batch against ground truth, and updates the meta-net
weights plus that instance's codes only.  Test-time optimization freezes
the meta-net (checksum verified) and descends the same photometric loss
over the codes alone.  The query network maps a fixed-length image
embedding to codes in the learned space; a trivial built-in embedding
(32x32 grayscale downsample, mean-centered, unit-normalized) stands in for
any external backbone, and precomputed embedding vectors can be loaded
from .npy files instead.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import checkpoints
from .field import FieldConfig, NerfParams, RenderConfig, render_rays, tensorize
from .hashgrid import HashGridConfig
from .hypernet import (Codebook, HypernetConfig, HypernetParams, InstanceCodes,
                       init_hypernetwork, predict_params, tensorize_hypernet)
from .scene_io import SceneDataset, View, camera_rays


@dataclass
class TrainConfig:
    steps: int = 4000
    rays_per_batch: int = 256
    instances_per_batch: int = 1
    samples_per_ray: int = 48
    lr: float = 1e-3
    lr_decay: float = 0.1          # lr reaches lr*lr_decay at the last step
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    stratified: bool = True
    seed: int = 0
    log_every: int = 200

    def __post_init__(self):
        for name in ("steps", "rays_per_batch", "instances_per_batch",
                     "samples_per_ray"):
            if getattr(self, name) < 0 or (name != "steps" and getattr(self, name) < 1):
                raise ValueError(f"{name} must be positive")


@dataclass
class TTOConfig:
    steps: int = 400
    rays_per_batch: int = 512
    samples_per_ray: int = 48
    lr: float = 5e-2
    lr_decay: float = 0.1
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    eval_every: int = 50


@checkpoints.register("prior")
@dataclass
class PriorModel:
    """The learned prior: meta-network weights plus the trained codebooks."""
    omega: HypernetParams
    codebook: Codebook
    samples_per_ray: int = 48
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def render_config(self, stratified: bool = False, seed: int = 0) -> RenderConfig:
        return RenderConfig(samples_per_ray=self.samples_per_ray,
                            background=tuple(self.background),
                            stratified=stratified, seed=seed)

    def to_state(self):
        meta = {"grid": _cfg_dict(self.omega.grid),
                "field": _cfg_dict(self.omega.field_cfg),
                "hyper": _cfg_dict(self.omega.hyper),
                "ids": list(self.codebook.ids),
                "samples_per_ray": self.samples_per_ray,
                "background": list(self.background),
                "seed": self.seed}
        arrays = {f"omega.{k}": v for k, v in self.omega.named_arrays().items()}
        arrays["codebook.shape"] = self.codebook.shape
        arrays["codebook.color"] = self.codebook.color
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        omega = HypernetParams(
            mlps={}, grid=HashGridConfig(**meta["grid"]),
            field_cfg=FieldConfig(**meta["field"]),
            hyper=HypernetConfig(**meta["hyper"]))
        names = sorted({k.split(".")[1] for k in arrays if k.startswith("omega.")})
        for name in names:
            layers = []
            i = 0
            while f"omega.{name}.{i}.w" in arrays:
                layers.append((arrays[f"omega.{name}.{i}.w"],
                               arrays[f"omega.{name}.{i}.b"]))
                i += 1
            omega.mlps[name] = layers
        codebook = Codebook(ids=list(meta["ids"]),
                            shape=arrays["codebook.shape"],
                            color=arrays["codebook.color"])
        return cls(omega=omega, codebook=codebook,
                   samples_per_ray=int(meta["samples_per_ray"]),
                   background=tuple(meta["background"]),
                   seed=int(meta["seed"]))


def _cfg_dict(cfg) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Named deterministic substream of the run seed."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def omega_checksum(omega: HypernetParams) -> int:
    crc = 0
    for name in sorted(omega.named_arrays()):
        crc = zlib.crc32(omega.named_arrays()[name].tobytes(), crc)
    return crc


# -- photometric loss ------------------------------------------------------------

def loss_eq2(rendered, truth):
    """Mean squared error over a ray batch (per ray, per channel).

    Accepts a tape tensor (returns a scalar tensor) or plain arrays.
    """
    if isinstance(rendered, ad.Tensor):
        t = np.asarray(truth, dtype=np.float64)
        if t.shape != rendered.data.shape:
            raise ad.ShapeError("rendered/ground-truth count mismatch")
        return ad.mse(rendered, rendered.tape.constant(t))
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ad.ShapeError("rendered/ground-truth count mismatch")
    return float(np.mean((a - b) ** 2))


# -- cached per-view ray bundles ---------------------------------------------------

class _ViewRays:
    def __init__(self, dataset: SceneDataset, view: View):
        self.origins, self.dirs, self.near, self.far, self.hit = camera_rays(
            dataset.intrinsics, view.pose)
        self.pixels = view.image.reshape(-1, 3).astype(np.float64)


class _RayCache:
    def __init__(self, dataset: SceneDataset):
        self.views = [[_ViewRays(dataset, v) for v in inst.views]
                      for inst in dataset.instances]


def _render_batch_loss(tape, params_t, vr: _ViewRays, idx, cfg_render, jitter):
    pix, _ = render_rays(tape, params_t, vr.origins[idx], vr.dirs[idx],
                         vr.near[idx], vr.far[idx], vr.hit[idx],
                         cfg_render, jitter)
    return loss_eq2(pix, vr.pixels[idx])


# -- prior training ----------------------------------------------------------------

def train_prior(dataset: SceneDataset, config: TrainConfig,
                grid_cfg: HashGridConfig | None = None,
                field_cfg: FieldConfig | None = None,
                hyper_cfg: HypernetConfig | None = None,
                log=None) -> PriorModel:
    """Joint optimization of the meta-network and the instance codebooks."""
    if not dataset.instances:
        raise ValueError("dataset has no instances")
    grid_cfg = grid_cfg or HashGridConfig()
    field_cfg = field_cfg or FieldConfig()
    hyper_cfg = hyper_cfg or HypernetConfig()

    init_rng = rng_stream(config.seed, "init")
    omega = init_hypernetwork(grid_cfg, field_cfg, hyper_cfg,
                              int(init_rng.integers(2 ** 31)))
    codebook = Codebook.init(dataset.instance_ids(), hyper_cfg, init_rng)
    model = PriorModel(omega=omega, codebook=codebook,
                       samples_per_ray=config.samples_per_ray,
                       background=tuple(config.background), seed=config.seed)
    if config.steps == 0:
        return model

    cache = _RayCache(dataset)
    sample_rng = rng_stream(config.seed, "sampling")
    cfg_render = RenderConfig(samples_per_ray=config.samples_per_ray,
                              background=tuple(config.background))

    omega_names = sorted(omega.named_arrays())
    states = {n: ad.AdamState.for_param(omega.named_arrays()[n], lr=config.lr)
              for n in omega_names}
    code_states = {}
    for n in range(len(codebook)):
        code_states[("S", n)] = ad.AdamState.for_param(codebook.shape[n], lr=config.lr)
        code_states[("C", n)] = ad.AdamState.for_param(codebook.color[n], lr=config.lr)

    n_inst = len(dataset.instances)
    for step in range(config.steps):
        lr_t = config.lr * config.lr_decay ** ((step + 1) / config.steps)
        omega_grads = {n: None for n in omega_names}
        picks = sample_rng.integers(0, n_inst, config.instances_per_batch)
        loss_val = 0.0
        for n in picks:
            vr_list = cache.views[n]
            vi = int(sample_rng.integers(0, len(vr_list)))
            vr = vr_list[vi]
            idx = sample_rng.integers(0, len(vr.pixels), config.rays_per_batch)
            jitter = (sample_rng.random((config.rays_per_batch,
                                         config.samples_per_ray))
                      if config.stratified else None)

            tape = ad.Tape(np.float32)
            omega_t = tensorize_hypernet(tape, omega, trainable=True)
            s = tape.tensor(codebook.shape[n][None, :], requires_grad=True)
            c = tape.tensor(codebook.color[n][None, :], requires_grad=True)
            params_t = predict_params(tape, omega_t, s, c)
            try:
                loss = _render_batch_loss(tape, params_t, vr, idx,
                                          cfg_render, jitter)
            except ad.NonFiniteError as exc:
                raise ad.NonFiniteError(
                    f"non-finite loss at step {step}, instance "
                    f"{codebook.ids[n]}: {exc}") from exc
            loss_val += loss.data.item()
            tape.backward(loss)

            for name, layers in omega_t.mlps.items():
                for i, (w, b) in enumerate(layers):
                    for suffix, t in (("w", w), ("b", b)):
                        key = f"{name}.{i}.{suffix}"
                        g = tape.grad_of(t)
                        if omega_grads[key] is None:
                            omega_grads[key] = g
                        else:
                            omega_grads[key] = omega_grads[key] + g
            for key, t, row in ((("S", n), s, codebook.shape[n]),
                                (("C", n), c, codebook.color[n])):
                st = code_states[key]
                st.lr = lr_t
                ad.adam_step(row, tape.grad_of(t)[0].astype(np.float32), st)

        arrays = omega.named_arrays()
        for name in omega_names:
            g = omega_grads[name]
            if g is None:
                continue
            st = states[name]
            st.lr = lr_t
            ad.adam_step(arrays[name],
                         (g / len(picks)).astype(np.float32), st)

        if log is not None and (step % config.log_every == 0
                                or step == config.steps - 1):
            mean_loss = loss_val / len(picks)
            psnr = -10.0 * np.log10(max(mean_loss, 1e-10))
            log(f"step={step} loss={mean_loss:.6f} psnr={psnr:.2f} lr={lr_t:.2e}")
    return model


# -- test-time optimization ----------------------------------------------------------

def test_time_optimize(prior: PriorModel, views: list[View],
                       intrinsics, config: TTOConfig,
                       init: InstanceCodes | None = None,
                       log=None) -> InstanceCodes:
    """Recover instance codes from posed views with the meta-net frozen."""
    if not views:
        raise ValueError("test_time_optimize needs at least one posed view")
    for v in views:
        if v.pose is None:
            raise ValueError("view is missing a camera pose")

    before = omega_checksum(prior.omega)
    dataset_like = SceneDataset(intrinsics=intrinsics, instances=[])
    rays = [_ViewRays(dataset_like, v) for v in views]
    codes = (init.copy() if init is not None else prior.codebook.mean_codes())
    s_state = ad.AdamState.for_param(codes.shape, lr=config.lr)
    c_state = ad.AdamState.for_param(codes.color, lr=config.lr)
    rng = rng_stream(config.seed, "tto")
    cfg_render = RenderConfig(samples_per_ray=config.samples_per_ray,
                              background=tuple(config.background))

    def full_loss(cand: InstanceCodes) -> float:
        total, count = 0.0, 0
        for vr in rays:
            tape = ad.Tape(np.float32)
            omega_t = tensorize_hypernet(tape, prior.omega)
            params_t = predict_params(tape, omega_t,
                                      tape.constant(cand.shape[None, :]),
                                      tape.constant(cand.color[None, :]))
            pix, _ = render_rays(tape, params_t, vr.origins, vr.dirs,
                                 vr.near, vr.far, vr.hit, cfg_render)
            total += np.sum((pix.data - vr.pixels) ** 2)
            count += vr.pixels.size
        return total / count

    best = (full_loss(codes), codes.copy())
    for step in range(config.steps):
        lr_t = config.lr * config.lr_decay ** ((step + 1) / max(config.steps, 1))
        vr = rays[int(rng.integers(0, len(rays)))]
        idx = rng.integers(0, len(vr.pixels), config.rays_per_batch)
        jitter = rng.random((config.rays_per_batch, config.samples_per_ray))

        tape = ad.Tape(np.float32)
        omega_t = tensorize_hypernet(tape, prior.omega)  # frozen constants
        s = tape.tensor(codes.shape[None, :], requires_grad=True)
        c = tape.tensor(codes.color[None, :], requires_grad=True)
        params_t = predict_params(tape, omega_t, s, c)
        loss = _render_batch_loss(tape, params_t, vr, idx, cfg_render, jitter)
        tape.backward(loss)
        s_state.lr = c_state.lr = lr_t
        ad.adam_step(codes.shape, tape.grad_of(s)[0].astype(np.float32), s_state)
        ad.adam_step(codes.color, tape.grad_of(c)[0].astype(np.float32), c_state)

        if (step + 1) % config.eval_every == 0 or step == config.steps - 1:
            cur = full_loss(codes)
            if cur < best[0]:
                best = (cur, codes.copy())
            if log is not None:
                log(f"step={step} loss={loss.data.item():.6f} full={cur:.6f}")

    if omega_checksum(prior.omega) != before:
        raise RuntimeError("meta-network parameters changed during TTO")
    return best[1]


# -- embeddings and the query network -------------------------------------------------

EMBED_SIDE = 32
EMBED_DIM = EMBED_SIDE * EMBED_SIDE


def trivial_embedding(image: np.ndarray) -> np.ndarray:
    """Built-in image embedding: grayscale 32x32 downsample, centered, unit norm."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    gray = arr @ np.array([0.299, 0.587, 0.114])
    im = Image.fromarray((gray * 255.0).astype(np.float32), mode="F")
    small = np.asarray(im.resize((EMBED_SIDE, EMBED_SIDE), Image.BILINEAR),
                       dtype=np.float64) / 255.0
    v = small.reshape(-1)
    v = v - v.mean()
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return np.zeros(EMBED_DIM, dtype=np.float32)
    return (v / norm).astype(np.float32)


def load_embedding_file(path: str) -> np.ndarray:
    """External embedding vector (e.g. precomputed CLIP features) from .npy."""
    return np.load(path).astype(np.float32).reshape(-1)


@dataclass
class QueryTrainConfig:
    steps: int = 1500
    lr: float = 1e-3
    seed: int = 0


@checkpoints.register("query")
@dataclass
class QueryNetParams:
    """MLP from an image embedding to concatenated (shape, color) codes."""
    layers: list  # [(W, b)]
    shape_dim: int
    color_dim: int

    def to_state(self):
        arrays = {}
        for i, (w, b) in enumerate(self.layers):
            arrays[f"layer.{i}.w"] = w
            arrays[f"layer.{i}.b"] = b
        return {"shape_dim": self.shape_dim, "color_dim": self.color_dim}, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        layers = []
        i = 0
        while f"layer.{i}.w" in arrays:
            layers.append((arrays[f"layer.{i}.w"], arrays[f"layer.{i}.b"]))
            i += 1
        return cls(layers=layers, shape_dim=int(meta["shape_dim"]),
                   color_dim=int(meta["color_dim"]))


def init_query_net(embed_dim: int, hyper_cfg: HypernetConfig,
                   seed: int, hidden: int = 512) -> QueryNetParams:
    rng = np.random.default_rng(seed)
    dims = [embed_dim, hidden, hidden, hyper_cfg.shape_dim + hyper_cfg.color_dim]
    layers = []
    for i in range(len(dims) - 1):
        w = rng.normal(0.0, np.sqrt(2.0 / dims[i]), (dims[i], dims[i + 1]))
        layers.append((w.astype(np.float32),
                       np.zeros(dims[i + 1], dtype=np.float32)))
    return QueryNetParams(layers=layers, shape_dim=hyper_cfg.shape_dim,
                          color_dim=hyper_cfg.color_dim)


def query_forward(delta: QueryNetParams, embeddings: np.ndarray) -> np.ndarray:
    h = np.atleast_2d(embeddings).astype(np.float32)
    if h.shape[1] != delta.layers[0][0].shape[0]:
        raise ad.ShapeError("embedding dimension mismatch")
    for w, b in delta.layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
    w, b = delta.layers[-1]
    return h @ w + b


def train_query_net(prior: PriorModel, dataset: SceneDataset, embed,
                    config: QueryTrainConfig, log=None) -> QueryNetParams:
    """Fit the query MLP to map view embeddings to codebook entries."""
    embeds, targets = [], []
    for inst in dataset.instances:
        n = prior.codebook.index(inst.instance_id)
        target = np.concatenate([prior.codebook.shape[n], prior.codebook.color[n]])
        for view in inst.views:
            embeds.append(embed(view.image))
            targets.append(target)
    x = np.stack(embeds).astype(np.float32)
    y = np.stack(targets).astype(np.float32)

    delta = init_query_net(x.shape[1], prior.omega.hyper, config.seed)
    states = [
        (ad.AdamState.for_param(w, lr=config.lr), ad.AdamState.for_param(b, lr=config.lr))
        for w, b in delta.layers]
    for step in range(config.steps):
        tape = ad.Tape(np.float32)
        layers_t = [(tape.tensor(w, requires_grad=True),
                     tape.tensor(b, requires_grad=True))
                    for w, b in delta.layers]
        h = tape.constant(x)
        for w, b in layers_t[:-1]:
            h = ad.relu(ad.affine(h, w, b))
        out = ad.affine(h, *layers_t[-1])
        loss = ad.mse(out, tape.constant(y))
        tape.backward(loss)
        for (w, b), (tw, tb), (sw, sb) in zip(delta.layers, layers_t, states):
            ad.adam_step(w, tape.grad_of(tw).astype(np.float32), sw)
            ad.adam_step(b, tape.grad_of(tb).astype(np.float32), sb)
        if log is not None and (step % 200 == 0 or step == config.steps - 1):
            log(f"step={step} loss={loss.data.item():.6f}")
    return delta


def query(delta: QueryNetParams, embedding: np.ndarray,
          codebook: Codebook) -> tuple[InstanceCodes, str]:
    """Predicted codes plus the L2-nearest codebook id (ties -> first entry)."""
    out = query_forward(delta, embedding)[0]
    codes = InstanceCodes(shape=out[:delta.shape_dim].copy(),
                          color=out[delta.shape_dim:].copy())
    entries = np.concatenate([codebook.shape, codebook.color], axis=1)
    d = np.sum((entries - out[None, :]) ** 2, axis=1)
    return codes, codebook.ids[int(np.argmin(d))]


def nearest_ids(delta: QueryNetParams, embedding: np.ndarray,
                codebook: Codebook, k: int) -> list[str]:
    out = query_forward(delta, embedding)[0]
    entries = np.concatenate([codebook.shape, codebook.color], axis=1)
    d = np.sum((entries - out[None, :]) ** 2, axis=1)
    order = np.argsort(d, kind="stable")
    return [codebook.ids[i] for i in order[:k]]
