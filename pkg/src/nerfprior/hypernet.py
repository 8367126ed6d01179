"""Meta-network mapping instance codes to complete field parameters.

One hyper-MLP (3 affine layers, width 512) per predicted parameter group:
one emitting the flattened hash tables and one per field MLP layer.  The
density path (hash tables + trunk layers) is conditioned only on the shape
code and the color head only on the color code, which makes the shape /
appearance disentanglement architectural rather than statistical.

Hypernetworks diverge when predicted weights start at arbitrary scale, so
every hyper-MLP's final layer starts near zero (1e-2 weight scale) with its
bias set to a standard single-instance initialization of the target group:
at init every instance decodes to a sane fresh NeRF.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoints
from .field import FieldConfig, NerfParams, init_nerf_params, layer_dims
from .hashgrid import HashGridConfig


@dataclass(frozen=True)
class HypernetConfig:
    shape_dim: int = 64
    color_dim: int = 64
    hidden: int = 512
    hidden_layers: int = 2
    final_scale: float = 1e-2


@checkpoints.register("codes")
@dataclass
class InstanceCodes:
    shape: np.ndarray  # [d_S]
    color: np.ndarray  # [d_C]

    def copy(self) -> "InstanceCodes":
        return InstanceCodes(self.shape.copy(), self.color.copy())

    def to_state(self):
        return {}, {"shape": self.shape, "color": self.color}

    @classmethod
    def from_state(cls, meta, arrays):
        return cls(shape=arrays["shape"], color=arrays["color"])


def swap_codes(a: InstanceCodes, b: InstanceCodes):
    """Cross shape/color codes: (S_a + C_b, S_b + C_a)."""
    if a.shape.shape != b.shape.shape or a.color.shape != b.color.shape:
        raise ad.ShapeError("code dimension mismatch")
    return (InstanceCodes(a.shape.copy(), b.color.copy()),
            InstanceCodes(b.shape.copy(), a.color.copy()))


@dataclass
class Codebook:
    """Per-instance shape and color codes, trained jointly with the meta-net."""
    ids: list[str]
    shape: np.ndarray  # [N, d_S]
    color: np.ndarray  # [N, d_C]

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate instance ids")
        if self.shape.shape[0] != len(self.ids) or self.color.shape[0] != len(self.ids):
            raise ValueError("codebook row count mismatch")

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, instance_id: str) -> int:
        try:
            return self.ids.index(instance_id)
        except ValueError:
            raise KeyError(f"unknown instance id: {instance_id!r}") from None

    def get(self, instance_id: str) -> InstanceCodes:
        i = self.index(instance_id)
        return InstanceCodes(self.shape[i].copy(), self.color[i].copy())

    def mean_codes(self) -> InstanceCodes:
        return InstanceCodes(self.shape.mean(axis=0).astype(np.float32),
                             self.color.mean(axis=0).astype(np.float32))

    @classmethod
    def init(cls, ids: list[str], cfg: HypernetConfig,
             rng: np.random.Generator, scale: float = 0.1) -> "Codebook":
        n = len(ids)
        return cls(ids=list(ids),
                   shape=(scale * rng.standard_normal((n, cfg.shape_dim)))
                   .astype(np.float32),
                   color=(scale * rng.standard_normal((n, cfg.color_dim)))
                   .astype(np.float32))


def _target_layout(grid_cfg: HashGridConfig, field_cfg: FieldConfig):
    """Ordered predicted groups: name -> ("hash" | (group, layer, fan_in, fan_out))."""
    trunk_dims, color_dims = layer_dims(field_cfg, grid_cfg)
    layout = []
    if field_cfg.use_hash:
        layout.append(("hash", None))
    for i, dims in enumerate(trunk_dims):
        layout.append((f"trunk{i}", ("trunk", i, *dims)))
    for i, dims in enumerate(color_dims):
        layout.append((f"color{i}", ("color", i, *dims)))
    return layout


def _flat_target(params: NerfParams, target) -> np.ndarray:
    if target is None:
        return np.concatenate([t.reshape(-1) for t in params.tables])
    group, i, _, _ = target
    w, b = getattr(params, group)[i]
    return np.concatenate([w.reshape(-1), b.reshape(-1)])


@dataclass
class HypernetParams:
    """The meta-network weights: one small MLP per predicted group."""
    mlps: dict[str, list]  # name -> [(W, b)] affine layers
    grid: HashGridConfig
    field_cfg: FieldConfig
    hyper: HypernetConfig

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layers in self.mlps.items():
            for i, (w, b) in enumerate(layers):
                out[f"{name}.{i}.w"] = w
                out[f"{name}.{i}.b"] = b
        return out

    def param_count(self) -> int:
        return sum(a.size for a in self.named_arrays().values())


def mlp_count(omega: HypernetParams) -> int:
    return len(omega.mlps)


def init_hypernetwork(grid_cfg: HashGridConfig, field_cfg: FieldConfig,
                      hyper_cfg: HypernetConfig, seed: int) -> HypernetParams:
    rng = np.random.default_rng(seed)
    reference = init_nerf_params(grid_cfg, field_cfg, rng)
    mlps = {}
    for name, target in _target_layout(grid_cfg, field_cfg):
        d_in = (hyper_cfg.color_dim if name.startswith("color")
                else hyper_cfg.shape_dim)
        bias_init = _flat_target(reference, target).astype(np.float32)
        dims = [d_in] + [hyper_cfg.hidden] * hyper_cfg.hidden_layers + [bias_init.size]
        layers = []
        for li in range(len(dims) - 1):
            fan_in, fan_out = dims[li], dims[li + 1]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
            if li == len(dims) - 2:
                w *= hyper_cfg.final_scale
                b = bias_init
            else:
                b = np.zeros(fan_out, dtype=np.float32)
            layers.append((w.astype(np.float32), b))
        mlps[name] = layers
    return HypernetParams(mlps=mlps, grid=grid_cfg, field_cfg=field_cfg,
                          hyper=hyper_cfg)


def tensorize_hypernet(tape: ad.Tape, omega: HypernetParams,
                       trainable: bool = False) -> HypernetParams:
    wrap = lambda a: tape.tensor(a, requires_grad=trainable)
    return HypernetParams(
        mlps={name: [(wrap(w), wrap(b)) for w, b in layers]
              for name, layers in omega.mlps.items()},
        grid=omega.grid, field_cfg=omega.field_cfg, hyper=omega.hyper)


def _hyper_forward(tape: ad.Tape, layers, code: ad.Tensor) -> ad.Tensor:
    h = code
    for w, b in layers[:-1]:
        h = ad.relu(ad.affine(h, w, b))
    return ad.affine(h, *layers[-1])


def predict_params(tape: ad.Tape, omega_t: HypernetParams,
                   shape_code: ad.Tensor, color_code: ad.Tensor) -> NerfParams:
    """Decode one instance's field parameters as tape tensors.

    shape_code / color_code are [1, d] tensors; gradients flow to them and
    to the meta-network weights.
    """
    cfg = omega_t.hyper
    if shape_code.data.shape != (1, cfg.shape_dim):
        raise ad.ShapeError(f"shape code must be [1,{cfg.shape_dim}]")
    if color_code.data.shape != (1, cfg.color_dim):
        raise ad.ShapeError(f"color code must be [1,{cfg.color_dim}]")

    grid = omega_t.grid
    trunk: list = []
    color: list = []
    tables = None
    for name, target in _target_layout(grid, omega_t.field_cfg):
        code = color_code if name.startswith("color") else shape_code
        flat = _hyper_forward(tape, omega_t.mlps[name], code)
        if target is None:
            per_level = grid.table_size * grid.features_per_entry
            tables = [
                ad.reshape(ad.slice_last(flat, l * per_level, (l + 1) * per_level),
                           (grid.table_size, grid.features_per_entry))
                for l in range(grid.levels)]
        else:
            group, i, fan_in, fan_out = target
            w = ad.reshape(ad.slice_last(flat, 0, fan_in * fan_out),
                           (fan_in, fan_out))
            b = ad.reshape(ad.slice_last(flat, fan_in * fan_out,
                                         fan_in * fan_out + fan_out), (fan_out,))
            (trunk if group == "trunk" else color).append((w, b))
    return NerfParams(trunk=trunk, color=color, tables=tables,
                      grid=grid, field=omega_t.field_cfg)


def predict_instance(omega: HypernetParams, codes: InstanceCodes) -> NerfParams:
    """Numpy-level decode: forward once on a throwaway tape and detach."""
    from .field import detach
    tape = ad.Tape(np.float32)
    omega_t = tensorize_hypernet(tape, omega)
    s = tape.constant(codes.shape[None, :])
    c = tape.constant(codes.color[None, :])
    return detach(predict_params(tape, omega_t, s, c))
