"""End-to-end gradient verification against central finite differences.

Runs in float64 on deliberately small configurations (the check is over
every coordinate, so sizes are kept in the low thousands): the hash
encoding w.r.t. its tables, the field MLP w.r.t. its weights, and the
full meta-net -> field -> render -> photometric-loss chain w.r.t. the
meta-net weights and both codes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .field import (FieldConfig, NerfParams, RenderConfig, init_nerf_params,
                    render_rays)
from .hashgrid import HashGridConfig, encode
from .hypernet import HypernetConfig, init_hypernetwork, predict_params
from .training import loss_eq2

TOLERANCE = 1e-4


def _pack(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.reshape(-1).astype(np.float64) for a in arrays])


def _unpack_tensors(tape: ad.Tape, flat: ad.Tensor, arrays: list[np.ndarray]):
    out = []
    offset = 0
    for a in arrays:
        piece = ad.slice_last(flat, offset, offset + a.size)
        out.append(ad.reshape(piece, a.shape))
        offset += a.size
    return out


def check_encode_gradients(step: float = 1e-4) -> float:
    """Hash encode w.r.t. the table entries (one dense and one hashed level)."""
    cfg = HashGridConfig(levels=2, table_size=16, features_per_entry=2,
                         n_min=1, n_max=8)
    rng = np.random.default_rng(3)
    tables = [rng.standard_normal((cfg.table_size, cfg.features_per_entry))
              for _ in range(cfg.levels)]
    x = rng.random((5, 3))
    probe = rng.standard_normal((5, cfg.output_dim))

    def fn(tape, flat):
        tabs = _unpack_tensors(tape, flat, tables)
        enc = encode(tape.constant(x), tabs, cfg)
        return ad.sum_all(ad.mul(enc, tape.constant(probe)))

    return ad.finite_diff_check(fn, _pack(tables), step)


def check_field_gradients(step: float = 1e-4) -> float:
    """Field MLP forward w.r.t. all its weights (posenc path isolates the MLP)."""
    grid = HashGridConfig(levels=2, table_size=16, features_per_entry=2,
                          n_min=2, n_max=4)
    fcfg = FieldConfig(width=12, trunk_layers=3, geo_features=5, dir_bands=1,
                       use_hash=False, posenc_bands=2)
    rng = np.random.default_rng(4)
    params = init_nerf_params(grid, fcfg, rng)
    flat_src = [a for pair in params.trunk + params.color for a in pair]
    x = rng.random((4, 3))
    d = rng.standard_normal((4, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)

    def fn(tape, flat):
        parts = _unpack_tensors(tape, flat, flat_src)
        nt = len(params.trunk)
        pt = NerfParams(
            trunk=[(parts[2 * i], parts[2 * i + 1]) for i in range(nt)],
            color=[(parts[2 * (nt + i)], parts[2 * (nt + i) + 1])
                   for i in range(len(params.color))],
            tables=None, grid=grid, field=fcfg)
        from .field import field_eval_batch
        sigma, rgb = field_eval_batch(tape, pt, x, d)
        return ad.add(ad.sum_all(sigma), ad.sum_all(rgb))

    return ad.finite_diff_check(fn, _pack(flat_src), step)


def _tiny_chain():
    grid = HashGridConfig(levels=2, table_size=16, features_per_entry=1,
                          n_min=2, n_max=4)
    fcfg = FieldConfig(width=8, trunk_layers=3, geo_features=4, dir_bands=1)
    hcfg = HypernetConfig(shape_dim=4, color_dim=4, hidden=8, hidden_layers=2)
    omega = init_hypernetwork(grid, fcfg, hcfg, seed=11)
    rng = np.random.default_rng(12)
    # move off the fresh init: there relu pre-activations sit at the kink
    # (tiny tables, zero biases), where finite differences are meaningless
    for arr in omega.named_arrays().values():
        arr += 0.15 * rng.standard_normal(arr.shape).astype(arr.dtype)
    s_code = 0.3 * rng.standard_normal((1, hcfg.shape_dim))
    c_code = 0.3 * rng.standard_normal((1, hcfg.color_dim))

    origins = np.tile(np.array([0.0, 0.0, 2.0]), (2, 1))
    dirs = np.array([[0.02, 0.01, -1.0], [-0.03, 0.02, -1.0]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    near = np.array([1.1, 1.1])
    far = np.array([2.9, 2.9])
    hit = np.array([True, True])
    truth = rng.random((2, 3))
    rc = RenderConfig(samples_per_ray=3, background=(1.0, 1.0, 1.0))
    return omega, hcfg, s_code, c_code, (origins, dirs, near, far, hit), truth, rc


def check_full_chain_gradients(step: float = 1e-3) -> float:
    """Meta-net -> field -> volume render -> loss w.r.t. meta weights and codes."""
    omega, hcfg, s_code, c_code, rays, truth, rc = _tiny_chain()
    names = sorted(omega.named_arrays())
    omega_arrays = [omega.named_arrays()[n] for n in names]
    all_arrays = omega_arrays + [s_code, c_code]

    def fn(tape, flat):
        parts = _unpack_tensors(tape, flat, all_arrays)
        mlps = {}
        i = 0
        for n in names:
            mlp_name, layer, kind = n.rsplit(".", 2)
            mlps.setdefault(mlp_name, {})[(int(layer), kind)] = parts[i]
            i += 1
        omega_t = type(omega)(
            mlps={name: [(d[(li, "w")], d[(li, "b")])
                         for li in sorted({k[0] for k in d})]
                  for name, d in mlps.items()},
            grid=omega.grid, field_cfg=omega.field_cfg, hyper=omega.hyper)
        params_t = predict_params(tape, omega_t, parts[-2], parts[-1])
        pix, _ = render_rays(tape, params_t, *rays, rc)
        return loss_eq2(pix, truth)

    return ad.finite_diff_check(fn, _pack(all_arrays), step)


def run_suite(step_small: float = 1e-4) -> dict[str, float]:
    return {
        "encode_wrt_tables": check_encode_gradients(step_small),
        "field_wrt_weights": check_field_gradients(step_small),
        "chain_wrt_omega_and_codes": check_full_chain_gradients(1e-3),
    }
