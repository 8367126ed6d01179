"""Batch command surface binding the engine into reproducible experiments.

Every subcommand is seeded through named substreams of a single --seed
flag and writes a config echo file with all effective values next to its
outputs.  Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import autodiff as ad
from . import denoise as dn
from . import gradcheck as gc
from . import metrics as mt
from . import scene_io as sio
from . import training as tr
from .checkpoints import CheckpointError, load_checkpoint, save_checkpoint
from .field import FieldConfig, RenderConfig, render_image
from .hashgrid import HashGridConfig
from .hypernet import HypernetConfig, predict_instance, swap_codes

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _echo_config(args: argparse.Namespace, near: str) -> None:
    """Write all effective flag values next to the command's main output."""
    directory = near if os.path.isdir(near) or not os.path.splitext(near)[1] \
        else os.path.dirname(near) or "."
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"config_echo_{args.command.replace('-', '_')}.txt")
    with open(path, "w") as f:
        for key in sorted(vars(args)):
            if key == "func":
                continue
            f.write(f"{key}={getattr(args, key)}\n")


def _log(line: str) -> None:
    print(line, flush=True)


def _grid_from_args(args) -> HashGridConfig:
    return HashGridConfig(levels=args.levels, table_size=args.table_size,
                          features_per_entry=args.features,
                          n_min=args.n_min, n_max=args.n_max)


def _add_grid_flags(p) -> None:
    p.add_argument("--levels", type=int, default=8)
    p.add_argument("--table-size", type=int, default=1024)
    p.add_argument("--features", type=int, default=2)
    p.add_argument("--n-min", type=int, default=16)
    p.add_argument("--n-max", type=int, default=256)


def default_desk_specs(n_instances: int, seed: int) -> dict[str, sio.SceneSpec]:
    """Deterministic family of simple sphere/box arrangements."""
    rng = tr.rng_stream(seed, "data")
    palette = [(0.85, 0.2, 0.15), (0.2, 0.45, 0.85), (0.9, 0.75, 0.1),
               (0.2, 0.7, 0.3), (0.6, 0.25, 0.7), (0.85, 0.45, 0.1),
               (0.3, 0.75, 0.75), (0.55, 0.55, 0.55)]
    specs = {}
    for i in range(n_instances):
        color = palette[i % len(palette)]
        second = palette[(i + 3) % len(palette)]
        if i % 2 == 0:
            r = 0.32 + 0.1 * float(rng.random())
            prims = [sio.sphere((0.0, -0.1, 0.0), r, color),
                     sio.box((0.0, -0.72, 0.0), (0.5, 0.08, 0.5), second)]
        else:
            h = 0.28 + 0.12 * float(rng.random())
            prims = [sio.box((0.0, -0.2, 0.0), (h, h, h), color),
                     sio.sphere((0.0, 0.45, 0.0), 0.18, second)]
        specs[f"inst{i:03d}"] = sio.SceneSpec(tuple(prims))
    return specs


def cluttered_desk_specs(n_instances: int, seed: int,
                         primitives_per_scene: int = 8) -> dict[str, sio.SceneSpec]:
    """Deterministic family of cluttered arrangements of small primitives.

    More texture-rich than the simple family; useful when benchmarking
    encodings that only pay off on scenes with fine spatial detail.
    """
    rng = tr.rng_stream(seed, "data")
    palette = [(0.85, 0.2, 0.15), (0.2, 0.45, 0.85), (0.9, 0.75, 0.1),
               (0.2, 0.7, 0.3), (0.6, 0.25, 0.7), (0.85, 0.45, 0.1),
               (0.3, 0.75, 0.75), (0.55, 0.55, 0.55)]
    specs = {}
    for i in range(n_instances):
        prims = []
        for j in range(primitives_per_scene):
            center = tuple(float(c) for c in rng.uniform(-0.6, 0.6, 3))
            color = palette[(i + 2 * j) % len(palette)]
            if (i + j) % 2 == 0:
                prims.append(sio.sphere(center, 0.1 + 0.12 * float(rng.random()),
                                        color))
            else:
                half = tuple(float(h) for h in rng.uniform(0.08, 0.18, 3))
                prims.append(sio.box(center, half, color))
        specs[f"inst{i:03d}"] = sio.SceneSpec(tuple(prims))
    return specs


# -- subcommand bodies -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.clutter:
        specs = cluttered_desk_specs(args.instances, args.seed)
    else:
        specs = default_desk_specs(args.instances, args.seed)
    poses = sio.ring_poses(args.views, elevation_deg=22.0, radius=2.6)
    intr = sio.CameraIntrinsics(args.size, args.size, focal=args.size * 1.1)
    dataset = sio.generate_synthetic_dataset(specs, poses, intr,
                                             lambert=args.lambert)
    sio.save_manifest(dataset, args.out)
    _echo_config(args, args.out)
    _log(f"instances={len(dataset.instances)} views={args.views} out={args.out}")
    return EXIT_OK


def cmd_train_prior(args) -> int:
    dataset = sio.load_manifest(args.data)
    cfg = tr.TrainConfig(steps=args.steps, rays_per_batch=args.rays,
                         samples_per_ray=args.samples, lr=args.lr,
                         seed=args.seed, log_every=args.log_every)
    model = tr.train_prior(dataset, cfg, grid_cfg=_grid_from_args(args),
                           hyper_cfg=HypernetConfig(shape_dim=args.code_dim,
                                                    color_dim=args.code_dim,
                                                    hidden=args.hidden),
                           log=_log)
    save_checkpoint(model, args.out)
    _echo_config(args, args.out)
    _log(f"saved={args.out}")
    return EXIT_OK


def cmd_invert(args) -> int:
    prior = load_checkpoint(args.prior, "prior")
    dataset = sio.load_manifest(args.data)
    inst = dataset.by_id(args.instance)
    views = [inst.views[i] for i in args.view]
    cfg = tr.TTOConfig(steps=args.steps, lr=args.lr, seed=args.seed)
    codes = tr.test_time_optimize(prior, views, dataset.intrinsics, cfg,
                                  log=_log)
    save_checkpoint(codes, args.out)
    _echo_config(args, args.out)
    _log(f"saved={args.out}")
    return EXIT_OK


def cmd_denoise_train(args) -> int:
    prior = load_checkpoint(args.prior, "prior")
    dataset = sio.load_manifest(args.data)
    rc = prior.render_config()
    pairs = []
    for inst in dataset.instances:
        params = predict_instance(prior.omega, prior.codebook.get(inst.instance_id))
        for view in inst.views:
            rendered = render_image(params, dataset.intrinsics, view.pose, rc)
            pairs.append((rendered, view.image))
    den = dn.train_denoiser(pairs, dn.DenoiserTrainConfig(steps=args.steps,
                                                          seed=args.seed),
                            log=_log)
    save_checkpoint(den, args.out)
    _echo_config(args, args.out)
    _log(f"saved={args.out}")
    return EXIT_OK


def cmd_denoise_finetune(args) -> int:
    prior = load_checkpoint(args.prior, "prior")
    params = predict_instance(prior.omega, prior.codebook.get(args.instance))
    denoiser = (dn.DenoiserParams.identity_denoiser() if args.identity
                else load_checkpoint(args.denoiser, "denoiser"))
    intr = sio.load_manifest(args.data).intrinsics
    cfg = dn.DenoiseConfig(poses=sio.hemisphere_poses(args.poses // 2),
                           finetune_steps=args.steps, seed=args.seed)
    refined = dn.denoise_and_finetune(params, denoiser, intr, cfg,
                                      denoised_dir=args.denoised_dir, log=_log)
    save_checkpoint(refined, args.out)
    _echo_config(args, args.out)
    _log(f"saved={args.out}")
    return EXIT_OK


def cmd_train_query(args) -> int:
    prior = load_checkpoint(args.prior, "prior")
    dataset = sio.load_manifest(args.data)
    delta = tr.train_query_net(prior, dataset, tr.trivial_embedding,
                               tr.QueryTrainConfig(steps=args.steps,
                                                   seed=args.seed), log=_log)
    save_checkpoint(delta, args.out)
    _echo_config(args, args.out)
    _log(f"saved={args.out}")
    return EXIT_OK


def cmd_query(args) -> int:
    prior = load_checkpoint(args.prior, "prior")
    delta = load_checkpoint(args.query_net, "query")
    if args.embedding_file:
        emb = tr.load_embedding_file(args.embedding_file)
    else:
        emb = tr.trivial_embedding(sio.read_image(args.image))
    codes, nearest = tr.query(delta, emb, prior.codebook)
    _log(f"nearest={nearest}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        params = predict_instance(prior.omega, codes)
        _render_ring(params, prior, args.out, args.views, args.size,
                     threads=args.threads)
        _echo_config(args, args.out)
    return EXIT_OK


def _render_ring(params, prior, outdir, n_views, size, threads=1) -> None:
    intr = sio.CameraIntrinsics(size, size, focal=size * 1.1)
    rc = prior.render_config()
    for i, pose in enumerate(sio.ring_poses(n_views, 22.0, 2.6)):
        img = render_image(params, intr, pose, rc, threads=threads)
        sio.write_image(img, os.path.join(outdir, f"render_{i:04d}.png"))


def _load_instance_params(args, prior):
    if getattr(args, "codes", None):
        return predict_instance(prior.omega, load_checkpoint(args.codes, "codes"))
    return predict_instance(prior.omega, prior.codebook.get(args.instance))


def cmd_render(args) -> int:
    if args.nerf:
        params = load_checkpoint(args.nerf, "nerf")
        prior = None
        rc = RenderConfig()
        intr = sio.CameraIntrinsics(args.size, args.size, focal=args.size * 1.1)
        os.makedirs(args.out, exist_ok=True)
        for i, pose in enumerate(sio.ring_poses(args.views, 22.0, 2.6)):
            img = render_image(params, intr, pose, rc, threads=args.threads)
            sio.write_image(img, os.path.join(args.out, f"render_{i:04d}.png"))
    else:
        prior = load_checkpoint(args.prior, "prior")
        params = _load_instance_params(args, prior)
        os.makedirs(args.out, exist_ok=True)
        _render_ring(params, prior, args.out, args.views, args.size,
                     threads=args.threads)
    _echo_config(args, args.out)
    _log(f"out={args.out}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    prior = load_checkpoint(args.prior, "prior")
    params = _load_instance_params(args, prior)
    mesh = mt.extract_mesh(params, resolution=args.resolution,
                           threshold=args.threshold)
    mt.save_obj(mesh, args.out)
    _echo_config(args, args.out)
    _log(f"vertices={len(mesh.vertices)} faces={len(mesh.faces)} out={args.out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    prior = load_checkpoint(args.prior, "prior")
    dataset = sio.load_manifest(args.data)
    rc = prior.render_config()
    report = mt.MetricsReport()
    for inst in dataset.instances:
        params = predict_instance(prior.omega, prior.codebook.get(inst.instance_id))
        for view in inst.views:
            img = render_image(params, dataset.intrinsics, view.pose, rc,
                               threads=args.threads)
            report.per_view_psnr.append(mt.psnr(img, view.image))
            report.per_view_ssim.append(mt.ssim(img, view.image))
    os.makedirs(args.out, exist_ok=True)
    report.save(os.path.join(args.out, "metrics.txt"))
    report.save_json(os.path.join(args.out, "metrics.json"))
    _echo_config(args, args.out)
    _log(f"mean_psnr={report.mean_psnr:.3f} mean_ssim={report.mean_ssim:.4f}")
    return EXIT_OK


def cmd_compress_report(args) -> int:
    prior = load_checkpoint(args.prior, "prior")
    baseline = mt.nerf_param_count(
        predict_instance(prior.omega, prior.codebook.mean_codes()))
    report = mt.compression_report(prior, baseline)
    for line in report.lines():
        _log(line)
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(report.lines()) + "\n")
        _echo_config(args, args.out)
    return EXIT_OK


def cmd_swap_codes(args) -> int:
    prior = load_checkpoint(args.prior, "prior")
    a = prior.codebook.get(args.instance_a)
    b = prior.codebook.get(args.instance_b)
    ab, ba = swap_codes(a, b)
    os.makedirs(args.out, exist_ok=True)
    for name, codes in (("a_shape_b_color", ab), ("b_shape_a_color", ba)):
        sub = os.path.join(args.out, name)
        os.makedirs(sub, exist_ok=True)
        params = predict_instance(prior.omega, codes)
        _render_ring(params, prior, sub, args.views, args.size,
                     threads=args.threads)
        save_checkpoint(codes, os.path.join(args.out, f"{name}.ckpt"))
    _echo_config(args, args.out)
    _log(f"out={args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gc.run_suite()
    worst = max(results.values())
    for name, err in results.items():
        _log(f"{name}={err:.3e}")
    _log(f"max_rel_error={worst:.3e}")
    return EXIT_OK if worst < gc.TOLERANCE else EXIT_NUMERIC


# -- wiring -------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="nerfprior",
                     description="Category-level NeRF prior engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("gen-data", help="generate a synthetic multiview dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--instances", type=int, default=4)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--lambert", action="store_true")
    p.add_argument("--clutter", action="store_true",
                   help="cluttered multi-primitive scenes instead of the simple family")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-prior", help="train the hypernetwork prior")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--rays", type=int, default=256)
    p.add_argument("--samples", type=int, default=48)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--code-dim", type=int, default=64)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--log-every", type=int, default=200)
    _add_grid_flags(p)
    common(p)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("invert", help="test-time optimize codes from posed views")
    p.add_argument("--prior", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("--view", type=int, nargs="+", default=[0])
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--lr", type=float, default=5e-2)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("denoise-train", help="train the denoising autoencoder")
    p.add_argument("--prior", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_denoise_train)

    p = sub.add_parser("denoise-finetune", help="denoise rendered poses and finetune")
    p.add_argument("--prior", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("--denoiser")
    p.add_argument("--identity", action="store_true")
    p.add_argument("--denoised-dir")
    p.add_argument("--poses", type=int, default=48)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_denoise_finetune)

    p = sub.add_parser("train-query", help="train the embedding query network")
    p.add_argument("--prior", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_train_query)

    p = sub.add_parser("query", help="image/embedding -> codes -> optional renders")
    p.add_argument("--prior", required=True)
    p.add_argument("--query-net", required=True)
    p.add_argument("--image")
    p.add_argument("--embedding-file")
    p.add_argument("--out")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--size", type=int, default=48)
    common(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("render", help="render ring views of an instance")
    p.add_argument("--prior")
    p.add_argument("--instance")
    p.add_argument("--codes")
    p.add_argument("--nerf")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("mesh", help="extract an iso-surface mesh")
    p.add_argument("--prior", required=True)
    p.add_argument("--instance")
    p.add_argument("--codes")
    p.add_argument("--resolution", type=int, default=96)
    p.add_argument("--threshold", type=float, default=10.0)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("metrics", help="PSNR/SSIM of codebook renders vs data")
    p.add_argument("--prior", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("compress-report", help="storage accounting of the prior")
    p.add_argument("--prior", required=True)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_compress_report)

    p = sub.add_parser("swap-codes", help="cross shape/color codes of two instances")
    p.add_argument("--prior", required=True)
    p.add_argument("instance_a")
    p.add_argument("instance_b")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_swap_codes)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (sio.DatasetError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ad.NonFiniteError, ad.ShapeError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    raise SystemExit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
