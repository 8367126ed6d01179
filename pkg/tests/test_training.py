"""Prior training loop, TTO, and query network tests (tiny configurations)."""

import numpy as np
import pytest

from nerfprior import scene_io as sio
from nerfprior import training as tr
from nerfprior.field import FieldConfig, RenderConfig, render_image
from nerfprior.hashgrid import HashGridConfig
from nerfprior.hypernet import HypernetConfig, InstanceCodes, predict_instance

GRID = HashGridConfig(levels=2, table_size=128, features_per_entry=1,
                      n_min=2, n_max=4)
FCFG = FieldConfig(width=8, trunk_layers=3, geo_features=4, dir_bands=1)
HCFG = HypernetConfig(shape_dim=4, color_dim=4, hidden=16, hidden_layers=2)


def tiny_dataset(n_views=2, size=12):
    specs = {
        "red": sio.SceneSpec((sio.sphere((0, 0, 0), 0.45, (0.9, 0.1, 0.1)),)),
        "blue": sio.SceneSpec((sio.box((0, 0, 0), (0.35,) * 3, (0.1, 0.2, 0.9)),)),
    }
    intr = sio.CameraIntrinsics(size, size, focal=size * 1.2)
    return sio.generate_synthetic_dataset(specs, sio.ring_poses(n_views), intr)


def tiny_train(steps, seed=0, **kw):
    cfg = tr.TrainConfig(steps=steps, rays_per_batch=16, samples_per_ray=6,
                         seed=seed, log_every=10 ** 9, **kw)
    return tr.train_prior(tiny_dataset(), cfg, grid_cfg=GRID, field_cfg=FCFG,
                          hyper_cfg=HCFG)


def state_bytes(model):
    _, arrays = model.to_state()
    return {k: v.tobytes() for k, v in arrays.items()}


# -- rng streams ---------------------------------------------------------------------

def test_rng_stream_deterministic_and_name_separated():
    a = tr.rng_stream(7, "init").random(4)
    b = tr.rng_stream(7, "init").random(4)
    c = tr.rng_stream(7, "sampling").random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# -- loss ---------------------------------------------------------------------------------

def test_loss_eq2_zero_when_equal():
    x = np.random.default_rng(0).random((5, 3))
    assert tr.loss_eq2(x, x) == 0.0


def test_loss_eq2_single_ray_hand_value():
    a = np.array([[0.6, 0.2, 0.3]])
    b = np.array([[0.5, 0.2, 0.3]])
    assert tr.loss_eq2(a, b) == pytest.approx(0.01 / 3.0)


def test_loss_eq2_nonnegative_random():
    rng = np.random.default_rng(1)
    for _ in range(10):
        assert tr.loss_eq2(rng.random((4, 3)), rng.random((4, 3))) >= 0.0


def test_loss_eq2_shape_mismatch():
    import nerfprior.autodiff as ad
    with pytest.raises(ad.ShapeError):
        tr.loss_eq2(np.zeros((2, 3)), np.zeros((3, 3)))


# -- train_prior --------------------------------------------------------------------------

def test_zero_steps_returns_initialized_model_unchanged():
    a = tiny_train(0)
    b = tiny_train(0)
    assert state_bytes(a) == state_bytes(b)
    assert a.codebook.ids == ["red", "blue"]


def test_one_step_updates_omega_and_only_sampled_codes():
    before = tiny_train(0)
    after = tiny_train(1)
    sampled = int(tr.rng_stream(0, "sampling").integers(0, 2, 1)[0])
    other = 1 - sampled

    omega_changed = any(
        before.omega.named_arrays()[k].tobytes()
        != after.omega.named_arrays()[k].tobytes()
        for k in before.omega.named_arrays())
    assert omega_changed
    assert (before.codebook.shape[sampled].tobytes()
            != after.codebook.shape[sampled].tobytes())
    assert (before.codebook.shape[other].tobytes()
            == after.codebook.shape[other].tobytes())
    assert (before.codebook.color[other].tobytes()
            == after.codebook.color[other].tobytes())


def test_training_deterministic_across_runs():
    assert state_bytes(tiny_train(5)) == state_bytes(tiny_train(5))


def test_training_loss_decreases():
    ds = tiny_dataset()
    model0 = tiny_train(0)
    model = tiny_train(120)

    def full_loss(m):
        total = 0.0
        rc = m.render_config()
        for inst in ds.instances:
            params = predict_instance(m.omega, m.codebook.get(inst.instance_id))
            for v in inst.views:
                total += tr.loss_eq2(
                    render_image(params, ds.intrinsics, v.pose, rc), v.image)
        return total

    assert full_loss(model) < full_loss(model0)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        tr.train_prior(sio.SceneDataset(intrinsics=sio.CameraIntrinsics(4, 4, 5.0)),
                       tr.TrainConfig(steps=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        tr.TrainConfig(rays_per_batch=0)


# -- test-time optimization ------------------------------------------------------------------

def test_tto_fixed_point_at_codebook_entry():
    """Views rendered from an entry, init at that entry: already the minimum."""
    model = tiny_train(30)
    ds = tiny_dataset()
    entry = model.codebook.get("red")
    params = predict_instance(model.omega, entry)
    rc = model.render_config()
    views = [sio.View(pose=p, image=render_image(params, ds.intrinsics, p, rc))
             for p in sio.ring_poses(2)]
    cfg = tr.TTOConfig(steps=20, rays_per_batch=16, samples_per_ray=rc.samples_per_ray,
                       eval_every=5, seed=0)
    out = tr.test_time_optimize(model, views, ds.intrinsics, cfg, init=entry)
    assert np.abs(out.shape - entry.shape).max() < 1e-3
    assert np.abs(out.color - entry.color).max() < 1e-3


def test_tto_checksum_guard_and_input_validation():
    model = tiny_train(5)
    ds = tiny_dataset()
    cfg = tr.TTOConfig(steps=2, rays_per_batch=8, samples_per_ray=6)
    with pytest.raises(ValueError):
        tr.test_time_optimize(model, [], ds.intrinsics, cfg)
    with pytest.raises(ValueError):
        tr.test_time_optimize(model, [sio.View(pose=None, image=np.zeros((4, 4, 3)))],
                              ds.intrinsics, cfg)
    before = tr.omega_checksum(model.omega)
    view = ds.instances[0].views[0]
    tr.test_time_optimize(model, [view], ds.intrinsics, cfg)
    assert tr.omega_checksum(model.omega) == before


def test_tto_defaults_to_codebook_mean_init():
    model = tiny_train(5)
    ds = tiny_dataset()
    view = ds.instances[0].views[0]
    cfg = tr.TTOConfig(steps=0, rays_per_batch=8, samples_per_ray=6)
    out = tr.test_time_optimize(model, [view], ds.intrinsics, cfg)
    mean = model.codebook.mean_codes()
    np.testing.assert_array_equal(out.shape, mean.shape)
    np.testing.assert_array_equal(out.color, mean.color)


# -- embeddings / query net --------------------------------------------------------------------

def test_trivial_embedding_properties():
    rng = np.random.default_rng(2)
    img = rng.random((20, 20, 3))
    e = tr.trivial_embedding(img)
    assert e.shape == (tr.EMBED_DIM,)
    assert abs(e.sum()) < 1e-3          # mean-centered
    assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-5)
    np.testing.assert_array_equal(e, tr.trivial_embedding(img))
    # constant image has no structure -> zero vector
    assert not tr.trivial_embedding(np.full((8, 8, 3), 0.5)).any()


def test_load_embedding_file(tmp_path):
    vec = np.arange(6.0, dtype=np.float64).reshape(2, 3)
    path = str(tmp_path / "e.npy")
    np.save(path, vec)
    out = tr.load_embedding_file(path)
    assert out.shape == (6,)
    assert out.dtype == np.float32


def test_query_net_single_instance_converges_to_constant_codes():
    specs = {"solo": sio.SceneSpec((sio.sphere((0, 0, 0), 0.4, (0.8, 0.3, 0.2)),))}
    intr = sio.CameraIntrinsics(12, 12, focal=14.0)
    ds = sio.generate_synthetic_dataset(specs, sio.ring_poses(3), intr)
    cfg = tr.TrainConfig(steps=3, rays_per_batch=8, samples_per_ray=4,
                         seed=0, log_every=10 ** 9)
    model = tr.train_prior(ds, cfg, grid_cfg=GRID, field_cfg=FCFG, hyper_cfg=HCFG)
    delta = tr.train_query_net(model, ds, tr.trivial_embedding,
                               tr.QueryTrainConfig(steps=800, seed=0))
    target = np.concatenate([model.codebook.shape[0], model.codebook.color[0]])
    for view in ds.instances[0].views:
        out = tr.query_forward(delta, tr.trivial_embedding(view.image))[0]
        np.testing.assert_allclose(out, target, atol=2e-2)


def test_query_net_training_reduces_loss_and_is_deterministic():
    model = tiny_train(3)
    ds = tiny_dataset(n_views=3)
    cfg = tr.QueryTrainConfig(steps=150, seed=4)
    d1 = tr.train_query_net(model, ds, tr.trivial_embedding, cfg)
    d2 = tr.train_query_net(model, ds, tr.trivial_embedding, cfg)
    for (w1, b1), (w2, b2) in zip(d1.layers, d2.layers):
        assert w1.tobytes() == w2.tobytes()
        assert b1.tobytes() == b2.tobytes()

    d0 = tr.init_query_net(tr.EMBED_DIM, model.omega.hyper, cfg.seed)

    def loss(delta):
        total = 0.0
        for inst in ds.instances:
            n = model.codebook.index(inst.instance_id)
            target = np.concatenate([model.codebook.shape[n],
                                     model.codebook.color[n]])
            for v in inst.views:
                out = tr.query_forward(delta, tr.trivial_embedding(v.image))[0]
                total += np.mean((out - target) ** 2)
        return total

    assert loss(d1) < loss(d0)


def test_query_exact_entry_and_tie_breaks_to_first_entry():
    model = tiny_train(0)
    cb = model.codebook
    # delta that always outputs exactly entry 0's codes
    target = np.concatenate([cb.shape[0], cb.color[0]])
    w = np.zeros((tr.EMBED_DIM, len(target)), dtype=np.float32)
    layers = [(w, target.astype(np.float32))]
    delta = tr.QueryNetParams(layers=layers, shape_dim=HCFG.shape_dim,
                              color_dim=HCFG.color_dim)
    codes, nearest = tr.query(delta, np.zeros(tr.EMBED_DIM, np.float32), cb)
    assert nearest == cb.ids[0]
    np.testing.assert_array_equal(codes.shape, cb.shape[0])

    # exact equidistant tie: two identical entries -> lowest-index id wins
    dup = tr.Codebook(ids=["a", "b"], shape=np.ones((2, 4), np.float32),
                      color=np.ones((2, 4), np.float32))
    _, tied = tr.query(delta, np.zeros(tr.EMBED_DIM, np.float32), dup)
    assert tied == "a"


def test_nearest_ids_k_equals_size_contains_truth():
    model = tiny_train(0)
    delta = tr.init_query_net(tr.EMBED_DIM, model.omega.hyper, 0)
    ids = tr.nearest_ids(delta, np.zeros(tr.EMBED_DIM, np.float32),
                         model.codebook, k=len(model.codebook))
    assert sorted(ids) == sorted(model.codebook.ids)


def test_query_forward_dimension_mismatch():
    import nerfprior.autodiff as ad
    model = tiny_train(0)
    delta = tr.init_query_net(tr.EMBED_DIM, model.omega.hyper, 0)
    with pytest.raises(ad.ShapeError):
        tr.query_forward(delta, np.zeros(tr.EMBED_DIM + 1, np.float32))


# -- prior checkpoint ---------------------------------------------------------------------------

def test_prior_checkpoint_roundtrip(tmp_path):
    from nerfprior.checkpoints import load_checkpoint, save_checkpoint
    model = tiny_train(4)
    path = str(tmp_path / "prior.ckpt")
    save_checkpoint(model, path)
    back = load_checkpoint(path, "prior")
    assert state_bytes(back) == state_bytes(model)
    assert back.codebook.ids == model.codebook.ids
    assert back.omega.hyper == model.omega.hyper
