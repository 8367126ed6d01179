"""Image/geometry metrics and storage-accounting tests."""

import numpy as np
import pytest

from nerfprior import metrics as mt
from nerfprior import scene_io as sio
from nerfprior import training as tr
from nerfprior.field import FieldConfig, init_nerf_params
from nerfprior.hashgrid import HashGridConfig
from nerfprior.hypernet import HypernetConfig


# -- psnr -------------------------------------------------------------------------

def test_psnr_identical_capped_at_100():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert mt.psnr(img, img) == 100.0


def test_psnr_known_value():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)  # mse = 0.01 -> 20 dB
    assert mt.psnr(a, b) == pytest.approx(20.0)


def test_psnr_symmetric_and_shape_checked():
    rng = np.random.default_rng(1)
    a, b = rng.random((5, 5, 3)), rng.random((5, 5, 3))
    assert mt.psnr(a, b) == pytest.approx(mt.psnr(b, a))
    with pytest.raises(ValueError):
        mt.psnr(a, b[:4])


# -- ssim -------------------------------------------------------------------------

def test_ssim_identical_is_one():
    img = np.random.default_rng(2).random((16, 16, 3))
    assert mt.ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_constant_images_closed_form():
    """For constant p vs constant q every window reduces to
    (2pq+C1)/(p^2+q^2+C1): the variance terms cancel to C2/C2."""
    p, q = 0.3, 0.8
    a = np.full((16, 16), p)
    b = np.full((16, 16), q)
    c1 = 0.01 ** 2
    expected = (2 * p * q + c1) / (p * p + q * q + c1)
    assert mt.ssim(a, b) == pytest.approx(expected, abs=1e-9)


def test_ssim_matches_reference_implementation():
    skimage_metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(3)
    a = rng.random((32, 32))
    b = np.clip(a + 0.1 * rng.standard_normal((32, 32)), 0.0, 1.0)
    ref = skimage_metrics.structural_similarity(
        a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False)
    assert mt.ssim(a, b) == pytest.approx(ref, abs=1e-4)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        mt.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# -- meshes ------------------------------------------------------------------------

def sphere_volume(resolution, radius):
    axis = np.linspace(-1.0, 1.0, resolution)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    # smooth signed field, positive inside: level 0 is the sphere surface
    return radius - np.sqrt(x * x + y * y + z * z)


def test_grid_to_mesh_empty_when_no_crossing():
    assert mt.grid_to_mesh(np.zeros((8, 8, 8)), threshold=10.0).empty
    assert mt.grid_to_mesh(np.full((8, 8, 8), 99.0), threshold=10.0).empty


def test_sphere_mesh_vertices_on_surface():
    r, res = 0.5, 48
    mesh = mt.grid_to_mesh(sphere_volume(res, r), threshold=0.0)
    assert not mesh.empty
    norms = np.linalg.norm(mesh.vertices, axis=1)
    voxel = 2.0 / (res - 1)
    assert np.abs(norms - r).max() < voxel


def test_zero_density_field_gives_empty_mesh():
    grid = HashGridConfig(levels=2, table_size=64, features_per_entry=1,
                          n_min=2, n_max=4)
    fcfg = FieldConfig(width=8, trunk_layers=3, geo_features=4, dir_bands=1)
    params = init_nerf_params(grid, fcfg, np.random.default_rng(0))
    params.trunk[-1][1][0] = -40.0  # density logit -> softplus ~ 0
    assert mt.extract_mesh(params, resolution=16, threshold=10.0).empty


def test_mesh_validation():
    with pytest.raises(ValueError):
        mt.Mesh(np.zeros((3, 3)), [[0, 1, 5]])
    with pytest.raises(ValueError):
        mt.Mesh([[np.nan, 0, 0]], np.zeros((0, 3), dtype=np.int64))


def test_save_obj_roundtrip_text(tmp_path):
    mesh = mt.Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    path = tmp_path / "m.obj"
    mt.save_obj(mesh, str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("v ")
    assert lines[-1] == "f 1 2 3"


def test_sample_surface_points_lie_on_triangle():
    mesh = mt.Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    pts = mt.sample_surface(mesh, 500, np.random.default_rng(0))
    assert np.all(pts[:, 2] == 0.0)
    assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 1] >= 0)
    assert np.all(pts[:, 0] + pts[:, 1] <= 1.0 + 1e-12)


def test_sample_surface_rejects_empty_mesh():
    empty = mt.Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(ValueError):
        mt.sample_surface(empty, 10, np.random.default_rng(0))


# -- chamfer -----------------------------------------------------------------------

def test_chamfer_points_identical_zero():
    pts = np.random.default_rng(4).random((100, 3))
    assert mt.chamfer_points(pts, pts) == 0.0


def test_chamfer_points_hand_value():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert mt.chamfer_points(a, b) == pytest.approx(2.0)  # 1^2 + 1^2


def test_chamfer_points_symmetric():
    rng = np.random.default_rng(5)
    a, b = rng.random((50, 3)), rng.random((60, 3))
    assert mt.chamfer_points(a, b) == pytest.approx(mt.chamfer_points(b, a))


def test_chamfer_same_mesh_near_zero():
    mesh = mt.grid_to_mesh(sphere_volume(24, 0.5), threshold=0.0)
    assert mt.chamfer(mesh, mesh, n=512) < 1e-3


def test_chamfer_scales_with_offset():
    m1 = mt.grid_to_mesh(sphere_volume(24, 0.3), threshold=0.0)
    m2 = mt.grid_to_mesh(sphere_volume(24, 0.6), threshold=0.0)
    # concentric spheres differing by 0.3 in radius -> chamfer ~ 2*(0.3)^2
    assert mt.chamfer(m1, m2, n=2048) == pytest.approx(2 * 0.3 ** 2, rel=0.2)


# -- retrieval ---------------------------------------------------------------------

def _tiny_prior(n=3):
    grid = HashGridConfig(levels=2, table_size=64, features_per_entry=1,
                          n_min=2, n_max=4)
    fcfg = FieldConfig(width=8, trunk_layers=3, geo_features=4, dir_bands=1)
    hcfg = HypernetConfig(shape_dim=4, color_dim=4, hidden=16, hidden_layers=2)
    specs = {
        f"i{k}": sio.SceneSpec((sio.sphere((0, 0, 0), 0.2 + 0.1 * k,
                                           (0.9 - 0.2 * k, 0.2, 0.3)),))
        for k in range(n)}
    intr = sio.CameraIntrinsics(12, 12, focal=14.0)
    ds = sio.generate_synthetic_dataset(specs, sio.ring_poses(2), intr)
    cfg = tr.TrainConfig(steps=0, rays_per_batch=8, samples_per_ray=4, seed=0)
    model = tr.train_prior(ds, cfg, grid_cfg=grid, field_cfg=fcfg, hyper_cfg=hcfg)
    return model, ds


def test_retrieval_accuracy_trivial_cases():
    model, ds = _tiny_prior()
    cb = model.codebook

    def perfect_embed(image):
        # identify the instance by its silhouette area, emit its codes
        area = float((image < 0.999).any(axis=2).sum())
        best = min(range(len(ds.instances)), key=lambda k: abs(
            area - float((ds.instances[k].views[0].image < 0.999)
                         .any(axis=2).sum())))
        return np.concatenate([cb.shape[best], cb.color[best]])

    identity = tr.QueryNetParams(
        layers=[(np.eye(8, dtype=np.float32), np.zeros(8, np.float32))],
        shape_dim=4, color_dim=4)
    assert mt.retrieval_accuracy(identity, model, ds, perfect_embed) == 1.0
    # top-k at full codebook size always hits
    wrong = lambda image: np.full(8, 100.0, dtype=np.float32)
    assert mt.retrieval_accuracy(identity, model, ds, wrong, k=len(cb)) == 1.0


def test_retrieval_accuracy_empty_dataset_rejected():
    model, ds = _tiny_prior()
    empty = sio.SceneDataset(intrinsics=ds.intrinsics)
    identity = tr.QueryNetParams(
        layers=[(np.eye(8, dtype=np.float32), np.zeros(8, np.float32))],
        shape_dim=4, color_dim=4)
    with pytest.raises(ValueError):
        mt.retrieval_accuracy(identity, model, empty, tr.trivial_embedding)


# -- compression accounting -----------------------------------------------------------

def test_compression_single_instance_definition():
    model, _ = _tiny_prior(n=1)
    baseline_params = 1000
    rep = mt.compression_report(model, baseline_params)
    cfg = model.omega.hyper
    assert rep.n_instances == 1
    assert rep.per_instance_marginal_bytes == 4 * (cfg.shape_dim + cfg.color_dim)
    assert rep.omega_bytes == 4 * model.omega.param_count()
    assert rep.prior_bytes == rep.omega_bytes + rep.per_instance_marginal_bytes
    assert rep.baseline_total_bytes == 4 * baseline_params
    assert rep.ratio == pytest.approx(rep.prior_bytes / rep.baseline_total_bytes)


def test_compression_ratio_strictly_improves_with_instance_count():
    model, _ = _tiny_prior(n=1)
    ratios = [mt.compression_report_at(model, 10_000, n).ratio
              for n in (1, 2, 4, 16, 256, 1038)]
    assert all(r2 < r1 for r1, r2 in zip(ratios, ratios[1:]))
    # asymptote: codes-per-instance over baseline-per-instance
    cfg = model.omega.hyper
    floor = 4 * (cfg.shape_dim + cfg.color_dim) / (4 * 10_000)
    assert ratios[-1] > floor


def test_compression_marginal_cost_is_exactly_code_bytes():
    model, _ = _tiny_prior(n=1)
    r1 = mt.compression_report_at(model, 10_000, 7)
    r2 = mt.compression_report_at(model, 10_000, 8)
    assert r2.prior_bytes - r1.prior_bytes == r1.per_instance_marginal_bytes
    with pytest.raises(ValueError):
        mt.compression_report_at(model, 10_000, 0)


def test_nerf_param_count_matches_arrays():
    grid = HashGridConfig(levels=2, table_size=64, features_per_entry=1,
                          n_min=2, n_max=4)
    fcfg = FieldConfig(width=8, trunk_layers=3, geo_features=4, dir_bands=1)
    params = init_nerf_params(grid, fcfg, np.random.default_rng(0))
    total = sum(a.size for a in params.named_arrays().values())
    assert mt.nerf_param_count(params) == total
    assert total > 2 * 64  # includes the hash tables


# -- aggregate report ------------------------------------------------------------------

def test_metrics_report_save_formats(tmp_path):
    rep = mt.MetricsReport(per_view_psnr=[30.0, 32.0], per_view_ssim=[0.9, 0.95],
                           chamfer=0.001, retrieval_top1=1.0)
    assert rep.mean_psnr == pytest.approx(31.0)
    txt = tmp_path / "m.txt"
    rep.save(str(txt))
    content = txt.read_text()
    assert "mean_psnr=31.0000" in content
    assert "retrieval_top1=1.0000" in content

    import json
    js = tmp_path / "m.json"
    rep.save_json(str(js))
    doc = json.loads(js.read_text())
    assert doc["mean_psnr"] == pytest.approx(31.0)
    assert doc["chamfer"] == pytest.approx(0.001)
