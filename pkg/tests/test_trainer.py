import dataclasses
import logging
import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from meshfield.fields import AnalyticScene
from meshfield.geometry import ClosestPointIndex, icosphere
from meshfield.renderer import Camera, RenderConfig, frame_rays, render_frame, sphere_bounds
from meshfield.spectral import make_embedding
from meshfield.trainer import (
    CaptureDataset,
    EvalReport,
    Frame,
    LossWeights,
    NumericError,
    RaySet,
    Stat,
    TrainConfig,
    augment_view,
    build_model,
    color_loss,
    depth_loss,
    eikonal_loss,
    geometric_error,
    load_model,
    mesh_loss,
    objective,
    psnr,
    read_trace,
    ssim,
    train,
)


def tiny_model(data, kind="laplacian", **over):
    cfg = TrainConfig.profile("tiny", embedding_kind=kind, **over)
    return build_model(data.mesh, make_embedding(data.mesh, kind, cfg.embedding_k, cfg.seed), cfg), cfg


class Doubled:
    """S -> 2S wrapper for the eikonal check."""

    def __init__(self, scene):
        self.scene = scene

    def sdf(self, points, pose=None):
        return 2 * self.scene.sdf(points, pose)


class TestConfig:
    def test_weights_nonnegative(self):
        with pytest.raises(ValueError, match="gamma"):
            LossWeights(gamma=-1)

    def test_delta_schedule(self):
        w = LossWeights(delta=2.0, mesh_prior_cutoff=10_000)
        assert w.delta_at(9_999) == 2.0 and w.delta_at(10_000) == 0.0 and w.delta_at(50_000) == 0.0

    def test_cutoff_scales_with_iterations(self):
        assert TrainConfig().cutoff == 10_000
        assert TrainConfig(iterations=2000).cutoff == 222
        assert TrainConfig(iterations=2000, mesh_prior_cutoff=5).cutoff == 5

    def test_validation(self):
        with pytest.raises(ValueError, match="augment_p"):
            TrainConfig(augment_p=1.5)
        with pytest.raises(ValueError, match="iterations"):
            TrainConfig(iterations=0)
        with pytest.raises(ValueError, match="embedding kind"):
            TrainConfig(embedding_kind="fourier")
        with pytest.raises(ValueError, match="grad_clip"):
            TrainConfig(grad_clip=-1.0)
        with pytest.raises(ValueError, match="profile"):
            TrainConfig.profile("huge")

    def test_from_strings_sets_every_field(self):
        fields = dataclasses.fields(TrainConfig)
        values = {}
        for f in fields:
            v = getattr(TrainConfig(), f.name)
            values[f.name] = "none" if v is None else str(v)
        assert TrainConfig.from_strings(values) == TrainConfig()
        cfg = TrainConfig.from_strings({"augment_p": "0.3", "iterations": "7", "embedding_kind": "random"})
        assert (cfg.augment_p, cfg.iterations, cfg.embedding_kind) == (0.3, 7, "random")
        with pytest.raises(ValueError, match="unknown training option"):
            TrainConfig.from_strings({"colour": "1"})
        with pytest.raises(ValueError, match="cannot parse"):
            TrainConfig.from_strings({"iterations": "many"})

    def test_full_profile_values(self):
        cfg = TrainConfig.profile("paper")
        assert (cfg.iterations, cfg.embedding_k, cfg.augment_p, cfg.bg_width, cfg.res_width) == (90_000, 256, 0.3, 256, 768)


class TestColorLoss:
    def test_identity_and_unit(self):
        a = np.random.default_rng(0).random((10, 3))
        assert float(color_loss(a, a)) == 0.0
        assert float(color_loss(np.zeros((5, 3)), np.ones((5, 3)))) == 1.0

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((50, 3)), rng.random((50, 3))
        perm = rng.permutation(50)
        assert float(color_loss(a, b)) == pytest.approx(float(color_loss(a[perm], b[perm])), abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            color_loss(np.zeros((4, 3)), np.zeros((5, 3)))


@pytest.fixture(scope="module")
def centre_camera():
    return Camera.look_at([0, 0, 0], [0.3, 1, 0.2], width=24, height=24, fov_deg=80)


class TestDepthLoss:
    def test_self_consistent_rendered_depth(self, centre_camera):
        scene = AnalyticScene(0.9, sharpness=2000.0)
        frame = render_frame(scene, centre_camera, RenderConfig(n_samples=128, normals=False))
        o, d = frame_rays(centre_camera)
        assert float(depth_loss(scene, o, d, frame.depth.ravel())) < 1e-3

    def test_offset_depth(self, centre_camera):
        scene = AnalyticScene(0.9)
        o, d = frame_rays(centre_camera)
        depth = np.full(len(o), 0.9 + 0.1)  # rays from the centre are radial
        assert float(depth_loss(scene, o, d, depth)) == pytest.approx(0.1, abs=1e-12)

    def test_invalid_skipped_and_empty(self, centre_camera, caplog):
        scene = AnalyticScene(0.9)
        o, d = frame_rays(centre_camera)
        depth = np.full(len(o), 0.9)
        depth[::2] = 0.0
        assert float(depth_loss(scene, o, d, depth)) < 1e-12
        with caplog.at_level(logging.WARNING):
            assert float(depth_loss(scene, o, d, np.zeros(len(o)))) == 0.0
        assert "no valid depth" in caplog.text


class TestEikonal:
    def test_analytic_sphere(self):
        assert eikonal_loss(AnalyticScene(1.0), 2000, seed=0).item() < 1e-6

    def test_doubled_field(self):
        assert float(eikonal_loss(Doubled(AnalyticScene(1.0)), 2000, seed=0)) == pytest.approx(1.0, abs=1e-3)

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            eikonal_loss(AnalyticScene(), 0, seed=0)

    def test_parameter_differentiable(self, tiny_data):
        model, _ = tiny_model(tiny_data)
        eikonal_loss(model, 16, seed=1).backward()
        g = model.background.layers[0].weight.grad
        assert g is not None and torch.isfinite(g).all() and g.abs().sum() > 0


class TestMeshLoss:
    def test_zero_residual_is_exactly_zero(self, tiny_data):
        model, _ = tiny_model(tiny_data)
        assert mesh_loss(model, 64, seed=3).item() == 0.0

    def test_constant_residual(self, tiny_data):
        model, _ = tiny_model(tiny_data)
        with torch.no_grad():
            model.residual.layers[-1].bias.fill_(-0.037)
        assert mesh_loss(model, 64, seed=3).item() == pytest.approx(0.037, abs=1e-15)


class TestAugment:
    def test_p0_is_identity(self):
        v = np.random.default_rng(0).normal(size=(100, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        assert np.array_equal(augment_view(v, 0.0, seed=1), v)

    def test_p1_uniform(self):
        v = np.tile([0.0, 0.0, 1.0], (100_000, 1))
        out = augment_view(v, 1.0, seed=2)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)
        assert np.abs(out.mean(axis=0)).max() < 0.02

    def test_replacement_frequency(self):
        v = np.tile([0.0, 1.0, 0.0], (100_000, 1))
        out = augment_view(v, 0.3, seed=3)
        freq = np.mean(np.any(out != v, axis=1))
        assert abs(freq - 0.3) < 0.01


class TestObjective:
    def test_terms_sum_to_total(self, tiny_data):
        model, cfg = tiny_model(tiny_data)
        total, terms = objective(model, RaySet.from_dataset(tiny_data), cfg, 0)
        assert total.item() == pytest.approx(sum(v.item() for v in terms.values()), abs=1e-15)
        assert terms["mesh"].item() == 0.0  # zero-initialised residual

    def test_deterministic_in_iteration(self, tiny_data):
        model, cfg = tiny_model(tiny_data)
        rays = RaySet.from_dataset(tiny_data)
        a, _ = objective(model, rays, cfg, 5)
        b, _ = objective(model, rays, cfg, 5)
        c, _ = objective(model, rays, cfg, 6)
        assert a.item() == b.item() and a.item() != c.item()

    def test_gradient_matches_finite_differences(self, tiny_data):
        model, cfg = tiny_model(tiny_data, augment_p=0.3)
        rays = RaySet.from_dataset(tiny_data)
        torch.manual_seed(0)
        with torch.no_grad():  # move away from the symmetric initial state
            for p in model.parameters():
                p.add_(0.05 * torch.randn_like(p))
        total, _ = objective(model, rays, cfg, 3)
        model.zero_grad()
        total.backward()
        named = [(n, p) for n, p in model.named_parameters()]
        rng = np.random.default_rng(7)
        h = 1e-4  # smaller steps drown gradients near 1e-6 in roundoff of the O(1) loss
        for _ in range(20):
            name, p = named[rng.integers(len(named))]
            i = int(rng.integers(p.numel()))
            analytic = float(p.grad.reshape(-1)[i])
            with torch.no_grad():
                flat = p.view(-1)
                old = float(flat[i])
                flat[i] = old + h
                up = objective(model, rays, cfg, 3)[0].item()
                flat[i] = old - h
                down = objective(model, rays, cfg, 3)[0].item()
                flat[i] = old
            fd = (up - down) / (2 * h)
            assert abs(analytic - fd) <= 1e-3 * max(abs(analytic), abs(fd), 1e-6), (name, i, analytic, fd)


class TestTrain:
    def test_gradient_clipped_before_step(self, tiny_data, tmp_path):
        model, cfg = tiny_model(tiny_data, iterations=1, grad_clip=1e-6)
        train(model, tiny_data, cfg, tmp_path)
        _, _, adam = load_model(tmp_path / "model.ckpt")
        # after one step v = (1 - beta2) g^2, so its sum is the squared clipped norm scaled
        sq = sum(float(v.sum()) for v in adam.v.values()) / (1 - adam.beta2)
        assert math.sqrt(sq) == pytest.approx(1e-6, rel=1e-9)

    def test_trace_and_schedule(self, tiny_data, tmp_path):
        model, cfg = tiny_model(tiny_data, iterations=12, mesh_prior_cutoff=5, checkpoint_every=4)
        train(model, tiny_data, cfg, tmp_path)
        rows = read_trace(tmp_path / "trace.csv")
        assert [r["iteration"] for r in rows] == list(range(12))
        for r in rows:
            assert r["delta_active"] == int(r["iteration"] < 5)
            if r["iteration"] >= 5:
                assert r["mesh"] == 0.0
            assert r["total"] == pytest.approx(r["color"] + r["depth"] + r["eikonal"] + r["mesh"], rel=1e-12)
        assert sorted(p.name for p in tmp_path.glob("checkpoint_*")) == [
            "checkpoint_000004.ckpt", "checkpoint_000008.ckpt", "checkpoint_000012.ckpt"]

    def test_resume_reproduces_next_loss(self, tiny_data, tmp_path):
        model, cfg = tiny_model(tiny_data, iterations=8, checkpoint_every=4)
        full = train(model, tiny_data, cfg, tmp_path / "full").trace
        resumed_model, _ = tiny_model(tiny_data, iterations=8, checkpoint_every=4)
        rest = train(resumed_model, tiny_data, cfg, tmp_path / "rest", resume=tmp_path / "full" / "checkpoint_000004.ckpt").trace
        assert rest[0]["iteration"] == 4
        assert [r["total"] for r in rest] == [r["total"] for r in full[4:]]

    def test_checkpoint_is_standalone(self, tiny_data, tmp_path):
        model, cfg = tiny_model(tiny_data, "learnable", iterations=3)
        train(model, tiny_data, cfg, tmp_path)
        back, meta, adam = load_model(tmp_path / "model.ckpt")
        assert meta["iteration"] == 3 and adam.step == 3 and back.embedding_kind == "learnable"
        assert back.codes.requires_grad
        pts = np.random.default_rng(0).uniform(-0.5, 0.5, (50, 3))
        with torch.no_grad():
            assert torch.equal(back.sdf(pts), model.sdf(pts))

    def test_mesh_prior_pins_residual(self, tiny_data):
        model, cfg = tiny_model(tiny_data, iterations=200, alpha=0.0, beta=0.0, gamma=0.0, delta=100.0, lr=2e-3,
                                mesh_prior_cutoff=1000)
        with torch.no_grad():
            model.residual.layers[-1].weight.normal_(0.0, 0.1)
            model.residual.layers[-1].bias.fill_(0.05)
        before = mesh_loss(model, 256, seed=99).item()
        train(model, tiny_data, cfg)
        after = mesh_loss(model, 256, seed=99).item()
        assert before > 0.03 and after < 0.01

    def test_nonfinite_loss_aborts_with_dump(self, tiny_data, tmp_path):
        model, cfg = tiny_model(tiny_data, iterations=3)
        with torch.no_grad():
            model.log_sharpness.fill_(math.nan)
        with pytest.raises(NumericError, match="iteration 0"):
            train(model, tiny_data, cfg, tmp_path)
        dump = np.load(tmp_path / "nonfinite_0.npz")
        assert dump["origins"].shape == (cfg.rays_per_batch, 3)

    def test_ablation_parity(self, tiny_data):
        """Only the embedding source differs: equal codes give equal iteration-0 losses."""
        rays = RaySet.from_dataset(tiny_data)
        X = make_embedding(tiny_data.mesh, "laplacian", 8).X
        losses = []
        for kind in ("laplacian", "random", "learnable"):
            emb = make_embedding(tiny_data.mesh, kind, 8)
            emb.X = X.copy()
            cfg = TrainConfig.profile("tiny", embedding_kind=kind)
            losses.append(objective(build_model(tiny_data.mesh, emb, cfg), rays, cfg, 0)[0].item())
        assert losses[0] == losses[1] == losses[2]


class TestDataset:
    def test_rejects_bad_frames(self, tiny_data):
        f = tiny_data.frames[0]
        with pytest.raises(ValueError, match="no frames"):
            CaptureDataset(tiny_data.mesh, [])
        with pytest.raises(ValueError, match="image size"):
            CaptureDataset(tiny_data.mesh, [dataclasses.replace(f, depth=f.depth[:-1])])
        with pytest.raises(ValueError, match="nonnegative"):
            CaptureDataset(tiny_data.mesh, [dataclasses.replace(f, depth=-f.depth)])
        bad = f.pose.copy()
        bad[0, 0] *= 1.1
        with pytest.raises(ValueError, match="orthonormal"):
            CaptureDataset(tiny_data.mesh, [dataclasses.replace(f, pose=bad)])


class TestMetrics:
    def test_psnr_values(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(img, img) == 99.0
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0)
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(10 * math.log10(4))
        with pytest.raises(ValueError, match="shapes"):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_ssim_values(self):
        a = np.random.default_rng(1).random((32, 32))
        assert ssim(a, a) == pytest.approx(1.0)
        assert ssim(a, 1 - a) < 1.0
        c = np.full((16, 16), 0.5)
        assert ssim(c, c) == pytest.approx(1.0)
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    @pytest.mark.parametrize("seed", range(5))
    def test_ssim_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((40, 36, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        ref = structural_similarity(
            a.mean(axis=2), b.mean(axis=2), data_range=1.0, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False,
        )
        assert ssim(a, b) == pytest.approx(ref, abs=1e-10)

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(2)
        x, y = np.meshgrid(np.linspace(0, 1, 48), np.linspace(0, 1, 48))
        img = 0.5 + 0.4 * np.sin(6 * x) * np.cos(4 * y)
        noise = rng.normal(size=img.shape)
        ps = [psnr(img, np.clip(img + s * noise, 0, 1)) for s in (0.01, 0.03, 0.1, 0.3)]
        ss = [ssim(img, np.clip(img + s * noise, 0, 1)) for s in (0.01, 0.03, 0.1, 0.3)]
        assert all(a > b for a, b in zip(ps, ps[1:])) and all(a > b for a, b in zip(ss, ss[1:]))

    def test_geometric_error(self, centre_camera, caplog):
        mesh = icosphere(2, radius=0.3)
        scene = AnalyticScene(0.9, mesh, sharpness=2000.0)
        o, d = frame_rays(centre_camera)
        _, far, _ = sphere_bounds(o, d, 0.9)
        t, _, _ = ClosestPointIndex(mesh).raycast(o, d)
        truth = np.where(np.isfinite(t), t, far).reshape(24, 24)
        frame = Frame("f", centre_camera, np.zeros((24, 24, 3)), truth, np.eye(4))
        assert geometric_error(scene, [frame]) < 1e-3
        # same pixels, same formula
        assert geometric_error(scene, [frame]) == pytest.approx(float(depth_loss(scene, o, d, truth.ravel())), abs=1e-15)
        empty = Frame("e", centre_camera, np.zeros((24, 24, 3)), np.zeros((24, 24)), np.eye(4))
        with caplog.at_level(logging.WARNING):
            assert geometric_error(scene, [empty]) == 0.0
        assert "no valid depth" in caplog.text

    def test_report_round_trip(self):
        rep = EvalReport(Stat(25.0, 1.0), Stat(0.8, 0.05), Stat(0.03, 0.01), ["a"])
        d = rep.to_dict()
        assert set(d) >= {"PSNR", "SSIM", "Geom. error"}
        assert EvalReport.from_dict(d) == rep
        with pytest.raises(ValueError):
            EvalReport(Stat(25.0, 1.0), Stat(1.5, 0.0), Stat(0.0, 0.0))
