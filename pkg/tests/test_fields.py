import numpy as np
import pytest
import torch

from deform4d import datagen, fields, geometry
from deform4d.fields import (
    FieldsError,
    FieldTrainConfig,
    MlpWeights,
    clamped_sdf_loss,
    flow_l1_loss,
    init_latents,
    init_mlp_weights,
    loss_window_means,
    motion_forward,
    motion_spec,
    shape_forward,
    shape_spec,
    train_motion_space,
    train_shape_space,
)

DT = torch.float64


def windows_non_increasing(losses, window=10, rel_slack=0.03, burn_in=1):
    """Means of disjoint 10-epoch windows must not increase (small slack for
    Adam plateau oscillation, first window skipped as optimizer transient)."""
    wm = loss_window_means(losses, window)[burn_in:]
    decreasing = all(wm[i + 1] <= wm[i] * (1 + rel_slack) for i in range(len(wm) - 1))
    return decreasing and wm[-1] < 0.5 * wm[0]


class TestForward:
    def test_zero_weights_zero_output(self):
        spec = shape_spec(width=16, n_layers=3, d_latent=4)
        w = init_mlp_weights(spec, 0)
        zw = MlpWeights(
            spec,
            [torch.zeros_like(t) for t in w.weights],
            [torch.zeros_like(t) for t in w.biases],
        )
        out = shape_forward(zw, torch.randn(4, dtype=DT), np.random.randn(10, 3))
        assert float(out.abs().max()) == 0.0

    def test_zero_weights_zero_flow(self):
        spec = motion_spec(width=16, n_layers=3, d_shape=4, d_motion=4, n_freqs=2)
        w = init_mlp_weights(spec, 0)
        zw = MlpWeights(
            spec,
            [torch.zeros_like(t) for t in w.weights],
            [torch.zeros_like(t) for t in w.biases],
        )
        out = motion_forward(
            zw, torch.randn(4, dtype=DT), torch.randn(4, dtype=DT), np.random.randn(7, 3)
        )
        assert out.shape == (7, 3)
        assert float(out.abs().max()) == 0.0

    def test_latent_dim_mismatch(self):
        spec = shape_spec(width=16, n_layers=3, d_latent=4)
        w = init_mlp_weights(spec, 0)
        with pytest.raises(FieldsError):
            shape_forward(w, torch.randn(5, dtype=DT), np.random.randn(3, 3))

    def test_deterministic(self):
        spec = motion_spec(width=16, n_layers=3, d_shape=4, d_motion=4, n_freqs=2)
        w = init_mlp_weights(spec, 1)
        s, m = torch.randn(4, dtype=DT), torch.randn(4, dtype=DT)
        x = np.random.default_rng(0).normal(size=(20, 3))
        a = motion_forward(w, s, m, x)
        b = motion_forward(w, s, m, x)
        assert torch.equal(a, b)

    def test_paper_scale_defaults(self):
        spec = shape_spec(width=512, n_layers=8, d_latent=384)
        assert spec.layer_widths == [512] * 8
        assert spec.input_dim == 387
        assert spec.skip_layer == 4
        mspec = motion_spec(width=1024, n_layers=8, d_shape=384, d_motion=384)
        assert mspec.layer_widths == [1024] * 8
        assert mspec.latent_dims == (384, 384)


class TestLosses:
    def test_clamp_basic(self):
        assert float(clamped_sdf_loss(torch.tensor([0.2]), torch.tensor([0.05]), 0.1)) == pytest.approx(0.05)

    def test_clamp_equal_zero(self):
        x = torch.randn(50, dtype=DT)
        assert float(clamped_sdf_loss(x, x, 0.1)) == 0.0

    def test_clamp_both_sides(self):
        assert float(clamped_sdf_loss(torch.tensor([-0.5]), torch.tensor([0.5]), 0.1)) == pytest.approx(0.2)

    def test_flow_l1_zero(self):
        x = torch.randn(10, 3, dtype=DT)
        assert float(flow_l1_loss(x, x)) == 0.0

    def test_flow_l1_componentwise_mean(self):
        pred = torch.tensor([[1.0, 2.0, 3.0]], dtype=DT)
        true = torch.tensor([[0.0, 2.0, 3.0]], dtype=DT)
        assert float(flow_l1_loss(pred, true)) == pytest.approx(1.0 / 3.0)

    def test_flow_l1_matches_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
        assert float(flow_l1_loss(torch.as_tensor(a), torch.as_tensor(b))) == pytest.approx(
            np.abs(a - b).mean(), abs=1e-12
        )

    def test_flow_shape_mismatch(self):
        with pytest.raises(FieldsError):
            flow_l1_loss(torch.zeros(3, 3), torch.zeros(4, 3))


class TestLatents:
    def test_init_norm_statistics(self):
        table = init_latents([f"i{k}" for k in range(32)], 384, seed=0, std=0.01)
        norms = table.codes.norm(dim=1)
        expected = 0.01 * np.sqrt(384)
        assert float((norms - expected).abs().max()) < 0.2 * expected

    def test_hash_changes_with_codes(self):
        t = init_latents(["a", "b"], 8, seed=0)
        h = t.hash()
        t2 = fields.LatentTable(["a", "b"], t.codes + 1e-9)
        assert t2.hash() != h


def _loss_on(spec, weights, latent, pts, d_true, delta):
    x_in = torch.cat(
        [fields.encode_points(pts, spec), latent.expand(len(pts), -1)], dim=-1
    )
    pred = fields.mlp_forward(spec, weights.weights, weights.biases, x_in).squeeze(-1)
    return clamped_sdf_loss(pred, d_true, delta)


class TestGradientCheck:
    def test_autograd_matches_central_differences(self):
        # tiny MLP: 2 body layers, width 8
        torch.manual_seed(0)
        spec = shape_spec(width=8, n_layers=2, d_latent=4)
        weights = init_mlp_weights(spec, 2)
        latent = torch.randn(4, dtype=DT) * 0.1
        rng = np.random.default_rng(5)
        delta, h = 0.1, 1e-4
        pts = torch.as_tensor(rng.uniform(-1, 1, (200, 3)))
        d_true = torch.as_tensor(rng.uniform(-0.3, 0.3, 200))
        with torch.no_grad():
            pred = shape_forward(weights, latent, pts)
        keep = (abs(pred.abs() - delta) > 2 * h) & (abs(d_true.abs() - delta) > 2 * h)
        pts, d_true = pts[keep][:100], d_true[keep][:100]

        params = list(weights.parameters()) + [latent]
        for p in params:
            p.requires_grad_(True)
        loss = _loss_on(spec, weights, latent, pts, d_true, delta)
        grads = torch.autograd.grad(loss, params)

        checked = 0
        for probe in range(100):
            pi = int(rng.integers(len(params)))
            flat = params[pi].detach().reshape(-1)
            ei = int(rng.integers(len(flat)))
            base = float(flat[ei])
            with torch.no_grad():
                flat[ei] = base + h
                up = float(_loss_on(spec, weights, latent, pts, d_true, delta))
                flat[ei] = base - h
                dn = float(_loss_on(spec, weights, latent, pts, d_true, delta))
                flat[ei] = base
            fd = (up - dn) / (2 * h)
            an = float(grads[pi].reshape(-1)[ei])
            scale = max(abs(fd), abs(an))
            if scale < 1e-10:
                continue  # dead ReLU path: both gradients vanish
            assert abs(fd - an) / scale < 1e-3, f"probe {probe}: fd={fd} an={an}"
            checked += 1
        assert checked >= 50


class TestShapeTraining:
    def test_overfit_single_identity(self, sphere_dataset):
        spec = shape_spec(width=32, n_layers=4, d_latent=8)
        cfg = FieldTrainConfig(
            epochs=500, point_batch=400, lr_weights=1e-3, lr_latent=1e-3, seed=0
        )
        w, codes = train_shape_space(sphere_dataset, spec, cfg)
        assert w.losses[-1] < 0.1 * w.losses[0]

    def test_loss_windows_non_increasing_full_batch(self, sphere_dataset):
        spec = shape_spec(width=32, n_layers=4, d_latent=8)
        cfg = FieldTrainConfig(
            epochs=300, point_batch=4000, lr_weights=1e-3, lr_latent=1e-3,
            lr_final_factor=0.05, seed=0,
        )
        w, _ = train_shape_space(sphere_dataset, spec, cfg)
        assert windows_non_increasing(w.losses)

    def test_overfit_sphere_origin_oracle(self):
        # radially balanced analytic samples pin the deep interior
        rng = np.random.default_rng(0)
        n = 3000
        r = rng.uniform(0, 1.2, n)
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = torch.as_tensor(v * r[:, None])
        d = torch.as_tensor(np.linalg.norm(pts.numpy(), axis=1) - 0.5)
        spec = shape_spec(width=48, n_layers=4, d_latent=8)
        weights = init_mlp_weights(spec, 0)
        latents = init_latents(["a"], 8, 1)
        for p in weights.parameters():
            p.requires_grad_(True)
        latents.codes.requires_grad_(True)
        opt = torch.optim.Adam(
            [
                {"params": weights.parameters(), "lr": 2e-3},
                {"params": [latents.codes], "lr": 1e-3},
            ]
        )
        for _ in range(900):
            x_in = torch.cat([pts, latents.codes[0].expand(len(pts), -1)], -1)
            pred = fields.mlp_forward(spec, weights.weights, weights.biases, x_in).squeeze(-1)
            loss = (pred - d).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        d0 = shape_forward(weights, latents.codes[0], np.zeros((1, 3))).detach()
        assert abs(float(d0) + 0.5) < 0.02

    def test_identity_separation(self, tmp_path):
        specs = [
            datagen.SyntheticSpec(
                "sph", "sph", "sphere", {"radius": 0.5, "subdivisions": 2},
                "translate", 0.05, 2,
            ),
            datagen.SyntheticSpec(
                "cube", "cube", "box", {"half_extents": (0.45, 0.45, 0.45), "segments": 4},
                "translate", 0.05, 2,
            ),
        ]
        ds = datagen.generate_dataset(specs, tmp_path)
        datagen.prepare_training_samples(
            ds, datagen.PrepConfig(n_uniform=400, n_near=1000, n_corr=200, seed=0)
        )
        spec = shape_spec(width=32, n_layers=4, d_latent=8)
        cfg = FieldTrainConfig(epochs=400, point_batch=512, lr_weights=1e-3, lr_latent=1e-3, seed=0)
        w, codes = train_shape_space(ds, spec, cfg)
        from deform4d.eval import fields_shape_mesh, mesh_points

        gt = {sid: mesh_points(ds.canonical_mesh(sid), 1024, 3) for sid in ("sph", "cube")}
        for sid, other in (("sph", "cube"), ("cube", "sph")):
            mesh = fields_shape_mesh(w, codes.code(sid), 40)
            pts = mesh_points(mesh, 1024, 4)
            d_own = geometry.chamfer_distance(pts, gt[sid])
            d_other = geometry.chamfer_distance(pts, gt[other])
            assert d_own < d_other

    def test_nan_loss_aborts_with_diagnostic(self):
        # the clamped loss is bounded, so divergence means corrupt inputs
        class PoisonedDataset:
            sequence_ids = ["bad"]

            def samples(self, sid):
                pts = np.random.default_rng(0).uniform(-1, 1, (100, 3))
                dist = np.full(100, np.nan)
                return {"sdf": geometry.SdfSampleSet(pts, dist, np.zeros(100, dtype=np.int64))}

        spec = shape_spec(width=16, n_layers=3, d_latent=4)
        cfg = FieldTrainConfig(epochs=3, point_batch=64, seed=0)
        with pytest.raises(fields.TrainingDiverged, match="train_shape_space"):
            train_shape_space(PoisonedDataset(), spec, cfg)


class TestMotionTraining:
    def test_one_motion_code_per_later_frame(self, sphere_dataset):
        sspec = shape_spec(width=24, n_layers=3, d_latent=8)
        sw, scodes = train_shape_space(
            sphere_dataset, sspec, FieldTrainConfig(epochs=40, point_batch=256, seed=0)
        )
        mspec = motion_spec(width=24, n_layers=3, d_shape=8, d_motion=8, n_freqs=2)
        _, mcodes = train_motion_space(
            sphere_dataset, sw, scodes, mspec, FieldTrainConfig(epochs=20, seed=0)
        )
        # 4-frame sequence -> 3 motion codes (frame 0 is the canonical shape)
        assert sorted(mcodes.ids) == ["sph_tr:1", "sph_tr:2", "sph_tr:3"]

    def test_shape_codes_untouched(self, sphere_dataset):
        sspec = shape_spec(width=24, n_layers=3, d_latent=8)
        scfg = FieldTrainConfig(epochs=50, point_batch=256, seed=0)
        sw, scodes = train_shape_space(sphere_dataset, sspec, scfg)
        before_codes = scodes.hash()
        before_weights = sw.hash()
        mspec = motion_spec(width=24, n_layers=3, d_shape=8, d_motion=8, n_freqs=2)
        train_motion_space(sphere_dataset, sw, scodes, mspec, FieldTrainConfig(epochs=30, seed=0))
        assert scodes.hash() == before_codes
        assert sw.hash() == before_weights

    def test_overfit_rigid_translation(self, tmp_path):
        specs = [
            datagen.SyntheticSpec(
                "tr", "sph", "sphere", {"radius": 0.5, "subdivisions": 2},
                "translate", 0.1, 2,
            )
        ]
        ds = datagen.generate_dataset(specs, tmp_path)
        datagen.prepare_training_samples(
            ds, datagen.PrepConfig(n_uniform=300, n_near=700, n_corr=800, seed=0)
        )
        sspec = shape_spec(width=24, n_layers=3, d_latent=8)
        sw, scodes = train_shape_space(
            ds, sspec, FieldTrainConfig(epochs=150, point_batch=400, seed=0)
        )
        mspec = motion_spec(width=48, n_layers=4, d_shape=8, d_motion=8, n_freqs=0)
        mw, mcodes = train_motion_space(
            ds, sw, scodes, mspec,
            FieldTrainConfig(
                epochs=900, point_batch=800, lr_weights=1.5e-3, lr_latent=1e-3,
                lr_final_factor=0.02, seed=0,
            ),
        )
        cache = ds.samples("tr")
        pts = cache["corr"].canonical_positions[:500]
        flow = motion_forward(mw, scodes.code("tr"), mcodes.code("tr:1"), pts).detach()
        target = torch.tensor([0.1, 0.0, 0.0], dtype=DT)
        assert float((flow - target).abs().max()) < 1e-3

    def test_zero_motion_convergence(self, tmp_path):
        specs = [
            datagen.SyntheticSpec(
                "still", "sph", "sphere", {"radius": 0.5, "subdivisions": 2},
                "translate", 0.0, 3,
            )
        ]
        ds = datagen.generate_dataset(specs, tmp_path)
        datagen.prepare_training_samples(
            ds, datagen.PrepConfig(n_uniform=200, n_near=400, n_corr=400, seed=0)
        )
        sspec = shape_spec(width=24, n_layers=3, d_latent=8)
        sw, scodes = train_shape_space(ds, sspec, FieldTrainConfig(epochs=50, seed=0))
        mspec = motion_spec(width=48, n_layers=4, d_shape=8, d_motion=8, n_freqs=0)
        mw, mcodes = train_motion_space(
            ds, sw, scodes, mspec,
            FieldTrainConfig(
                epochs=600, point_batch=800, lr_weights=1.5e-3, lr_final_factor=0.02, seed=0
            ),
        )
        cache = ds.samples("still")
        pts = cache["corr"].canonical_positions[:300]
        flow = motion_forward(mw, scodes.code("still"), mcodes.code("still:1"), pts)
        assert float(flow.norm(dim=1).max()) < 1e-3
