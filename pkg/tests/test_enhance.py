import numpy as np
import pytest
import torch

from darkadapt.data import Domain, Image
from darkadapt.enhance import (
    CurveEstimator,
    CurveEstimatorConfig,
    EnhancerTrainConfig,
    apply_curves,
    curve_enhance,
    curve_step,
    enhance,
    load_enhancer,
    save_enhancer,
    train_enhancer,
)
from darkadapt.exceptions import ContractViolation, DomainMisuseError, StateError


class TestCurveStep:
    def test_identity_at_zero_map(self, rng):
        x = rng.uniform(0, 1, size=(8, 8, 3))
        assert np.array_equal(curve_step(x, np.zeros_like(x)), x)

    def test_midpoint_full_map(self):
        out = curve_step(np.full((2, 2, 3), 0.5), np.ones((2, 2, 3)))
        assert np.allclose(out, 0.75)

    def test_fixed_points(self, rng):
        a = rng.uniform(-1, 1, size=(4, 4, 3))
        assert np.array_equal(curve_step(np.zeros((4, 4, 3)), a), np.zeros((4, 4, 3)))
        assert np.allclose(curve_step(np.ones((4, 4, 3)), a), np.ones((4, 4, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation, match="shape"):
            curve_step(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractViolation):
            curve_step(np.full((2, 2, 3), 1.5), np.zeros((2, 2, 3)))
        with pytest.raises(ContractViolation):
            curve_step(np.full((2, 2, 3), 0.5), np.full((2, 2, 3), 2.0))

    def test_range_preserved_randomized(self, rng):
        for _ in range(200):
            x = rng.uniform(0, 1, size=(5, 5, 3))
            a = rng.uniform(-1, 1, size=(5, 5, 3))
            out = curve_step(x, a)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_monotone_in_x(self, rng):
        for _ in range(100):
            a = rng.uniform(-1, 1, size=(6, 6, 3))
            xa = rng.uniform(0, 1, size=(6, 6, 3))
            xb = np.clip(xa + rng.uniform(0, 0.3, size=xa.shape), 0, 1)
            assert np.all(curve_step(xb, a) - curve_step(xa, a) >= -1e-12)


class TestCurveEnhance:
    def test_zero_maps(self, rng):
        x = rng.uniform(0, 1, size=(4, 4, 3))
        maps = [np.zeros_like(x)] * 8
        assert np.array_equal(curve_enhance(x, maps), x)

    def test_two_full_steps(self):
        x = np.full((1, 1, 3), 0.5)
        out = curve_enhance(x, [np.ones_like(x), np.ones_like(x)])
        # hand iteration: 0.75 then 0.75 + 0.75*0.25
        assert np.allclose(out, 0.9375)

    def test_empty_sequence(self):
        with pytest.raises(ContractViolation):
            curve_enhance(np.zeros((2, 2, 3)), [])

    def test_matches_torch_twin(self, rng):
        x = rng.uniform(0, 1, size=(6, 7, 3)).astype(np.float64)
        maps = [rng.uniform(-1, 1, size=x.shape) for _ in range(4)]
        np_out = curve_enhance(x, maps)
        xt = torch.from_numpy(x.transpose(2, 0, 1))[None]
        mt = torch.cat([torch.from_numpy(m.transpose(2, 0, 1))[None] for m in maps], dim=1)
        t_out = apply_curves(xt, mt)[0].numpy().transpose(1, 2, 0)
        assert np.allclose(np_out, t_out, atol=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        # autograd of the composed mapping vs central differences on A
        x = rng.uniform(0.05, 0.95, size=(3, 3, 3))
        maps = np.stack([rng.uniform(-0.9, 0.9, size=(3, 3, 3)) for _ in range(3)])
        xt = torch.from_numpy(x.transpose(2, 0, 1))[None]
        mt = torch.from_numpy(
            np.concatenate([m.transpose(2, 0, 1) for m in maps])[None]
        ).requires_grad_(True)
        out = apply_curves(xt, mt).sum()
        out.backward()
        grad = mt.grad.numpy()[0]
        eps = 1e-5
        for _ in range(12):
            i = int(rng.integers(maps.shape[0]))
            c = int(rng.integers(3))
            r = int(rng.integers(3))
            s = int(rng.integers(3))
            mp = maps.copy()
            mp[i, r, s, c] += eps
            mm = maps.copy()
            mm[i, r, s, c] -= eps
            fd = (curve_enhance(x, list(mp)).sum() - curve_enhance(x, list(mm)).sum()) / (2 * eps)
            an = grad[3 * i + c, r, s]
            assert np.isclose(an, fd, rtol=1e-4, atol=1e-8)


class TestEstimator:
    def test_variant_configs(self):
        weak = CurveEstimatorConfig.weak()
        strong = CurveEstimatorConfig.strong()
        assert strong.iterations == 2 * weak.iterations
        assert strong.width == 2 * weak.width

    def test_bad_config(self):
        with pytest.raises(ContractViolation):
            CurveEstimatorConfig(iterations=0)
        with pytest.raises(ContractViolation):
            CurveEstimatorConfig.variant("medium")

    def test_zeroed_output_layer_is_identity(self, rng):
        est = CurveEstimator(CurveEstimatorConfig(iterations=4, width=8))
        with torch.no_grad():
            est.conv7.weight.zero_()
            est.conv7.bias.zero_()
        img = Image(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32), Domain.L, "x")
        out = enhance(est, img, allow_untrained=True)
        assert out.domain is Domain.EL
        assert np.allclose(out.pixels, img.pixels, atol=1e-7)

    def test_enhance_deterministic(self, rng):
        est = CurveEstimator(CurveEstimatorConfig(iterations=2, width=4))
        img = Image(rng.uniform(0, 1, size=(12, 12, 3)).astype(np.float32), Domain.L, "x")
        a = enhance(est, img, allow_untrained=True)
        b = enhance(est, img, allow_untrained=True)
        assert np.array_equal(a.pixels, b.pixels)

    def test_domain_misuse(self, rng):
        est = CurveEstimator(CurveEstimatorConfig(iterations=2, width=4))
        px = rng.uniform(0, 1, size=(12, 12, 3)).astype(np.float32)
        for domain in (Domain.EL, Domain.DH, Domain.H):
            with pytest.raises(DomainMisuseError):
                enhance(est, Image(px, domain, "x"), allow_untrained=True)

    def test_untrained_guard(self, rng):
        est = CurveEstimator(CurveEstimatorConfig(iterations=2, width=4))
        img = Image(rng.uniform(0, 1, size=(12, 12, 3)).astype(np.float32), Domain.L, "x")
        with pytest.raises(StateError):
            enhance(est, img)

    def test_brightens_when_maps_nonnegative(self, rng):
        for _ in range(20):
            x = rng.uniform(0, 1, size=(6, 6, 3))
            maps = [rng.uniform(0, 1, size=x.shape) for _ in range(4)]
            assert curve_enhance(x, maps).mean() >= x.mean() - 1e-12


class TestTrainEnhancer:
    def _toy_images(self, rng, n=16, level=0.3):
        out = []
        for i in range(n):
            px = np.clip(rng.normal(level, 0.03, size=(32, 32, 3)), 0, 1).astype(np.float32)
            out.append(Image(px, Domain.L, f"d{i}"))
        return out

    def test_zero_steps_keeps_init(self, rng):
        images = self._toy_images(rng, n=2)
        cfg = CurveEstimatorConfig(iterations=2, width=4)
        est, history = train_enhancer(cfg, images, EnhancerTrainConfig(steps=0, seed=3))
        fresh = CurveEstimator(cfg)
        torch.manual_seed(0)
        assert history == []
        assert not est.trained
        # weights must equal a same-seeded fresh initialization
        est2, _ = train_enhancer(cfg, images, EnhancerTrainConfig(steps=0, seed=3))
        for a, b in zip(est.state_dict().values(), est2.state_dict().values()):
            assert torch.equal(a, b)
        del fresh

    def test_requires_images(self):
        with pytest.raises(ContractViolation):
            train_enhancer(CurveEstimatorConfig(), [])

    def test_exposure_trend_toward_target(self, rng):
        images = self._toy_images(rng, n=16, level=0.3)
        cfg = CurveEstimatorConfig(iterations=4, width=8)
        tc = EnhancerTrainConfig(steps=60, batch_size=4, crop=32, lr=5e-3, seed=0, exposure_target=0.6)
        est, history = train_enhancer(cfg, images, tc)
        est.trained = True
        means = []
        for img in images[:8]:
            means.append(enhance(est, img).pixels.mean())
        before = float(np.mean([img.pixels.mean() for img in images[:8]]))
        after = float(np.mean(means))
        assert after > before
        assert abs(after - 0.6) < abs(before - 0.6)

    def test_seeded_history_identical(self, rng):
        images = self._toy_images(rng, n=4)
        cfg = CurveEstimatorConfig(iterations=2, width=4)
        tc = EnhancerTrainConfig(steps=5, batch_size=2, crop=16, seed=11)
        _, h1 = train_enhancer(cfg, images, tc)
        _, h2 = train_enhancer(cfg, images, tc)
        assert h1 == h2

    def test_checkpoint_round_trip(self, tmp_path, rng):
        images = self._toy_images(rng, n=2)
        cfg = CurveEstimatorConfig(iterations=2, width=4)
        est, _ = train_enhancer(cfg, images, EnhancerTrainConfig(steps=2, batch_size=2, crop=16))
        save_enhancer(est, tmp_path / "e.pt")
        back = load_enhancer(tmp_path / "e.pt")
        assert back.trained
        assert back.config == est.config
        for a, b in zip(est.state_dict().values(), back.state_dict().values()):
            assert torch.equal(a, b)
