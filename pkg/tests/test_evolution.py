import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nowcastlab.evolution import (
    EvolutionNet,
    IntensityResidual,
    MotionField,
    encoder_sizes,
    encoder_widths,
    evo_predict_fields,
    evolution_rollout,
    inject_features,
    warp_bilinear,
)
from nowcastlab.exceptions import ConfigurationError, InvalidInputError, ShapeError

from .gradcheck import check_gradients, projected


def shift_oracle(frame, u, v):
    """Integer backward warp with border clamping, by explicit indexing."""
    h, w = frame.shape
    out = np.empty_like(frame)
    for y in range(h):
        for x in range(w):
            sy = min(max(y - int(v[y, x]), 0), h - 1)
            sx = min(max(x - int(u[y, x]), 0), w - 1)
            out[y, x] = frame[sy, sx]
    return out


class TestWarp:
    def test_zero_motion_identity(self):
        frame = torch.rand(6, 7)
        z = torch.zeros(6, 7)
        assert torch.equal(warp_bilinear(frame, z, z), frame)

    def test_unit_shift_right(self):
        frame = torch.arange(20.0).reshape(4, 5)
        out = warp_bilinear(frame, torch.ones(4, 5), torch.zeros(4, 5))
        assert torch.equal(out[:, 1:], frame[:, :-1])
        assert torch.equal(out[:, 0], frame[:, 0])

    def test_half_pixel_ramp(self):
        frame = torch.tensor([[0.0, 1.0]])
        u = torch.tensor([[0.0, 0.5]])
        out = warp_bilinear(frame, u, torch.zeros(1, 2))
        assert out[0, 1].item() == pytest.approx(0.5, abs=1e-6)

    def test_fractional_hand_arithmetic(self):
        frame = torch.tensor([[1.0, 2.0, 4.0], [8.0, 16.0, 32.0], [64.0, 128.0, 256.0]], dtype=torch.float64)
        u = torch.full((3, 3), 0.25, dtype=torch.float64)
        v = torch.full((3, 3), 0.5, dtype=torch.float64)
        out = warp_bilinear(frame, u, v)
        # centre pixel samples (y, x) = (0.5, 0.75)
        top = 1.0 * 0.25 + 2.0 * 0.75
        bottom = 8.0 * 0.25 + 16.0 * 0.75
        assert out[1, 1].item() == pytest.approx(0.5 * top + 0.5 * bottom, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_integer_fields_match_oracle(self, seed):
        rng = np.random.default_rng(seed)
        frame = rng.random((8, 8)).astype(np.float32)
        u = rng.integers(-10, 11, (8, 8)).astype(np.float32)
        v = rng.integers(-10, 11, (8, 8)).astype(np.float32)
        out = warp_bilinear(torch.from_numpy(frame), torch.from_numpy(u), torch.from_numpy(v)).numpy()
        np.testing.assert_array_equal(out, shift_oracle(frame, u, v))

    def test_batched_broadcast(self):
        frame = torch.rand(3, 2, 5, 5)
        u = torch.ones(3, 2, 5, 5)
        out = warp_bilinear(frame, u, torch.zeros_like(u))
        assert out.shape == frame.shape
        assert torch.equal(out[..., 1:], frame[..., :-1])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            warp_bilinear(torch.rand(4, 4), torch.zeros(4, 5), torch.zeros(4, 5))

    def test_gradients(self):
        gen = torch.Generator().manual_seed(0)
        frame = torch.rand(5, 5, generator=gen, dtype=torch.float64)
        # keep sample points away from integer grid lines and the border
        u = (torch.rand(5, 5, generator=gen, dtype=torch.float64) * 0.6 + 0.2) * torch.sign(torch.randn(5, 5, generator=gen)).double()
        v = torch.rand(5, 5, generator=gen, dtype=torch.float64) * 0.6 + 0.2
        fn = projected(warp_bilinear, (5, 5))
        assert check_gradients(fn, [frame, u, v]) < 1e-3


def _fields(b=1, t=4, h=6, w=6, motion=0.0, residual=0.0, gamma=0.0):
    motion_field = MotionField(torch.full((b, t, h, w), motion), torch.full((b, t, h, w), motion))
    res = IntensityResidual(torch.full((b, t, h, w), residual), torch.full((t,), gamma))
    return motion_field, res


class TestRollout:
    def test_zero_fields_persist(self):
        last = torch.rand(2, 6, 6)
        m, r = _fields(b=2)
        out = evolution_rollout(last, m, r)
        assert out.shape == (2, 4, 6, 6)
        for t in range(4):
            assert torch.equal(out[:, t], last)

    def test_constant_residual_telescopes(self):
        last = torch.rand(1, 6, 6, dtype=torch.float64)
        m = MotionField(torch.zeros(1, 4, 6, 6, dtype=torch.float64), torch.zeros(1, 4, 6, 6, dtype=torch.float64))
        r = IntensityResidual(torch.full((1, 4, 6, 6), 0.3, dtype=torch.float64), torch.ones(4, dtype=torch.float64))
        out = evolution_rollout(last, m, r)
        for t in range(4):
            torch.testing.assert_close(out[:, t], last + (t + 1) * 0.3)

    def test_zero_motion_conserves_mass(self):
        last = torch.rand(1, 6, 6)
        m, r = _fields(residual=1.0, gamma=0.0)
        out = evolution_rollout(last, m, r)
        torch.testing.assert_close(out.sum(dim=(-1, -2)), last.sum().expand(1, 4))

    def test_causal(self):
        gen = torch.Generator().manual_seed(0)
        last = torch.rand(1, 6, 6, generator=gen)
        u = torch.randn(1, 4, 6, 6, generator=gen)
        v = torch.randn(1, 4, 6, 6, generator=gen)
        raw = torch.randn(1, 4, 6, 6, generator=gen)
        gamma = torch.ones(4)
        full = evolution_rollout(last, MotionField(u, v), IntensityResidual(raw, gamma))
        for k in range(1, 4):
            u2, v2, r2 = u.clone(), v.clone(), raw.clone()
            u2[:, k:] = 0
            v2[:, k:] = 0
            r2[:, k:] = 0
            cut = evolution_rollout(last, MotionField(u2, v2), IntensityResidual(r2, gamma))
            assert torch.equal(cut[:, :k], full[:, :k])

    def test_step_mismatch(self):
        m, _ = _fields(t=4)
        r = IntensityResidual(torch.zeros(1, 3, 6, 6), torch.zeros(3))
        with pytest.raises(InvalidInputError):
            evolution_rollout(torch.zeros(1, 6, 6), m, r)

    def test_gradients(self):
        gen = torch.Generator().manual_seed(1)
        dt = torch.float64
        last = torch.rand(1, 5, 5, generator=gen, dtype=dt)
        u = torch.rand(1, 2, 5, 5, generator=gen, dtype=dt) * 0.6 + 0.2
        v = torch.rand(1, 2, 5, 5, generator=gen, dtype=dt) * 0.6 + 0.2
        raw = torch.randn(1, 2, 5, 5, generator=gen, dtype=dt)
        gamma = torch.tensor([0.5, -0.7], dtype=dt)

        def run(last, u, v, raw, gamma):
            return evolution_rollout(last, MotionField(u, v), IntensityResidual(raw, gamma))

        fn = projected(run, (1, 2, 5, 5))
        assert check_gradients(fn, [last, u, v, raw, gamma]) < 1e-3


class TestInjection:
    @pytest.mark.parametrize("size,level,expected", [
        (112, "bottleneck", (7, 7)),
        (112, "first_up", (14, 14)),
        (115, "bottleneck", (7, 7)),
        (115, "first_up", (14, 14)),
        (64, "bottleneck", (4, 4)),
    ])
    def test_pooled_sizes(self, size, level, expected):
        out = inject_features(torch.rand(2, 4, size, size), level)
        assert out.shape == (2, 4) + expected

    def test_final_unchanged(self):
        x = torch.rand(1, 4, 115, 115)
        assert inject_features(x, "final") is x

    def test_explicit_size(self):
        assert inject_features(torch.rand(1, 4, 20, 20), "bottleneck", (3, 5)).shape == (1, 4, 3, 5)

    def test_unknown_level(self):
        with pytest.raises(ConfigurationError):
            inject_features(torch.rand(1, 4, 16, 16), "middle")

    def test_max_pooling(self):
        x = torch.zeros(1, 1, 16, 16)
        x[0, 0, 3, 5] = 7.0
        assert inject_features(x, "bottleneck").max().item() == 7.0


class TestEvolutionNet:
    def test_field_shapes(self):
        net = EvolutionNet()
        motion, residual = evo_predict_fields(net, torch.rand(1, 4, 64, 64))
        assert motion.u.shape == motion.v.shape == (1, 4, 64, 64)
        assert residual.raw.shape == (1, 4, 64, 64)
        assert residual.gamma.shape == (4,)

    def test_gamma_zero_kills_residual(self):
        net = EvolutionNet()
        _, residual = net.predict_fields(torch.rand(1, 4, 32, 32))
        assert torch.equal(residual.scaled, torch.zeros_like(residual.scaled))

    def test_untrained_rollout_is_pure_advection(self):
        net = EvolutionNet().eval()
        rain = torch.rand(1, 4, 32, 32)
        out = net(rain)
        expected = evolution_rollout(rain[:, -1], out.motion, IntensityResidual(out.residual.raw, torch.zeros(4)))
        assert torch.equal(out.frames, expected)

    def test_gamma_receives_gradient(self):
        net = EvolutionNet()
        net(torch.rand(2, 4, 32, 32)).frames.sum().backward()
        assert net.gamma.grad is not None and net.gamma.grad.abs().sum() > 0

    def test_encoder_widths(self):
        net = EvolutionNet()
        assert net.widths == [16, 32, 64, 128, 128]
        assert encoder_widths(16)[:4] == [16, 32, 64, 128]

    def test_115_chain(self):
        assert encoder_sizes((115, 115)) == [(115, 115), (57, 57), (28, 28), (14, 14), (7, 7)]
        out = EvolutionNet().eval()(torch.rand(1, 4, 115, 115))
        assert out.frames.shape == (1, 4, 115, 115)

    def test_too_small(self):
        with pytest.raises(ConfigurationError):
            EvolutionNet()(torch.rand(1, 4, 8, 8))

    def test_wrong_frames(self):
        with pytest.raises(ShapeError):
            EvolutionNet()(torch.rand(1, 3, 32, 32))

    def test_motion_channel_layout(self):
        raw = torch.arange(8.0).reshape(1, 8, 1, 1)
        m = MotionField.from_channels(raw)
        assert m.u.flatten().tolist() == [0, 2, 4, 6]
        assert m.v.flatten().tolist() == [1, 3, 5, 7]
