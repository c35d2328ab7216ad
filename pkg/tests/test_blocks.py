import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nowcastlab.blocks import (
    CBAM,
    NORM_EPS,
    SPADE,
    DepthwiseSeparableConv,
    DoubleConvDS,
    SpectralNormConv2d,
    SpectralResidualBlock,
    resize_bilinear,
)
from nowcastlab.exceptions import ConfigurationError, InvalidInputError, ShapeError

from .gradcheck import away_from_kinks, check_gradients, projected

torch.set_default_dtype(torch.float32)


def n_params(m):
    return sum(p.numel() for p in m.parameters())


def dsc_oracle(c_in, c_out, kpl=2, k=3):
    depthwise = c_in * kpl * k * k + c_in * kpl
    pointwise = c_in * kpl * c_out + c_out
    return depthwise + pointwise


def double_conv_oracle(c_in, c_out, mid=None, kpl=2):
    mid = mid or c_out
    return dsc_oracle(c_in, mid, kpl) + 2 * mid + dsc_oracle(mid, c_out, kpl) + 2 * c_out


class TestDoubleConv:
    def test_shape(self):
        assert DoubleConvDS(4, 32)(torch.randn(1, 4, 8, 8)).shape == (1, 32, 8, 8)

    def test_zero_input_finite(self):
        out = DoubleConvDS(4, 8)(torch.zeros(2, 4, 8, 8))
        assert torch.isfinite(out).all()

    @pytest.mark.parametrize("c_in,c_out", [(4, 32), (20, 64), (64, 128), (3, 5)])
    def test_parameter_count(self, c_in, c_out):
        assert n_params(DoubleConvDS(c_in, c_out)) == double_conv_oracle(c_in, c_out)

    def test_single_pair_count(self):
        assert n_params(DepthwiseSeparableConv(4, 32)) == dsc_oracle(4, 32)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            DoubleConvDS(4, 8)(torch.randn(1, 3, 8, 8))

    @settings(max_examples=10, deadline=None)
    @given(st.sampled_from([7, 14, 57, 115, 8, 16]))
    def test_spatial_preserving(self, size):
        assert DoubleConvDS(2, 4)(torch.randn(2, 2, size, size)).shape[-2:] == (size, size)


class TestCBAM:
    def test_shape(self):
        assert CBAM(32)(torch.randn(2, 32, 16, 16)).shape == (2, 32, 16, 16)

    def test_gates_in_open_unit_interval(self):
        cbam = CBAM(32)
        x = torch.randn(2, 32, 16, 16)
        ch = cbam.channel_att.gate(x)
        sp = cbam.spatial_att.gate(cbam.channel_att(x))
        for g in (ch, sp):
            assert (g > 0).all() and (g < 1).all()

    def test_zero_in_zero_out(self):
        out = CBAM(32)(torch.zeros(1, 32, 8, 8))
        assert torch.equal(out, torch.zeros_like(out))

    def test_bad_reduction(self):
        with pytest.raises(ConfigurationError):
            CBAM(8, reduction=16)
        with pytest.raises(ConfigurationError):
            CBAM(8, reduction=0)

    def test_spatial_conv_has_no_bias(self):
        cbam = CBAM(32)
        assert cbam.spatial_att.conv.bias is None
        assert cbam.spatial_att.conv.kernel_size == (7, 7)


def _bn(x):
    mean = x.mean(dim=(0, 2, 3), keepdim=True)
    var = x.var(dim=(0, 2, 3), unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + NORM_EPS)


class TestSPADE:
    def test_shape(self):
        out = SPADE(64, 128)(torch.randn(1, 64, 14, 14), torch.randn(1, 128, 7, 7))
        assert out.shape == (1, 64, 14, 14)

    def test_zero_modulation_is_plain_norm(self):
        spade = SPADE(8, 4)
        for conv in (spade.to_gamma, spade.to_beta):
            torch.nn.init.zeros_(conv.weight)
            torch.nn.init.zeros_(conv.bias)
        x = torch.randn(3, 8, 5, 5, dtype=torch.float64)
        spade = spade.double()
        torch.testing.assert_close(spade(x, torch.randn(3, 4, 5, 5, dtype=torch.float64)), _bn(x))

    def test_constant_channel_is_finite(self):
        spade = SPADE(2, 2)
        for conv in (spade.to_gamma, spade.to_beta):
            torch.nn.init.zeros_(conv.weight)
            torch.nn.init.zeros_(conv.bias)
        x = torch.full((2, 2, 4, 4), 3.0)
        out = spade(x, torch.randn(2, 2, 4, 4))
        # (x - mean) / sqrt(0 + eps) with x == mean; float32 mean rounding
        # is amplified by 1/sqrt(eps) but stays tiny
        assert torch.isfinite(out).all()
        torch.testing.assert_close(out, torch.zeros_like(out), atol=1e-3, rtol=0)

    def test_modulation_uses_condition(self):
        spade = SPADE(4, 3).eval()
        x = torch.randn(1, 4, 6, 6)
        a = spade(x, torch.randn(1, 3, 3, 3))
        b = spade(x, torch.randn(1, 3, 3, 3))
        assert not torch.allclose(a, b)

    def test_empty_condition(self):
        with pytest.raises(InvalidInputError):
            SPADE(4, 3)(torch.randn(1, 4, 6, 6), torch.randn(1, 3, 0, 0))

    def test_param_free_norm(self):
        spade = SPADE(4, 3)
        assert not list(spade.param_free_norm.parameters())


class TestSpectral:
    @pytest.mark.parametrize("c_in,c_out", [(4, 16), (16, 16), (8, 32), (256, 64), (3, 3)])
    def test_normalized_sigma_at_most_one(self, c_in, c_out):
        conv = SpectralNormConv2d(c_in, c_out)
        w = conv.normalized_weight().detach().reshape(c_out, -1)
        assert torch.linalg.matrix_norm(w, 2).item() <= 1 + 1e-2

    def test_sigma_tracks_training_updates(self):
        block = SpectralResidualBlock(4, 8)
        opt = torch.optim.SGD(block.parameters(), lr=0.05)
        for _ in range(20):
            opt.zero_grad()
            block(torch.randn(2, 4, 8, 8)).pow(2).mean().backward()
            opt.step()
        block(torch.randn(2, 4, 8, 8))
        for conv in block.modules():
            if isinstance(conv, SpectralNormConv2d):
                w = conv.normalized_weight().detach().reshape(conv.weight.shape[0], -1)
                assert torch.linalg.matrix_norm(w, 2).item() <= 1 + 1e-2

    def test_eval_mode_leaves_vectors(self):
        conv = SpectralNormConv2d(3, 4).eval()
        u = conv.u.clone()
        conv(torch.randn(1, 3, 5, 5))
        assert torch.equal(u, conv.u)

    def test_train_mode_updates_vectors_persistently(self):
        conv = SpectralNormConv2d(3, 4)
        with torch.no_grad():
            conv.weight.mul_(torch.randn_like(conv.weight))
        u = conv.u.clone()
        conv(torch.randn(1, 3, 5, 5))
        assert not torch.equal(u, conv.u)
        assert "u" in conv.state_dict() and "v" in conv.state_dict()

    def test_block_shape(self):
        assert SpectralResidualBlock(16, 32)(torch.randn(1, 16, 32, 32)).shape == (1, 32, 32, 32)

    def test_zero_weights_leave_shortcut_bias(self):
        block = SpectralResidualBlock(3, 5).eval()
        with torch.no_grad():
            for conv in block.modules():
                if isinstance(conv, SpectralNormConv2d):
                    conv.weight.zero_()
        out = block(torch.randn(2, 3, 6, 6))
        expected = (block.double_conv[-1].bias + block.shortcut[-1].bias).reshape(1, -1, 1, 1).expand_as(out)
        torch.testing.assert_close(out, expected)

    def test_zero_weight_sigma_guarded(self):
        conv = SpectralNormConv2d(2, 2)
        with torch.no_grad():
            conv.weight.zero_()
        assert torch.isfinite(conv.normalized_weight()).all()


class TestResize:
    def test_identity_when_same_size(self):
        x = torch.randn(1, 2, 5, 5)
        assert resize_bilinear(x, (5, 5)) is x

    def test_odd_target(self):
        assert resize_bilinear(torch.randn(1, 2, 28, 28), (57, 57)).shape == (1, 2, 57, 57)


def _double(module):
    return module.double()


class TestGradients:
    """Autograd against central differences, float64, step 1e-3."""

    def test_double_conv(self):
        torch.manual_seed(0)
        m = _double(DoubleConvDS(3, 4))
        x = away_from_kinks(m, lambda g: [torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)])
        fn = projected(lambda x: m(x), (2, 4, 4, 4))
        assert check_gradients(fn, x) < 1e-3

    def test_cbam(self):
        torch.manual_seed(1)
        m = _double(CBAM(8, reduction=4))
        # distinct, well-separated values keep the max-pool winners fixed
        x = (torch.randperm(200).double() * 0.05 - 5.0).reshape(1, 8, 5, 5)
        fn = projected(lambda x: m(x), (1, 8, 5, 5))
        assert check_gradients(fn, [x]) < 1e-3

    def test_spade(self):
        torch.manual_seed(2)
        m = _double(SPADE(4, 3, hidden=8))
        x = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        c = torch.randn(2, 3, 2, 2, dtype=torch.float64)
        fn = projected(lambda x, c: m(x, c), (2, 4, 4, 4))
        assert check_gradients(fn, [x, c]) < 1e-3

    def test_spectral_block(self):
        torch.manual_seed(3)
        m = _double(SpectralResidualBlock(3, 4)).eval()
        x = away_from_kinks(m, lambda g: [torch.randn(1, 3, 5, 5, generator=g, dtype=torch.float64)])
        fn = projected(lambda x: m(x), (1, 4, 5, 5))
        assert check_gradients(fn, x) < 1e-3

    def test_spectral_weight(self):
        torch.manual_seed(4)
        conv = SpectralNormConv2d(2, 3).double().eval()
        x = torch.randn(1, 2, 4, 4, dtype=torch.float64)

        u, v = conv.u.double(), conv.v.double()

        def run(w):
            sigma = torch.dot(u, w.reshape(3, -1) @ v)
            return torch.nn.functional.conv2d(x, w / sigma.clamp_min(conv.eps), conv.bias, padding=1)

        fn = projected(run, (1, 3, 4, 4))
        assert check_gradients(fn, [conv.weight.detach().clone()]) < 1e-3
