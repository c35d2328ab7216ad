import numpy as np
import pytest
import torch

from nowcastlab.datamodel import Sample
from nowcastlab.exceptions import ConfigurationError, ShapeError
from nowcastlab.models import (
    REFERENCE_PARAMETER_COUNTS,
    VARIANT_NAMES,
    ModelConfig,
    ModelVariant,
    build_model,
    count_parameters,
    forward,
)


def inputs(size=64, batch=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 4, size, size, generator=gen), torch.rand(batch, 20, size, size, generator=gen)


class TestConfig:
    def test_default_widths(self):
        assert ModelConfig("smaat_unet").rain_base_channels == 64
        cfg = ModelConfig("mad_smaat_gnet")
        assert cfg.rain_base_channels == 32
        assert cfg.aux_base_channels == 64

    def test_round_trip(self):
        cfg = ModelConfig("smaat_2stream", input_size=(115, 115))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            ModelConfig("transformer")

    def test_too_small_input(self):
        with pytest.raises(ConfigurationError):
            build_model(ModelConfig("smaat_unet", input_size=(8, 8)))

    def test_variant_flags(self):
        v = ModelVariant
        assert v.MAD_SMAAT_GNET.uses_aux and v.MAD_SMAAT_GNET.uses_evolution
        assert v.SMAAT_2STREAM.uses_aux and not v.SMAAT_2STREAM.uses_evolution
        assert v.SMAAT_EVO.uses_evolution and not v.SMAAT_EVO.uses_aux
        assert not v.PERSISTENCE.trainable
        assert set(VARIANT_NAMES) == {"smaat_unet", "mad_smaat_gnet", "smaat_evo", "smaat_2stream", "evo_net",
                                      "persistence"}


@pytest.mark.parametrize("variant", VARIANT_NAMES)
def test_shapes_64(variant):
    model = build_model(ModelConfig(variant)).eval()
    rain, aux = inputs()
    with torch.no_grad():
        assert model(rain, aux).shape == (2, 4, 64, 64)


@pytest.mark.parametrize("variant", VARIANT_NAMES)
def test_shapes_115(variant):
    model = build_model(ModelConfig(variant, input_size=(115, 115))).eval()
    rain, aux = inputs(115, batch=1)
    with torch.no_grad():
        out = model(rain, aux)
    assert out.shape == (1, 4, 115, 115)
    assert torch.isfinite(out).all()


@pytest.mark.parametrize("variant", [v for v in VARIANT_NAMES if v != "persistence"])
def test_parameter_counts_within_tolerance(variant):
    total, breakdown = count_parameters(build_model(ModelConfig(variant)))
    ref = REFERENCE_PARAMETER_COUNTS[variant]
    assert abs(total - ref) / ref <= 0.15
    assert sum(breakdown.values()) == total


def test_parameter_counts_independent_of_input_size():
    a, _ = count_parameters(build_model(ModelConfig("mad_smaat_gnet")))
    b, _ = count_parameters(build_model(ModelConfig("mad_smaat_gnet", input_size=(115, 115))))
    assert a == b


def test_persistence_has_no_parameters():
    assert count_parameters(build_model(ModelConfig("persistence")))[0] == 0


def test_counts_monotone_in_width():
    counts = [count_parameters(build_model(ModelConfig("smaat_unet", rain_base_channels=c)))[0] for c in (16, 32, 64)]
    assert counts == sorted(counts) and len(set(counts)) == 3


def test_mad_has_two_encoders_and_evolution():
    _, breakdown = count_parameters(build_model(ModelConfig("mad_smaat_gnet")))
    assert {"rain_encoder", "aux_encoder", "evolution"} <= set(breakdown)
    _, unet = count_parameters(build_model(ModelConfig("smaat_unet")))
    assert "aux_encoder" not in unet and "evolution" not in unet


def test_same_seed_same_parameters():
    a = build_model(ModelConfig("mad_smaat_gnet"), seed=5).state_dict()
    b = build_model(ModelConfig("mad_smaat_gnet"), seed=5).state_dict()
    c = build_model(ModelConfig("mad_smaat_gnet"), seed=6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_build_does_not_disturb_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_model(ModelConfig("smaat_evo"), seed=9)
    assert torch.equal(torch.rand(3), expected)


def test_persistence_repeats_last_frame():
    model = build_model(ModelConfig("persistence"))
    rain, aux = inputs()
    out = model(rain, aux)
    for t in range(4):
        assert torch.equal(out[:, t], rain[:, 3])


def test_inference_deterministic():
    model = build_model(ModelConfig("mad_smaat_gnet")).eval()
    rain, aux = inputs()
    with torch.no_grad():
        assert torch.equal(model(rain, aux), model(rain, aux))


def test_mad_aux_path_is_live():
    model = build_model(ModelConfig("mad_smaat_gnet")).eval()
    rain, aux = inputs()
    with torch.no_grad():
        assert not torch.equal(model(rain, aux), model(rain, torch.zeros_like(aux)))


def test_models_without_aux_ignore_it():
    model = build_model(ModelConfig("smaat_evo")).eval()
    rain, aux = inputs()
    with torch.no_grad():
        assert torch.equal(model(rain, aux), model(rain, None))


@pytest.mark.parametrize("variant", ["smaat_evo", "mad_smaat_gnet"])
def test_gamma_zero_keeps_motion_gradients(variant):
    model = build_model(ModelConfig(variant))
    assert torch.equal(model.evolution.gamma, torch.zeros(4))
    rain, aux = inputs()
    out = model(rain, aux)
    assert torch.isfinite(out).all()
    out.pow(2).mean().backward()
    head = model.evolution.motion_decoder.out.weight.grad
    assert head is not None and head.abs().sum() > 0


def test_shape_errors():
    model = build_model(ModelConfig("mad_smaat_gnet"))
    rain, aux = inputs()
    with pytest.raises(ShapeError):
        model(rain[:, :3], aux)
    with pytest.raises(ShapeError):
        model(rain, None)
    with pytest.raises(ShapeError):
        model(rain, aux[:, :10])
    with pytest.raises(ShapeError):
        model(*inputs(32))


def test_forward_single_sample():
    rng = np.random.default_rng(0)
    s = Sample(rng.random((4, 64, 64)), rng.random((4, 64, 64)), rng.random((5, 4, 64, 64)))
    model = build_model(ModelConfig("persistence"))
    out = forward(model, s)
    assert out.shape == (4, 64, 64)
    np.testing.assert_array_equal(out[2], s.rain_in[3])
