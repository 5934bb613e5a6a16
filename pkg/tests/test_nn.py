import pytest
import torch
from torch import nn

from patchvae.model import ModelConfig, PatchVAE, BetaVAE
from patchvae.nn import (DetachedError, LayerSpec, LayerStack, NonFiniteLossError, ShapeError, Trunk, backward,
                         conv, count_parameters, deconv, detach, effective_fan_in, finite_difference_check,
                         output_shape, resnet9_specs, to_nchw, to_nhwc)


def test_trunk_reduces_by_eight():
    t = Trunk().eval()
    assert t(torch.zeros(2, 3, 32, 32)).shape == (2, 128, 4, 4)
    assert t(torch.zeros(1, 3, 64, 64)).shape == (1, 128, 8, 8)


def test_output_shape_matches_forward():
    specs = [s for stage in resnet9_specs().values() for s in stage]
    assert output_shape(specs, (3, 32, 32)) == (128, 4, 4)
    assert output_shape(specs, (3, 48, 40)) == (128, 6, 5)


def test_identity_stack_is_bitwise():
    x = torch.randn(2, 3, 5, 7)
    y = LayerStack([LayerSpec("identity")], 3)(x)
    assert torch.equal(x, y)


def test_unit_1x1_conv_on_constant_map():
    stack = LayerStack([conv(1, 1, bias=True)], 1)
    with torch.no_grad():
        stack.layers[0].weight.fill_(1.0)
        stack.layers[0].bias.zero_()
    x = torch.full((1, 1, 4, 4), 0.37)
    assert torch.equal(stack(x), x)


def test_channel_mismatch_names_layer():
    stack = LayerStack([conv(3, 4, 1, 1), LayerSpec("relu")], 3)
    with pytest.raises(ShapeError, match="layer 0"):
        stack(torch.zeros(1, 5, 8, 8))


def test_layout_roundtrip():
    x = torch.randn(2, 6, 5, 3).numpy()
    assert (to_nhwc(to_nchw(x)) == x).all()


def test_linear_form_gradient():
    class Lin(nn.Module):
        def __init__(self):
            super().__init__()
            self.w = nn.Parameter(torch.randn(5))

    m, x = Lin(), torch.randn(5)
    g = backward((m.w * x).sum(), m)
    assert torch.allclose(g["w"], x)


def test_constant_loss_gives_zero_gradients():
    m = nn.Linear(3, 2)
    g = backward(torch.tensor(4.0), m)
    assert all((v == 0).all() for v in g.values())


def test_detached_loss_rejected():
    m = nn.Linear(3, 2)
    with pytest.raises(DetachedError):
        backward(detach(m(torch.ones(1, 3)).sum()), m)


def _two_layer_conv():
    torch.manual_seed(0)
    net = LayerStack([conv(3, 3, 1, 1, bias=True), LayerSpec("tanh"), conv(3, 2, 2, 1, bias=True)], 2).double()
    x = torch.randn(2, 2, 8, 8, dtype=torch.float64)
    return net, lambda m: m(x).pow(2).sum()


def test_gradcheck_two_layer_conv_passes():
    net, loss = _two_layer_conv()
    report = finite_difference_check(net, loss)
    assert report.passed and report.max_error < 1e-4


def test_gradcheck_catches_planted_fault():
    net, loss = _two_layer_conv()

    def doubled(m):
        g = backward(loss(m), m)
        g["layers.2.weight"] = g["layers.2.weight"] * 2
        return g

    report = finite_difference_check(net, loss, grad_fn=doubled)
    assert not report.passed
    assert report.failing == ["layers.2.weight"]


def test_gradcheck_empty_model():
    report = finite_difference_check(nn.ReLU(), lambda m: torch.tensor(0.0))
    assert report.passed and report.errors == {}


def test_gradcheck_requires_float64():
    with pytest.raises(TypeError):
        finite_difference_check(nn.Linear(2, 1), lambda m: m(torch.ones(1, 2)).sum())


def test_gradcheck_rejects_nonfinite_loss():
    m = nn.Linear(2, 1).double()
    with pytest.raises(NonFiniteLossError):
        finite_difference_check(m, lambda m: m(torch.ones(1, 2, dtype=torch.float64)).sum() * float("inf"))


def test_deconv_fan_in_accounts_for_stride():
    d = nn.ConvTranspose2d(8, 4, 4, 2, 1)
    assert effective_fan_in(d) == 8 * 16 / 4
    assert effective_fan_in(nn.Conv2d(8, 4, 3)) == 72


def test_parameter_counts_match_architecture_tables():
    p = PatchVAE(ModelConfig())
    enc = count_parameters(p.trunk) + sum(count_parameters(h) for h in (p.occ_head, p.app_mu_head, p.app_logvar_head))
    assert enc == 922_896
    assert count_parameters(p.decoder) == 683_904
    b = BetaVAE(ModelConfig(model_kind="betavae"))
    assert count_parameters(b) - count_parameters(b.decoder) == 888_192
    assert count_parameters(b.decoder) == 774_144
