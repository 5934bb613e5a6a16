import numpy as np
import pytest
import torch

from patchvae.model import (BetaVAE, ConfigError, ModelConfig, PatchVAE, assemble, draw_beta_noise,
                            draw_patch_noise, pool_by_occurrence)


def test_default_shapes_32():
    cfg = ModelConfig()
    m = PatchVAE(cfg).train()
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    out = m(x, draw_patch_noise(cfg, 2, torch.Generator().manual_seed(0)), 1.0)
    assert m.encode_trunk(x).shape == (2, 128, 4, 4)
    assert out.posterior.occ_probs.shape == (2, 16, 4, 4)
    assert out.code.zhat.shape == (2, 96, 4, 4)
    assert out.x_hat.shape == (2, 3, 32, 32)


def test_default_shapes_64():
    cfg = ModelConfig(H=64, W=64)
    m = PatchVAE(cfg).eval()
    with torch.no_grad():
        out = m(torch.zeros(1, 3, 64, 64))
    assert out.code.zhat.shape == (1, 96, 8, 8)
    assert out.x_hat.shape == (1, 3, 64, 64)


def test_non_divisible_size_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(H=36)


def test_unknown_config_key_rejected():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"N": 4, "colour": "red"})


def test_zero_occurrence_head_gives_half():
    m = PatchVAE(ModelConfig()).eval()
    with torch.no_grad():
        m.occ_head.weight.zero_()
        m.occ_head.bias.zero_()
        probs = m.posterior(torch.rand(1, 3, 32, 32)).occ_probs
    assert torch.allclose(probs, torch.full_like(probs, 0.5))


def test_pool_examples():
    v = torch.arange(4.0).view(1, 1, 1, 2, 2)
    assert pool_by_occurrence(v, torch.full((1, 1, 2, 2), 0.3)).item() == pytest.approx(1.5, abs=1e-5)
    onehot = torch.tensor([0.0, 0.0, 1.0, 0.0]).view(1, 1, 2, 2)
    assert pool_by_occurrence(v, onehot).item() == pytest.approx(2.0, abs=1e-5)
    two = pool_by_occurrence(torch.tensor([0.0, 1.0]).view(1, 1, 1, 1, 2), torch.tensor([0.2, 0.8]).view(1, 1, 1, 2))
    assert two.item() == pytest.approx(0.8, abs=1e-5)


def test_assemble_broadcast():
    occ = torch.tensor([1.0, 0, 0, 1]).view(1, 1, 2, 2)
    a = torch.tensor([2.0, -3.0]).view(1, 1, 2)
    z = assemble(occ, a).zhat
    assert z[0, :, 0, 0].tolist() == [2.0, -3.0]
    assert z[0, :, 1, 1].tolist() == [2.0, -3.0]
    assert (z[0, :, 0, 1] == 0).all() and (z[0, :, 1, 0] == 0).all()
    assert (assemble(torch.zeros(2, 3, 4, 4), torch.randn(2, 3, 5)).zhat == 0).all()


def test_part_slice_holds_only_that_part():
    occ = torch.rand(2, 3, 4, 4)
    app = torch.randn(2, 3, 5)
    code = assemble(occ, app)
    for i in range(3):
        expected = occ[:, i : i + 1] * app[:, i].view(2, 5, 1, 1)
        assert torch.allclose(code.part_slice(i), expected)


def test_eval_all_absent_decodes_zero_code(tiny_cfg):
    m = PatchVAE(tiny_cfg).eval()
    with torch.no_grad():
        m.occ_head.bias.fill_(-50.0)
        x = torch.rand(2, 3, 16, 16) * 2 - 1
        out = m(x)
        empty = m.decode(torch.zeros(2, tiny_cfg.code_channels, 2, 2))
    assert (out.code.zhat == 0).all()
    assert torch.equal(out.x_hat, empty)


def test_train_mode_reproducible_with_same_noise(tiny_cfg):
    torch.manual_seed(0)
    m = PatchVAE(tiny_cfg).train()
    x = torch.rand(3, 3, 16, 16)
    noise = draw_patch_noise(tiny_cfg, 3, torch.Generator().manual_seed(5))
    assert torch.equal(m(x, noise, 0.7).x_hat, m(x, noise, 0.7).x_hat)


def test_identical_inputs_identical_outputs(tiny_cfg):
    m = PatchVAE(tiny_cfg).eval()
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(m(x).x_hat, m(x.clone()).x_hat)


def test_train_mode_requires_noise(tiny_cfg):
    with pytest.raises(ValueError):
        PatchVAE(tiny_cfg).train()(torch.zeros(1, 3, 16, 16))


def test_untrained_decoder_outputs_mid_grey(tiny_cfg):
    m = PatchVAE(tiny_cfg).eval()
    with torch.no_grad():
        assert (m(torch.rand(1, 3, 16, 16)).x_hat == 0).all()


def test_occurrence_starts_at_prior(tiny_cfg):
    m = PatchVAE(tiny_cfg).eval()
    with torch.no_grad():
        m.occ_head.weight.zero_()
        p = m.posterior(torch.rand(1, 3, 16, 16)).occ_probs
    assert torch.allclose(p, torch.full_like(p, 1 / tiny_cfg.N), atol=1e-6)


def test_betavae_shapes_and_mean_decode():
    cfg = ModelConfig(model_kind="betavae")
    m = BetaVAE(cfg).train()
    x = torch.rand(2, 3, 32, 32)
    out = m(x, torch.zeros(2, 96))
    assert out.posterior.mu.shape == (2, 96)
    assert out.x_hat.shape == (2, 3, 32, 32)
    m.eval()
    with torch.no_grad():
        out = m(x)
        assert torch.equal(out.x_hat, m.decode(out.posterior.mu))
    assert draw_beta_noise(cfg, 4).shape == (4, 96)


def test_prior_tracks_N():
    assert ModelConfig(N=8).p_prior == pytest.approx(1 / 8)
    assert ModelConfig(N=8, p_prior=0.05).p_prior == 0.05


def test_config_dict_roundtrip(tiny_cfg):
    d = ModelConfig.from_dict(tiny_cfg.to_dict())
    assert d == tiny_cfg
    assert np.isclose(d.p_prior, 0.25)
