import dataclasses
import math

import numpy as np
import pytest
import torch

from usgen import tbgan
from usgen.checkpoints import ConfigMismatchError
from usgen.errors import NumericsError
from usgen.seeding import seeded_module, torch_generator
from usgen.tbgan import (APAState, ConvDiscriminator, DiffAugPolicy, StyleGenerator,
                         TBGanError, WindowAttention, apa_mix, apa_update, apply_diffaug,
                         diffaug, discriminator_config, draw_diffaug_params, gan_losses,
                         generate, generator_config, r1_penalty, train_tbgan,
                         window_attention, window_partition, window_reverse)
from .conftest import tiny_tbgan_config
from .oracles import full_attention


class TestWindowAttention:
    def test_single_window_equals_full_attention(self):
        w = seeded_module(lambda: WindowAttention(16, heads=4), 0)
        x = torch.randn(2, 8, 8, 16, generator=torch_generator(1))
        windowed = window_attention(x, 8, 0, w)
        oracle = full_attention(
            x.reshape(2, 64, 16).double().numpy(),
            w.qkv.weight.detach().double().numpy(), w.qkv.bias.detach().double().numpy(),
            w.proj.weight.detach().double().numpy(), w.proj.bias.detach().double().numpy(),
            heads=4)
        assert np.max(np.abs(windowed.detach().numpy().reshape(2, 64, 16) - oracle)) < 1e-5

    def test_attention_rows_sum_to_one(self):
        w = seeded_module(lambda: WindowAttention(32, heads=4), 1)
        x = torch.randn(2, 16, 16, 32)
        _, attn = window_attention(x, 8, 4, w, return_attn=True)
        assert torch.max(torch.abs(attn.sum(-1) - 1.0)).item() <= 1e-6

    def test_cyclic_shift_is_a_bijection(self):
        x = torch.randn(1, 8, 8, 4)
        rolled = torch.roll(x, shifts=(-2, -2), dims=(1, 2))
        assert torch.equal(torch.roll(rolled, shifts=(2, 2), dims=(1, 2)), x)
        # shifted attention == roll -> plain attention -> unroll
        w = seeded_module(lambda: WindowAttention(4, heads=2), 2)
        direct = window_attention(x, 4, 2, w)
        via_roll = torch.roll(window_attention(rolled, 4, 0, w), shifts=(2, 2), dims=(1, 2))
        assert torch.allclose(direct, via_roll, atol=1e-7)

    def test_partition_reverse_roundtrip(self):
        x = torch.randn(2, 8, 8, 6)
        wins = window_partition(x, 4)
        assert wins.shape == (2 * 4, 16, 6)
        assert torch.equal(window_reverse(wins, 4, 8, 8), x)

    def test_uniform_attention_closed_form(self):
        w = seeded_module(lambda: WindowAttention(8, heads=2), 3)
        with torch.no_grad():
            w.qkv.weight[:16].zero_()  # zero query and key projections
            w.qkv.bias[:16].zero_()
        x = torch.randn(1, 4, 4, 8)
        out = window_attention(x, 4, 0, w)
        mean_token = x.reshape(1, 16, 8).mean(dim=1, keepdim=True)
        v = mean_token @ w.qkv.weight[16:].T + w.qkv.bias[16:]
        expected = w.proj(v)
        assert torch.allclose(out.reshape(1, 16, 8), expected.expand(1, 16, 8), atol=1e-6)

    def test_validation(self):
        w = WindowAttention(8, heads=2)
        with pytest.raises(TBGanError):
            window_attention(torch.zeros(1, 6, 6, 8), 4, 0, w)  # 6 % 4 != 0
        with pytest.raises(TBGanError):
            window_attention(torch.zeros(1, 8, 8, 8), 4, 4, w)  # shift == window
        with pytest.raises(TBGanError):
            WindowAttention(10, heads=4)


class TestGenerator:
    def test_tiny_resolution_contract(self):
        g = seeded_module(lambda: StyleGenerator(generator_config("tiny", 32)), 0)
        out = generate(g, seed=1, count=2)
        assert out.shape == (2, 1, 32, 32)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_paper_resolution_256(self):
        g = seeded_module(lambda: StyleGenerator(generator_config("tiny", 256)), 0)
        out = generate(g, seed=1, count=1)
        assert out.shape == (1, 1, 256, 256)

    def test_latents_determine_images(self):
        g = seeded_module(lambda: StyleGenerator(generator_config("tiny", 16)), 0)
        z = torch.randn(2, g.cfg.latent_dim, generator=torch_generator(4))
        a = generate(g, z)
        b = generate(g, z.clone())
        assert torch.equal(a, b)
        z2 = torch.randn(2, g.cfg.latent_dim, generator=torch_generator(5))
        assert not torch.equal(a, generate(g, z2))

    def test_latent_dim_checked(self):
        g = seeded_module(lambda: StyleGenerator(generator_config("tiny", 16)), 0)
        with pytest.raises(TBGanError):
            g(torch.zeros(1, 3))


class TestDiffAug:
    def test_empty_policy_is_identity(self):
        x = torch.randn(3, 1, 8, 8)
        assert torch.equal(diffaug(x, DiffAugPolicy.identity(), seed=0), x)

    def test_zero_magnitude_draws_are_identity(self):
        x = torch.randn(2, 1, 8, 8)
        policy = DiffAugPolicy(transforms=("color", "translation", "cutout"),
                               translation_ratio=0.0, cutout_ratio=0.0)
        params = draw_diffaug_params(policy, 2, 8, 8, seed=0)
        params["brightness"] = torch.zeros(2)
        params["saturation"] = torch.ones(2)
        params["contrast"] = torch.ones(2)
        out = apply_diffaug(x, policy, params)
        assert torch.equal(out, x)

    def test_cutout_zeroes_exactly_one_quarter(self):
        policy = DiffAugPolicy(transforms=("cutout",), cutout_ratio=0.5)
        for seed in range(10):
            out = diffaug(torch.ones(1, 1, 8, 8), policy, seed)
            assert int((out == 0).sum()) == 16
            assert int((out == 1).sum()) == 48

    def test_seed_determinism(self):
        x = torch.randn(4, 1, 16, 16)
        policy = DiffAugPolicy()
        assert torch.equal(diffaug(x, policy, 7), diffaug(x, policy, 7))
        assert not torch.equal(diffaug(x, policy, 7), diffaug(x, policy, 8))

    def test_gradient_matches_finite_differences(self):
        policy = DiffAugPolicy()
        x = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=torch_generator(2))
        weights = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=torch_generator(3))

        def f(inp):
            return (diffaug(inp, policy, seed=5) * weights).sum()

        x_req = x.clone().requires_grad_(True)
        analytic = torch.autograd.grad(f(x_req), x_req)[0]
        h = 1e-6
        fd = torch.zeros_like(x)
        for idx in np.ndindex(8, 8):
            delta = torch.zeros_like(x)
            delta[0, 0, idx[0], idx[1]] = h
            fd[0, 0, idx[0], idx[1]] = (f(x + delta) - f(x - delta)) / (2 * h)
        denom = analytic.abs().max().item()
        rel = (analytic - fd).abs().max().item() / max(denom, 1e-12)
        assert rel < 1e-3

    def test_unknown_transform_rejected(self):
        with pytest.raises(TBGanError):
            DiffAugPolicy(transforms=("sharpen",))


class TestAPA:
    def test_fixed_point_at_target(self):
        state = APAState(p=0.5, lambda_r=0.0, target=0.0, step_size=0.1)
        new = apa_update(state, torch.zeros(8))
        assert new.p == 0.5
        assert new.lambda_r == 0.0

    def test_saturation_increases_until_clamped(self):
        state = APAState(p=0.0, lambda_r=1.0, target=0.6, step_size=0.3, ema_decay=0.5)
        for expected in (0.3, 0.6, 0.9, 1.0, 1.0):
            state = apa_update(state, torch.ones(4))
            assert state.p == pytest.approx(expected)
            assert state.lambda_r == 1.0

    def test_lower_clamp(self):
        state = APAState(p=0.0, lambda_r=-1.0, target=0.6, step_size=0.2, ema_decay=1.0)
        new = apa_update(state, -torch.ones(4))
        assert new.p == 0.0

    def test_pure_function(self):
        state = APAState(p=0.2, lambda_r=0.1, target=0.6, step_size=0.05)
        logits = torch.tensor([1.0, -2.0, 3.0])
        a = apa_update(state, logits)
        b = apa_update(state, logits)
        assert a == b

    def test_empty_logits_rejected(self):
        with pytest.raises(TBGanError):
            apa_update(APAState(), torch.zeros(0))

    def test_mix_extremes(self):
        real = torch.zeros(5, 1, 4, 4)
        fake = torch.ones(5, 1, 4, 4)
        assert torch.equal(apa_mix(real, fake, 0.0, seed=1), real)
        assert torch.equal(apa_mix(real, fake, 1.0, seed=1), fake)

    def test_mix_binomial_bound(self):
        real = torch.zeros(1000, 1, 1, 1)
        fake = torch.ones(1000, 1, 1, 1)
        frac = apa_mix(real, fake, 0.5, seed=3).mean().item()
        assert 0.45 <= frac <= 0.55

    def test_mix_shape_mismatch(self):
        with pytest.raises(TBGanError):
            apa_mix(torch.zeros(2, 1, 4, 4), torch.zeros(2, 1, 8, 8), 0.5, seed=0)


class TestLosses:
    def test_zero_logit_discriminator_gives_ln2(self):
        g = seeded_module(lambda: StyleGenerator(generator_config("tiny", 16)), 0)
        real = torch.zeros(2, 1, 16, 16)
        z = torch.randn(2, g.cfg.latent_dim, generator=torch_generator(1))
        out = gan_losses(g, lambda x: torch.zeros(x.shape[0], 1), real, z,
                         DiffAugPolicy.identity(), APAState(), r1_gamma=10.0, step_index=0)
        assert abs(out.g_loss.item() - math.log(2)) < 1e-6
        assert abs(out.d_loss.item() - math.log(2)) < 1e-6  # r1 of a constant d is 0
        assert out.r1.item() == 0.0

    def test_r1_zero_for_constant_discriminator(self):
        x = torch.randn(4, 1, 8, 8)
        penalty = r1_penalty(lambda inp: torch.ones(inp.shape[0], 1), x, gamma=10.0)
        assert penalty.item() == 0.0

    def test_r1_linear_probe_analytic(self):
        w = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=torch_generator(6))

        def probe(x):
            return (x * w).sum(dim=(1, 2, 3), keepdim=False).unsqueeze(1)

        gamma = 10.0
        x = torch.randn(4, 1, 8, 8, dtype=torch.float64)
        penalty = r1_penalty(probe, x, gamma)
        expected = (gamma / 2.0) * float((w ** 2).sum())
        assert abs(penalty.item() - expected) / expected < 1e-10

    def test_lazy_r1_cadence(self):
        g = seeded_module(lambda: StyleGenerator(generator_config("tiny", 16)), 0)
        d = seeded_module(lambda: ConvDiscriminator(discriminator_config("tiny", 16)), 1)
        real = torch.zeros(2, 1, 16, 16)
        z = torch.randn(2, g.cfg.latent_dim)
        at_zero = gan_losses(g, d, real, z, DiffAugPolicy.identity(), APAState(),
                             r1_gamma=10.0, step_index=0, r1_interval=4)
        off_beat = gan_losses(g, d, real, z, DiffAugPolicy.identity(), APAState(),
                              r1_gamma=10.0, step_index=3, r1_interval=4)
        assert at_zero.r1 is not None
        assert off_beat.r1 is None


class TestTTUR:
    def test_default_config_ratio(self):
        from usgen.config import default_tbgan_config
        cfg = default_tbgan_config()
        assert cfg.lr_discriminator == 1e-4
        assert cfg.lr_generator == 1e-5
        assert cfg.lr_discriminator == 10 * cfg.lr_generator

    def test_observed_update_magnitudes(self):
        # Adam's first step moves a parameter by ~lr regardless of gradient
        # scale, so the update ratio exposes the two time scales directly.
        updates = {}
        for name, lr in (("d", 1e-4), ("g", 1e-5)):
            w = torch.nn.Parameter(torch.ones(4, dtype=torch.float64))
            opt = torch.optim.Adam([w], lr=lr, betas=(0.0, 0.99))
            (w * torch.arange(1.0, 5.0, dtype=torch.float64)).sum().backward()
            before = w.detach().clone()
            opt.step()
            updates[name] = (w.detach() - before).abs().mean().item()
        assert updates["d"] / updates["g"] == pytest.approx(10.0, rel=1e-6)


class TestTraining:
    def test_short_run_properties(self, phantoms16):
        cfg = tiny_tbgan_config(phantoms16.root, epochs=6)
        g = seeded_module(lambda: StyleGenerator(generator_config("tiny", 16)), 10)
        d = seeded_module(lambda: ConvDiscriminator(discriminator_config("tiny", 16)), 11)
        ckpt, trace = train_tbgan(g, d, phantoms16, cfg)
        assert len(trace) == 6
        for row in trace:
            assert np.isfinite(row["g_loss"]) and np.isfinite(row["d_loss"])
            assert 0.0 <= row["apa_p"] <= 1.0
        assert ckpt.pipeline == "tbgan"

    def test_zero_epochs(self, phantoms16):
        cfg = tiny_tbgan_config(phantoms16.root, epochs=0)
        g = seeded_module(lambda: StyleGenerator(generator_config("tiny", 16)), 10)
        d = seeded_module(lambda: ConvDiscriminator(discriminator_config("tiny", 16)), 11)
        before = {k: v.clone() for k, v in g.state_dict().items()}
        ckpt, trace = train_tbgan(g, d, phantoms16, cfg)
        assert trace == []
        for k, v in g.state_dict().items():
            assert torch.equal(v, before[k])

    def test_transfer_architecture_mismatch_lists_keys(self, phantoms16):
        cfg = tiny_tbgan_config(phantoms16.root, epochs=1)
        g = seeded_module(lambda: StyleGenerator(generator_config("tiny", 16)), 1)
        d = seeded_module(lambda: ConvDiscriminator(discriminator_config("tiny", 16)), 2)
        other_cfg = tiny_tbgan_config(phantoms16.root, epochs=0,
                                      tbgan={"resolution": 32})
        g32 = seeded_module(lambda: StyleGenerator(generator_config("tiny", 32)), 3)
        d32 = seeded_module(lambda: ConvDiscriminator(discriminator_config("tiny", 32)), 4)
        ckpt32, _ = train_tbgan(g32, d32, phantoms16, other_cfg)
        with pytest.raises(ConfigMismatchError, match="resolution"):
            train_tbgan(g, d, phantoms16, cfg, init_from=ckpt32)
