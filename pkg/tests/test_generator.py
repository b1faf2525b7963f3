import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pflsynth.errors import ConfigError, ShapeError
from pflsynth.generator import (
    EPS,
    ConditionCodes,
    GeneratorConfig,
    Mapper,
    PersonalizationBlock,
    adacw,
    adain,
    build_generator,
    pb_affine,
)
from pflsynth.params import count_params, partition

torch.set_default_dtype(torch.float32)


def codes4():
    return ConditionCodes(["a", "b", "c", "d"])


def tiny_config(**kw):
    base = dict(widths=(4, 4, 4), depth=2, latent_dim=6, cw_hidden=5, split_stage="r1")
    base.update(kw)
    return GeneratorConfig(**base)


class TestCodes:
    def test_default_mapper_input_length(self):
        codes = codes4()
        assert codes.input_dim == 12
        v, u = codes.encode("b", "T1", "T2")
        assert v.tolist() == [0, 1, 0, 0]
        assert u.tolist() == [1, 0, 0, 0, 0, 1, 0, 0]

    def test_spares_and_exhaustion(self):
        codes = ConditionCodes(["a"], spare_sites=1, spare_contrasts=0)
        assert codes.add_site("late") == 1
        with pytest.raises(ConfigError):
            codes.add_site("later")
        with pytest.raises(ConfigError):
            codes.add_contrast("DWI")

    def test_unregistered_site(self):
        with pytest.raises(ConfigError):
            codes4().site_vector("zz")


class TestMapper:
    def test_output_size_and_determinism(self):
        g = build_generator(GeneratorConfig(), codes4(), seed=0)
        v, u = codes4().encode("a", "T1", "T2")
        assert g.mapper.in_dim == 12 and len(g.mapper.layers) == 6
        w1, w2 = g.latent(v, u), g.latent(v, u)
        assert w1.shape == (64,) and torch.equal(w1, w2)

    def test_zero_weights_hand_computed(self):
        m = Mapper(3, 2, n_layers=3)
        biases = [torch.tensor([0.5, -1.0]), torch.tensor([-2.0, 3.0]), torch.tensor([0.25, 0.75])]
        with torch.no_grad():
            for layer, b in zip(m.layers, biases):
                layer.weight.zero_()
                layer.bias.copy_(b)
        # hidden layers only see biases through leaky-relu; last layer is linear
        expected = torch.tensor([0.25, 0.75])
        for code in ([1.0, 0, 0], [0, 1.0, 1.0]):
            assert torch.equal(m(torch.tensor(code)), expected)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            Mapper(12, 8)(torch.zeros(10))


class TestPBAffine:
    def test_identity_init_values(self):
        q = torch.zeros(3, 4)
        gamma, beta = pb_affine(torch.randn(4), q, torch.ones(3), q, torch.zeros(3))
        assert gamma.tolist() == [1, 1, 1] and beta.tolist() == [0, 0, 0]

    def test_identity_matrix(self):
        eye = torch.eye(2)
        gamma, _ = pb_affine(torch.tensor([3.0, -2.0]), eye, torch.zeros(2), eye, torch.zeros(2))
        assert gamma.tolist() == [3.0, -2.0]

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        qg, qb = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        bg, bb, w = rng.normal(size=5), rng.normal(size=5), rng.normal(size=3)
        gamma, beta = pb_affine(*(torch.tensor(a) for a in (w, qg, bg, qb, bb)))
        for i in range(5):
            assert gamma[i].item() == pytest.approx(sum(qg[i, j] * w[j] for j in range(3)) + bg[i], abs=1e-12)
            assert beta[i].item() == pytest.approx(sum(qb[i, j] * w[j] for j in range(3)) + bb[i], abs=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            pb_affine(torch.zeros(4), torch.zeros(3, 5), torch.zeros(3), torch.zeros(3, 5), torch.zeros(3))


def direct_adain(ch, gamma, beta, eps=EPS):
    vals = [float(x) for x in np.ravel(ch)]
    mu = sum(vals) / len(vals)
    sigma = math.sqrt(sum((x - mu) ** 2 for x in vals) / len(vals))
    return [gamma * (x - mu) / (sigma + eps) + beta for x in vals]


class TestAdaIN:
    def test_plain_instance_norm_stats(self):
        g = torch.randn(6, 8, 8, dtype=torch.float64) * 3 + 2
        out = adain(g, torch.ones(6, dtype=torch.float64), torch.zeros(6, dtype=torch.float64))
        sigma = g.std(dim=(1, 2), unbiased=False)
        assert out.mean(dim=(1, 2)).abs().max() < 1e-5
        ratio = out.std(dim=(1, 2), unbiased=False) / (sigma / (sigma + EPS))
        assert torch.all((ratio > 1 - 1e-3) & (ratio < 1 + 1e-3))

    def test_constant_channel_gives_beta(self):
        g = torch.full((2, 4, 4), 7.0)
        out = adain(g, torch.tensor([2.0, 3.0]), torch.tensor([0.5, -1.5]))
        assert torch.all(out[0] == 0.5) and torch.all(out[1] == -1.5)

    def test_direct_statistics_oracle(self):
        ch = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = adain(torch.tensor(ch)[None], torch.tensor([2.0], dtype=torch.float64), torch.tensor([5.0], dtype=torch.float64))
        np.testing.assert_allclose(out.numpy().ravel(), direct_adain(ch, 2.0, 5.0), atol=1e-6)

    def test_batched_matches_unbatched(self):
        g = torch.randn(2, 3, 5, 5)
        gamma, beta = torch.randn(2, 3), torch.randn(2, 3)
        out = adain(g, gamma, beta)
        for n in range(2):
            assert torch.allclose(out[n], adain(g[n], gamma[n], beta[n]))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            adain(torch.randn(3, 4, 4), torch.ones(2), torch.zeros(3))


class TestAdaCW:
    def test_identity_is_bit_exact(self):
        g = torch.randn(5, 6, 6)
        assert torch.equal(adacw(g, torch.ones(5)), g)

    def test_zeroed_channel(self):
        g = torch.randn(3, 4, 4)
        out = adacw(g, torch.tensor([1.0, 0.0, 1.0]))
        assert torch.all(out[1] == 0) and torch.equal(out[0], g[0]) and torch.equal(out[2], g[2])

    def test_loop_oracle(self):
        rng = np.random.default_rng(2)
        g, cw = rng.normal(size=(3, 4, 5)), rng.normal(size=3)
        out = adacw(torch.tensor(g), torch.tensor(cw)).numpy()
        for j in range(3):
            for y in range(4):
                for x in range(5):
                    assert out[j, y, x] == g[j, y, x] * cw[j]

    def test_cw_weights_identity_init(self):
        pb = PersonalizationBlock(7, 6, cw_hidden=5)
        assert torch.equal(pb.channel_weights(torch.randn(6)), torch.ones(7))

    def test_cw_weights_loop_oracle(self):
        pb = PersonalizationBlock(3, 4, cw_hidden=5).double()
        with torch.no_grad():
            for p in pb.cw_mlp.parameters():
                p.normal_()
        w = torch.randn(4, dtype=torch.float64)
        W1, b1 = pb.cw_mlp[0].weight.detach().numpy(), pb.cw_mlp[0].bias.detach().numpy()
        W2, b2 = pb.cw_mlp[1].weight.detach().numpy(), pb.cw_mlp[1].bias.detach().numpy()
        wn = w.numpy()
        hidden = []
        for i in range(5):
            z = sum(W1[i, j] * wn[j] for j in range(4)) + b1[i]
            hidden.append(z if z > 0 else 0.2 * z)
        expected = [sum(W2[i, j] * hidden[j] for j in range(5)) + b2[i] for i in range(3)]
        np.testing.assert_allclose(pb.channel_weights(w).detach().numpy(), expected, atol=1e-6)

    def test_cw_output_length_every_stage(self):
        g = build_generator(GeneratorConfig(), codes4(), 0)
        w = torch.randn(64)
        for stage in g.synthesizer.values():
            if stage.pb is not None:
                assert stage.pb.channel_weights(w).shape == (stage.channels,)


class TestSynthesizer:
    def test_stage_and_pb_counts(self):
        for depth in (5, 9):
            g = build_generator(GeneratorConfig(depth=depth), codes4(), 0)
            assert len(g.stage_names) == 6 + depth
            assert g.pb_count() == len(g.stage_names) - 1
            assert g.synthesizer["d3"].pb is None

    def test_output_shape_and_range(self):
        g = build_generator(GeneratorConfig(), codes4(), 0)
        v, u = codes4().encode("c", "T2", "PD")
        with torch.no_grad():
            out = g(torch.rand(1, 1, 64, 64) * 2 - 1, v, u)
        assert out.shape == (1, 1, 64, 64)
        assert out.abs().max() <= 1

    def test_invalid_size(self):
        g = build_generator(tiny_config(), codes4(), 0)
        v, u = codes4().encode("a", "T1", "T2")
        with pytest.raises(ShapeError):
            g(torch.zeros(1, 1, 30, 30), v, u)

    def test_identity_pbs_match_plain_backbone(self):
        pers = build_generator(GeneratorConfig(), codes4(), 5)
        plain = build_generator(GeneratorConfig(personalized=False), codes4(), 6)
        plain_params = dict(plain.named_parameters())
        with torch.no_grad():
            for name, p in pers.named_parameters():
                if ".cb." in name:
                    plain_params[name].copy_(p)
        # freshly built PBs are identity: Q=0, b_gamma=1, b_beta=0, cw=1
        v, u = codes4().encode("a", "T1", "T2")
        x = torch.rand(1, 1, 64, 64) * 2 - 1
        with torch.no_grad():
            assert torch.allclose(pers(x, v, u), plain(x), atol=1e-6)

    def test_determinism(self):
        a = build_generator(GeneratorConfig(), codes4(), 3)
        b = build_generator(GeneratorConfig(), codes4(), 3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_site_code_changes_trained_output(self):
        torch.manual_seed(0)
        codes = ConditionCodes(["a", "b"])
        g = build_generator(tiny_config(), codes, 0)
        opt = torch.optim.Adam(g.parameters(), 1e-2)
        x = torch.rand(1, 1, 32, 32) * 2 - 1
        targets = {"a": x.clone(), "b": -x.clone()}
        for step in range(50):
            for site, tgt in targets.items():
                v, u = codes.encode(site, "T1", "T2")
                loss = (g(x, v, u) - tgt).abs().mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
        with torch.no_grad():
            ya = g(x, *codes.encode("a", "T1", "T2"))
            yb = g(x, *codes.encode("b", "T1", "T2"))
        assert (ya - yb).abs().mean() > 0.1

    def test_tags(self):
        g = build_generator(GeneratorConfig(split_stage="r3"), codes4(), 0)
        tags = g.param_tags()
        assert tags["mapper.layers.0.weight"] == "mapper"
        assert tags["synthesizer.r3.cb.conv1.weight"] == "upstream"
        assert tags["synthesizer.r4.cb.conv1.weight"] == "downstream"
        assert tags["synthesizer.r4.pb.q_gamma"] == "pb"

    def test_tags_agree_with_partition(self):
        from pflsynth.generator import module_tree

        g = build_generator(GeneratorConfig(split_stage="r3"), codes4(), 0)
        tree = module_tree(g, g.param_tags())
        local, shared = partition(tree, "r3")
        assert local.tags == tree.select({"upstream", "pb"}).tags
        assert shared.tags == tree.select({"downstream", "mapper"}).tags
        assert count_params(shared) < count_params(tree)

    def test_invalid_split(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(depth=5, split_stage="r6")

    def test_no_mapper_latent_is_codes(self):
        codes = codes4()
        g = build_generator(GeneratorConfig(use_mapper=False), codes, 0)
        assert g.mapper is None and g.latent_dim == 12
        assert g.synthesizer["e1"].pb.q_gamma.shape == (16, 12)

    def test_ablated_site_index(self):
        codes = codes4()
        g = build_generator(GeneratorConfig(use_site_index=False), codes, 0)
        assert g.mapper.in_dim == 8
        wa = g.latent(*codes.encode("a", "T1", "T2"))
        wb = g.latent(*codes.encode("b", "T1", "T2"))
        assert torch.equal(wa, wb)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 2**16))
def test_adain_property(channels, size, seed):
    gen = torch.Generator().manual_seed(seed)
    g = torch.randn(channels, size, size, generator=gen, dtype=torch.float64) * 4
    out = adain(g, torch.ones(channels, dtype=torch.float64), torch.zeros(channels, dtype=torch.float64))
    sigma = g.std(dim=(1, 2), unbiased=False)
    assert out.mean(dim=(1, 2)).abs().max() < 1e-5
    ratio = out.std(dim=(1, 2), unbiased=False) / (sigma / (sigma + EPS))
    assert torch.all((ratio - 1).abs() < 1e-3)
