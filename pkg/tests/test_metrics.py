import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pflsynth.errors import ShapeError
from pflsynth.federation import Federation, FederationConfig, TrainConfig
from pflsynth.generator import ConditionCodes, GeneratorConfig, build_generator
from pflsynth.metrics import (
    PSNR_CAP,
    accounting,
    activation_similarity,
    evaluate_site,
    gaussian_window,
    psnr,
    site_extractor,
    spearman,
    ssim,
    summarize,
    write_metrics_csv,
    write_summary_json,
)
from pflsynth.phantom import build_sites


def loop_psnr(a, b):
    total = 0.0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        total += (float(x) - float(y)) ** 2
    return 10 * math.log10(4.0 / (total / np.size(a)))


def loop_ssim(a, b, size=11, sigma=1.5):
    """Direct sliding-window SSIM over every window that fits entirely in the image."""
    r = [i - (size - 1) / 2 for i in range(size)]
    g1 = [math.exp(-(v * v) / (2 * sigma * sigma)) for v in r]
    norm = sum(g1)
    g1 = [v / norm for v in g1]
    c1, c2 = (0.01 * 2) ** 2, (0.03 * 2) ** 2
    H, W = a.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for di in range(size):
                for dj in range(size):
                    w = g1[di] * g1[dj]
                    x, y = float(a[i + di, j + dj]), float(b[i + di, j + dj])
                    ma += w * x
                    mb += w * y
                    saa += w * x * x
                    sbb += w * y * y
                    sab += w * x * y
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


class TestPSNR:
    def test_cap(self):
        x = np.random.default_rng(0).uniform(-1, 1, (16, 16))
        assert psnr(x, x) == PSNR_CAP == 99.0

    def test_constant_offset(self):
        x = np.zeros((8, 8))
        assert psnr(x + 0.2, x) == pytest.approx(20.0, abs=1e-12)

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a, b = rng.uniform(-1, 1, (2, 12, 12))
            assert psnr(a, b) == pytest.approx(loop_psnr(a, b), abs=1e-9)

    def test_affine_invariance(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(-1, 1, (2, 10, 10))
        assert psnr(3 * a + 1, 3 * b + 1, data_range=6.0) == pytest.approx(psnr(a, b), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSSIM:
    def test_identity_exact(self):
        x = np.random.default_rng(0).uniform(-1, 1, (32, 32))
        assert ssim(x, x) == 1.0

    def test_negated_structure(self):
        # a fine checkerboard keeps every local Gaussian mean near zero;
        # smooth patterns with nonzero local means give a positive product instead
        yy, xx = np.mgrid[0:32, 0:32]
        x = 0.5 * (-1.0) ** (yy + xx)
        assert ssim(x, -x) < 0

    def test_window_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-1, 1, (16, 16))
        b = np.clip(a + rng.normal(0, 0.3, a.shape), -1, 1)
        assert ssim(a, b) == pytest.approx(loop_ssim(a, b), abs=1e-6)

    def test_window_normalised(self):
        assert gaussian_window().sum() == pytest.approx(1.0, abs=1e-15)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestSpearman:
    def test_monotone_invariance(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 200))
        assert spearman(a**3 + a, b) == pytest.approx(spearman(a, b), abs=1e-12)
        assert spearman(a, a) == pytest.approx(1.0)
        assert spearman(a, -a) == pytest.approx(-1.0)

    def test_ties_average_ranks(self):
        # ranks of [1, 1, 2] are [1.5, 1.5, 3]; Pearson with [1, 2, 3]
        a, b = np.array([1.0, 1.0, 2.0]), np.array([1.0, 2.0, 3.0])
        ra, rb = np.array([1.5, 1.5, 3.0]), np.array([1.0, 2.0, 3.0])
        expected = np.corrcoef(ra, rb)[0, 1]
        assert spearman(a, b) == pytest.approx(expected, abs=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            spearman(np.zeros(3), np.zeros(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.integers(5, 60))
def test_spearman_bounded_and_monotone_invariant(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, n))
    r = spearman(a, b)
    assert -1 - 1e-12 <= r <= 1 + 1e-12
    assert spearman(np.exp(a), b) == pytest.approx(r, abs=1e-12)


class FakeSite:
    def __init__(self, generator, codes, name="a"):
        self.generator = generator
        self.codes = codes
        self.name = name

    def config_codes(self, config):
        return self.codes.encode(self.name, *config)


class TestSimilarity:
    def setup_method(self):
        self.codes = ConditionCodes(["a"])
        rng = np.random.default_rng(0)
        ds = build_sites(n_sites=1, size=32, n_maps=6)[0]
        self.probes = [(ds.pairs[i].x_s, ("T1", "T2")) for i in rng.choice(len(ds.pairs), 6, replace=False)]
        self.cfg = GeneratorConfig(widths=(4, 8, 8), depth=2, split_stage="r1")

    def test_identical_models(self):
        g = build_generator(self.cfg, self.codes, 0)
        ex = [site_extractor(FakeSite(g, self.codes)), site_extractor(FakeSite(g, self.codes))]
        prof = activation_similarity(ex, self.probes, build_generator(self.cfg, self.codes, 0).stage_names[:-1])
        assert len(prof.mean) == len(g.stage_names) - 1
        assert all(abs(m - 1.0) < 1e-9 for m in prof.mean)

    def test_random_models_uncorrelated(self):
        means = []
        stages = None
        for k in range(10):
            ga = build_generator(self.cfg, self.codes, 100 + 2 * k)
            gb = build_generator(self.cfg, self.codes, 101 + 2 * k)
            stages = ga.stage_names[:-1]
            ex = [site_extractor(FakeSite(ga, self.codes)), site_extractor(FakeSite(gb, self.codes))]
            means.append(activation_similarity(ex, self.probes, stages).mean)
        # mean over 10 model pairs x 6 probes = 60 probe-level correlations per stage
        assert all(abs(m) < 0.1 for m in np.mean(means, axis=0))

    def test_stage_mismatch_and_min_sites(self):
        g = build_generator(self.cfg, self.codes, 0)
        ex = site_extractor(FakeSite(g, self.codes))
        with pytest.raises(ShapeError):
            activation_similarity([ex, ex], self.probes[:1], ["e1"])
        with pytest.raises(ValueError):
            activation_similarity([ex], self.probes, ["e1"])


class TestAccounting:
    def _fed(self, split):
        cfg = FederationConfig(GeneratorConfig(widths=(4, 6, 8), depth=2, latent_dim=8, mapper_layers=2,
                                               cw_hidden=8, split_stage=split), TrainConfig(rounds=1))
        return Federation(build_sites(n_sites=2, size=32, n_maps=6), cfg)

    def test_comm_below_comp_and_matches_ledger(self):
        fed = self._fed("r1").run()
        for site in fed.sites.values():
            acc = accounting(site, fed.ledger)
            assert acc["comm"] < acc["comp"]
            assert acc["ledger_upload"] == [acc["comm"]]

    def test_last_stage_split_is_mapper_only(self):
        fed = self._fed("d3")
        site = fed.sites["ixi"]
        mapper = sum(p.numel() for p in site.generator.mapper.parameters())
        assert accounting(site)["comm"] == mapper

    def test_comm_independent_of_training(self):
        fed = self._fed("r1")
        before = accounting(fed.sites["ixi"])["comm"]
        fed.run()
        assert accounting(fed.sites["ixi"])["comm"] == before


class TestReporting:
    def test_rows_and_summary(self, tmp_path):
        ds = build_sites(n_sites=1, size=32, n_maps=6, setup="variable")[0]
        rows = evaluate_site(lambda x, c: x, ds, "test")
        assert len(rows) == len(ds.splits["test"])
        summary = summarize(rows)
        assert set(summary) == {("ixi", "T1->T2"), ("ixi", "T2->PD")}
        rec = summary[("ixi", "T1->T2")]
        ps = [r["psnr"] for r in rows if r["task"] == "T1->T2"]
        assert rec.psnr_mean == pytest.approx(np.mean(ps)) and rec.n == len(ps)
        write_metrics_csv(rows, tmp_path / "m.csv")
        write_summary_json(summary, tmp_path / "s.json")
        text = (tmp_path / "s.json").read_text()
        assert '"fid": "n/a"' in text
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == "site,task,subject,psnr,ssim"
