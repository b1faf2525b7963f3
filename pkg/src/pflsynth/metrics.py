"""Image-quality metrics, activation-map similarity and parameter accounting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d
from scipy.stats import rankdata

from .errors import ShapeError
from .params import count_params

DATA_RANGE = 2.0
PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(x_hat, x, data_range=DATA_RANGE) -> float:
    """PSNR in dB; identical images return ``PSNR_CAP``."""
    a, b = _pair(x_hat, x)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")
    return out[half:-half or None, half:-half or None]


def ssim_map(x_hat, x, data_range=DATA_RANGE) -> np.ndarray:
    a, b = _pair(x_hat, x)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(x_hat, x, data_range=DATA_RANGE) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), valid positions only."""
    return float(np.mean(ssim_map(x_hat, x, data_range)))


def spearman(a, b) -> float:
    """Rank correlation with average ranks for ties."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeError(f"activation maps differ in size: {a.size} vs {b.size}")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        return 1.0 if np.array_equal(ra, rb) else 0.0
    return float(ra @ rb) / den


@dataclass
class SimilarityProfile:
    stages: list
    mean: list
    std: list
    n_pairs: int
    n_probes: int

    def to_dict(self):
        return asdict(self)


def activation_similarity(extractors, probes, stages) -> SimilarityProfile:
    """Cross-site Spearman similarity of stage activations.

    ``extractors`` holds one callable per site mapping ``(x_s, config)`` to the list
    of stage activation arrays; ``stages`` names those entries.
    """
    if len(extractors) < 2:
        raise ValueError("activation similarity needs at least two sites")
    per_stage = [[] for _ in stages]
    for x_s, config in probes:
        acts = [fn(x_s, config) for fn in extractors]
        for a in acts:
            if len(a) != len(stages):
                raise ShapeError(f"extractor returned {len(a)} stages, expected {len(stages)}")
        for i in range(len(acts)):
            for j in range(i + 1, len(acts)):
                for s in range(len(stages)):
                    per_stage[s].append(spearman(acts[i][s], acts[j][s]))
    n_pairs = len(extractors) * (len(extractors) - 1) // 2
    return SimilarityProfile(
        list(stages),
        [float(np.mean(v)) for v in per_stage],
        [float(np.std(v)) for v in per_stage],
        n_pairs,
        len(probes),
    )


def site_extractor(site):
    """Activation extractor over the site's PB stages (all but the final block)."""
    import torch

    def extract(x_s, config):
        v, u = site.config_codes(config)
        with torch.no_grad():
            site.generator.eval()
            x = torch.as_tensor(np.asarray(x_s, dtype=np.float32))[None, None]
            _, acts = site.generator(x, v, u, collect=True)
        return [a[0].numpy() for a in acts[:-1]]

    return extract


def accounting(site, ledger=None) -> dict:
    """Per-site complexity (generator + one discriminator) and per-round communication."""
    comp = count_params(site.generator_tree()) + sum(p.numel() for p in site.discriminators[0].parameters())
    comm = count_params(site.shared_tree())
    out = {"comp": comp, "comm": comm}
    if ledger is not None:
        ups = {r["params_up"] for r in ledger.rows(site=site.name)}
        out["ledger_upload"] = sorted(ups)
    return out


# -- reporting -----------------------------------------------------------------


@dataclass
class MetricRecord:
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    n: int

    def to_dict(self):
        return asdict(self)


def task_name(config) -> str:
    return f"{config[0]}->{config[1]}"


def evaluate_site(predict, dataset, split="test", configs=None):
    """Rows ``(site, task, subject, psnr, ssim)`` for one site; ``predict(x_s, c)``."""
    rows = []
    for p in dataset.split(split):
        if configs is not None and p.config_index not in configs:
            continue
        x_hat = predict(p.x_s, p.config_index)
        rows.append({
            "site": dataset.profile.name,
            "task": task_name(dataset.configs[p.config_index]),
            "subject": int(p.map_index),
            "psnr": psnr(x_hat, p.x_t),
            "ssim": ssim(x_hat, p.x_t),
        })
    return rows


def summarize(rows) -> dict:
    """``{(site, task): MetricRecord}`` with SSIM in percent."""
    groups = {}
    for r in rows:
        groups.setdefault((r["site"], r["task"]), []).append(r)
    out = {}
    for key, rs in groups.items():
        p = np.array([r["psnr"] for r in rs])
        s = np.array([r["ssim"] for r in rs]) * 100
        out[key] = MetricRecord(float(p.mean()), float(p.std()), float(s.mean()), float(s.std()), len(rs))
    return out


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "task", "subject", "psnr", "ssim"])
        for r in rows:
            w.writerow([r["site"], r["task"], r["subject"], repr(r["psnr"]), repr(r["ssim"])])


def write_summary_json(summary, path, extra=None):
    body = {
        "cells": [
            {"site": site, "task": task, **rec.to_dict(), "fid": "n/a"}
            for (site, task), rec in summary.items()
        ]
    }
    if extra:
        body.update(extra)
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
