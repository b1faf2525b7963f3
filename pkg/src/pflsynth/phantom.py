"""Synthetic multi-site, multi-contrast paired phantoms.

Each subject is an elliptical head phantom with a label grid over
{background, csf, gray, white, lesion}. A site renders contrasts through its own
intensity curves, noise level and smooth bias field, so sites differ the way
scanners/protocols do while sharing anatomy statistics.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .generator import CONTRASTS
from .params import decode_tensor, encode_tensor

BACKGROUND, CSF, GRAY, WHITE, LESION = range(5)
LABELS = ("background", "csf", "gray", "white", "lesion")
MIN_SIZE = 32

# intensity per label (background, csf, gray, white, lesion); T1 and T2 invert gray/white
BASE_CURVES = {
    "T1": (0.0, 0.15, 0.50, 0.80, 0.35),
    "T2": (0.0, 0.95, 0.60, 0.35, 0.85),
    "PD": (0.0, 0.75, 0.70, 0.55, 0.80),
    "FLAIR": (0.0, 0.10, 0.55, 0.40, 0.95),
}


@dataclass(frozen=True)
class TissueMap:
    labels: np.ndarray
    seed: int

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True)
class SiteProfile:
    site_id: int
    name: str
    contrast_curves: dict
    noise_sigma: float = 0.02
    bias_field_strength: float = 0.1
    pathology_enabled: bool = False

    def curve(self, contrast) -> np.ndarray:
        if contrast not in self.contrast_curves:
            raise ConfigError(f"unknown contrast {contrast!r}; site has {sorted(self.contrast_curves)}")
        return np.asarray(self.contrast_curves[contrast], dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contrast_curves"] = {k: list(v) for k, v in self.contrast_curves.items()}
        return d

    @classmethod
    def from_dict(cls, d) -> "SiteProfile":
        d = dict(d)
        d["contrast_curves"] = {k: tuple(v) for k, v in d["contrast_curves"].items()}
        return cls(**d)


@dataclass(frozen=True)
class Pair:
    x_s: np.ndarray
    x_t: np.ndarray
    config_index: int
    map_index: int


@dataclass
class SiteDataset:
    profile: SiteProfile
    configs: list
    pairs: list
    splits: dict
    map_seeds: list
    seed: int
    size: int
    extra: dict = field(default_factory=dict)

    def split(self, name) -> list[Pair]:
        return [self.pairs[i] for i in self.splits[name]]

    @property
    def n_train(self) -> int:
        return len(self.splits["train"])

    def map_split(self, name) -> list[int]:
        return sorted({self.pairs[i].map_index for i in self.splits[name]})


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _ellipse(yy, xx, cy, cx, ry, rx, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v


def generate_tissue_map(seed: int, H: int, W: int, pathology_enabled: bool) -> TissueMap:
    if H < MIN_SIZE or W < MIN_SIZE:
        raise ConfigError(f"phantom needs H, W >= {MIN_SIZE}, got {(H, W)}")
    rng = _rng(7919, seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    yy = yy / (H - 1) * 2 - 1
    xx = xx / (W - 1) * 2 - 1
    cy, cx = rng.uniform(-0.06, 0.06, 2)
    ry, rx = rng.uniform(0.78, 0.9), rng.uniform(0.62, 0.76)
    theta = rng.uniform(-0.25, 0.25)
    r_head = _ellipse(yy, xx, cy, cx, ry, rx, theta)

    # folded gray/white boundary: modulate the radius with a few angular harmonics
    ang = np.arctan2(yy - cy, xx - cx)
    wobble = np.zeros_like(ang)
    for k in rng.integers(5, 11, size=3):
        wobble += rng.uniform(0.03, 0.07) * np.sin(k * ang + rng.uniform(0, 2 * np.pi))
    r = np.sqrt(r_head)
    labels = np.full((H, W), BACKGROUND, dtype=np.int64)
    labels[r < 1.0] = CSF
    labels[r < rng.uniform(0.86, 0.92)] = GRAY
    labels[r < rng.uniform(0.55, 0.68) + wobble] = WHITE

    # deep gray nuclei and ventricles
    for sign in (-1, 1):
        nuc = _ellipse(yy, xx, cy + rng.uniform(-0.05, 0.1), cx + sign * rng.uniform(0.18, 0.26),
                       rng.uniform(0.08, 0.13), rng.uniform(0.05, 0.09), rng.uniform(-0.5, 0.5))
        labels[nuc < 1] = GRAY
        ven = _ellipse(yy, xx, cy + rng.uniform(-0.2, -0.05), cx + sign * rng.uniform(0.05, 0.12),
                       rng.uniform(0.12, 0.22), rng.uniform(0.03, 0.06), sign * rng.uniform(0.1, 0.4))
        labels[ven < 1] = CSF

    if pathology_enabled:
        inside = np.argwhere(labels == WHITE)
        cyx = inside[rng.integers(len(inside))]
        ly = cyx[0] / (H - 1) * 2 - 1
        lx = cyx[1] / (W - 1) * 2 - 1
        rl = rng.uniform(0.15, 0.24)
        blob = _ellipse(yy, xx, ly, lx, rl, rl * rng.uniform(0.7, 1.3), rng.uniform(0, np.pi))
        labels[(blob < 1) & (labels != BACKGROUND)] = LESION
    return TissueMap(labels, int(seed))


def bias_field(H, W, strength, rng) -> np.ndarray:
    """Smooth multiplicative field ``1 + strength * f`` with ``|f| <= 1``."""
    if strength == 0:
        return np.ones((H, W))
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    yy = yy / (H - 1) * 2 - 1
    xx = xx / (W - 1) * 2 - 1
    a = rng.uniform(-1, 1, 5)
    f = a[0] * xx + a[1] * yy + a[2] * xx * yy + a[3] * (xx**2 - 0.5) + a[4] * (yy**2 - 0.5)
    f = f / max(np.abs(f).max(), 1e-12)
    return 1.0 + strength * f


def render_contrast(tmap: TissueMap, contrast: str, profile: SiteProfile, rng) -> np.ndarray:
    """Render one contrast in [-1, 1] as float32."""
    curve = profile.curve(contrast)
    H, W = tmap.shape
    img = curve[tmap.labels] * bias_field(H, W, profile.bias_field_strength, rng)
    if profile.noise_sigma > 0:
        img = img + rng.normal(0.0, profile.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (2.0 * img - 1.0).astype(np.float32)


def _site_curves(site_id: int, contrasts) -> dict:
    # deterministic per-site gain/gamma warp of the base curves
    rng = _rng(104729, site_id)
    curves = {}
    for c in contrasts:
        base = np.asarray(BASE_CURVES[c])
        gamma = rng.uniform(0.7, 1.4)
        gain = rng.uniform(0.85, 1.0)
        warped = gain * base ** gamma
        warped[BACKGROUND] = 0.0
        curves[c] = tuple(float(round(x, 4)) for x in warped)
    return curves


# name, pathology, available contrasts, relative training size
SITE_TEMPLATES = (
    ("ixi", False, ("T1", "T2", "PD"), 2780, 0.015, 0.05),
    ("brats", True, ("T1", "T2", "FLAIR"), 2500, 0.025, 0.15),
    ("midas", False, ("T1", "T2"), 3874, 0.02, 0.10),
    ("oasis", True, ("T1", "T2", "FLAIR"), 2780, 0.03, 0.20),
)

COMMON_TASKS = {name: [("T1", "T2")] for name, *_ in SITE_TEMPLATES}
VARIABLE_TASKS = {
    "ixi": [("T1", "T2"), ("T2", "PD")],
    "brats": [("T1", "T2"), ("FLAIR", "T2")],
    "midas": [("T1", "T2"), ("T2", "T1")],
    "oasis": [("T1", "T2"), ("T2", "FLAIR")],
}


def default_profiles(n_sites: int = 4) -> list[SiteProfile]:
    if not 1 <= n_sites <= len(SITE_TEMPLATES):
        raise ConfigError(f"between 1 and {len(SITE_TEMPLATES)} template sites available")
    out = []
    for i, (name, patho, contrasts, _, sigma, bias) in enumerate(SITE_TEMPLATES[:n_sites]):
        out.append(SiteProfile(i, name, _site_curves(i, contrasts), sigma, bias, patho))
    return out


def default_map_counts(n_maps: int, n_sites: int = 4) -> list[int]:
    """Per-site subject counts keeping the templates' relative training sizes."""
    sizes = [t[3] for t in SITE_TEMPLATES[:n_sites]]
    return [max(6, int(round(n_maps * s / sizes[0]))) for s in sizes]


def _split_counts(n_maps, fractions):
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError(f"split fractions must be 3 positive values summing to 1: {fractions}")
    n_val = max(1, int(round(fractions[1] * n_maps)))
    n_test = max(1, int(round(fractions[2] * n_maps)))
    return n_maps - n_val - n_test, n_val, n_test


def make_site_dataset(profile: SiteProfile, configs, n_maps: int, split_fractions=(0.6, 0.2, 0.2),
                      seed: int = 0, size: int = 64) -> SiteDataset:
    configs = [tuple(c) for c in configs]
    if not configs:
        raise ConfigError("a site needs at least one source-target configuration")
    if n_maps < 6:
        raise ConfigError("n_maps must be >= 6")
    for s, t in configs:
        if s == t:
            raise ConfigError(f"identity configuration {s}->{t}")
        profile.curve(s)
        profile.curve(t)
    n_train, n_val, _ = _split_counts(n_maps, split_fractions)

    rng = _rng(seed, profile.site_id, 1)
    map_seeds = [int(x) for x in rng.choice(2**31 - 1, size=n_maps, replace=False)]
    order = rng.permutation(n_maps)
    split_of = {}
    for rank, m in enumerate(order):
        split_of[int(m)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    needed = sorted({c for cfg in configs for c in cfg}, key=CONTRASTS.index)
    pairs, splits = [], {"train": [], "val": [], "test": []}
    for m, mseed in enumerate(map_seeds):
        tmap = generate_tissue_map(mseed, size, size, profile.pathology_enabled)
        images = {
            c: render_contrast(tmap, c, profile, _rng(seed, profile.site_id, mseed, CONTRASTS.index(c)))
            for c in needed
        }
        for ci, (s, t) in enumerate(configs):
            splits[split_of[m]].append(len(pairs))
            pairs.append(Pair(images[s], images[t], ci, m))
    return SiteDataset(profile, configs, pairs, splits, map_seeds, int(seed), int(size))


def sample_batch(dataset: SiteDataset, rng: np.random.Generator):
    """One uniformly drawn training item ``(x_s, x_t, config_index)``."""
    train = dataset.splits["train"]
    if not train:
        raise DataError(f"site {dataset.profile.name} has an empty training split")
    pair = dataset.pairs[train[int(rng.integers(len(train)))]]
    return pair.x_s, pair.x_t, pair.config_index


def build_sites(n_sites=4, size=64, n_maps=20, setup="common", seed=0, tasks=None,
                split_fractions=(0.6, 0.2, 0.2)) -> list[SiteDataset]:
    profiles = default_profiles(n_sites)
    if tasks is None:
        table = {"common": COMMON_TASKS, "variable": VARIABLE_TASKS}.get(setup)
        if table is None:
            raise ConfigError(f"unknown task setup {setup!r}")
        tasks = {p.name: table[p.name] for p in profiles}
    counts = default_map_counts(n_maps, n_sites)
    return [
        make_site_dataset(p, tasks[p.name], counts[i], split_fractions, seed, size)
        for i, p in enumerate(profiles)
    ]


# -- persistence -----------------------------------------------------------


def save_dataset(ds: SiteDataset, directory) -> Path:
    d = Path(directory)
    (d / "pairs").mkdir(parents=True, exist_ok=True)
    meta = {
        "profile": ds.profile.to_dict(),
        "configs": [list(c) for c in ds.configs],
        "map_seeds": ds.map_seeds,
        "seed": ds.seed,
        "size": ds.size,
        "splits": ds.splits,
        "pairs": [{"config_index": p.config_index, "map_index": p.map_index} for p in ds.pairs],
    }
    (d / "metadata.json").write_text(json.dumps(meta, indent=1))
    for i, p in enumerate(ds.pairs):
        (d / "pairs" / f"{i:05d}.tensor").write_bytes(encode_tensor(np.stack([p.x_s, p.x_t])))
    return d


def load_dataset(directory) -> SiteDataset:
    d = Path(directory)
    try:
        meta = json.loads((d / "metadata.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no metadata.json in {d}") from exc
    pairs = []
    for i, info in enumerate(meta["pairs"]):
        stack = decode_tensor((d / "pairs" / f"{i:05d}.tensor").read_bytes())
        pairs.append(Pair(stack[0], stack[1], info["config_index"], info["map_index"]))
    return SiteDataset(
        SiteProfile.from_dict(meta["profile"]),
        [tuple(c) for c in meta["configs"]],
        pairs,
        {k: list(v) for k, v in meta["splits"].items()},
        meta["map_seeds"],
        meta["seed"],
        meta["size"],
    )
