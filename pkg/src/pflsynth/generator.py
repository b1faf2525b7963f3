"""Personalized generator: mapper MLP, personalization blocks and synthesizer.

Parameter paths are ``mapper.*`` and ``synthesizer.<stage>.{cb,pb}.*`` where
``<stage>`` is one of ``e1..e3, r1..rN, d1..d3``. Tags are fixed at construction
from the configured split stage.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError
from .params import ParameterTree, stage_key

CONTRASTS = ("T1", "T2", "PD", "FLAIR")
LEAK = 0.2
EPS = 1e-5


# -- condition codes -----------------------------------------------------------


class ConditionCodes:
    """One-hot layout for site index ``v`` and source/target index ``u``.

    ``n_site_slots`` and ``n_contrast_slots`` include the spare digits; sites and
    contrasts claim digits in registration order. ``u`` has length
    ``2 * n_contrast_slots`` (source half, then target half).
    """

    def __init__(self, sites, contrasts=CONTRASTS, spare_sites=0, spare_contrasts=0):
        sites = list(sites)
        contrasts = list(contrasts)
        if len(set(sites)) != len(sites) or len(set(contrasts)) != len(contrasts):
            raise ConfigError("duplicate site or contrast names")
        self.n_site_slots = len(sites) + int(spare_sites)
        self.n_contrast_slots = len(contrasts) + int(spare_contrasts)
        self.site_digits = {s: i for i, s in enumerate(sites)}
        self.contrast_digits = {c: i for i, c in enumerate(contrasts)}

    @property
    def input_dim(self) -> int:
        return self.n_site_slots + 2 * self.n_contrast_slots

    def add_site(self, site) -> int:
        if site in self.site_digits:
            return self.site_digits[site]
        if len(self.site_digits) >= self.n_site_slots:
            raise ConfigError("no spare site digits left")
        self.site_digits[site] = len(self.site_digits)
        return self.site_digits[site]

    def add_contrast(self, name) -> int:
        if name in self.contrast_digits:
            return self.contrast_digits[name]
        if len(self.contrast_digits) >= self.n_contrast_slots:
            raise ConfigError("no spare contrast digits left")
        self.contrast_digits[name] = len(self.contrast_digits)
        return self.contrast_digits[name]

    def site_vector(self, site) -> np.ndarray:
        if site not in self.site_digits:
            raise ConfigError(f"site {site!r} has no code digit")
        v = np.zeros(self.n_site_slots, dtype=np.float32)
        v[self.site_digits[site]] = 1.0
        return v

    def task_vector(self, source, target) -> np.ndarray:
        for name in (source, target):
            if name not in self.contrast_digits:
                raise ConfigError(f"contrast {name!r} has no code digit")
        u = np.zeros(2 * self.n_contrast_slots, dtype=np.float32)
        u[self.contrast_digits[source]] = 1.0
        u[self.n_contrast_slots + self.contrast_digits[target]] = 1.0
        return u

    def encode(self, site, source, target) -> tuple[torch.Tensor, torch.Tensor]:
        return (
            torch.from_numpy(self.site_vector(site)),
            torch.from_numpy(self.task_vector(source, target)),
        )

    def to_dict(self) -> dict:
        return {
            "n_site_slots": self.n_site_slots,
            "n_contrast_slots": self.n_contrast_slots,
            "site_digits": {str(k): v for k, v in self.site_digits.items()},
            "contrast_digits": dict(self.contrast_digits),
        }


# -- functional personalization ops --------------------------------------------


def pb_affine(w, q_gamma, b_gamma, q_beta, b_beta):
    """``gamma = Q_gamma w + b_gamma``, ``beta = Q_beta w + b_beta``. ``w`` is (J,) or (N, J)."""
    if q_gamma.shape != q_beta.shape or q_gamma.shape[1] != w.shape[-1]:
        raise ShapeError(f"projection {tuple(q_gamma.shape)} incompatible with latent {tuple(w.shape)}")
    if b_gamma.shape[-1] != q_gamma.shape[0] or b_beta.shape[-1] != q_beta.shape[0]:
        raise ShapeError("bias length does not match projection rows")
    return F.linear(w, q_gamma, b_gamma), F.linear(w, q_beta, b_beta)


def _per_channel(vec, g):
    """Broadcast a (F,) or (N, F) vector against (N, F, H, W) or (F, H, W)."""
    if g.dim() == 3:
        if vec.dim() != 1:
            raise ShapeError("unbatched feature map needs a 1-D channel vector")
        return vec[:, None, None]
    if vec.dim() == 1:
        return vec[None, :, None, None]
    return vec[:, :, None, None]


def _check_channels(vec, g, name):
    channels = g.shape[-3]
    if vec.shape[-1] != channels:
        raise ShapeError(f"{name} has length {vec.shape[-1]}, feature map has {channels} channels")


def instance_stats(g, eps: float = EPS):
    """Per-channel spatial mean and ``sigma + eps`` (population standard deviation)."""
    mu = g.mean(dim=(-2, -1), keepdim=True)
    var = ((g - mu) ** 2).mean(dim=(-2, -1), keepdim=True)
    # clamp keeps sqrt differentiable on constant channels
    sigma = torch.sqrt(var.clamp_min(1e-24))
    return mu, sigma + eps


def adain(g, gamma, beta, eps: float = EPS):
    """Per-channel ``gamma * (g - mu) / (sigma + eps) + beta`` over spatial dims."""
    _check_channels(gamma, g, "gamma")
    _check_channels(beta, g, "beta")
    mu, denom = instance_stats(g, eps)
    return _per_channel(gamma, g) * ((g - mu) / denom) + _per_channel(beta, g)


def instance_norm(g, eps: float = EPS):
    mu, denom = instance_stats(g, eps)
    return (g - mu) / denom


def adacw(g, cw):
    """Scale every channel ``j`` of ``g`` by the scalar ``cw[j]``."""
    _check_channels(cw, g, "cw")
    return g * _per_channel(cw, g)


# -- modules -------------------------------------------------------------------


def _mlp_forward(layers, x):
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = F.leaky_relu(x, LEAK)
    return x


class Mapper(nn.Module):
    """``L_M`` fully connected layers, leaky-ReLU between layers, linear output."""

    def __init__(self, in_dim: int, latent_dim: int, n_layers: int = 6):
        super().__init__()
        if n_layers < 1:
            raise ConfigError("mapper needs at least one layer")
        dims = [in_dim] + [latent_dim] * n_layers
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.in_dim = in_dim

    def forward(self, codes):
        if codes.shape[-1] != self.in_dim:
            raise ShapeError(f"mapper expects {self.in_dim} code digits, got {codes.shape[-1]}")
        return _mlp_forward(self.layers, codes)


class PersonalizationBlock(nn.Module):
    """AdaIN followed by AdaCW, both driven by the latent ``w``."""

    def __init__(self, channels, latent_dim, cw_hidden=64, use_adain=True, use_adacw=True):
        super().__init__()
        self.channels = channels
        self.use_adain = use_adain
        self.use_adacw = use_adacw
        if use_adain:
            self.q_gamma = nn.Parameter(torch.zeros(channels, latent_dim))
            self.b_gamma = nn.Parameter(torch.ones(channels))
            self.q_beta = nn.Parameter(torch.zeros(channels, latent_dim))
            self.b_beta = nn.Parameter(torch.zeros(channels))
        if use_adacw:
            hidden = nn.Linear(latent_dim, cw_hidden)
            out = nn.Linear(cw_hidden, channels)
            nn.init.zeros_(out.weight)
            nn.init.ones_(out.bias)
            self.cw_mlp = nn.ModuleList([hidden, out])

    def affine(self, w):
        return pb_affine(w, self.q_gamma, self.b_gamma, self.q_beta, self.b_beta)

    def channel_weights(self, w):
        if w.shape[-1] != self.cw_mlp[0].in_features:
            raise ShapeError(f"cw-MLP expects latent of size {self.cw_mlp[0].in_features}")
        return _mlp_forward(self.cw_mlp, w)

    def forward(self, g, w, eps=EPS):
        if self.use_adain:
            gamma, beta = self.affine(w)
            g = adain(g, gamma, beta, eps)
        if self.use_adacw:
            g = adacw(g, self.channel_weights(w))
        return g


class ConvBlock(nn.Module):
    """Convolution (or stride-2 transposed convolution) plus nonlinearity."""

    def __init__(self, cin, cout, kernel, stride=1, transposed=False, activation="lrelu"):
        super().__init__()
        if transposed:
            self.conv = nn.ConvTranspose2d(cin, cout, kernel, stride, padding=kernel // 2, output_padding=stride - 1)
        else:
            self.conv = nn.Conv2d(cin, cout, kernel, stride, padding=kernel // 2, padding_mode="reflect")
        self.activation = activation

    def forward(self, x):
        x = self.conv(x)
        if self.activation == "tanh":
            return torch.tanh(x)
        return F.leaky_relu(x, LEAK)


class ResidualBlock(nn.Module):
    def __init__(self, channels, kernel=3):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel, padding=kernel // 2, padding_mode="reflect")
        self.conv2 = nn.Conv2d(channels, channels, kernel, padding=kernel // 2, padding_mode="reflect")

    def forward(self, x):
        return F.leaky_relu(self.conv2(F.leaky_relu(self.conv1(x), LEAK)), LEAK)


class Stage(nn.Module):
    """One synthesizer stage: CB, then PB (or plain instance norm), optional skip."""

    def __init__(self, name, cb, channels, pb=None, plain_norm=False, residual=False):
        super().__init__()
        self.name = name
        self.cb = cb
        self.pb = pb
        self.channels = channels
        self.plain_norm = plain_norm
        self.residual = residual

    def forward(self, x, w):
        g = self.cb(x)
        if self.pb is not None:
            g = self.pb(g, w)
        elif self.plain_norm:
            g = instance_norm(g)
        return x + g if self.residual else g


@dataclass
class GeneratorConfig:
    in_channels: int = 1
    widths: tuple[int, int, int] = (16, 32, 64)
    depth: int = 5
    latent_dim: int = 64
    mapper_layers: int = 6
    cw_hidden: int = 64
    split_stage: str = "r3"
    personalized: bool = True
    use_mapper: bool = True
    use_adain: bool = True
    use_adacw: bool = True
    use_site_index: bool = True
    use_task_index: bool = True
    encoder_kernels: tuple[int, int, int] = (7, 3, 3)
    decoder_kernels: tuple[int, int, int] = (3, 3, 7)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.encoder_kernels = tuple(self.encoder_kernels)
        self.decoder_kernels = tuple(self.decoder_kernels)
        if self.depth < 1:
            raise ConfigError("bottleneck depth must be >= 1")
        if self.split_stage not in self.stage_names():
            raise ConfigError(f"split stage {self.split_stage!r} not in {self.stage_names()}")
        if self.personalized and not (self.use_adain or self.use_adacw):
            raise ConfigError("a personalized generator needs AdaIN or AdaCW")

    def stage_names(self) -> list[str]:
        return ["e1", "e2", "e3"] + [f"r{i}" for i in range(1, self.depth + 1)] + ["d1", "d2", "d3"]

    def to_dict(self) -> dict:
        return asdict(self)


class Generator(nn.Module):
    """Mapper + synthesizer. ``forward(x_s, v, u)`` returns the synthetic target."""

    def __init__(self, config: GeneratorConfig, codes: ConditionCodes):
        super().__init__()
        self.config = config
        self.code_dim = (codes.n_site_slots if config.use_site_index else 0) + (
            2 * codes.n_contrast_slots if config.use_task_index else 0
        )
        if config.personalized and self.code_dim == 0:
            raise ConfigError("both site and task index ablated: nothing to condition on")
        self.mapper = None
        latent = config.latent_dim
        if config.personalized and config.use_mapper:
            self.mapper = Mapper(self.code_dim, latent, config.mapper_layers)
        elif config.personalized:
            latent = self.code_dim
        self.latent_dim = latent if config.personalized else 0

        c1, c2, c3 = config.widths
        ek, dk = config.encoder_kernels, config.decoder_kernels
        specs = [
            ("e1", ConvBlock(config.in_channels, c1, ek[0]), c1, False),
            ("e2", ConvBlock(c1, c2, ek[1], stride=2), c2, False),
            ("e3", ConvBlock(c2, c3, ek[2], stride=2), c3, False),
        ]
        specs += [(f"r{i}", ResidualBlock(c3), c3, True) for i in range(1, config.depth + 1)]
        specs += [
            ("d1", ConvBlock(c3, c2, dk[0], stride=2, transposed=True), c2, False),
            ("d2", ConvBlock(c2, c1, dk[1], stride=2, transposed=True), c1, False),
            ("d3", ConvBlock(c1, config.in_channels, dk[2], activation="tanh"), config.in_channels, False),
        ]
        stages = {}
        for i, (name, cb, ch, residual) in enumerate(specs):
            final = i == len(specs) - 1
            pb = None
            if config.personalized and not final:
                pb = PersonalizationBlock(ch, latent, config.cw_hidden, config.use_adain, config.use_adacw)
            plain = (not config.personalized) and not final
            stages[name] = Stage(name, cb, ch, pb=pb, plain_norm=plain, residual=residual)
        self.synthesizer = nn.ModuleDict(stages)
        self.stage_names = list(stages)
        self.downsampling = 4

    # -- latent --------------------------------------------------------------

    def condition(self, v, u):
        parts = []
        if self.config.use_site_index:
            parts.append(v)
        if self.config.use_task_index:
            parts.append(u)
        codes = torch.cat(parts, dim=-1)
        if codes.shape[-1] != self.code_dim:
            raise ShapeError(f"generator expects {self.code_dim} code digits, got {codes.shape[-1]}")
        return codes

    def latent(self, v, u):
        if not self.config.personalized:
            return None
        codes = self.condition(v, u)
        return self.mapper(codes) if self.mapper is not None else codes

    # -- synthesis -------------------------------------------------------------

    def run_stages(self, x, w, start=None, stop=None, collect=False):
        """Run stages ``(start, stop]`` by name; ``start=None`` means from the input."""
        names = self.stage_names
        i0 = 0 if start is None else names.index(start) + 1
        i1 = len(names) if stop is None else names.index(stop) + 1
        acts = []
        for name in names[i0:i1]:
            x = self.synthesizer[name](x, w)
            if collect:
                acts.append(x)
        return (x, acts) if collect else x

    def forward(self, x_s, v=None, u=None, collect=False):
        if x_s.dim() == 3:
            x_s = x_s[None]
        h, wd = x_s.shape[-2:]
        if h % self.downsampling or wd % self.downsampling:
            raise ShapeError(f"spatial size {(h, wd)} not divisible by {self.downsampling}")
        w = self.latent(v, u) if self.config.personalized else None
        if w is not None and w.dim() == 1 and x_s.shape[0] > 1:
            w = w.expand(x_s.shape[0], -1)
        return self.run_stages(x_s, w, collect=collect)

    def pb_count(self) -> int:
        return sum(1 for s in self.synthesizer.values() if s.pb is not None)

    # -- tagging ---------------------------------------------------------------

    def param_tags(self) -> dict[str, str]:
        split = stage_key(self.config.split_stage)
        order = {n: stage_key(n) for n in self.stage_names}
        tags = {}
        for path, _ in self.named_parameters():
            if path.startswith("mapper."):
                tags[path] = "mapper"
                continue
            _, stage, part = path.split(".")[:3]
            if part == "pb":
                tags[path] = "pb"
            else:
                tags[path] = "upstream" if order[stage] <= split else "downstream"
        return tags


def build_generator(config: GeneratorConfig, codes: ConditionCodes, seed: int) -> Generator:
    """Construct deterministically from ``seed`` without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(config, codes)


def module_tree(module: nn.Module, tags: dict[str, str], prefix: str = "") -> ParameterTree:
    tensors = {prefix + p: t.detach().cpu().numpy() for p, t in module.named_parameters()}
    return ParameterTree(tensors, {prefix + p: tags[p] for p in tags})


def load_into(module: nn.Module, tree: ParameterTree, prefix: str = "") -> None:
    """Overwrite the parameters named in ``tree`` (a subset is fine)."""
    params = dict(module.named_parameters())
    with torch.no_grad():
        for path in tree:
            name = path[len(prefix):] if prefix and path.startswith(prefix) else path
            if name not in params:
                raise ConfigError(f"{path} is not a parameter of this model")
            target = params[name]
            value = torch.from_numpy(np.array(tree[path]))
            if tuple(value.shape) != tuple(target.shape):
                raise ShapeError(f"{path}: {tuple(value.shape)} vs {tuple(target.shape)}")
            target.copy_(value.to(target.dtype))
