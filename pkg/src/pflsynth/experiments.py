"""Declarative experiment harness: config files, single runs, paired matrices, plots.

A run directory is named ``<name>-<hash>`` where the hash covers the canonical
config JSON, so paired runs never overwrite each other.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import sys
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import ComparisonError, ConfigError, PFLSynthError
from .federation import FederationConfig, LateJoin, TrainConfig, run_federation, train_central
from .generator import GeneratorConfig
from .metrics import (
    accounting,
    activation_similarity,
    evaluate_site,
    site_extractor,
    summarize,
    task_name,
    write_metrics_csv,
    write_summary_json,
)
from .params import count_params, decode_tensor, encode_tensor, save_checkpoint
from .phantom import build_sites

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

ABLATIONS = ("no_adain", "no_adacw", "no_pna", "no_mapper", "no_site_index", "no_task_index")
FEDERATED_MODES = ("pflsynth", "fedgan", *ABLATIONS, "late_join")
MODES = (*FEDERATED_MODES, "central")

_GEN_FLAGS = {
    "no_adain": {"use_adain": False},
    "no_adacw": {"use_adacw": False},
    "no_mapper": {"use_mapper": False},
    "no_site_index": {"use_site_index": False},
    "no_task_index": {"use_task_index": False},
}
PNA_TAGS = ("downstream", "mapper")
FULL_CB_TAGS = ("upstream", "downstream", "mapper")


@dataclass
class DataSpec:
    n_sites: int = 4
    size: int = 64
    n_maps: int = 20
    setup: str = "common"
    seed: int = 0
    tasks: dict | None = None
    split_fractions: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        self.split_fractions = tuple(self.split_fractions)
        if self.tasks is not None:
            self.tasks = {s: [tuple(c) for c in cfgs] for s, cfgs in self.tasks.items()}


@dataclass
class ModelSpec:
    latent_dim: int = 64
    widths: tuple = (16, 32, 64)
    depth: int = 5
    split_stage: str = "r3"
    mapper_layers: int = 6
    cw_hidden: int = 64

    def __post_init__(self):
        self.widths = tuple(self.widths)


@dataclass
class AnalysisSpec:
    similarity_probes: int = 0
    sample_images: bool = True


@dataclass
class ExperimentConfig:
    mode: str = "pflsynth"
    name: str = ""
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    late_join: dict | None = None
    share_pbs: bool = False
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose one of {MODES}")
        if self.mode == "late_join" and not self.late_join:
            raise ConfigError("mode 'late_join' needs a late_join schedule {kind, round, site}")
        if self.late_join and self.mode in ("central", "fedgan"):
            raise ConfigError(f"a late-join schedule is not meaningful in mode {self.mode!r}")
        if self.share_pbs and self.mode in ("central", "fedgan"):
            raise ConfigError("share_pbs needs a personalized generator")
        if not self.name:
            self.name = self.mode

    @property
    def label(self) -> str:
        return self.name

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            for key, typ in (("data", DataSpec), ("model", ModelSpec), ("train", TrainConfig),
                             ("analysis", AnalysisSpec)):
                if key in d and not isinstance(d[key], typ):
                    d[key] = typ(**d[key])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(canon.encode()).hexdigest()

    # -- resolution -----------------------------------------------------------

    def generator_config(self) -> GeneratorConfig:
        m = self.model
        flags = dict(_GEN_FLAGS.get(self.mode, {}))
        if self.mode in ("fedgan", "central"):
            flags["personalized"] = False
        return GeneratorConfig(
            widths=m.widths, depth=m.depth, latent_dim=m.latent_dim, mapper_layers=m.mapper_layers,
            cw_hidden=m.cw_hidden, split_stage=m.split_stage, **flags,
        )

    def shared_tags(self) -> tuple:
        if self.mode == "fedgan":
            return ("upstream", "downstream")
        tags = FULL_CB_TAGS if self.mode == "no_pna" else PNA_TAGS
        if self.share_pbs:
            tags = (*tags, "pb")
        return tuple(tags)

    def federation_config(self) -> FederationConfig:
        joins = []
        if self.late_join:
            joins.append(LateJoin(**self.late_join))
        return FederationConfig(self.generator_config(), self.train, self.shared_tags(), joins)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".toml":
            raw = tomllib.loads(text)
        else:
            raw = json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


# -- reports -------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list
    summary: dict
    ledger: dict
    fingerprint: str
    run_dir: Path | None = None
    similarity: object = None
    samples: dict = field(default_factory=dict)
    val_l1: dict = field(default_factory=dict)
    accounting: dict = field(default_factory=dict)
    federation: object = field(default=None, repr=False, compare=False)

    @property
    def label(self):
        return self.config.label

    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_mean for r in self.summary.values()]))

    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim_mean for r in self.summary.values()]))

    def site_psnr(self) -> dict:
        out = {}
        for (site, _), rec in self.summary.items():
            out.setdefault(site, []).append(rec.psnr_mean)
        return {s: float(np.mean(v)) for s, v in out.items()}


@contextmanager
def phase(name):
    """Attach the experiment phase to any package error passing through."""
    try:
        yield
    except PFLSynthError as exc:
        if exc.args and not str(exc.args[0]).startswith(f"[{name}]"):
            exc.args = (f"[{name}] {exc.args[0]}", *exc.args[1:])
        exc.phase = name
        raise


def _run_id(config: ExperimentConfig) -> str:
    return f"{config.name}-{config.fingerprint()[:12]}"


def _probe_set(datasets, n, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    pool = [(d, i) for d in datasets for i in d.splits["train"]]
    picks = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    out = []
    for k in sorted(int(p) for p in picks):
        d, i = pool[k]
        pair = d.pairs[i]
        out.append((pair.x_s, tuple(d.configs[pair.config_index])))
    return out


def run_experiment(config: ExperimentConfig, out_root=None) -> ExperimentReport:
    """Build data, run the selected mode, evaluate on test splits and write artifacts."""
    torch.set_num_threads(1)
    with phase("data"):
        d = config.data
        datasets = build_sites(d.n_sites, d.size, d.n_maps, d.setup, d.seed, d.tasks, d.split_fractions)

    fed = None
    with phase("train"):
        if config.mode == "central":
            central = train_central(datasets, config.generator_config(), config.train)
            predictors = {
                ds.profile.name: (lambda ds_: lambda x, c: central.infer(x, tuple(ds_.configs[c])))(ds)
                for ds in datasets
            }
        else:
            fed = run_federation(datasets, config.federation_config())
            predictors = {name: site.infer for name, site in fed.sites.items()}

    with phase("evaluate"):
        rows = []
        for ds in datasets:
            rows += evaluate_site(predictors[ds.profile.name], ds, "test")
        summary = summarize(rows)
        samples = {}
        if config.analysis.sample_images:
            for ds in datasets:
                for ci, cfg in enumerate(ds.configs):
                    pair = next(p for p in ds.split("test") if p.config_index == ci)
                    samples[(ds.profile.name, task_name(cfg))] = (
                        pair.x_s, pair.x_t, predictors[ds.profile.name](pair.x_s, ci))
        val_l1, acct, ledger = {}, {}, {}
        similarity = None
        if fed is not None:
            val_l1 = {n: s.mean_l1("val") for n, s in fed.sites.items()}
            acct = {n: accounting(s, fed.ledger) for n, s in fed.sites.items()}
            ledger = {
                "total_upload": fed.ledger.total_upload(),
                "total_download": fed.ledger.total_download(),
                "rounds": fed.round,
                "shared_params": count_params(fed.global_shared),
            }
            if config.analysis.similarity_probes > 0:
                probes = _probe_set(datasets, config.analysis.similarity_probes, d.seed)
                sites = list(fed.sites.values())
                stages = sites[0].generator.stage_names[:-1]
                similarity = activation_similarity([site_extractor(s) for s in sites], probes, stages)

    report = ExperimentReport(config, rows, summary, ledger, "", None, similarity, samples, val_l1, acct, fed)
    if out_root is not None:
        with phase("report"):
            _write_run(report, fed, Path(out_root))
    return report


def _write_run(report: ExperimentReport, fed, out_root: Path):
    config = report.config
    run_dir = out_root / _run_id(config)
    if (run_dir / "summary.json").exists():
        raise ConfigError(f"run directory {run_dir} already holds a finished run")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True, default=list))
    write_metrics_csv(report.rows, run_dir / "metrics.csv")
    if fed is not None:
        fed.ledger.write_csv(run_dir / "ledger.csv")
        ck = run_dir / "checkpoints"
        ck.mkdir(exist_ok=True)
        for key, tree in fed.checkpoints().items():
            save_checkpoint(tree, ck / f"{key}.pfls")
    if report.samples:
        sd = run_dir / "samples"
        sd.mkdir(exist_ok=True)
        index = []
        for i, ((site, task), imgs) in enumerate(sorted(report.samples.items())):
            (sd / f"{i:03d}.tensor").write_bytes(encode_tensor(np.stack(imgs)))
            index.append({"site": site, "task": task, "file": f"{i:03d}.tensor"})
        (sd / "index.json").write_text(json.dumps(index, indent=1))
    h = hashlib.sha256(config.fingerprint().encode())
    h.update(__version__.encode())
    h.update((run_dir / "metrics.csv").read_bytes())
    report.fingerprint = h.hexdigest()[:16]
    extra = {
        "mode": config.mode,
        "label": config.label,
        "fingerprint": report.fingerprint,
        "config": config.to_dict(),
        "ledger": report.ledger,
        "val_l1": report.val_l1,
        "accounting": report.accounting,
        "mean_psnr": report.mean_psnr(),
        "mean_ssim": report.mean_ssim(),
    }
    if report.similarity is not None:
        extra["similarity"] = report.similarity.to_dict()
    write_summary_json(report.summary, run_dir / "summary.json", extra)
    report.run_dir = run_dir
    log.info("wrote %s", run_dir)


def load_report(run_dir) -> dict:
    """Summary JSON of a finished run plus its stored sample images."""
    run_dir = Path(run_dir)
    try:
        body = json.loads((run_dir / "summary.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{run_dir} is not a finished run directory") from exc
    samples = {}
    index_path = run_dir / "samples" / "index.json"
    if index_path.exists():
        for item in json.loads(index_path.read_text()):
            stack = decode_tensor((run_dir / "samples" / item["file"]).read_bytes())
            samples[(item["site"], item["task"])] = tuple(stack)
    body["samples"] = samples
    body["run_dir"] = str(run_dir)
    return body


# -- comparison matrix ------------------------------------------------------------


@dataclass
class ComparisonTable:
    labels: list
    modes: list
    cells: dict  # (site, task) -> {label: (psnr, ssim)}
    means: dict  # label -> (psnr, ssim)
    best: str | None

    def rows(self):
        out = []
        for (site, task), per in sorted(self.cells.items()):
            for label in self.labels:
                p, s = per[label]
                out.append({"site": site, "task": task, "variant": label, "psnr": p, "ssim": s,
                            "best": label == self.best})
        return out

    def to_dict(self):
        return {"labels": self.labels, "modes": self.modes, "best": self.best,
                "means": {k: list(v) for k, v in self.means.items()}, "rows": self.rows()}


def _report_view(r):
    """Uniform accessor over in-memory reports and loaded summary dictionaries."""
    if isinstance(r, ExperimentReport):
        cells = {k: (v.psnr_mean, v.ssim_mean) for k, v in r.summary.items()}
        return r.label, r.config.mode, r.config.data, cells
    cfg = ExperimentConfig.from_dict(r["config"])
    cells = {(c["site"], c["task"]): (c["psnr_mean"], c["ssim_mean"]) for c in r["cells"]}
    return r["label"], r["mode"], cfg.data, cells


def compare(reports) -> ComparisonTable:
    views = [_report_view(r) for r in reports]
    if not views:
        raise ComparisonError("nothing to compare")
    ref = views[0][2]
    for label, _, data, _ in views[1:]:
        if asdict(data) != asdict(ref):
            raise ComparisonError(f"{label!r} uses a different dataset spec (seeds must match for paired runs)")
    labels = [v[0] for v in views]
    if len(set(labels)) != len(labels):
        raise ComparisonError(f"duplicate variant labels {labels}")
    keys = set(views[0][3])
    for label, _, _, cells in views[1:]:
        if set(cells) != keys:
            raise ComparisonError(f"{label!r} covers different (site, task) cells")
    cells = {k: {label: c[k] for label, _, _, c in views} for k in keys}
    means = {
        label: (float(np.mean([v[0] for v in c.values()])), float(np.mean([v[1] for v in c.values()])))
        for label, _, _, c in views
    }
    federated = [v[0] for v in views if v[1] != "central"]
    best = max(federated, key=lambda lab: means[lab]) if federated else None
    return ComparisonTable(labels, [v[1] for v in views], cells, means, best)


def run_matrix(configs, out_root=None) -> tuple[ComparisonTable, list]:
    configs = list(configs)
    if not configs:
        raise ComparisonError("empty experiment matrix")
    ref = asdict(configs[0].data)
    for c in configs[1:]:
        if asdict(c.data) != ref:
            raise ComparisonError(f"{c.label!r} uses a different dataset spec (seeds must match for paired runs)")
    reports = [run_experiment(c, out_root) for c in configs]
    table = compare(reports)
    if out_root is not None:
        Path(out_root).mkdir(parents=True, exist_ok=True)
        (Path(out_root) / "matrix.json").write_text(json.dumps(table.to_dict(), indent=2))
    return table, reports


def load_matrix_configs(directory) -> list[ExperimentConfig]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix in (".json", ".toml"))
    if not files:
        raise ConfigError(f"no .json or .toml configs in {directory}")
    return [load_config(p) for p in files]


# -- plots -----------------------------------------------------------------------


def emit_plots(reports, out_dir) -> list[Path]:
    """Similarity line plot (if any report carries one) and a sample image grid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    views = []
    for r in reports:
        if isinstance(r, ExperimentReport):
            sim = r.similarity.to_dict() if r.similarity is not None else None
            views.append((r.label, sim, r.samples))
        else:
            views.append((r["label"], r.get("similarity"), r.get("samples", {})))
    written = []

    with_sim = [(label, sim) for label, sim, _ in views if sim]
    if not with_sim:
        warnings.warn("no report carries similarity data; similarity plot skipped", stacklevel=2)
    else:
        fig, ax = plt.subplots(figsize=(7, 3.5))
        for label, sim in with_sim:
            x = np.arange(len(sim["stages"]))
            mean, std = np.array(sim["mean"]), np.array(sim["std"])
            ax.plot(x, mean, marker="o", label=label)
            ax.fill_between(x, mean - std, mean + std, alpha=0.2)
        ax.set_xticks(np.arange(len(with_sim[0][1]["stages"])))
        ax.set_xticklabels(with_sim[0][1]["stages"], rotation=45)
        ax.set_ylabel("Spearman correlation across sites")
        ax.set_ylim(-1, 1)
        ax.legend()
        fig.tight_layout()
        path = out_dir / "similarity.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

    keys = sorted(set.intersection(*(set(s) for _, _, s in views))) if views else []
    if keys:
        columns = ["source", "reference", *[label for label, _, _ in views]]
        fig, axes = plt.subplots(len(keys), len(columns), figsize=(1.6 * len(columns), 1.6 * len(keys)),
                                 squeeze=False)
        for i, key in enumerate(keys):
            x_s, x_t, _ = views[0][2][key]
            images = [x_s, x_t, *[s[key][2] for _, _, s in views]]
            for j, img in enumerate(images):
                ax = axes[i, j]
                ax.imshow(np.asarray(img), cmap="gray", vmin=-1, vmax=1)
                ax.set_xticks([])
                ax.set_yticks([])
                if i == 0:
                    ax.set_title(columns[j], fontsize=8)
                if j == 0:
                    ax.set_ylabel(f"{key[0]}\n{key[1]}", fontsize=7)
        fig.tight_layout()
        path = out_dir / "samples.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
        grid_meta = {"columns": columns, "rows": [list(k) for k in keys]}
        (out_dir / "samples.json").write_text(json.dumps(grid_meta, indent=1))
    return written
