"""Round-based federated training with partial network aggregation.

The server holds only the shared generator subtree. Every message between the
server and a site is encoded into the checkpoint container and decoded on the
other side by :class:`Transport`, which also enforces the allowed tag set.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .discriminator import LAMBDA_PIX, DiscriminatorRegistry, d_loss_from_scores, generator_objective
from .errors import ConfigError, DataError, ProtocolError, TrainingDivergence
from .generator import CONTRASTS, ConditionCodes, Generator, GeneratorConfig, build_generator, load_into, module_tree
from .params import ParameterTree, SiteWeights, count_params, decode_tree, encode_tree, weighted_average

log = logging.getLogger(__name__)

SERVER = "server"


@dataclass
class TrainConfig:
    rounds: int = 30
    epochs: int = 1
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_pix: float = LAMBDA_PIX
    seed: int = 0

    def lr_at(self, round_index: int) -> float:
        """Learning rate for 0-based ``round_index``: constant for the first half, then linear decay."""
        hold = self.rounds // 2
        if round_index < hold:
            return self.lr
        return self.lr * (self.rounds - round_index) / (self.rounds - hold + 1)


@dataclass
class LateJoin:
    kind: str  # "site" or "task"
    round: int
    site: str
    config: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("site", "task"):
            raise ConfigError(f"late joiner kind must be 'site' or 'task', got {self.kind!r}")
        if self.kind == "task" and self.config is None:
            raise ConfigError("a late task needs its (source, target) configuration")
        if self.config is not None:
            self.config = tuple(self.config)


class Transport:
    """In-process message queue with mandatory (de)serialization.

    ``interceptors`` are called as ``fn(direction, sender, recipient, tree, nbytes)``
    on the decoded tree, so tests observe exactly what crossed the wire.
    """

    def __init__(self, allowed_tags, interceptors=()):
        self.allowed_tags = frozenset(allowed_tags)
        self.interceptors = list(interceptors)
        self._queues: dict[str, list[bytes]] = {}
        self.bytes_sent = 0

    def send(self, sender: str, recipient: str, tree: ParameterTree) -> int:
        leaked = sorted({tree.tag(p) for p in tree} - self.allowed_tags)
        if leaked:
            raise ProtocolError(f"refusing to send tags {leaked} from {sender} to {recipient}")
        payload = encode_tree(tree)
        self._queues.setdefault(recipient, []).append(payload)
        self.bytes_sent += len(payload)
        direction = "up" if recipient == SERVER else "down"
        decoded = decode_tree(payload)
        for fn in self.interceptors:
            fn(direction, sender, recipient, decoded, len(payload))
        return len(payload)

    def receive(self, recipient: str) -> ParameterTree:
        queue = self._queues.get(recipient)
        if not queue:
            raise ProtocolError(f"no pending message for {recipient}")
        return decode_tree(queue.pop(0))


@dataclass
class RoundLedger:
    records: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    def add(self, **row):
        self.records.append(row)

    def rows(self, site=None, round_=None):
        return [
            r for r in self.records
            if (site is None or r["site"] == site) and (round_ is None or r["round"] == round_)
        ]

    def total_upload(self) -> int:
        return sum(r["params_up"] for r in self.records)

    def total_download(self) -> int:
        return sum(r["params_down"] for r in self.records)

    def write_csv(self, path):
        cols = ("round", "site", "params_up", "params_down", "g_loss", "d_loss")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                w.writerow([r["round"], r["site"], r["params_up"], r["params_down"],
                            repr(float(r["g_loss"])), repr(float(r["d_loss"]))])


class Site:
    """One participant: personalized generator, per-config discriminators, local optimizers."""

    def __init__(self, index, dataset, gen_config, codes, train, model_seed, shared_tags,
                 active_configs=None, name=None):
        self.index = index
        self.name = name or dataset.profile.name
        self.dataset = dataset
        self.codes = codes
        self.train_cfg = train
        self.shared_tags = frozenset(shared_tags)
        self.active_configs = set(range(len(dataset.configs)) if active_configs is None else active_configs)
        self.generator = build_generator(gen_config, codes, model_seed)
        self.discriminators = DiscriminatorRegistry(len(dataset.configs), seed=_mix(train.seed, 17, index))
        betas = (train.beta1, train.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=train.lr, betas=betas)
        self.opt_d = [torch.optim.Adam(d.parameters(), lr=train.lr, betas=betas) for d in self.discriminators.nets]
        self.rng = np.random.default_rng(np.random.SeedSequence([train.seed, 23, index]))
        self.tags = self.generator.param_tags()
        self.received_round = None

    # -- bookkeeping -----------------------------------------------------------

    @property
    def n_train(self) -> int:
        return len(self.train_indices())

    def train_indices(self) -> list[int]:
        return [i for i in self.dataset.splits["train"] if self.dataset.pairs[i].config_index in self.active_configs]

    def config_codes(self, config):
        if isinstance(config, int):
            if not 0 <= config < len(self.dataset.configs):
                raise LookupError(f"site {self.name} has no configuration {config}")
            config = self.dataset.configs[config]
        s, t = config
        return self.codes.encode(self.name, s, t)

    def generator_tree(self) -> ParameterTree:
        return module_tree(self.generator, self.tags)

    def shared_tree(self) -> ParameterTree:
        return self.generator_tree().select(self.shared_tags)

    def local_tree(self) -> ParameterTree:
        """Everything that never leaves the site: unshared generator tags plus discriminators."""
        local = self.generator_tree().select(set(self.tags.values()) - self.shared_tags)
        disc_tags = {p: "discriminator" for p, _ in self.discriminators.named_parameters()}
        return local.union(module_tree(self.discriminators, disc_tags, prefix="discriminators."))

    def full_tree(self) -> ParameterTree:
        return self.local_tree().union(self.shared_tree())

    def load_shared(self, tree: ParameterTree, round_index: int):
        bad = sorted({tree.tag(p) for p in tree} - self.shared_tags)
        if bad:
            raise ProtocolError(f"site {self.name} received non-shared tags {bad}")
        load_into(self.generator, tree)
        self.received_round = round_index

    def snapshot(self):
        return {
            "gen": copy.deepcopy(self.generator.state_dict()),
            "disc": copy.deepcopy(self.discriminators.state_dict()),
            "opt_g": copy.deepcopy(self.opt_g.state_dict()),
            "opt_d": [copy.deepcopy(o.state_dict()) for o in self.opt_d],
            "rng": copy.deepcopy(self.rng.bit_generator.state),
            "received": self.received_round,
        }

    def restore(self, snap):
        self.generator.load_state_dict(snap["gen"])
        self.discriminators.load_state_dict(snap["disc"])
        self.opt_g.load_state_dict(snap["opt_g"])
        for o, s in zip(self.opt_d, snap["opt_d"]):
            o.load_state_dict(s)
        self.rng.bit_generator.state = snap["rng"]
        self.received_round = snap["received"]

    # -- training --------------------------------------------------------------

    def _sample(self, indices):
        pair = self.dataset.pairs[indices[int(self.rng.integers(len(indices)))]]
        return pair.x_s, pair.x_t, pair.config_index

    def train_local(self, epochs: int, lr: float, round_index: int = 0):
        """``epochs`` passes of uniformly sampled items; G step then D step per item."""
        indices = self.train_indices()
        if not indices and epochs > 0:
            raise DataError(f"site {self.name} has no active training pairs")
        for group in self.opt_g.param_groups:
            group["lr"] = lr
        for opt in self.opt_d:
            for group in opt.param_groups:
                group["lr"] = lr
        lam = self.train_cfg.lambda_pix
        trace = []
        self.generator.train()
        for _ in range(epochs):
            for step in range(len(indices)):
                xs, xt, c = self._sample(indices)
                x_s = torch.from_numpy(xs)[None, None]
                x_t = torch.from_numpy(xt)[None, None]
                v, u = self.config_codes(c)
                D = self.discriminators[c]

                fake = self.generator(x_s, v, u)
                g_total, adv, pix = generator_objective(D, fake, x_t, x_s, lam)
                self.opt_g.zero_grad(set_to_none=True)
                g_total.backward()
                self.opt_g.step()

                d_loss = d_loss_from_scores(D(x_t, x_s), D(fake.detach(), x_s))
                self.opt_d[c].zero_grad(set_to_none=True)
                d_loss.backward()
                self.opt_d[c].step()

                g_val, d_val = g_total.item(), d_loss.item()
                if not (math.isfinite(g_val) and math.isfinite(d_val)):
                    raise TrainingDivergence(
                        f"non-finite loss at site {self.name}",
                        {"site": self.name, "round": round_index, "step": step, "g_loss": g_val, "d_loss": d_val},
                    )
                trace.append((g_val, d_val, pix.item()))
        return trace

    # -- inference -------------------------------------------------------------

    @torch.no_grad()
    def infer(self, x_s, config) -> np.ndarray:
        v, u = self.config_codes(config)
        self.generator.eval()
        out = self.generator(torch.as_tensor(np.asarray(x_s, dtype=np.float32))[None, None], v, u)
        return out[0, 0].numpy()

    @torch.no_grad()
    def mean_l1(self, split="val", configs=None) -> float:
        wanted = self.active_configs if configs is None else set(configs)
        vals = [
            float(np.abs(self.infer(p.x_s, p.config_index) - p.x_t).mean())
            for p in self.dataset.split(split) if p.config_index in wanted
        ]
        if not vals:
            raise DataError(f"no {split} pairs for site {self.name}")
        return float(np.mean(vals))


def _mix(*key) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def codes_for(datasets, late_joins=(), contrasts=CONTRASTS) -> ConditionCodes:
    """Code layout reserving one spare digit per late site and per late-only contrast."""
    late_sites = {j.site for j in late_joins if j.kind == "site"}
    sites = [d.profile.name for d in datasets if d.profile.name not in late_sites]
    late_task_contrasts = set()
    early_contrasts = set()
    late_tasks = {(j.site, j.config) for j in late_joins if j.kind == "task"}
    for d in datasets:
        for cfg in d.configs:
            target = late_task_contrasts if (d.profile.name, tuple(cfg)) in late_tasks else early_contrasts
            target.update(cfg)
    spare_contrasts = sorted(late_task_contrasts - early_contrasts, key=contrasts.index)
    initial = [c for c in contrasts if c not in spare_contrasts]
    return ConditionCodes(sites, initial, spare_sites=len(late_sites), spare_contrasts=len(spare_contrasts))


@dataclass
class FederationConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    shared_tags: tuple = ("downstream", "mapper")
    late_joins: list = field(default_factory=list)
    parallel: bool = False

    def to_dict(self):
        d = asdict(self)
        d["late_joins"] = [asdict(j) for j in self.late_joins]
        return d


class Federation:
    """Server state plus the registered sites; drives Algorithm-1 style rounds."""

    def __init__(self, datasets, config: FederationConfig, transport: Transport | None = None):
        self.config = config
        self.train_cfg = config.train
        self.shared_tags = frozenset(config.shared_tags)
        self.transport = transport or Transport(self.shared_tags)
        if not self.transport.allowed_tags >= self.shared_tags:
            raise ConfigError("transport does not allow the shared tags")
        names = [d.profile.name for d in datasets]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate site names {names}")
        self.codes = codes_for(datasets, config.late_joins)
        self.model_seed = _mix(self.train_cfg.seed, 11)
        self.late_joins = sorted(config.late_joins, key=lambda j: j.round)
        for j in self.late_joins:
            if not 0 < j.round < self.train_cfg.rounds:
                raise ConfigError(f"late join round {j.round} outside (0, {self.train_cfg.rounds})")
            if j.site not in names:
                raise ConfigError(f"late joiner {j.site!r} is not a configured site")
        late_sites = {j.site for j in self.late_joins if j.kind == "site"}
        late_tasks = {}
        for j in self.late_joins:
            if j.kind == "task":
                late_tasks.setdefault(j.site, set()).add(j.config)

        self.sites: dict[str, Site] = {}
        for i, ds in enumerate(datasets):
            held = late_tasks.get(ds.profile.name, set())
            active = [c for c, cfg in enumerate(ds.configs) if tuple(cfg) not in held]
            self.sites[ds.profile.name] = Site(
                i, ds, config.generator, self.codes, self.train_cfg, self.model_seed, self.shared_tags, active
            )
        self.active = [n for n in names if n not in late_sites]
        if not self.active:
            raise ConfigError("no site is active at round 0")

        server_model = build_generator(config.generator, self.codes, self.model_seed)
        self.global_shared = module_tree(server_model, server_model.param_tags()).select(self.shared_tags)
        self.round = 0
        self.ledger = RoundLedger()

    # -- protocol helpers ----------------------------------------------------

    def weights(self) -> SiteWeights:
        return SiteWeights.from_counts([self.sites[n].n_train for n in self.active])

    def broadcast(self, recipients=None) -> dict[str, int]:
        recipients = list(self.active if recipients is None else recipients)
        downloads = {}
        for name in recipients:
            if name not in self.active:
                raise ProtocolError(f"site {name!r} is not active")
            self.transport.send(SERVER, name, self.global_shared)
            tree = self.transport.receive(name)
            self.sites[name].load_shared(tree, self.round)
            downloads[name] = count_params(tree)
        return downloads

    def form_local_generator(self, name) -> Generator:
        site = self._site(name)
        if site.received_round is None:
            raise ProtocolError(f"site {name!r} has not received the shared partition yet")
        return site.generator

    def aggregate(self) -> dict[str, int]:
        uploads = {}
        trees = []
        for name in self.active:
            self.transport.send(name, SERVER, self.sites[name].shared_tree())
            tree = self.transport.receive(SERVER)
            trees.append(tree)
            uploads[name] = count_params(tree)
        self.global_shared = weighted_average(trees, self.weights())
        return uploads

    def register_late_joiner(self, join: LateJoin):
        if join.kind == "site":
            if join.site in self.active:
                raise ConfigError(f"site {join.site!r} is already active")
            self.codes.add_site(join.site)
            self.active.append(join.site)
            self.active.sort(key=lambda n: self.sites[n].index)
        else:
            site = self._site(join.site)
            for c in join.config:
                self.codes.add_contrast(c)
            cfg_index = [tuple(c) for c in site.dataset.configs].index(join.config)
            site.active_configs.add(cfg_index)
        log.info("round %d: late %s joined (%s)", self.round, join.kind, join.site)

    def _site(self, name) -> Site:
        if name not in self.sites:
            raise LookupError(f"unknown site {name!r}")
        return self.sites[name]

    # -- rounds ------------------------------------------------------------------

    def run_round(self):
        for join in self.late_joins:
            if join.round == self.round:
                self.register_late_joiner(join)
        started = time.perf_counter()
        snaps = {n: s.snapshot() for n, s in self.sites.items()}
        global_before = self.global_shared
        lr = self.train_cfg.lr_at(self.round)
        try:
            downloads = self.broadcast()
            names = list(self.active)
            if self.config.parallel and len(names) > 1:
                with ThreadPoolExecutor(len(names)) as pool:
                    traces = list(pool.map(
                        lambda n: self.sites[n].train_local(self.train_cfg.epochs, lr, self.round), names))
            else:
                traces = [self.sites[n].train_local(self.train_cfg.epochs, lr, self.round) for n in names]
            uploads = self.aggregate()
        except Exception:
            for n, s in self.sites.items():
                s.restore(snaps[n])
            self.global_shared = global_before
            raise
        for name, trace in zip(names, traces):
            g = float(np.mean([t[0] for t in trace])) if trace else 0.0
            d = float(np.mean([t[1] for t in trace])) if trace else 0.0
            self.ledger.add(round=self.round + 1, site=name, params_up=uploads[name],
                            params_down=downloads[name], g_loss=g, d_loss=d)
        self.ledger.wall_times.append(time.perf_counter() - started)
        self.round += 1

    def run(self, rounds=None, callback=None):
        total = self.train_cfg.rounds if rounds is None else rounds
        while self.round < total:
            self.run_round()
            if callback is not None:
                callback(self)
        # final broadcast forms the personalized generators used at inference
        self.broadcast()
        return self

    # -- inference ------------------------------------------------------------

    def infer(self, name, x_s, config) -> np.ndarray:
        return self._site(name).infer(x_s, config)

    def checkpoints(self) -> dict[str, ParameterTree]:
        out = {"global": self.global_shared}
        for name, site in self.sites.items():
            out[name] = site.local_tree()
        return out


def run_federation(datasets, config: FederationConfig, transport=None, callback=None) -> Federation:
    return Federation(datasets, config, transport).run(callback=callback)


# -- centralized benchmark -----------------------------------------------------


@dataclass
class PooledDataset:
    """Training pairs of several sites concatenated; configs re-indexed over their union."""

    profile: object
    configs: list
    pairs: list
    splits: dict


def pool_datasets(datasets) -> PooledDataset:
    from .phantom import Pair

    configs = []
    for d in datasets:
        for c in d.configs:
            if tuple(c) not in configs:
                configs.append(tuple(c))
    pairs, train = [], []
    for d in datasets:
        for i in d.splits["train"]:
            p = d.pairs[i]
            train.append(len(pairs))
            pairs.append(Pair(p.x_s, p.x_t, configs.index(tuple(d.configs[p.config_index])), p.map_index))

    class _Profile:
        name = "central"

    return PooledDataset(_Profile(), configs, pairs, {"train": train, "val": [], "test": []})


def train_central(datasets, gen_config: GeneratorConfig, train: TrainConfig) -> Site:
    """Non-federated benchmark: one plain backbone on pooled data, one discriminator per config."""
    if gen_config.personalized:
        raise ConfigError("the central benchmark uses the plain backbone (personalized=False)")
    pooled = pool_datasets(datasets)
    codes = ConditionCodes(["central"])
    site = Site(0, pooled, gen_config, codes, train, _mix(train.seed, 11), shared_tags=())
    for epoch in range(train.rounds):
        site.train_local(train.epochs, train.lr_at(epoch), epoch)
    return site
