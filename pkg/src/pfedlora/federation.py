"""Federated fine-tuning of sparse per-client LoRA adapters.

A run has two phases. First every client searches its own masks on local
data (skipped for the dense ``fedavg`` baseline) and registers them with the
server once. Then, each round, a random subset of clients trains locally,
uploads its masked factors, and receives back the weighted sum of all
uploads masked by its own registered masks.

Random streams are addressed by purpose, never by call order:

* ``(seed, 1, client)``            client stream; ``.child(1, t)`` search
  batches at pruning epoch ``t``, ``.child(2, round, epoch)`` local shuffles
* ``(seed, 2)``                    server; ``.child(round)`` participant draw
* ``(seed, 3).child(site_index)``  shared search-time adapter init
* ``(seed, 4).child(site_index)``  shared fine-tuning adapter init
* ``(data_seed, 6, client)``       train/eval split
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from .adapters import LoraPair, dense_rank, init_finetune, init_symmetric
from .backbone import Backbone, BackboneConfig, InjectionSite, all_sites, loss_and_grads, make_batch
from .data import (VOCAB_SIZE, PartitionSpec, Example, load_jsonl, partition, response_target_mask,
                   split_train_eval, synth_corpus, tokenize)
from .exceptions import ConfigError, ProtocolError
from .metrics import EvalReport, perplexity
from .numerics import RngStream
from .saliency import METRICS, PruneSchedule, search_architecture
from .validation import check_fraction, check_positive_int

log = logging.getLogger(__name__)

LEVEL_NAMES = {1: ("Large",), 2: ("Small", "Large"), 3: ("Small", "Medium", "Large")}


@dataclass
class RunConfig:
    """Every knob of a run. Field names double as config-file keys."""

    method: str = "personalized"
    clients: int = 16
    participation: float = 0.1
    rounds: int = 30
    local_epochs: int = 1
    prune_epochs: int = 0
    rank: int = 8
    sparsity: float = 0.5
    level_ranks: tuple = ()
    metric: str = "first"
    aggregation: str = "literal"
    finetune_init: str = "restart"
    partition: str = "pathological"
    classes_per_client: int = 2
    beta: float = 0.5
    corpus: str = "synth"
    per_category: int = 50
    train_fraction: float = 0.8
    response_only: bool = False
    batch_size: int = 64
    micro_batch: int = 8
    score_batch: int = 64
    lr: float = 10.0
    momentum: float = 0.0
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq: int = 128
    backbone_seed: int = 0
    backbone_path: str = ""
    data_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        self.level_ranks = tuple(int(r) for r in self.level_ranks)
        self.validate()

    def validate(self) -> None:
        choices = {
            "method": ("personalized", "fedavg"),
            "metric": METRICS,
            "aggregation": ("literal", "overlap"),
            "finetune_init": ("restart", "keep"),
            "partition": ("pathological", "dirichlet"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for key in ("clients", "rounds", "local_epochs", "rank", "batch_size", "micro_batch",
                    "score_batch", "per_category", "classes_per_client"):
            check_positive_int(getattr(self, key), key)
        if self.prune_epochs < 0:
            raise ConfigError("prune_epochs must be >= 0 (0 selects the default)")
        check_fraction(self.participation, "participation")
        check_fraction(self.train_fraction, "train_fraction")
        check_fraction(self.sparsity, "sparsity", closed_upper=False)
        if self.participation == 0:
            raise ConfigError("participation must be positive")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr must be >= 0 and momentum in [0, 1)")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.level_ranks and not 1 <= len(self.level_ranks) <= 3:
            raise ConfigError("level_ranks takes one to three budget ranks")
        if self.level_ranks and self.method != "personalized":
            raise ConfigError("level_ranks requires method=personalized")
        BackboneConfig(VOCAB_SIZE, self.d_model, self.n_layers, self.n_heads, self.d_ff,
                       self.max_seq, self.backbone_seed)

    @property
    def n_participants(self) -> int:
        k = int(math.floor(self.participation * self.clients + 0.5))
        return min(max(k, 1), self.clients)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(VOCAB_SIZE, self.d_model, self.n_layers, self.n_heads,
                              self.d_ff, self.max_seq, self.backbone_seed)

    def prune_epochs_for(self, dense: int) -> int:
        if self.prune_epochs:
            return self.prune_epochs
        return 10 if dense == 16 else 5

    def to_dict(self) -> dict:
        return asdict(self)


def build_heterogeneous_group(level_ranks: Sequence[int], r_max: int, n_clients: int):
    """Sparsity per client for budget levels sharing the dense rank ``r_max``.

    Client ``i`` joins level ``i mod L``, so level sizes differ by at most
    one. Returns ``(sparsities, level_names, ranks)`` as per-client lists.
    """
    if not level_ranks:
        raise ConfigError("at least one budget level is required")
    ranks = sorted(int(r) for r in level_ranks)
    if ranks[-1] > r_max or ranks[0] < 1:
        raise ConfigError(f"budget ranks {ranks} must lie in [1, {r_max}]")
    names = LEVEL_NAMES.get(len(ranks)) or tuple(f"level{i}" for i in range(len(ranks)))
    sparsities, levels, client_ranks = [], [], []
    for i in range(n_clients):
        lvl = i % len(ranks)
        sparsities.append(1.0 - ranks[lvl] / r_max)
        levels.append(names[lvl])
        client_ranks.append(ranks[lvl])
    return sparsities, levels, client_ranks


@dataclass
class ClientState:
    client_id: int
    train: list
    eval: list
    train_targets: list | None
    eval_targets: list | None
    adapters: dict
    sparsity: float
    rank: int
    level: str | None
    rng: RngStream

    @property
    def n_train(self) -> int:
        return len(self.train)

    def masks(self) -> dict:
        return {s: (p.mask_a.copy(), p.mask_b.copy()) for s, p in self.adapters.items()}


@dataclass
class ServerState:
    rng: RngStream
    registry: dict = field(default_factory=dict)
    transmissions: dict = field(default_factory=dict)
    round: int = 0
    weights: dict = field(default_factory=dict)
    accumulators: dict = field(default_factory=dict)

    def register(self, client_id: int, masks: Mapping) -> None:
        """Masks are sent once per client; a second registration is refused."""
        if client_id in self.registry:
            raise ProtocolError(f"client {client_id} already registered its masks")
        self.registry[client_id] = {s: (np.array(a, bool), np.array(b, bool))
                                    for s, (a, b) in masks.items()}
        for a, b in self.registry[client_id].values():
            a.setflags(write=False)
            b.setflags(write=False)
        self.transmissions[client_id] = self.transmissions.get(client_id, 0) + 1


@dataclass
class ClientRoundRow:
    client_id: int
    mean_train_loss: float | None
    eval_ppl: float | None


@dataclass
class RoundReport:
    round: int
    participants: list
    rows: list
    weights: dict
    wall_time: float

    @property
    def mean_train_loss(self) -> float:
        vals = [r.mean_train_loss for r in self.rows if r.mean_train_loss is not None]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_eval_ppl(self) -> float:
        vals = [r.eval_ppl for r in self.rows if r.eval_ppl is not None]
        return float(np.mean(vals)) if vals else math.nan


def local_finetune(client: ClientState, backbone: Backbone, epochs: int, lr: float,
                   batch_size: int = 64, micro_batch: int = 8, momentum: float = 0.0,
                   round_index: int = 0) -> tuple[dict, list]:
    """Masked SGD with gradient accumulation.

    Each optimizer step averages the gradients of the micro-batches that make
    up one window of ``batch_size`` examples (the last window may be short),
    gates them with the masks and applies one update. Returns the updated
    adapters and the per-step training loss.
    """
    adapters = {s: p.copy() for s, p in client.adapters.items()}
    if client.n_train == 0:
        log.warning("client %d has no training data; skipped", client.client_id)
        return adapters, []
    velocity = {s: (np.zeros_like(p.A), np.zeros_like(p.B)) for s, p in adapters.items()}
    trace = []
    for epoch in range(epochs):
        order = client.rng.child(2, round_index, epoch).permutation(client.n_train)
        for w0 in range(0, client.n_train, batch_size):
            window = order[w0:w0 + batch_size]
            acc = {s: [np.zeros_like(p.A), np.zeros_like(p.B)] for s, p in adapters.items()}
            losses = []
            for m0 in range(0, len(window), micro_batch):
                idx = window[m0:m0 + micro_batch]
                targets = None if client.train_targets is None else [client.train_targets[i] for i in idx]
                loss, grads = loss_and_grads(backbone, adapters,
                                             make_batch([client.train[i] for i in idx], targets))
                losses.append(loss)
                for s, (ga, gb) in grads.items():
                    acc[s][0] += ga
                    acc[s][1] += gb
            n_micro = len(losses)
            for s, pair in adapters.items():
                ga = np.where(pair.mask_a, acc[s][0] / n_micro, 0.0)
                gb = np.where(pair.mask_b, acc[s][1] / n_micro, 0.0)
                if momentum:
                    va, vb = velocity[s]
                    ga = velocity[s][0] = momentum * va + ga
                    gb = velocity[s][1] = momentum * vb + gb
                adapters[s] = replace(pair, A=np.where(pair.mask_a, pair.A - lr * ga, 0.0),
                                      B=np.where(pair.mask_b, pair.B - lr * gb, 0.0))
            trace.append(float(np.mean(losses)))
    return adapters, trace


def aggregate(uploads: Sequence, weights: Mapping[int, float], registry: Mapping,
              mode: str = "literal", recipients: Sequence[int] | None = None,
              previous: Mapping | None = None) -> dict:
    """Personalized aggregation of masked factors.

    ``uploads`` is a sequence of ``(client_id, {site: (A, B)})``. In
    ``literal`` mode each recipient gets ``(sum_j w_j X_j) * own_mask``. In
    ``overlap`` mode the weights are renormalized per coordinate over the
    uploaders whose masks retain it; coordinates nobody retains keep the
    recipient's ``previous`` value (zero when absent). Uploads are summed in
    ascending client-id order.
    """
    if mode not in ("literal", "overlap"):
        raise ConfigError(f"unknown aggregation mode {mode!r}")
    uploads = sorted(uploads, key=lambda u: u[0])
    if not uploads:
        raise ProtocolError("nothing to aggregate")
    recipients = [u[0] for u in uploads] if recipients is None else list(recipients)
    sites = sorted(uploads[0][1])
    for cid, factors in uploads:
        if cid not in registry:
            raise ProtocolError(f"client {cid} uploaded before registering masks")
        if sorted(factors) != sites:
            raise ProtocolError(f"client {cid} uploaded a different set of sites")
        for s in sites:
            ma, mb = registry[cid][s]
            if factors[s][0].shape != ma.shape or factors[s][1].shape != mb.shape:
                raise ProtocolError(f"client {cid} upload at {s} does not match its registered masks")
    for s in sites:
        if len({(f[s][0].shape, f[s][1].shape) for _, f in uploads}) > 1:
            raise ProtocolError(f"uploads at {s} do not share a common dense shape")

    out = {r: {} for r in recipients}
    for s in sites:
        for k in range(2):
            num = np.zeros_like(uploads[0][1][s][k])
            den = np.zeros_like(num)
            for cid, factors in uploads:
                mask = registry[cid][s][k]
                if mode == "literal":
                    num += weights[cid] * factors[s][k]
                else:
                    num += weights[cid] * np.where(mask, factors[s][k], 0.0)
                    den += weights[cid] * mask
            for r in recipients:
                own = registry[r][s][k]
                if own.shape != num.shape:
                    raise ProtocolError(f"recipient {r} mask at {s} does not match upload shape")
                if mode == "literal":
                    val = num
                else:
                    prev = np.zeros_like(num) if previous is None else previous[r][s][k]
                    val = np.where(den > 0, num / np.where(den > 0, den, 1.0), prev)
                out[r].setdefault(s, [None, None])[k] = np.where(own, val, 0.0)
    return {r: {s: tuple(v) for s, v in d.items()} for r, d in out.items()}


def size_weights(clients: Sequence[ClientState]) -> dict:
    total = sum(c.n_train for c in clients)
    return {c.client_id: c.n_train / total for c in clients}


def run_round(server: ServerState, clients: Sequence[ClientState], backbone: Backbone,
              config: RunConfig, t: int, workers: int = 1) -> RoundReport:
    """One round: sample, train locally, aggregate, dispatch, evaluate."""
    start = time.perf_counter()
    m, k = len(clients), config.n_participants
    if k > m:
        raise ConfigError(f"cannot sample {k} participants from {m} clients")
    if any(c.client_id not in server.registry for c in clients):
        raise ProtocolError("every client must register masks before federated tuning")
    picked = sorted(int(i) for i in server.rng.child(t).choice(m, k))
    participants = [clients[i] for i in picked]

    def train(c):
        return local_finetune(c, backbone, config.local_epochs, config.lr, config.batch_size,
                              config.micro_batch, config.momentum, round_index=t)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(train, participants))

    uploaders = [c for c, (_, trace) in zip(participants, results) if trace]
    by_id = {c.client_id: res for c, res in zip(participants, results)}
    weights = size_weights(uploaders) if uploaders else {}
    if uploaders:
        uploads = [(c.client_id, {s: p.masked_factors() for s, p in by_id[c.client_id][0].items()})
                   for c in uploaders]
        previous = {c.client_id: {s: (p.A, p.B) for s, p in by_id[c.client_id][0].items()}
                    for c in uploaders}
        personalized = aggregate(uploads, weights, server.registry, config.aggregation,
                                 recipients=[c.client_id for c in uploaders], previous=previous)
        server.accumulators = {
            s: tuple(sum(weights[cid] * f[s][k] for cid, f in uploads) for k in range(2))
            for s in uploads[0][1]
        }
        for c in uploaders:
            c.adapters = {s: replace(p, A=personalized[c.client_id][s][0],
                                     B=personalized[c.client_id][s][1])
                          for s, p in by_id[c.client_id][0].items()}
    server.round = t
    server.weights = weights

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        evals = list(pool.map(lambda c: evaluate_client(c, backbone, t), participants))
    rows = [ClientRoundRow(c.client_id,
                           float(np.mean(by_id[c.client_id][1])) if by_id[c.client_id][1] else None,
                           None if ev.skipped else ev.perplexity)
            for c, ev in zip(participants, evals)]
    return RoundReport(t, picked, rows, weights, time.perf_counter() - start)


def evaluate_client(client: ClientState, backbone: Backbone, round_index: int | None = None) -> EvalReport:
    return perplexity(client.eval, backbone, client.adapters, client.eval_targets,
                      client_id=client.client_id, round=round_index)


def load_corpus(config: RunConfig) -> list[Example]:
    if config.corpus == "synth":
        return synth_corpus(config.per_category, config.data_seed)
    return load_jsonl(config.corpus)


def make_clients(config: RunConfig, corpus: Sequence[Example]) -> list[ClientState]:
    """Partition, split and tokenize; adapters are created but not initialized."""
    spec = PartitionSpec(config.partition, config.clients, config.data_seed,
                         config.classes_per_client, config.beta)
    shards = partition(corpus, spec)
    sites = all_sites(config.n_layers)
    if config.method == "fedavg":
        sparsities = [0.0] * config.clients
        ranks, levels = [config.rank] * config.clients, [None] * config.clients
    elif config.level_ranks:
        r_max = max(config.level_ranks)
        sparsities, levels, ranks = build_heterogeneous_group(config.level_ranks, r_max, config.clients)
    else:
        sparsities = [config.sparsity] * config.clients
        ranks, levels = [config.rank] * config.clients, [None] * config.clients

    clients = []
    for cid in range(config.clients):
        shard = shards[cid]
        if shard.size:
            train_ids, eval_ids = split_train_eval(shard, config.train_fraction,
                                                   RngStream(config.data_seed, 6, cid))
        else:
            log.warning("client %d received no examples", cid)
            train_ids = eval_ids = np.zeros(0, np.int64)
        train = [tokenize(corpus[i], config.max_seq) for i in train_ids]
        evals = [tokenize(corpus[i], config.max_seq) for i in eval_ids]
        if config.level_ranks:
            r_max = max(config.level_ranks)
            adapters = {s: LoraPair(s, np.zeros((config.d_model, r_max)),
                                    np.zeros((r_max, config.d_model)),
                                    np.ones((config.d_model, r_max), bool),
                                    np.ones((r_max, config.d_model), bool),
                                    ranks[cid], sparsities[cid])
                        for s in sites}
        else:
            adapters = {s: LoraPair.create(s, config.d_model, ranks[cid], sparsities[cid]) for s in sites}
        clients.append(ClientState(
            cid, train, evals,
            [response_target_mask(x) for x in train] if config.response_only else None,
            [response_target_mask(x) for x in evals] if config.response_only else None,
            adapters, sparsities[cid], ranks[cid], levels[cid],
            RngStream(config.seed, 1, cid)))
    return clients


def search_client_masks(client: ClientState, backbone: Backbone, config: RunConfig) -> dict:
    """Mask search for one client from the shared symmetric init."""
    init = RngStream(config.seed, 3)
    sites = sorted(client.adapters)
    adapters = {s: init_symmetric(client.adapters[s], init.child(i)) for i, s in enumerate(sites)}
    dense = next(iter(adapters.values())).dense_rank
    if client.sparsity == 0 or config.method == "fedavg":
        return {s: (p.mask_a.copy(), p.mask_b.copy()) for s, p in adapters.items()}
    if client.n_train == 0:
        raise ConfigError(f"client {client.client_id} has no training data to search masks on")
    schedule = PruneSchedule(config.prune_epochs_for(dense), client.sparsity)
    return search_architecture(client.train, backbone, adapters, schedule, config.metric,
                               client.rng.child(1), config.score_batch, config.micro_batch)


def initialize_for_finetune(client: ClientState, masks: Mapping, config: RunConfig) -> None:
    init = RngStream(config.seed, 4)
    keep = config.finetune_init == "keep"
    search_init = RngStream(config.seed, 3)
    new = {}
    for i, s in enumerate(sorted(client.adapters)):
        pair = replace(client.adapters[s], mask_a=masks[s][0].copy(), mask_b=masks[s][1].copy())
        if keep:
            pair = init_symmetric(pair, search_init.child(i))
        new[s] = init_finetune(pair, init.child(i), keep_weights=keep)
    client.adapters = new


def load_backbone(config: RunConfig) -> Backbone:
    if config.backbone_path:
        backbone = Backbone.load(config.backbone_path)
        if backbone.config.vocab_size != VOCAB_SIZE or backbone.config.d_model != config.d_model:
            raise ConfigError("backbone checkpoint does not match the configured shape")
        return backbone
    return Backbone.from_config(config.backbone_config())


@dataclass
class RunResult:
    config: RunConfig
    backbone: Backbone
    clients: list
    server: ServerState
    reports: list
    final_eval: dict

    @property
    def final_mean_ppl(self) -> float:
        vals = [r.perplexity for r in self.final_eval.values() if not r.skipped]
        return float(np.mean(vals))

    @property
    def loss_curve(self) -> list:
        return [r.mean_train_loss for r in self.reports]


def prepare(config: RunConfig, workers: int = 1, corpus: Sequence[Example] | None = None):
    """Build backbone, clients and server, then run the mask search phase."""
    backbone = load_backbone(config)
    corpus = load_corpus(config) if corpus is None else corpus
    clients = make_clients(config, corpus)
    server = ServerState(RngStream(config.seed, 2))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        masks = list(pool.map(lambda c: search_client_masks(c, backbone, config), clients))
    for client, m in zip(clients, masks):
        server.register(client.client_id, m)
        initialize_for_finetune(client, m, config)
    return backbone, clients, server


def run_federated(config: RunConfig, workers: int = 1, corpus: Sequence[Example] | None = None,
                  progress=None) -> RunResult:
    """Search masks for every client, then ``config.rounds`` federated rounds."""
    backbone, clients, server = prepare(config, workers, corpus)
    reports = []
    for t in range(1, config.rounds + 1):
        report = run_round(server, clients, backbone, config, t, workers)
        reports.append(report)
        if progress:
            progress(report)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        finals = list(pool.map(lambda c: evaluate_client(c, backbone), clients))
    return RunResult(config, backbone, clients, server, reports,
                     {c.client_id: r for c, r in zip(clients, finals)})
