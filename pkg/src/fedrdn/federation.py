"""Round-based federated training: local SGD, weighted averaging, server update, evaluation."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .augmentation import (
    AugContext,
    AugmentationPipeline,
    ChannelStats,
    FedMix,
    Mode,
    RDN,
    RDNV,
    StatsRegistry,
    apply_pipeline,
    dataset_channel_stats,
    mean_images,
)
from .datasets import ClientDataset, FederationData
from .errors import ConfigError, ExperimentError, FedRDNError, MisuseError
from .model import ModelSpec, forward, init_params, loss_grad_logits
from .tensor import log_softmax
from .params import ParameterVector, param_axpy, param_sub, require_aligned, sgd_step
from .stats_protocol import StatsMessage, run_stats_round

ALGORITHMS = ("fedavg", "fedprox", "fedavgm")
EVAL_CHUNK = 256


@dataclass(frozen=True)
class AlgorithmConfig:
    name: str = "fedavg"
    mu: float = 0.001
    beta: float = 0.9
    lr: float = 0.01
    weight_decay: float = 1e-5
    batch_size: int = 32
    local_epochs: int = 5
    rounds: int = 100

    def __post_init__(self):
        if self.name not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.name!r}; expected one of {ALGORITHMS}", "algorithm.name")
        if self.mu < 0:
            raise ConfigError("must be >= 0", "algorithm.mu")
        if not 0 <= self.beta < 1:
            raise ConfigError("must lie in [0, 1)", "algorithm.beta")
        if self.lr < 0:
            raise ConfigError("must be >= 0", "algorithm.lr")
        if self.weight_decay < 0:
            raise ConfigError("must be >= 0", "algorithm.weight_decay")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "algorithm.batch_size")
        if self.local_epochs < 1:
            raise ConfigError("must be >= 1", "algorithm.local_epochs")
        if self.rounds < 1:
            raise ConfigError("must be >= 1", "algorithm.rounds")


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    train_pipeline: AugmentationPipeline
    test_pipeline: AugmentationPipeline
    rng: np.random.Generator
    registry: StatsRegistry | None = None
    own_stats: ChannelStats | None = None
    shared_mean_images: np.ndarray | None = None
    num_classes: int | None = None

    def train_context(self, trace: list | None = None) -> AugContext:
        # the owner's statistics are deliberately absent at train time
        return AugContext(registry=self.registry, rng=self.rng, mean_images=self.shared_mean_images,
                          num_classes=self.num_classes, trace=trace)

    def test_context(self, trace: list | None = None) -> AugContext:
        # no rng and no registry for RDN at test time; RDN-V still needs the registry average
        needs_registry = any(isinstance(s, RDNV) for s in self.test_pipeline.steps)
        return AugContext(registry=self.registry if needs_registry else None, own_stats=self.own_stats,
                          num_classes=self.num_classes, trace=trace)


@dataclass(frozen=True)
class ServerState:
    global_params: ParameterVector
    momentum: ParameterVector | None = None
    t: int = 0


@dataclass(frozen=True)
class ClientRoundMetrics:
    client_id: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float


@dataclass(frozen=True)
class RoundReport:
    t: int
    clients: tuple[ClientRoundMetrics, ...]
    avg_accuracy_weighted: float
    avg_accuracy_unweighted: float
    wall_time: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class Upload:
    """One client-to-server transfer, recorded for payload audits."""

    round_index: int  # -1 for the pre-training exchanges
    client_id: int
    kind: str  # "stats" | "params" | "mean_images"
    n_floats: int


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    initial_global: ParameterVector
    final_global: ParameterVector
    final_locals: list[ParameterVector]
    registry: StatsRegistry | None
    stats_messages: list[StatsMessage]
    uploads: list[Upload]
    clients: list[ClientState]


# --- local training and evaluation ------------------------------------------

def _local_train(client: ClientState, global_params: ParameterVector, cfg: AlgorithmConfig,
                 spec: ModelSpec, trace: list | None = None) -> tuple[ParameterVector, float, float]:
    ds = client.dataset
    if ds.n_k < 1:
        raise MisuseError(f"client {client.client_id} has no training data")
    if client.train_pipeline.mode is not Mode.TRAIN:
        raise MisuseError("local training needs a train-mode pipeline")
    params = global_params
    prox = cfg.name == "fedprox" and cfg.mu > 0
    ctx = client.train_context(trace)
    losses: list[float] = []
    hits = 0
    for _ in range(cfg.local_epochs):
        losses, hits = [], 0
        order = client.rng.permutation(ds.n_k)
        for start in range(0, ds.n_k, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = apply_pipeline(client.train_pipeline, ds.train_x[idx], ctx, labels=ds.train_y[idx])
            loss, grad, logits = loss_grad_logits(spec, params, x, y)
            if prox:
                grad = param_axpy(cfg.mu, param_sub(params, global_params), grad)
            if cfg.lr > 0:
                params = sgd_step(params, grad, cfg.lr, cfg.weight_decay)
            losses.append(loss * len(idx))
            hits += int(np.sum(np.argmax(logits, axis=1) == ds.train_y[idx]))
    return params, float(np.sum(losses) / ds.n_k), hits / ds.n_k


def local_train(client: ClientState, global_params: ParameterVector, cfg: AlgorithmConfig,
                spec: ModelSpec) -> ParameterVector:
    """E epochs of mini-batch SGD starting from ``global_params``.

    FedProx adds ``mu * (w - w_global)`` to every gradient. Consumes only the
    client's own rng stream.
    """
    return _local_train(client, global_params, cfg, spec)[0]


def prox_gradient(params: ParameterVector, global_params: ParameterVector, mu: float) -> ParameterVector:
    """Gradient of ``(mu / 2) * ||w - w_global||^2``."""
    return param_axpy(mu, param_sub(params, global_params), params.zeros_like())


def evaluate(client: ClientState, params: ParameterVector, spec: ModelSpec,
             trace: list | None = None) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy on the client's test split.

    Ties in the argmax resolve to the lowest class index.
    """
    ds = client.dataset
    n = len(ds.test_x)
    if n == 0:
        raise MisuseError(f"client {client.client_id} has an empty test set")
    pipe = client.test_pipeline.with_mode(Mode.TEST)
    ctx = client.test_context(trace)
    hits, nll = 0, 0.0
    for start in range(0, n, EVAL_CHUNK):
        x = apply_pipeline(pipe, ds.test_x[start:start + EVAL_CHUNK], ctx)
        y = ds.test_y[start:start + EVAL_CHUNK]
        logits = forward(spec, params, x).data
        hits += int(np.sum(np.argmax(logits, axis=1) == y))
        nll -= float(np.sum(log_softmax(logits)[np.arange(len(y)), y]))
    return hits / n, nll / n


def cross_site_matrix(locals_: Sequence[ParameterVector], clients: Sequence[ClientState],
                      spec: ModelSpec) -> np.ndarray:
    """Entry (s, t): accuracy of source-s model on target-t test data (target's own test transform)."""
    out = np.zeros((len(locals_), len(clients)))
    for s, params in enumerate(locals_):
        for t, client in enumerate(clients):
            out[s, t] = evaluate(client, params, spec)[0]
    return out


# --- server ------------------------------------------------------------------

def aggregation_weights(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise MisuseError(f"aggregation needs positive sample counts, got {counts.tolist()}")
    return counts / counts.sum()


def aggregate_weighted(locals_: Sequence[ParameterVector], counts: Sequence[int]) -> ParameterVector:
    """Sample-count weighted average of local models.

    Evaluated as ``w_0 + sum_k gamma_k (w_k - w_0)`` in client order, which
    equals ``sum_k gamma_k w_k`` and returns identical inputs unchanged.
    """
    if not locals_:
        raise MisuseError("aggregate_weighted needs at least one local model")
    if len(locals_) != len(counts):
        raise MisuseError(f"{len(locals_)} local models but {len(counts)} counts")
    gamma = aggregation_weights(counts)
    anchor = locals_[0]
    acc = anchor
    for g, w in zip(gamma[1:], locals_[1:]):
        require_aligned(anchor, w, "aggregate_weighted")
        acc = param_axpy(float(g), param_sub(w, anchor), acc)
    return acc


def init_server(params: ParameterVector, cfg: AlgorithmConfig) -> ServerState:
    return ServerState(params, params.zeros_like() if cfg.name == "fedavgm" else None, 0)


def server_update(server: ServerState, aggregated: ParameterVector, cfg: AlgorithmConfig) -> ServerState:
    """FedAvg adopts the aggregate. FedAvgM applies server momentum on the
    pseudo-gradient ``delta = w_global - aggregated``:
    ``v <- beta v + delta``, ``w_global <- w_global - v``.
    """
    require_aligned(server.global_params, aggregated, "server_update")
    if cfg.name != "fedavgm":
        return ServerState(aggregated, None, server.t + 1)
    if server.momentum is None:
        raise MisuseError("FedAvgM server state is missing its momentum buffer")
    delta = param_sub(server.global_params, aggregated)
    v = param_axpy(cfg.beta, server.momentum, delta)
    # w - (beta v_old + delta) == aggregated - beta v_old
    # beta == 0 short-circuits so signed zeros match plain FedAvg bit for bit
    new_global = aggregated if cfg.beta == 0 else param_axpy(-cfg.beta, server.momentum, aggregated)
    return ServerState(new_global, v, server.t + 1)


# --- orchestration -----------------------------------------------------------

def client_rng(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xC11E, int(client_id)]))


def build_clients(federation: FederationData, pipeline: AugmentationPipeline, seed: int,
                  registry: StatsRegistry | None = None) -> list[ClientState]:
    clients = []
    for ds in federation.clients:
        own = registry[ds.client_id] if registry is not None else None
        if own is None and any(isinstance(s, RDN) for s in pipeline.steps):
            own = dataset_channel_stats(ds)
        clients.append(ClientState(
            ds.client_id, ds,
            pipeline.with_mode(Mode.TRAIN), pipeline.with_mode(Mode.TEST),
            client_rng(seed, ds.client_id),
            registry=registry, own_stats=own, num_classes=federation.num_classes,
        ))
    return clients


def run_experiment(federation: FederationData, spec: ModelSpec, pipeline: AugmentationPipeline,
                   cfg: AlgorithmConfig, seed: int, workers: int = 1,
                   trace: list | None = None, pooled_stats: bool = False) -> ExperimentResult:
    """Run ``cfg.rounds`` rounds of local training, aggregation, server update and evaluation.

    The statistics exchange runs first when the pipeline needs the registry;
    FedMix pipelines upload mean images once before training. Results are a
    pure function of the inputs and ``seed``; ``workers`` only changes how
    clients of a round are scheduled.
    """
    if tuple(spec.input_shape) != tuple(federation.image_shape) or spec.num_classes != federation.num_classes:
        raise ConfigError(f"model expects {spec.input_shape} / {spec.num_classes} classes, data is "
                          f"{federation.image_shape} / {federation.num_classes}", "model")
    uploads: list[Upload] = []
    registry, messages = None, []
    if pipeline.uses_registry:
        registry, messages = run_stats_round(federation, pooled=pooled_stats)
        uploads += [Upload(-1, m.client_id, "stats", m.float_payload()) for m in messages]
    clients = build_clients(federation, pipeline, seed, registry)

    if pipeline.uses_mean_images:
        step = next(s for s in pipeline.steps if isinstance(s, FedMix))
        pools = []
        for c in clients:
            m = mean_images(c.dataset.train_x, step.mean_batch_size,
                            np.random.default_rng(np.random.SeedSequence([int(seed), 0xFED, c.client_id])))
            pools.append(m)
            uploads.append(Upload(-1, c.client_id, "mean_images", int(m.size)))
        shared = np.concatenate(pools)
        shared.flags.writeable = False
        for c in clients:
            c.shared_mean_images = shared

    initial = init_params(spec, seed)
    server = init_server(initial, cfg)
    counts = federation.counts
    reports: list[RoundReport] = []
    locals_: list[ParameterVector] = []

    def train_one(client: ClientState):
        try:
            return _local_train(client, server.global_params, cfg, spec, trace)
        except FedRDNError as exc:
            raise ExperimentError(str(exc), server.t, client.client_id) from exc

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(cfg.rounds):
            start = time.perf_counter()
            results = list(pool.map(train_one, clients)) if pool else [train_one(c) for c in clients]
            locals_ = [r[0] for r in results]
            uploads += [Upload(t, c.client_id, "params", p.total_len) for c, p in zip(clients, locals_)]
            try:
                server = server_update(server, aggregate_weighted(locals_, counts), cfg)
            except FedRDNError as exc:
                raise ExperimentError(str(exc), t) from exc
            metrics = []
            for c, (_, tr_loss, tr_acc) in zip(clients, results):
                try:
                    acc, loss = evaluate(c, server.global_params, spec, trace)
                except FedRDNError as exc:
                    raise ExperimentError(str(exc), t, c.client_id) from exc
                metrics.append(ClientRoundMetrics(c.client_id, tr_loss, tr_acc, loss, acc))
            accs = np.array([m.test_accuracy for m in metrics])
            reports.append(RoundReport(
                t, tuple(metrics),
                float(np.dot(aggregation_weights(counts), accs)),
                float(accs.mean()),
                time.perf_counter() - start,
            ))
    finally:
        if pool:
            pool.shutdown()
    return ExperimentResult(reports, initial, server.global_params, locals_, registry, messages, uploads, clients)
