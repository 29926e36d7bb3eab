"""Client/server federation of embedding models.

One global epoch is: broadcast global parameters to every client, snapshot
each client's previous parameters into its local expert, run local minibatch
steps per client, then average the selected clients' updates back into the
global model. Four strategies are supported:

* ``fedavg``  - full-model averaging; heads padded to the largest identity
  count so the whole parameter vector is averageable.
* ``fedsgd``  - fedavg constrained to fraction 1.0 and one local step.
* ``fedembed`` - only the embedding network is aggregated; each client keeps
  its own classification head, and a local expert (a copy of the client's
  pre-broadcast model) regularises training via distillation.
* ``fedembed-noexpert`` - fedembed without the expert (ablation).

Optional white noise hides individual contributions: ``single`` placement
adds beta-scaled noise to the aggregated embedding, ``double`` additionally
perturbs every broadcast.

All randomness flows from one master seed through fixed stream tags, so runs
are bit-reproducible and clients may train concurrently or in separate
processes with identical results. Within the server stream, each epoch draws
selection first, then per-client broadcast noise in client-id order, then
aggregation noise.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses, nn
from .data import AugmentConfig, DomainDataset, augment_batch
from .errors import ConfigurationError, FedEmbedError, ProtocolError, UsageError

STRATEGIES = ("fedavg", "fedsgd", "fedembed", "fedembed-noexpert")
NOISE_PLACEMENTS = ("none", "single", "double")

# rng stream tags, combined with the master seed
TAG_SERVER_RNG = 1
TAG_EMBED_INIT = 2
TAG_SERVER_HEAD_INIT = 3
TAG_CLIENT_RNG = 4      # + client id
TAG_CLIENT_HEAD_INIT = 5  # + client id


def _stream(*entropy) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


@dataclass(frozen=True)
class FederationConfig:
    """Everything a participant needs to train: protocol, model and optimiser."""

    clients: int = 4
    fraction: float = 1.0
    beta: float = 0.0
    noise_placement: str = "single"
    local_steps: int = 1
    epochs: int = 100
    temperature: float = 3.0
    strategy: str = "fedembed"
    batch_size: int = 32
    seed: int = 0
    feature_dim: int = 32
    embed_hidden: tuple[int, ...] = (48,)
    embed_dim: int = 24
    head_hidden: int = 32
    head_batchnorm: bool = False
    head_dropout_keep: float = 1.0
    identities_per_client: tuple[int, ...] = (12, 12, 12, 12)
    embed_lr: float = 0.01
    head_lr: float = 0.1
    lr_decay: float = 0.1
    lr_decay_every: int = 40
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    reset_momentum_each_epoch: bool = True
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    barrier_timeout: float = 60.0

    def __post_init__(self):
        if self.clients < 1:
            raise ConfigurationError(f"need at least one client, got {self.clients}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError(
                f"client fraction must be in (0, 1], got {self.fraction}"
                + (" (fraction 0 would select zero clients)" if self.fraction == 0 else ""))
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError(f"noise scale beta must be in [0, 1], got {self.beta}")
        if self.noise_placement not in NOISE_PLACEMENTS:
            raise ConfigurationError(f"noise placement must be one of {NOISE_PLACEMENTS}")
        if self.local_steps < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("local_steps, epochs and batch_size must be >= 1")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}")
        if self.strategy == "fedsgd" and (self.fraction != 1.0 or self.local_steps != 1):
            raise ConfigurationError(
                "fedsgd is by definition fraction=1.0 with one local step; "
                f"got fraction={self.fraction}, local_steps={self.local_steps}")
        if len(self.identities_per_client) != self.clients:
            raise ConfigurationError(
                f"identities_per_client has {len(self.identities_per_client)} entries "
                f"for {self.clients} clients")
        if any(z < 2 for z in self.identities_per_client):
            raise ConfigurationError("every client needs at least 2 identities")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")

    @property
    def selected_count(self) -> int:
        return math.ceil(round(self.fraction * self.clients, 9))

    @property
    def embed_dims(self) -> tuple[int, ...]:
        return (self.feature_dim, *self.embed_hidden, self.embed_dim)

    @property
    def aggregates_full_model(self) -> bool:
        return self.strategy in ("fedavg", "fedsgd")

    @property
    def uses_expert(self) -> bool:
        return self.strategy == "fedembed"

    def head_out_dim(self, client_id: int) -> int:
        if self.aggregates_full_model:
            return max(self.identities_per_client)
        return self.identities_per_client[client_id]

    def embed_schedule(self) -> nn.LrSchedule:
        return nn.LrSchedule(self.embed_lr, self.lr_decay, self.lr_decay_every)

    def head_schedule(self) -> nn.LrSchedule:
        return nn.LrSchedule(self.head_lr, self.lr_decay, self.lr_decay_every)

    def canonical_text(self) -> str:
        """Stable key=value rendering used to fingerprint a run's contract."""
        items = {
            "clients": self.clients, "fraction": repr(self.fraction),
            "beta": repr(self.beta), "noise_placement": self.noise_placement,
            "local_steps": self.local_steps, "epochs": self.epochs,
            "temperature": repr(self.temperature), "strategy": self.strategy,
            "batch_size": self.batch_size, "seed": self.seed,
            "feature_dim": self.feature_dim,
            "embed_hidden": ",".join(map(str, self.embed_hidden)),
            "embed_dim": self.embed_dim, "head_hidden": self.head_hidden,
            "head_batchnorm": self.head_batchnorm,
            "head_dropout_keep": repr(self.head_dropout_keep),
            "identities_per_client": ",".join(map(str, self.identities_per_client)),
            "embed_lr": repr(self.embed_lr), "head_lr": repr(self.head_lr),
            "lr_decay": repr(self.lr_decay), "lr_decay_every": self.lr_decay_every,
            "momentum": repr(self.momentum), "weight_decay": repr(self.weight_decay),
            "nesterov": self.nesterov,
            "reset_momentum_each_epoch": self.reset_momentum_each_epoch,
            "aug_jitter": repr(self.aug.jitter), "aug_dropout": repr(self.aug.dropout),
            "aug_scale_range": repr(self.aug.scale_range),
        }
        return "\n".join(f"{k}={v}" for k, v in sorted(items.items()))


@dataclass
class ClientState:
    """One client: private dataset, trainable model, optional local expert."""

    client_id: int
    dataset: DomainDataset
    embed: nn.EmbeddingNet
    head: nn.MappingNet
    opt_embed: nn.OptimizerState
    opt_head: nn.OptimizerState
    rng: np.random.Generator
    expert_embed: nn.EmbeddingNet | None = None
    expert_head: nn.MappingNet | None = None
    expert_opt_embed: nn.OptimizerState | None = None
    expert_opt_head: nn.OptimizerState | None = None
    pre_broadcast_embed: np.ndarray | None = None
    pre_broadcast_head: np.ndarray | None = None

    def optimizers(self) -> list[nn.OptimizerState]:
        opts = [self.opt_embed, self.opt_head]
        if self.expert_opt_embed is not None:
            opts += [self.expert_opt_embed, self.expert_opt_head]
        return opts


@dataclass
class ServerState:
    """Global model state: federated parameters, epoch counter, rng stream.

    Holds no dataset and, outside the full-model baselines, no head
    parameters.
    """

    embed_values: np.ndarray
    head_values: np.ndarray | None
    epoch: int
    rng: np.random.Generator


@dataclass
class ModelUpdate:
    client_id: int
    embed_values: np.ndarray
    head_values: np.ndarray | None = None


@dataclass
class BroadcastPayload:
    epoch: int
    selected: bool
    embed_values: np.ndarray
    head_values: np.ndarray | None = None


@dataclass
class AggregateResult:
    embed_values: np.ndarray
    head_values: np.ndarray | None
    noise: np.ndarray | None


@dataclass
class HistoryRecord:
    epoch: int
    client_losses: dict[int, dict[str, float]]
    selected: tuple[int, ...]
    rank1: float | None = None
    mean_ap: float | None = None
    wall_ms: int = 0


def _make_optimizer(config: FederationConfig, block: nn.ParamBlock) -> nn.OptimizerState:
    return nn.OptimizerState(block, momentum=config.momentum,
                             weight_decay=config.weight_decay,
                             nesterov=config.nesterov and config.momentum > 0)


def build_server(config: FederationConfig) -> ServerState:
    embed = nn.EmbeddingNet(config.embed_dims, init_seed=[config.seed, TAG_EMBED_INIT])
    head_values = None
    if config.aggregates_full_model:
        head = nn.MappingNet(config.embed_dim, config.head_hidden,
                             config.head_out_dim(0),
                             batchnorm=config.head_batchnorm,
                             dropout_keep=config.head_dropout_keep,
                             init_seed=[config.seed, TAG_SERVER_HEAD_INIT])
        head_values = head.params.values
    return ServerState(embed_values=embed.params.values, head_values=head_values,
                       epoch=0, rng=_stream(config.seed, TAG_SERVER_RNG))


def build_client(config: FederationConfig, client_id: int,
                 dataset: DomainDataset) -> ClientState:
    if not 0 <= client_id < config.clients:
        raise ConfigurationError(f"client id {client_id} outside [0, {config.clients})")
    if dataset.feature_dim != config.feature_dim:
        raise ConfigurationError(
            f"dataset feature dim {dataset.feature_dim} != configured {config.feature_dim}")
    expected = config.identities_per_client[client_id]
    if dataset.num_identities != expected:
        raise ConfigurationError(
            f"client {client_id} dataset has {dataset.num_identities} identities, "
            f"config says {expected}")
    embed = nn.EmbeddingNet(config.embed_dims, init_seed=[config.seed, TAG_EMBED_INIT])
    head = nn.MappingNet(config.embed_dim, config.head_hidden,
                         config.head_out_dim(client_id),
                         batchnorm=config.head_batchnorm,
                         dropout_keep=config.head_dropout_keep,
                         init_seed=[config.seed, TAG_CLIENT_HEAD_INIT, client_id])
    return ClientState(
        client_id=client_id, dataset=dataset, embed=embed, head=head,
        opt_embed=_make_optimizer(config, embed.params),
        opt_head=_make_optimizer(config, head.params),
        rng=_stream(config.seed, TAG_CLIENT_RNG, client_id),
    )


def make_broadcast_payload(server: ServerState, config: FederationConfig,
                           selected: bool) -> BroadcastPayload:
    embed = server.embed_values.copy()
    if (config.beta > 0.0 and config.noise_placement == "double"
            and not config.aggregates_full_model):
        embed = embed + config.beta * server.rng.standard_normal(embed.size)
    head = server.head_values.copy() if server.head_values is not None else None
    return BroadcastPayload(epoch=server.epoch, selected=selected,
                            embed_values=embed, head_values=head)


def apply_broadcast(client: ClientState, payload: BroadcastPayload,
                    config: FederationConfig) -> ClientState:
    """Install global parameters, stashing the client's previous ones first."""
    client.pre_broadcast_embed = client.embed.params.values.copy()
    client.pre_broadcast_head = client.head.params.values.copy()
    if payload.embed_values.shape != client.embed.params.values.shape:
        raise ProtocolError(
            f"broadcast embed length {payload.embed_values.size} != client "
            f"{client.embed.params.size}")
    client.embed.params.values[:] = payload.embed_values
    if config.aggregates_full_model:
        if payload.head_values is None:
            raise ProtocolError("full-model strategy broadcast is missing head parameters")
        if payload.head_values.shape != client.head.params.values.shape:
            raise ProtocolError(
                f"broadcast head length {payload.head_values.size} != client "
                f"{client.head.params.size}")
        client.head.params.values[:] = payload.head_values
    return client


def broadcast(server: ServerState, client: ClientState,
              config: FederationConfig) -> ClientState:
    """Send the current global parameters to one client (head untouched unless
    the strategy federates the full model)."""
    return apply_broadcast(client, make_broadcast_payload(server, config, True), config)


def init_expert(client: ClientState, config: FederationConfig) -> ClientState:
    """Reset the local expert to the client's pre-broadcast parameters.

    A no-op for strategies without an expert. Must run after the broadcast
    (which stashes the snapshot) and before the epoch's local steps.
    """
    if not config.uses_expert:
        return client
    if client.pre_broadcast_embed is None:
        raise UsageError("init_expert requires a prior broadcast this epoch")
    if client.expert_embed is None:
        client.expert_embed = nn.EmbeddingNet(
            config.embed_dims,
            params=nn.ParamBlock(client.embed.params.segments,
                                 client.pre_broadcast_embed.copy()))
        client.expert_head = nn.MappingNet(
            config.embed_dim, config.head_hidden, client.head.out_dim,
            batchnorm=config.head_batchnorm, dropout_keep=config.head_dropout_keep,
            params=nn.ParamBlock(client.head.params.segments,
                                 client.pre_broadcast_head.copy()))
        client.expert_opt_embed = _make_optimizer(config, client.expert_embed.params)
        client.expert_opt_head = _make_optimizer(config, client.expert_head.params)
    else:
        client.expert_embed.params.values[:] = client.pre_broadcast_embed
        client.expert_head.params.values[:] = client.pre_broadcast_head
    return client


def _draw_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.choice(n, size=min(batch_size, n), replace=False)


def run_local_steps(client: ClientState, config: FederationConfig, epoch: int,
                    n_steps: int) -> dict[str, float]:
    """Run minibatch steps on one client, returning mean loss components.

    Per step the client rng is consumed in a fixed order: batch indices,
    client-view augmentation, then (expert strategies only) expert-view
    augmentation and any train-mode dropout draws of the expert and client
    forwards, in that order.
    """
    if len(client.dataset) == 0:
        raise ConfigurationError(f"client {client.client_id} has an empty dataset")
    lr_embed = config.embed_schedule().at(epoch)
    lr_head = config.head_schedule().at(epoch)
    expert_on = config.uses_expert and client.expert_embed is not None
    full_spec = losses.LossSpec(classification=True, expert=expert_on,
                                distill=expert_on, temperature=config.temperature)
    client_spec = losses.LossSpec(classification=True, expert=False,
                                  distill=expert_on, temperature=config.temperature)
    expert_spec = losses.LossSpec(classification=True, expert=False,
                                  distill=False, temperature=config.temperature)
    sums = {"loss_c": 0.0, "loss_e": 0.0, "loss_r": 0.0}
    for _ in range(n_steps):
        idx = _draw_batch(client.rng, len(client.dataset), config.batch_size)
        x = client.dataset.features[idx]
        y = client.dataset.labels[idx]
        x_client = augment_batch(x, config.aug, client.rng)
        teacher_logits = None
        if expert_on:
            x_expert = augment_batch(x, config.aug, client.rng)
            teacher_logits = nn.forward_pair(client.expert_embed, client.expert_head,
                                             x_expert, train=True, rng=client.rng)
        logits = nn.forward_pair(client.embed, client.head, x_client,
                                 train=True, rng=client.rng)
        _, comps = losses.client_loss(logits, teacher_logits, y, full_spec)
        for k in sums:
            sums[k] += comps[k]
        grad_embed, grad_head, _ = nn.backward(client.embed, client.head, x_client,
                                               y, client_spec, teacher_logits)
        if expert_on:
            eg_embed, eg_head, _ = nn.backward(client.expert_embed, client.expert_head,
                                               x_expert, y, expert_spec)
        nn.sgd_step(client.embed.params, grad_embed, client.opt_embed, lr_embed)
        nn.sgd_step(client.head.params, grad_head, client.opt_head, lr_head)
        if expert_on:
            nn.sgd_step(client.expert_embed.params, eg_embed,
                        client.expert_opt_embed, lr_embed)
            nn.sgd_step(client.expert_head.params, eg_head,
                        client.expert_opt_head, lr_head)
    return {k: v / n_steps for k, v in sums.items()}


def local_round(client: ClientState, config: FederationConfig,
                epoch: int) -> tuple[ModelUpdate, dict[str, float]]:
    """One client's local training for one global epoch, emitting its update."""
    comps = run_local_steps(client, config, epoch, config.local_steps)
    update = ModelUpdate(
        client_id=client.client_id,
        embed_values=client.embed.params.values.copy(),
        head_values=(client.head.params.values.copy()
                     if config.aggregates_full_model else None),
    )
    return update, comps


def select_clients(n: int, fraction: float, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniformly select ceil(fraction*n) distinct client ids, returned sorted."""
    if n < 1:
        raise ConfigurationError(f"need at least one client, got {n}")
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(
            f"fraction must be in (0, 1], got {fraction}"
            + (" (fraction 0 would select zero clients)" if fraction == 0 else ""))
    count = math.ceil(round(fraction * n, 9))
    chosen = rng.choice(n, size=count, replace=False)
    return tuple(int(c) for c in sorted(chosen))


def aggregate(updates: list[ModelUpdate], config: FederationConfig,
              rng: np.random.Generator) -> AggregateResult:
    """Coordinate-wise mean of updates, plus optional white noise on the embedding."""
    if not updates:
        raise ProtocolError("cannot aggregate an empty update list")
    sizes = {u.embed_values.size for u in updates}
    if len(sizes) != 1:
        raise ProtocolError(f"updates disagree on embedding length: {sorted(sizes)}")
    embed = np.mean(np.stack([u.embed_values for u in updates]), axis=0)
    noise = None
    if config.beta > 0.0 and config.noise_placement in ("single", "double"):
        noise = rng.standard_normal(embed.size)
        embed = embed + config.beta * noise
    head = None
    if config.aggregates_full_model:
        if any(u.head_values is None for u in updates):
            raise ProtocolError("full-model strategy update is missing head parameters")
        head_sizes = {u.head_values.size for u in updates}
        if len(head_sizes) != 1:
            raise ProtocolError(f"updates disagree on head length: {sorted(head_sizes)}")
        head = np.mean(np.stack([u.head_values for u in updates]), axis=0)
    return AggregateResult(embed_values=embed, head_values=head, noise=noise)


@dataclass
class EpochPlan:
    epoch: int
    selected: tuple[int, ...]
    payloads: dict[int, BroadcastPayload]


class ServerCoordinator:
    """Server-side epoch state machine shared by the in-process and networked modes."""

    def __init__(self, config: FederationConfig):
        self.config = config
        self.server = build_server(config)

    def begin_epoch(self) -> EpochPlan:
        selected = select_clients(self.config.clients, self.config.fraction,
                                  self.server.rng)
        payloads = {cid: make_broadcast_payload(self.server, self.config, cid in selected)
                    for cid in range(self.config.clients)}
        return EpochPlan(epoch=self.server.epoch, selected=selected, payloads=payloads)

    def finish_epoch(self, plan: EpochPlan, updates: dict[int, ModelUpdate]) -> AggregateResult:
        if sorted(updates) != list(plan.selected):
            raise ProtocolError(
                f"epoch {plan.epoch}: got updates from {sorted(updates)}, "
                f"expected {list(plan.selected)}")
        expected = self.server.embed_values.size
        for cid in plan.selected:
            if updates[cid].embed_values.size != expected:
                raise ProtocolError(
                    f"client {cid} update length {updates[cid].embed_values.size} "
                    f"!= server embedding length {expected}")
        result = aggregate([updates[cid] for cid in plan.selected], self.config,
                           self.server.rng)
        self.server.embed_values = result.embed_values
        if self.config.aggregates_full_model:
            self.server.head_values = result.head_values
        self.server.epoch += 1
        return result


def run_federation(config: FederationConfig, datasets: list[DomainDataset], *,
                   eval_fn=None, eval_every: int = 0, record_timing: bool = False,
                   on_after_broadcast=None, on_epoch_end=None
                   ) -> tuple[ServerState, list[HistoryRecord]]:
    """Run the full iterative protocol in one process.

    ``eval_fn(embed_values, epoch) -> (rank1, mean_ap)`` is invoked every
    ``eval_every`` epochs (plus at the final epoch). The two hooks expose the
    live client states right after broadcast and at the end of each epoch.
    Errors from any stage are re-raised with epoch/client context attached.
    """
    if len(datasets) != config.clients:
        raise ConfigurationError(
            f"{len(datasets)} datasets supplied for {config.clients} clients")
    ids = [ds.domain_id for ds in datasets]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(
            f"clients must hold disjoint identity spaces; duplicate domain ids {ids}")
    coordinator = ServerCoordinator(config)
    clients = [build_client(config, cid, ds) for cid, ds in enumerate(datasets)]
    history: list[HistoryRecord] = []
    for epoch in range(config.epochs):
        started = time.perf_counter()
        plan = coordinator.begin_epoch()
        try:
            for client in clients:
                apply_broadcast(client, plan.payloads[client.client_id], config)
            if on_after_broadcast is not None:
                on_after_broadcast(epoch, clients)
            for client in clients:
                init_expert(client, config)
            if config.reset_momentum_each_epoch:
                for client in clients:
                    for opt in client.optimizers():
                        opt.reset()
            updates = {}
            comps = {}
            for client in clients:
                update, comp = local_round(client, config, epoch)
                updates[client.client_id] = update
                comps[client.client_id] = comp
            coordinator.finish_epoch(plan, {cid: updates[cid] for cid in plan.selected})
        except FedEmbedError as exc:
            raise type(exc)(f"epoch {epoch}: {exc}") from exc
        rank1 = mean_ap = None
        if eval_fn is not None and (
                epoch == config.epochs - 1
                or (eval_every > 0 and (epoch + 1) % eval_every == 0)):
            rank1, mean_ap = eval_fn(coordinator.server.embed_values, epoch)
        record = HistoryRecord(
            epoch=epoch, client_losses=comps, selected=plan.selected,
            rank1=rank1, mean_ap=mean_ap,
            wall_ms=int((time.perf_counter() - started) * 1000) if record_timing else 0)
        history.append(record)
        if on_epoch_end is not None:
            on_epoch_end(epoch, coordinator.server, clients, record)
    return coordinator.server, history


def train_centralised(dataset: DomainDataset, config: FederationConfig, *,
                      seed: int | None = None, epochs: int | None = None,
                      steps_per_epoch: int | None = None) -> ClientState:
    """Train one model on one dataset with no federation (baseline runner).

    Uses the same initialisation, rng streams and step code a single fedavg
    client would, so a one-client federation and this loop produce
    bit-identical parameters.
    """
    cfg = replace(config, clients=1, strategy="fedavg", fraction=1.0,
                  identities_per_client=(dataset.num_identities,),
                  seed=config.seed if seed is None else seed,
                  local_steps=1 if config.strategy == "fedsgd" else config.local_steps)
    epochs = cfg.epochs if epochs is None else epochs
    steps = cfg.local_steps if steps_per_epoch is None else steps_per_epoch
    client = build_client(cfg, 0, dataset)
    server = build_server(cfg)
    apply_broadcast(client, make_broadcast_payload(server, cfg, True), cfg)
    for epoch in range(epochs):
        if cfg.reset_momentum_each_epoch:
            for opt in client.optimizers():
                opt.reset()
        run_local_steps(client, cfg, epoch, steps)
    return client
