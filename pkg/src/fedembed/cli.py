"""Experiment orchestration: config files, subcommands, reports.

Configs are flat ``key = value`` text files ('#' starts a comment); every key
has a documented default except ``seed``, which is mandatory. Command-line
flags override file values. All outputs except opt-in wall-clock timing are
deterministic functions of the config, so reruns produce byte-identical
files.

Subcommands: gen-data, train, eval, compare, serve, client.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import binfmt, data, evaluation, nn, wire
from .errors import ConfigurationError, FedEmbedError, ProtocolError
from .federation import (
    FederationConfig,
    HistoryRecord,
    run_federation,
    train_centralised,
)

# seed-derivation tags for cli-owned randomness
TAG_EVAL_SPLIT = 31
TAG_INDIVIDUAL = 23
TAG_JOINT = 29

HISTORY_COLUMNS = ("epoch", "client", "loss_c", "loss_e", "loss_r", "selected",
                   "rank1", "map", "wall_ms")

# key -> (kind, default); a None default marks a mandatory key
CONFIG_KEYS = {
    # federation protocol
    "clients": ("int", 4),
    "fraction": ("float", 1.0),
    "beta": ("float", 0.0),
    "noise_placement": ("str", "single"),
    "local_steps": ("int", 1),
    "epochs": ("int", 100),
    "temperature": ("float", 3.0),
    "strategy": ("str", "fedembed"),
    "batch_size": ("int", 32),
    "seed": ("int", None),
    # model
    "embed_hidden": ("ints", (48,)),
    "embed_dim": ("int", 24),
    "head_hidden": ("int", 32),
    "head_batchnorm": ("bool", False),
    "head_dropout_keep": ("float", 1.0),
    # optimiser
    "embed_lr": ("float", 0.01),
    "head_lr": ("float", 0.1),
    "lr_decay": ("float", 0.1),
    "lr_decay_every": ("int", 40),
    "momentum": ("float", 0.9),
    "weight_decay": ("float", 5e-4),
    "nesterov": ("bool", True),
    "reset_momentum_each_epoch": ("bool", True),
    # augmentation
    "aug_jitter": ("float", 0.05),
    "aug_dropout": ("float", 0.0),
    "aug_scale_range": ("float", 0.0),
    # synthetic data
    "domains": ("int", 4),
    "identities_per_domain": ("int", 12),
    "images_per_identity": ("int", 6),
    "feature_dim": ("int", 32),
    "latent_dim": ("int", 6),
    "cluster_spread": ("float", 0.5),
    "sample_noise": ("float", 0.5),
    "translation_scale": ("float", 1.0),
    "subspace_mix": ("float", 0.5),
    "eval_identities": ("int", 20),
    "eval_images_per_identity": ("int", 5),
    "data_dir": ("str", ""),
    # run control
    "eval_every": ("int", 10),
    "out_dir": ("str", "runs/out"),
    "mode": ("str", "simulate"),
    "endpoint": ("str", "127.0.0.1:7171"),
    "client_id": ("int", 0),
    "dataset": ("str", ""),
    "checkpoint": ("str", ""),
    "record_timing": ("bool", False),
    "barrier_timeout": ("float", 60.0),
}

_MODES = ("simulate", "serve", "client")


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment: the federation contract plus data and I/O."""

    fed: FederationConfig
    domains: int = 4
    identities_per_domain: int = 12
    images_per_identity: int = 6
    latent_dim: int = 6
    cluster_spread: float = 0.5
    sample_noise: float = 0.5
    translation_scale: float = 1.0
    subspace_mix: float = 0.5
    eval_identities: int = 20
    eval_images_per_identity: int = 5
    data_dir: str = ""
    eval_every: int = 10
    out_dir: str = "runs/out"
    mode: str = "simulate"
    endpoint: str = "127.0.0.1:7171"
    client_id: int = 0
    dataset: str = ""
    checkpoint: str = ""
    record_timing: bool = False

    def endpoint_parts(self) -> tuple[str, int]:
        host, _, port = self.endpoint.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigurationError(f"endpoint must be host:port, got {self.endpoint!r}")
        return host, int(port)


def _coerce(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw.strip()
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    return values


def parse_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Build a fully validated config from an optional file plus raw overrides.

    Unknown keys are rejected by name; unset keys take the documented
    defaults; a missing seed is an error.
    """
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(read_config_file(path))
    raw.update(overrides or {})
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    values = {}
    for key, (kind, default) in CONFIG_KEYS.items():
        if key in raw:
            values[key] = _coerce(key, kind, str(raw[key]))
        else:
            values[key] = default
    if values["seed"] is None:
        raise ConfigurationError("config key 'seed' is mandatory")
    if values["mode"] not in _MODES:
        raise ConfigurationError(f"mode must be one of {_MODES}, got {values['mode']!r}")
    if values["clients"] > values["domains"]:
        raise ConfigurationError(
            f"{values['clients']} clients need at least that many domains, "
            f"got {values['domains']}")
    fed = FederationConfig(
        clients=values["clients"], fraction=values["fraction"], beta=values["beta"],
        noise_placement=values["noise_placement"], local_steps=values["local_steps"],
        epochs=values["epochs"], temperature=values["temperature"],
        strategy=values["strategy"], batch_size=values["batch_size"],
        seed=values["seed"], feature_dim=values["feature_dim"],
        embed_hidden=values["embed_hidden"], embed_dim=values["embed_dim"],
        head_hidden=values["head_hidden"], head_batchnorm=values["head_batchnorm"],
        head_dropout_keep=values["head_dropout_keep"],
        identities_per_client=(values["identities_per_domain"],) * values["clients"],
        embed_lr=values["embed_lr"], head_lr=values["head_lr"],
        lr_decay=values["lr_decay"], lr_decay_every=values["lr_decay_every"],
        momentum=values["momentum"], weight_decay=values["weight_decay"],
        nesterov=values["nesterov"],
        reset_momentum_each_epoch=values["reset_momentum_each_epoch"],
        aug=data.AugmentConfig(jitter=values["aug_jitter"], dropout=values["aug_dropout"],
                               scale_range=values["aug_scale_range"]),
        barrier_timeout=values["barrier_timeout"],
    )
    return ExperimentConfig(
        fed=fed, domains=values["domains"],
        identities_per_domain=values["identities_per_domain"],
        images_per_identity=values["images_per_identity"],
        latent_dim=values["latent_dim"], cluster_spread=values["cluster_spread"],
        sample_noise=values["sample_noise"],
        translation_scale=values["translation_scale"],
        subspace_mix=values["subspace_mix"],
        eval_identities=values["eval_identities"],
        eval_images_per_identity=values["eval_images_per_identity"],
        data_dir=values["data_dir"], eval_every=values["eval_every"],
        out_dir=values["out_dir"], mode=values["mode"], endpoint=values["endpoint"],
        client_id=values["client_id"], dataset=values["dataset"],
        checkpoint=values["checkpoint"], record_timing=values["record_timing"],
    )


def train_domain_specs(cfg: ExperimentConfig) -> list[data.DomainSpec]:
    common = dict(
        num_identities=cfg.identities_per_domain,
        images_per_identity=cfg.images_per_identity,
        feature_dim=cfg.fed.feature_dim, latent_dim=cfg.latent_dim,
        cluster_spread=cfg.cluster_spread, noise_scale=cfg.sample_noise,
        translation_scale=cfg.translation_scale, subspace_mix=cfg.subspace_mix,
    )
    return [data.default_domain_spec(cfg.fed.seed, d, split="train", **common)
            for d in range(cfg.domains)]


def eval_domain_spec(cfg: ExperimentConfig) -> data.DomainSpec:
    return data.default_domain_spec(
        cfg.fed.seed, cfg.domains, split="test",
        num_identities=cfg.eval_identities,
        images_per_identity=cfg.eval_images_per_identity,
        feature_dim=cfg.fed.feature_dim, latent_dim=cfg.latent_dim,
        cluster_spread=cfg.cluster_spread, noise_scale=cfg.sample_noise,
        translation_scale=cfg.translation_scale, subspace_mix=cfg.subspace_mix)


def build_datasets(cfg: ExperimentConfig) -> tuple[list[data.DomainDataset], data.DomainDataset]:
    """Training domains plus the held-out evaluation domain.

    Loads from ``data_dir`` when set (files as written by gen-data),
    otherwise generates in memory from the config's synthetic-data keys.
    """
    if cfg.data_dir:
        base = Path(cfg.data_dir)
        if not base.is_dir():
            raise ConfigurationError(f"data_dir {base} does not exist")
        train = [data.load_dataset(base / f"domain_{d}.fdds") for d in range(cfg.domains)]
        held_out = data.load_dataset(base / "eval.fdds")
    else:
        train = [data.generate_domain(s) for s in train_domain_specs(cfg)]
        held_out = data.generate_domain(eval_domain_spec(cfg))
    return train, held_out


def make_embedding_net(dims, values=None) -> nn.EmbeddingNet:
    net = nn.EmbeddingNet(dims, init_seed=[0])
    if values is not None:
        if np.asarray(values).size != net.params.size:
            raise ConfigurationError(
                f"{np.asarray(values).size} parameter values for architecture {tuple(dims)}")
        net.params.values[:] = values
    return net


def save_checkpoint(path, dims, values: np.ndarray) -> None:
    blob = binfmt.pack_record(binfmt.CHECKPOINT_MAGIC, [len(dims), *dims], [values])
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> nn.EmbeddingNet:
    header, arrays = binfmt.unpack_record(Path(path).read_bytes(), binfmt.CHECKPOINT_MAGIC)
    if not header or len(header) != header[0] + 1 or len(arrays) != 1:
        raise binfmt.MalformedHeaderError("checkpoint header/payload layout is invalid")
    return make_embedding_net(header[1:], arrays[0])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_history_csv(records: list[HistoryRecord], path) -> None:
    """One row per (epoch, client); eval metrics repeat on each row of the epoch."""
    lines = [",".join(HISTORY_COLUMNS)]
    for rec in records:
        for cid in sorted(rec.client_losses):
            comp = rec.client_losses[cid]
            lines.append(",".join([
                str(rec.epoch), str(cid), _fmt(comp["loss_c"]), _fmt(comp["loss_e"]),
                _fmt(comp["loss_r"]), str(int(cid in rec.selected)),
                _fmt(rec.rank1), _fmt(rec.mean_ap), str(rec.wall_ms),
            ]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_metrics_csv(result: evaluation.RetrievalResult, path) -> None:
    ks = sorted(result.rank_accuracies)
    header = ",".join([f"rank{k}" for k in ks] + ["map"])
    row = ",".join([_fmt(result.rank_accuracies[k]) for k in ks] + [_fmt(result.mean_ap)])
    Path(path).write_text(header + "\n" + row + "\n")


class RetrievalScorer:
    """Retrieval scoring on a fixed query/gallery split of the held-out domain.

    Callable with (embed_values, epoch) so it plugs straight into
    run_federation's eval hook; ``score`` takes a built network.
    """

    def __init__(self, cfg: ExperimentConfig, held_out: data.DomainDataset):
        self.embed_dims = cfg.fed.embed_dims
        split_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([data.derive_seed(cfg.fed.seed, TAG_EVAL_SPLIT)])))
        self.query_ds, self.gallery_ds = data.make_query_gallery_split(held_out, split_rng)

    def __call__(self, embed_values: np.ndarray, epoch: int) -> tuple[float, float]:
        res = self.score(make_embedding_net(self.embed_dims, embed_values))
        return res.rank1, res.mean_ap

    def score(self, embed_net: nn.EmbeddingNet) -> evaluation.RetrievalResult:
        return evaluation.evaluate_retrieval(embed_net, self.query_ds, self.gallery_ds)


def ensemble_param_average(nets: list[nn.EmbeddingNet]) -> nn.EmbeddingNet:
    """One-shot coordinate-wise mean of fully trained models (no iteration)."""
    if len(nets) < 2:
        raise FedEmbedError("parameter averaging needs at least two models")
    dims = nets[0].dims
    if any(net.dims != dims for net in nets):
        raise FedEmbedError(f"architecture mismatch: {[net.dims for net in nets]}")
    mean = np.mean(np.stack([net.params.values for net in nets]), axis=0)
    return make_embedding_net(dims, mean)


def ensemble_feature_concat(nets: list[nn.EmbeddingNet], query_ds, gallery_ds
                            ) -> evaluation.RetrievalResult:
    """Concatenate every model's embeddings along the feature axis, then score."""
    if len(nets) < 2:
        raise FedEmbedError("feature concatenation needs at least two models")
    if any(net.input_dim != nets[0].input_dim for net in nets):
        raise FedEmbedError("architecture mismatch: differing input dims")
    q = np.concatenate([evaluation.extract_embeddings(n, query_ds.features) for n in nets],
                       axis=1)
    g = np.concatenate([evaluation.extract_embeddings(n, gallery_ds.features) for n in nets],
                       axis=1)
    dists = evaluation.l2_distance_matrix(q, g)
    ranks = evaluation.cmc(dists, query_ds.labels, gallery_ds.labels)
    mean_ap, aps = evaluation.mean_average_precision(dists, query_ds.labels,
                                                     gallery_ds.labels)
    return evaluation.RetrievalResult(ranks, mean_ap, aps)


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    out = _outdir(cfg)
    for spec in train_domain_specs(cfg):
        path = out / f"domain_{spec.domain_id}.fdds"
        data.save_dataset(data.generate_domain(spec), path)
        print(f"wrote {path}")
    path = out / "eval.fdds"
    data.save_dataset(data.generate_domain(eval_domain_spec(cfg)), path)
    print(f"wrote {path}")
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    out = _outdir(cfg)
    train, held_out = build_datasets(cfg)
    scorer = RetrievalScorer(cfg, held_out)
    server, history = run_federation(
        cfg.fed, train[:cfg.fed.clients], eval_fn=scorer,
        eval_every=cfg.eval_every, record_timing=cfg.record_timing)
    write_history_csv(history, out / "history.csv")
    save_checkpoint(out / "checkpoint.fdck", cfg.fed.embed_dims, server.embed_values)
    final = scorer.score(make_embedding_net(cfg.fed.embed_dims, server.embed_values))
    write_metrics_csv(final, out / "metrics.csv")
    print(f"trained {cfg.fed.strategy} for {cfg.fed.epochs} epochs: "
          f"rank1={final.rank1:.4f} map={final.mean_ap:.4f}")
    return 0


def cmd_eval(cfg: ExperimentConfig) -> int:
    out = _outdir(cfg)
    ckpt = cfg.checkpoint or (out / "checkpoint.fdck")
    net = load_checkpoint(ckpt)
    _, held_out = build_datasets(cfg)
    result = RetrievalScorer(cfg, held_out).score(net)
    write_metrics_csv(result, out / "metrics.csv")
    print(f"rank1={result.rank1:.4f} map={result.mean_ap:.4f}")
    return 0


def compare_strategies(cfg: ExperimentConfig) -> dict[str, evaluation.RetrievalResult]:
    """Train and score every comparison row on one config.

    Rows: the three federated strategies, the best individually trained
    client, centralised joint training on the merged domains, and the two
    one-shot ensembles of the individuals.
    """
    train, held_out = build_datasets(cfg)
    train = train[:cfg.fed.clients]
    scorer = RetrievalScorer(cfg, held_out)
    results: dict[str, evaluation.RetrievalResult] = {}

    for strategy in ("fedembed", "fedavg", "fedsgd"):
        fed = replace(cfg.fed, strategy=strategy,
                      fraction=1.0 if strategy == "fedsgd" else cfg.fed.fraction,
                      local_steps=1 if strategy == "fedsgd" else cfg.fed.local_steps)
        server, _ = run_federation(fed, train)
        results[strategy] = scorer.score(make_embedding_net(fed.embed_dims,
                                                            server.embed_values))

    individuals = []
    individual_results = []
    for cid, ds in enumerate(train):
        client = train_centralised(
            ds, cfg.fed, seed=data.derive_seed(cfg.fed.seed, TAG_INDIVIDUAL, cid))
        individuals.append(client.embed)
        individual_results.append(scorer.score(client.embed))
    best = max(range(len(train)), key=lambda i: individual_results[i].rank1)
    results["individual-best"] = individual_results[best]

    merged = data.merge_domains(train)
    joint = train_centralised(
        merged, cfg.fed, seed=data.derive_seed(cfg.fed.seed, TAG_JOINT),
        steps_per_epoch=cfg.fed.local_steps * cfg.fed.clients)
    results["centralised-joint"] = scorer.score(joint.embed)

    results["param-average"] = scorer.score(ensemble_param_average(individuals))
    results["feat-concat"] = ensemble_feature_concat(individuals, scorer.query_ds,
                                                     scorer.gallery_ds)
    return results


def write_compare_csv(results: dict[str, evaluation.RetrievalResult], path) -> None:
    ks = sorted(next(iter(results.values())).rank_accuracies)
    lines = [",".join(["strategy"] + [f"rank{k}" for k in ks] + ["map"])]
    for name, res in results.items():
        lines.append(",".join([name] + [_fmt(res.rank_accuracies[k]) for k in ks]
                              + [_fmt(res.mean_ap)]))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_compare(cfg: ExperimentConfig) -> int:
    out = _outdir(cfg)
    results = compare_strategies(cfg)
    write_compare_csv(results, out / "compare.csv")
    width = max(len(k) for k in results)
    for name, res in results.items():
        print(f"{name:<{width}}  rank1={res.rank1:.4f}  map={res.mean_ap:.4f}")
    return 0


def cmd_serve(cfg: ExperimentConfig) -> int:
    out = _outdir(cfg)
    host, port = cfg.endpoint_parts()
    server, _ = wire.serve(cfg.fed, host, port)
    save_checkpoint(out / "checkpoint.fdck", cfg.fed.embed_dims, server.embed_values)
    print(f"served {cfg.fed.epochs} epochs to {cfg.fed.clients} clients")
    return 0


def cmd_client(cfg: ExperimentConfig) -> int:
    if not cfg.dataset:
        raise ConfigurationError("client mode requires the 'dataset' key or --dataset")
    host, port = cfg.endpoint_parts()
    wire.run_client(cfg.fed, cfg.client_id, host, port, cfg.dataset)
    print(f"client {cfg.client_id} finished")
    return 0


_FLAG_KEYS = {
    "seed": "seed", "out": "out_dir", "endpoint": "endpoint", "strategy": "strategy",
    "beta": "beta", "fraction": "fraction", "local_steps": "local_steps",
    "clients": "clients", "client_id": "client_id", "dataset": "dataset",
    "checkpoint": "checkpoint",
}

_COMMANDS = {
    "gen-data": (cmd_gen_data, "simulate"),
    "train": (cmd_train, "simulate"),
    "eval": (cmd_eval, "simulate"),
    "compare": (cmd_compare, "simulate"),
    "serve": (cmd_serve, "serve"),
    "client": (cmd_client, "client"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedembed",
                                     description="Federated embedding-learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to a key=value config file")
        p.add_argument("--seed", help="master seed (mandatory here or in the file)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--endpoint", help="host:port for serve/client modes")
        p.add_argument("--strategy", help="fedavg | fedsgd | fedembed | fedembed-noexpert")
        p.add_argument("--beta", help="privacy noise scale")
        p.add_argument("--fraction", help="client fraction aggregated per epoch")
        p.add_argument("--local-steps", dest="local_steps", help="local steps per epoch")
        p.add_argument("--clients", help="number of clients")
        p.add_argument("--client-id", dest="client_id", help="this client's id")
        p.add_argument("--dataset", help="dataset file for client mode")
        p.add_argument("--checkpoint", help="checkpoint file for eval mode")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {key: getattr(args, flag) for flag, key in _FLAG_KEYS.items()
                 if getattr(args, flag, None) is not None}
    command, mode = _COMMANDS[args.command]
    overrides["mode"] = mode
    try:
        cfg = parse_config(args.config, overrides)
        return command(cfg)
    except (wire.FrameError, ProtocolError) as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return 2
    except (FedEmbedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
