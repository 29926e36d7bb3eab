"""Synthetic multi-domain datasets with disjoint identity spaces.

Each domain draws identity prototypes in a shared low-dimensional latent
space and embeds them into feature space through a domain-specific
rotation-like map (orthonormal columns), an in-subspace rotation, a
translation and per-image noise. Domains built from different prototype
seeds therefore hold disjoint identity populations, while their feature
subspaces can be made to overlap partially (``subspace_mix``) so that
knowledge learned on several domains transfers to an unseen one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binfmt
from .errors import ConfigurationError, InputError

_SPLITS = ("train", "test")


def _rng(*entropy) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def derive_seed(master: int, *tags: int) -> int:
    """Fold a master seed and namespace tags into one independent integer seed."""
    return int(np.random.SeedSequence([int(master), *map(int, tags)]).generate_state(1, np.uint64)[0])


def _haar_orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Orthonormal-column matrix distributed uniformly over the Stiefel manifold."""
    a = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class DomainSpec:
    """Generation recipe for one domain."""

    domain_id: int
    num_identities: int
    images_per_identity: int
    feature_dim: int
    latent_dim: int = 6
    cluster_spread: float = 0.5     # within-identity jitter in latent space
    noise_scale: float = 0.5        # per-image noise in feature space
    translation_scale: float = 1.0
    subspace_mix: float = 0.5       # 0 = shared feature subspace, 1 = fully domain-specific
    prototype_seed: int = 0         # identity population (shared latent space)
    structure_seed: int = 0         # cross-domain shared subspace
    transform_seed: int = 0         # domain map, translation, per-image draws
    split: str = "train"

    def __post_init__(self):
        if self.num_identities < 2:
            raise ConfigurationError("a domain needs at least 2 identities")
        if self.images_per_identity < 2:
            raise ConfigurationError("each identity needs at least 2 images")
        if not 1 <= self.latent_dim <= self.feature_dim:
            raise ConfigurationError(
                f"latent dim {self.latent_dim} must be in [1, feature dim {self.feature_dim}]")
        if not 0.0 <= self.subspace_mix <= 1.0:
            raise ConfigurationError(f"subspace_mix must be in [0,1], got {self.subspace_mix}")
        if self.split not in _SPLITS:
            raise ConfigurationError(f"split must be one of {_SPLITS}")

    @property
    def num_samples(self) -> int:
        return self.num_identities * self.images_per_identity


class DomainDataset:
    """Immutable labelled feature vectors from one domain.

    Labels are dense ints in [0, num_identities); the global identity
    namespace is the pair (domain_id, label), so distinct domains never
    collide.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, domain_id: int,
                 split: str = "train"):
        features = np.ascontiguousarray(features, dtype=np.float64)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if features.ndim != 2 or labels.ndim != 1 or len(features) != len(labels):
            raise ConfigurationError("features must be [J, D] with one label per row")
        if split not in _SPLITS:
            raise ConfigurationError(f"split must be one of {_SPLITS}")
        self.features = features
        self.labels = labels
        self.domain_id = int(domain_id)
        self.split = split

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_identities(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def __eq__(self, other) -> bool:
        return (isinstance(other, DomainDataset)
                and self.domain_id == other.domain_id
                and self.split == other.split
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))

    def subset(self, idx: np.ndarray) -> "DomainDataset":
        return DomainDataset(self.features[idx], self.labels[idx], self.domain_id, self.split)


def generate_domain(spec: DomainSpec) -> DomainDataset:
    """Deterministically synthesise one domain from its spec."""
    protos = _rng(spec.prototype_seed).standard_normal(
        (spec.num_identities, spec.latent_dim))
    raw_shared = _rng(spec.structure_seed).standard_normal(
        (spec.feature_dim, spec.latent_dim))
    trng = _rng(spec.transform_seed)
    raw_own = trng.standard_normal((spec.feature_dim, spec.latent_dim))
    mix = (1.0 - spec.subspace_mix) * raw_shared + spec.subspace_mix * raw_own
    basis, r = np.linalg.qr(mix)
    basis = basis * np.sign(np.diag(r))
    rotation = _haar_orthogonal(trng, spec.latent_dim, spec.latent_dim)
    offset = spec.translation_scale * trng.standard_normal(spec.feature_dim)

    j = spec.num_samples
    labels = np.repeat(np.arange(spec.num_identities, dtype=np.int64),
                       spec.images_per_identity)
    latent = protos[labels] + spec.cluster_spread * trng.standard_normal(
        (j, spec.latent_dim))
    features = latent @ rotation.T @ basis.T + offset
    features += spec.noise_scale * trng.standard_normal((j, spec.feature_dim))
    return DomainDataset(features, labels, spec.domain_id, spec.split)


@dataclass(frozen=True)
class AugmentConfig:
    """Feature-vector augmentation: additive jitter, feature dropout, scale jitter.

    The all-zero config is the identity map and consumes no randomness.
    """

    jitter: float = 0.0
    dropout: float = 0.0
    scale_range: float = 0.0

    def __post_init__(self):
        if self.jitter < 0 or self.scale_range < 0:
            raise ConfigurationError("augmentation scales must be >= 0")
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigurationError(f"dropout must be in [0,1], got {self.dropout}")

    @property
    def is_identity(self) -> bool:
        return self.jitter == 0.0 and self.dropout == 0.0 and self.scale_range == 0.0


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment one feature vector; draws occur only for enabled stages."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    if cfg.jitter > 0.0:
        out += cfg.jitter * rng.standard_normal(out.shape)
    if cfg.dropout > 0.0:
        out *= rng.random(out.shape) >= cfg.dropout
    if cfg.scale_range > 0.0:
        out *= rng.uniform(1.0 - cfg.scale_range, 1.0 + cfg.scale_range)
    return out


def augment_batch(batch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Row-wise augmentation with per-row draws in row order."""
    batch = np.asarray(batch, dtype=np.float64)
    if cfg.is_identity:
        return batch.copy()
    return np.stack([augment(row, cfg, rng) for row in batch])


def save_dataset(ds: DomainDataset, path) -> None:
    header = [ds.domain_id, ds.num_identities, len(ds), ds.feature_dim,
              _SPLITS.index(ds.split)]
    blob = binfmt.pack_record(binfmt.DATASET_MAGIC, header,
                              [ds.features.ravel(), ds.labels])
    with open(path, "wb") as fh:
        fh.write(blob)


def load_dataset(path) -> DomainDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, arrays = binfmt.unpack_record(blob, binfmt.DATASET_MAGIC)
    if len(header) != 5 or len(arrays) != 2:
        raise binfmt.MalformedHeaderError(
            f"expected 5 header fields and 2 arrays, got {len(header)} and {len(arrays)}")
    domain_id, num_ids, j, d, split_tag = header
    feats, labels = arrays
    if feats.size != j * d or labels.size != j:
        raise binfmt.MalformedHeaderError("payload sizes disagree with header counts")
    if not 0 <= split_tag < len(_SPLITS):
        raise binfmt.MalformedHeaderError(f"unknown split tag {split_tag}")
    ds = DomainDataset(feats.reshape(j, d), labels, domain_id, _SPLITS[split_tag])
    if ds.num_identities > num_ids:
        raise binfmt.MalformedHeaderError("labels exceed the declared identity count")
    return ds


def make_query_gallery_split(ds: DomainDataset, rng: np.random.Generator
                             ) -> tuple[DomainDataset, DomainDataset]:
    """Pick one image per identity as the query; the rest form the gallery."""
    query_idx = []
    gallery_idx = []
    for ident in np.unique(ds.labels):
        rows = np.flatnonzero(ds.labels == ident)
        if len(rows) < 2:
            raise ConfigurationError(
                f"identity {ident} has a single image; cannot split query/gallery")
        pick = rng.integers(len(rows))
        query_idx.append(rows[pick])
        gallery_idx.extend(rows[r] for r in range(len(rows)) if r != pick)
    return ds.subset(np.array(query_idx)), ds.subset(np.array(sorted(gallery_idx)))


def merge_domains(datasets: list[DomainDataset]) -> DomainDataset:
    """Union of several domains with labels offset into one global space."""
    if not datasets:
        raise InputError("cannot merge zero datasets")
    ids = [d.domain_id for d in datasets]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate domain ids in merge: {ids}")
    feats = np.concatenate([d.features for d in datasets])
    labels = []
    offset = 0
    for d in datasets:
        labels.append(d.labels + offset)
        offset += d.num_identities
    return DomainDataset(feats, np.concatenate(labels), domain_id=-1,
                         split=datasets[0].split)


def default_domain_spec(master_seed: int, domain_id: int, *, num_identities: int,
                        images_per_identity: int, feature_dim: int, latent_dim: int,
                        cluster_spread: float, noise_scale: float,
                        translation_scale: float, subspace_mix: float,
                        split: str = "train") -> DomainSpec:
    """Derive a domain spec whose seeds are namespaced from one master seed."""
    return DomainSpec(
        domain_id=domain_id,
        num_identities=num_identities,
        images_per_identity=images_per_identity,
        feature_dim=feature_dim,
        latent_dim=latent_dim,
        cluster_spread=cluster_spread,
        noise_scale=noise_scale,
        translation_scale=translation_scale,
        subspace_mix=subspace_mix,
        prototype_seed=derive_seed(master_seed, 11, domain_id),
        structure_seed=derive_seed(master_seed, 13),
        transform_seed=derive_seed(master_seed, 17, domain_id),
        split=split,
    )


__all__ = [
    "DomainSpec", "DomainDataset", "AugmentConfig", "generate_domain", "augment",
    "augment_batch", "save_dataset", "load_dataset", "make_query_gallery_split",
    "merge_domains", "default_domain_spec", "derive_seed",
]
