import numpy as np
import pytest

from fedembed import binfmt, data
from fedembed.errors import ConfigurationError


def spec(**kw):
    base = dict(domain_id=0, num_identities=10, images_per_identity=20,
                feature_dim=16, latent_dim=5, prototype_seed=7,
                structure_seed=3, transform_seed=11)
    base.update(kw)
    return data.DomainSpec(**base)


def test_generate_counts_and_labels():
    ds = data.generate_domain(spec())
    assert len(ds) == 200
    assert ds.feature_dim == 16
    assert sorted(set(ds.labels.tolist())) == list(range(10))
    assert all((ds.labels == z).sum() == 20 for z in range(10))


def test_generate_deterministic():
    assert data.generate_domain(spec()) == data.generate_domain(spec())


def test_generate_differs_across_transform_seeds():
    a = data.generate_domain(spec())
    b = data.generate_domain(spec(domain_id=1, transform_seed=99))
    assert not np.array_equal(a.features, b.features)


def _ncm_accuracy(means, ds):
    # nearest-class-mean classifier, independent of any learned model
    dists = np.linalg.norm(ds.features[:, None, :] - means[None, :, :], axis=2)
    return float((dists.argmin(axis=1) == ds.labels).mean())


def test_domain_shift_drops_linear_probe_accuracy():
    # same identity prototypes, fully independent domain transforms
    kw = dict(subspace_mix=1.0, cluster_spread=0.3, noise_scale=0.2)
    a = data.generate_domain(spec(**kw))
    b = data.generate_domain(spec(domain_id=1, transform_seed=99, **kw))
    means = np.stack([a.features[a.labels == z].mean(axis=0)
                      for z in range(a.num_identities)])
    acc_same = _ncm_accuracy(means, a)
    acc_shifted = _ncm_accuracy(means, b)
    assert acc_same >= 0.9
    assert acc_same - acc_shifted >= 0.2


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        spec(num_identities=1)
    with pytest.raises(ConfigurationError):
        spec(images_per_identity=1)
    with pytest.raises(ConfigurationError):
        spec(latent_dim=17)
    with pytest.raises(ConfigurationError):
        spec(subspace_mix=1.5)


def test_augment_zero_config_is_identity_and_draws_nothing():
    cfg = data.AugmentConfig()
    rng = np.random.default_rng(5)
    state_before = rng.bit_generator.state
    x = np.random.default_rng(1).standard_normal(8)
    out = data.augment(x, cfg, rng)
    assert np.array_equal(out, x)
    assert rng.bit_generator.state == state_before


def test_augment_jitter_matches_recorded_draw():
    cfg = data.AugmentConfig(jitter=0.3)
    x = np.random.default_rng(2).standard_normal(6)
    out = data.augment(x, cfg, np.random.default_rng(10))
    noise = np.random.default_rng(10).standard_normal(6)
    assert np.array_equal(out, x + 0.3 * noise)


def test_augment_full_dropout_zeroes_vector():
    cfg = data.AugmentConfig(dropout=1.0)
    x = np.random.default_rng(3).standard_normal(6)
    out = data.augment(x, cfg, np.random.default_rng(0))
    assert np.array_equal(out, np.zeros(6))


def test_augment_stage_order_jitter_dropout_scale():
    cfg = data.AugmentConfig(jitter=0.5, dropout=0.25, scale_range=0.1)
    x = np.random.default_rng(4).standard_normal(5)
    out = data.augment(x, cfg, np.random.default_rng(20))
    rng = np.random.default_rng(20)
    expected = x + 0.5 * rng.standard_normal(5)
    expected = expected * (rng.random(5) >= 0.25)
    expected = expected * rng.uniform(0.9, 1.1)
    assert np.array_equal(out, expected)


def test_augment_batch_rowwise_determinism():
    cfg = data.AugmentConfig(jitter=0.2, dropout=0.1)
    batch = np.random.default_rng(6).standard_normal((4, 7))
    a = data.augment_batch(batch, cfg, np.random.default_rng(42))
    b = data.augment_batch(batch, cfg, np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_save_load_round_trip(tmp_path):
    ds = data.generate_domain(spec())
    path = tmp_path / "d.fdds"
    data.save_dataset(ds, path)
    assert data.load_dataset(path) == ds


def test_save_load_preserves_split_tag(tmp_path):
    ds = data.generate_domain(spec(split="test"))
    path = tmp_path / "d.fdds"
    data.save_dataset(ds, path)
    assert data.load_dataset(path).split == "test"


def test_load_corrupted_magic(tmp_path):
    ds = data.generate_domain(spec())
    path = tmp_path / "d.fdds"
    data.save_dataset(ds, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(binfmt.MalformedHeaderError):
        data.load_dataset(path)


def test_load_empty_file(tmp_path):
    path = tmp_path / "d.fdds"
    path.write_bytes(b"")
    with pytest.raises(binfmt.TruncatedPayloadError):
        data.load_dataset(path)


def test_load_truncated_payload(tmp_path):
    ds = data.generate_domain(spec())
    path = tmp_path / "d.fdds"
    data.save_dataset(ds, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(binfmt.TruncatedPayloadError):
        data.load_dataset(path)


def test_load_flipped_byte_fails_checksum(tmp_path):
    ds = data.generate_domain(spec())
    path = tmp_path / "d.fdds"
    data.save_dataset(ds, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x40
    path.write_bytes(bytes(blob))
    with pytest.raises(binfmt.ChecksumError):
        data.load_dataset(path)


def test_query_gallery_split_counts_and_disjointness():
    ds = data.generate_domain(spec(num_identities=10, images_per_identity=5))
    query, gallery = data.make_query_gallery_split(ds, np.random.default_rng(1))
    assert len(query) == 10
    assert len(gallery) == 40
    assert sorted(query.labels.tolist()) == list(range(10))
    # every query identity appears in the gallery
    assert set(query.labels.tolist()) <= set(gallery.labels.tolist())
    # no image is both query and gallery
    q_rows = {row.tobytes() for row in query.features}
    g_rows = {row.tobytes() for row in gallery.features}
    assert not q_rows & g_rows


def test_query_gallery_split_deterministic():
    ds = data.generate_domain(spec())
    q1, g1 = data.make_query_gallery_split(ds, np.random.default_rng(9))
    q2, g2 = data.make_query_gallery_split(ds, np.random.default_rng(9))
    assert q1 == q2 and g1 == g2


def test_query_gallery_split_rejects_singleton_identity():
    feats = np.random.default_rng(0).standard_normal((3, 4))
    ds = data.DomainDataset(feats, np.array([0, 0, 1]), domain_id=0)
    with pytest.raises(ConfigurationError):
        data.make_query_gallery_split(ds, np.random.default_rng(0))


def test_global_identity_namespaces_disjoint():
    a = data.generate_domain(spec(domain_id=0))
    b = data.generate_domain(spec(domain_id=1, prototype_seed=8, transform_seed=12))
    keys_a = {(a.domain_id, z) for z in a.labels.tolist()}
    keys_b = {(b.domain_id, z) for z in b.labels.tolist()}
    assert not keys_a & keys_b


def test_merge_domains_offsets_labels():
    a = data.generate_domain(spec(domain_id=0, num_identities=3, images_per_identity=2))
    b = data.generate_domain(spec(domain_id=1, num_identities=4, images_per_identity=2,
                                  prototype_seed=8))
    merged = data.merge_domains([a, b])
    assert len(merged) == len(a) + len(b)
    assert merged.num_identities == 7
    assert sorted(set(merged.labels.tolist())) == list(range(7))
    with pytest.raises(ConfigurationError):
        data.merge_domains([a, a])


def test_derive_seed_is_stable_and_namespaced():
    assert data.derive_seed(1, 2, 3) == data.derive_seed(1, 2, 3)
    assert data.derive_seed(1, 2, 3) != data.derive_seed(1, 2, 4)
    assert data.derive_seed(1, 2, 3) != data.derive_seed(2, 2, 3)
