import dataclasses
import warnings

import numpy as np
import pytest

from gmn.data import (Dataset, SyntheticSpec, domain_transforms, generate_synthetic,
                      load_embeddings, save_embeddings, split_probe_gallery)
from gmn.errors import ConfigError, IngestionError, SplitError

from conftest import make_dataset


def test_zero_noise_zero_shift_records_identical():
    ds = generate_synthetic(SyntheticSpec(noise_scale=0.0, domain_shift_scale=0.0,
                                          records_per_identity=2, identities_per_domain=5))
    for ident in np.unique(ds.identities):
        a, b = ds.embeddings[ds.identities == ident]
        assert np.array_equal(a, b)


def test_same_seed_byte_identical():
    a = generate_synthetic(SyntheticSpec(seed=7))
    b = generate_synthetic(SyntheticSpec(seed=7))
    assert a.equals(b)
    assert a.embeddings.tobytes() == b.embeddings.tobytes()
    c = generate_synthetic(SyntheticSpec(seed=8))
    assert not a.equals(c)


def test_record_count_and_nearest_centroid_beats_chance():
    spec = SyntheticSpec(num_domains=4, identities_per_domain=20, records_per_identity=8, d_in=32)
    ds = generate_synthetic(spec)
    assert len(ds) == 640
    assert ds.num_identities == 80 and ds.num_domains == 4
    # oracle: per-identity means from half the records, classify the other half by nearest mean
    rng = np.random.default_rng(0)
    fit, test = [], []
    for ident in np.unique(ds.identities):
        rows = rng.permutation(np.flatnonzero(ds.identities == ident))
        fit += list(rows[:4])
        test += list(rows[4:])
    labels = np.unique(ds.identities)
    means = np.stack([ds.embeddings[[r for r in fit if ds.identities[r] == c]].mean(0) for c in labels])
    correct = 0
    for r in test:
        d = [np.sum((ds.embeddings[r] - m) ** 2) for m in means]
        correct += labels[int(np.argmin(d))] == ds.identities[r]
    assert correct / len(test) > 5.0 / len(labels)


def test_generator_matches_affine_formula():
    spec = SyntheticSpec(num_domains=2, identities_per_domain=3, records_per_identity=2, d_in=4,
                         noise_scale=0.0)
    centers, mats, offsets = domain_transforms(spec)
    ds = generate_synthetic(spec)
    for k in range(len(ds)):
        r = ds.record(k)
        expect = mats[r.domain] @ centers[r.identity] + offsets[r.domain]
        np.testing.assert_allclose(r.embedding, expect, rtol=1e-12, atol=1e-12)


def test_zero_shift_domain_means_coincide():
    spec = SyntheticSpec(domain_shift_scale=0.0, noise_scale=0.0)
    _, mats, offsets = domain_transforms(spec)
    for m, b in zip(mats, offsets):
        assert np.array_equal(m, np.eye(spec.d_in)) and not b.any()


def test_cameras_round_robin_and_ids_disjoint_across_domains():
    ds = generate_synthetic(SyntheticSpec(num_domains=2, identities_per_domain=4,
                                          records_per_identity=3, cameras_per_domain=5))
    for dom in range(2):
        cams = ds.cameras[ds.domains == dom]
        assert np.array_equal(cams, np.arange(len(cams)) % 5)
    a = set(ds.identities[ds.domains == 0])
    b = set(ds.identities[ds.domains == 1])
    assert not a & b


@pytest.mark.parametrize("field,value", [("num_domains", 0), ("d_in", 1), ("noise_scale", -1.0)])
def test_invalid_spec_names_field(field, value):
    with pytest.raises(ConfigError, match=field):
        generate_synthetic(dataclasses.replace(SyntheticSpec(), **{field: value}))


def test_unlearnable_spec_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        SyntheticSpec(noise_scale=2.0).validate()
    assert any("identity_scale" in str(w.message) for w in caught)


def test_split_two_records_forced():
    ds = generate_synthetic(SyntheticSpec(records_per_identity=2, identities_per_domain=6,
                                          num_domains=1))
    probe, gallery = split_probe_gallery(ds, 0.5, seed=0)
    for ident in np.unique(ds.identities):
        assert (probe.identities == ident).sum() == 1
        assert (gallery.identities == ident).sum() == 1


def test_split_disjoint_and_counts():
    ds = generate_synthetic(SyntheticSpec(num_domains=4, identities_per_domain=20,
                                          records_per_identity=8))
    probe, gallery = split_probe_gallery(ds, 0.25, seed=3)
    assert not set(probe.sample_ids) & set(gallery.sample_ids)
    assert ds.num_identities <= len(probe) <= 160
    assert len(gallery) == len(ds) - len(probe)
    assert set(probe.identities) == set(gallery.identities) == set(ds.identities)
    again = split_probe_gallery(ds, 0.25, seed=3)
    assert again[0].equals(probe) and again[1].equals(gallery)
    assert probe.role == "probe" and gallery.role == "gallery"


def test_split_single_record_identity_errors():
    ds = make_dataset(np.zeros((3, 2)), [0, 0, 1])
    with pytest.raises(SplitError, match="1"):
        split_probe_gallery(ds, 0.5, 0)


@pytest.mark.parametrize("suffix,fmt", [(".tsv", None), (".gmne", None), (".txt", "binary")])
def test_embedding_round_trip(tmp_path, suffix, fmt):
    ds = generate_synthetic(SyntheticSpec(identities_per_domain=3, records_per_identity=2))
    path = save_embeddings(ds, tmp_path / f"set{suffix}", fmt)
    back = load_embeddings(path, fmt)
    assert back.equals(ds)


def test_text_file_wrong_dimension_names_row(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("#GMNE-TEXT\tversion=1\td_in=2\trecords=2\trole=train\n"
                 "0\t1\t0\t0\t0.5\t1.5\n"
                 "1\t1\t0\t1\t0.5\n")
    with pytest.raises(IngestionError, match="row 3"):
        load_embeddings(p)


def test_text_file_duplicate_sample_id(tmp_path):
    p = tmp_path / "dup.tsv"
    p.write_text("#GMNE-TEXT\tversion=1\td_in=1\trecords=2\trole=train\n"
                 "4\t1\t0\t0\t0.5\n4\t2\t0\t0\t1.5\n")
    with pytest.raises(IngestionError, match="duplicate"):
        load_embeddings(p)


def test_hand_written_file(tmp_path):
    p = tmp_path / "hand.tsv"
    p.write_text("#GMNE-TEXT\tversion=1\td_in=2\trecords=3\trole=gallery\n"
                 "# a comment line\n"
                 "10\t3\t0\t1\t1.0\t2.0\n"
                 "11\t3\t1\t2\t-1.0\t0.25\n"
                 "12\t5\t1\t0\t0.0\t0.0\n")
    ds = load_embeddings(p)
    assert ds.role == "gallery" and len(ds) == 3 and ds.d_in == 2
    assert ds.sample_ids.tolist() == [10, 11, 12]
    assert ds.identities.tolist() == [3, 3, 5]
    assert ds.domains.tolist() == [0, 1, 1]
    assert ds.cameras.tolist() == [1, 2, 0]
    assert ds.embeddings[1].tolist() == [-1.0, 0.25]
    assert ds.num_identities == 2 and ds.num_domains == 2


def test_binary_truncated_file_errors(tmp_path):
    ds = generate_synthetic(SyntheticSpec(identities_per_domain=2, records_per_identity=2))
    path = save_embeddings(ds, tmp_path / "x.gmne")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(IngestionError):
        load_embeddings(path)


def test_dataset_rejects_duplicates_and_is_read_only():
    with pytest.raises(IngestionError, match="duplicate"):
        Dataset(np.zeros((2, 2)), [0, 1], [0, 0], [0, 0], [5, 5])
    ds = make_dataset(np.zeros((2, 2)), [0, 1])
    with pytest.raises(ValueError):
        ds.embeddings[0, 0] = 1.0


def test_check_trainable():
    make_dataset(np.zeros((4, 2)), [0, 0, 1, 1]).check_trainable()
    with pytest.raises(SplitError):
        make_dataset(np.zeros((3, 2)), [0, 0, 1]).check_trainable()
