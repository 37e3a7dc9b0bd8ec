import numpy as np
import pytest

from gradclust.data import (Dataset, RFConfig, corrupt_labels, gen_rf, gen_two_blobs, inject_duplicates,
                            load_dataset, save_dataset, student_dataset)
from gradclust.model import LayerSpec, Model, per_example_gradients
from gradclust.numerics import ContractError, RngStream


def plain(n=100, dim=3, seed=0, classes=None):
    g = np.random.default_rng(seed)
    y = g.integers(0, classes, n) if classes else np.where(g.random(n) < 0.5, 1, -1)
    return Dataset(g.standard_normal((n, dim)), y)


def test_teacher_columns_have_unit_norm():
    p = gen_rf(RFConfig(seed=3))
    assert np.allclose(np.linalg.norm(p.teacher_features, axis=0), 1.0, rtol=0, atol=1e-12)
    assert np.allclose(np.linalg.norm(p.student_features, axis=0), 1.0, rtol=0, atol=1e-12)


def test_huge_teacher_bias_makes_every_label_positive():
    p = gen_rf(RFConfig(seed=1, bias=1e6))
    assert np.all(p.train.labels == 1) and np.all(p.test.labels == 1)


def test_rf_is_deterministic():
    a, b = gen_rf(RFConfig(seed=5)), gen_rf(RFConfig(seed=5))
    assert a.train.features.tobytes() == b.train.features.tobytes()
    assert a.train.labels.tobytes() == b.train.labels.tobytes()
    assert not np.array_equal(a.train.features, gen_rf(RFConfig(seed=6)).train.features)


def test_rf_labels_follow_teacher():
    p = gen_rf(RFConfig(seed=2, n_train=50))
    x = p.train.features
    score = np.maximum(x @ p.teacher_features, 0) @ p.teacher_weights + p.teacher_bias
    assert np.array_equal(p.train.labels, np.where(score >= 0, 1, -1))
    assert len(p.test) == len(p.train)


def test_rf_label_balance_across_seeds():
    means = np.array([gen_rf(RFConfig(seed=s)).train.labels.mean() for s in range(100)])
    assert -0.9 < means.mean() < 0.9
    # a standard-normal teacher occasionally yields a one-sided problem; it must stay rare
    assert np.mean(np.abs(means) >= 0.9) <= 0.1


def test_student_features_are_frozen_relu_features():
    p = gen_rf(RFConfig(seed=0, n_train=10, student_hidden=7))
    s = student_dataset(p)
    assert s.features.shape == (10, 7)
    assert np.array_equal(s.features, np.maximum(p.train.features @ p.student_features, 0))


def test_overparam_coefficient():
    assert RFConfig(student_hidden=200, n_train=50).overparam == 4.0
    with pytest.raises(ContractError):
        RFConfig(n_train=0)


def test_duplicates_fill_half_the_dataset():
    d = inject_duplicates(plain(100), 5, 0.5, RngStream(0))
    assert len(d) == 100
    groups = {}
    for i, tag in enumerate(d.provenance):
        if tag.startswith("duplicate-of:"):
            groups.setdefault(int(tag.split(":")[1]), []).append(i)
    assert len(groups) == 5
    assert sorted(len(v) for v in groups.values()) == [10] * 5
    assert d.count("original") == 50
    for src, members in groups.items():
        for i in members:
            assert d.features[i].tobytes() == d.features[src].tobytes()
            assert d.labels[i] == d.labels[src]


def test_duplicate_groups_are_balanced_within_one():
    d = inject_duplicates(plain(101), 4, 0.33, RngStream(1))
    tags = [t for t in d.provenance if t.startswith("duplicate")]
    counts = np.unique(tags, return_counts=True)[1]
    assert counts.sum() == 34 and counts.max() - counts.min() <= 1


def test_zero_fraction_leaves_dataset_unchanged():
    d = plain(20)
    assert inject_duplicates(d, 5, 0.0, RngStream(0)) is d


def test_infeasible_duplicate_budget():
    with pytest.raises(ContractError):
        inject_duplicates(plain(20), 5, 0.3, RngStream(0))  # 6 slots, 5 groups of >= 2 impossible
    with pytest.raises(ContractError):
        inject_duplicates(plain(20), 2, 1.0, RngStream(0))


def test_duplicates_have_identical_gradients():
    d = inject_duplicates(plain(60, dim=4), 3, 0.5, RngStream(2))
    m = Model.init((LayerSpec.fc(4, 6), LayerSpec.fc(6, 1, "identity")), 0, "logistic")
    g = per_example_gradients(m, d.features, d.labels)
    for tag in set(d.provenance):
        if tag.startswith("duplicate"):
            idx = [i for i, t in enumerate(d.provenance) if t == tag]
            assert np.max(np.abs(g[idx] - g[idx[0]])) == 0.0


def test_corrupt_labels_counts():
    d = plain(1000, classes=None)
    c = corrupt_labels(d, 0.1, RngStream(0))
    assert c.count("corrupted") == 100
    changed = np.flatnonzero(c.labels != d.labels)
    assert [c.provenance[i] for i in changed] == ["corrupted"] * 100


def test_corrupt_all_binary_labels_flips_every_label():
    d = plain(30)
    c = corrupt_labels(d, 1.0, RngStream(0))
    assert np.array_equal(c.labels, -d.labels)


def test_corrupt_multiclass_always_changes_label():
    d = plain(200, classes=4)
    c = corrupt_labels(d, 0.5, RngStream(3))
    hit = np.array([t == "corrupted" for t in c.provenance])
    assert np.all(c.labels[hit] != d.labels[hit]) and np.all(c.labels[~hit] == d.labels[~hit])
    assert set(np.unique(c.labels)) <= {0, 1, 2, 3}


def test_corrupt_zero_fraction_is_identity():
    d = plain(10)
    assert corrupt_labels(d, 0.0, RngStream(0)) is d
    with pytest.raises(ContractError):
        corrupt_labels(d, 1.5, RngStream(0))


def test_blobs_are_linearly_separable_without_margin_points():
    d = gen_two_blobs(50, 6.0, 0, RngStream(0))
    assert np.all(np.sign(d.features[:, 0]) == d.labels)


def test_blobs_margin_points():
    d = gen_two_blobs(20, 3.0, 4, RngStream(0))
    assert d.count("margin") == 4 and len(d) == 44
    idx = [i for i, t in enumerate(d.provenance) if t == "margin"]
    # mirrored pairs share gradients under a bias-free linear logistic model
    m = Model((LayerSpec.fc(2, 1, "identity", bias=False),), np.array([0.3, -0.7]), "logistic")
    g = per_example_gradients(m, d.features[idx], d.labels[idx])
    assert np.max(np.linalg.norm(g[:, None] - g[None], axis=2)) < 1e-6


def test_blobs_deterministic():
    a = gen_two_blobs(10, 3.0, 2, RngStream(4))
    b = gen_two_blobs(10, 3.0, 2, RngStream(4))
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.labels, b.labels) and a.provenance == b.provenance


def test_provenance_partitions_dataset():
    d = corrupt_labels(inject_duplicates(plain(100), 5, 0.5, RngStream(0)), 0.1, RngStream(1))
    assert len(d.provenance) == len(d)
    assert all(t == "original" or t == "corrupted" or t.startswith("duplicate-of:") for t in d.provenance)


def test_dataset_file_round_trip(tmp_path):
    d = corrupt_labels(inject_duplicates(plain(30), 2, 0.5, RngStream(0)), 0.2, RngStream(1))
    save_dataset(d, tmp_path / "d.gcds")
    back = load_dataset(tmp_path / "d.gcds")
    assert back.features.tobytes() == d.features.tobytes()
    assert np.array_equal(back.labels, d.labels)
    assert back.provenance == d.provenance


def test_dataset_file_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ContractError):
        load_dataset(tmp_path / "x")


def test_dataset_validation():
    with pytest.raises(ContractError):
        Dataset(np.ones((3, 2)), np.ones(2))
    with pytest.raises(ContractError):
        Dataset(np.ones(3), np.ones(3))
