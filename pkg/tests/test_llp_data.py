import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plotllp.llp_data import (
    CsvError,
    EmptyFileError,
    LabeledDataset,
    NonNumericError,
    compute_proportions,
    gaussian_blobs,
    load_csv,
    load_partition,
    make_bags,
    save_csv,
    save_partition,
    two_moons,
)

from oracles import histogram


def test_make_bags_two_moons_sizes():
    llp = make_bags(two_moons(2000, 0.1, 0), 50, seed=0)
    assert llp.num_bags == 40
    assert all(b.size == 50 for b in llp.bags)


def test_make_bags_single_bag_has_global_frequencies():
    data = gaussian_blobs(100, 3, seed=1)
    llp = make_bags(data, 100, seed=0)
    assert llp.num_bags == 1
    np.testing.assert_allclose(llp.bags[0].proportions, np.bincount(data.labels, minlength=3) / 100)


def test_make_bags_drops_remainder():
    data = gaussian_blobs(105, 2, seed=2)
    llp = make_bags(data, 50, seed=3)
    assert llp.num_bags == 2
    idx = llp.instance_indices()
    assert idx.size == 100 and np.unique(idx).size == 100


@pytest.mark.parametrize("bag_size", [0, -3, 11])
def test_make_bags_rejects_bad_size(bag_size):
    with pytest.raises(ValueError, match="bag_size"):
        make_bags(gaussian_blobs(10, 2), bag_size)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 120), st.integers(1, 40), st.integers(1, 5), st.integers(0, 10**6))
def test_bags_are_disjoint_and_exact(n, bag_size, K, seed):
    if bag_size > n:
        return
    llp = make_bags(gaussian_blobs(n, K, seed=seed), bag_size, seed)
    idx = llp.instance_indices()
    assert np.unique(idx).size == idx.size == llp.num_bags * bag_size
    for bag in llp.bags:
        counts = bag.proportions * bag.size
        np.testing.assert_allclose(counts, np.round(counts), atol=1e-9)
        assert abs(bag.proportions.sum() - 1) <= 1e-9


def test_make_bags_reproducible():
    data = two_moons(300, 0.1, 4)
    first, second = make_bags(data, 30, 9), make_bags(data, 30, 9)
    for a, b in zip(first.bags, second.bags):
        np.testing.assert_array_equal(a.instance_indices, b.instance_indices)
    other = make_bags(data, 30, 10)
    assert not np.array_equal(first.instance_indices(), other.instance_indices())


def test_evaluation_labels_follow_bag_order():
    data = gaussian_blobs(40, 2, seed=0)
    llp = make_bags(data, 8, seed=1)
    np.testing.assert_array_equal(llp.evaluation_labels(), data.labels[llp.instance_indices()])
    np.testing.assert_array_equal(llp.bag_features(2), data.features[llp.bags[2].instance_indices])


def test_compute_proportions_examples():
    np.testing.assert_allclose(compute_proportions([0, 0, 1, 1], 2), [0.5, 0.5])
    np.testing.assert_allclose(compute_proportions([2, 2, 2], 3), [0, 0, 1])


def test_compute_proportions_matches_histogram(rng):
    labels = rng.integers(0, 10, 64)
    np.testing.assert_allclose(compute_proportions(labels, 10), histogram(labels, 10), atol=1e-15)


def test_compute_proportions_errors():
    with pytest.raises(ValueError):
        compute_proportions([], 2)
    with pytest.raises(ValueError):
        compute_proportions([0, 3], 3)


def test_two_moons_noiseless_geometry():
    data = two_moons(2000, 0.0, 0)
    upper = data.features[data.labels == 0]
    lower = data.features[data.labels == 1]
    np.testing.assert_allclose(np.hypot(upper[:, 0], upper[:, 1]), 1.0, atol=1e-9)
    assert np.all(upper[:, 1] >= -1e-12)
    shifted = lower - np.array([1.0, 0.5])
    np.testing.assert_allclose(np.hypot(shifted[:, 0], shifted[:, 1]), 1.0, atol=1e-9)
    assert np.all(shifted[:, 1] <= 1e-12)


def test_two_moons_balance_and_odd_n():
    assert np.bincount(two_moons(2000, 0.1, 0).labels).tolist() == [1000, 1000]
    assert np.bincount(two_moons(7, 0.1, 0).labels).tolist() == [4, 3]


def test_two_moons_seeded():
    a, b = two_moons(500, 0.2, 11), two_moons(500, 0.2, 11)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.features, two_moons(500, 0.2, 12).features)


def test_two_moons_preconditions():
    with pytest.raises(ValueError):
        two_moons(1)
    with pytest.raises(ValueError):
        two_moons(10, -0.1)


def test_dataset_is_read_only_and_validated():
    data = gaussian_blobs(20, 2)
    with pytest.raises(ValueError):
        data.features[0, 0] = 1.0
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((3, 2)), np.array([0, 1, 2]), 2)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros(3), np.array([0, 1, 0]), 2)


def test_load_csv_categorical_labels(tmp_path):
    path = tmp_path / "pets.csv"
    path.write_text("w,h,label\n1.0,2.0,cat\n3.0,4.5,dog\n0.5,1.5,cat\n", encoding="utf-8")
    data, mapping = load_csv(path)
    assert data.num_classes == 2
    assert data.labels.tolist() == [0, 1, 0]
    assert mapping == {"cat": 0, "dog": 1}
    np.testing.assert_allclose(data.features, [[1.0, 2.0], [3.0, 4.5], [0.5, 1.5]])


def test_load_csv_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("x,label\n", encoding="utf-8")
    with pytest.raises(EmptyFileError):
        load_csv(path)


def test_load_csv_error_variants(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("x,label\n1.0,a\nfoo,b\n", encoding="utf-8")
    with pytest.raises(NonNumericError, match=":3"):
        load_csv(bad)
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("x,label\n1.0,a,extra\n", encoding="utf-8")
    with pytest.raises(CsvError):
        load_csv(ragged)
    nolabel = tmp_path / "nolabel.csv"
    nolabel.write_text("x,y\n1,2\n", encoding="utf-8")
    with pytest.raises(CsvError, match="label"):
        load_csv(nolabel)
    assert not issubclass(EmptyFileError, NonNumericError)


def test_csv_round_trip(tmp_path, rng):
    data = LabeledDataset(rng.normal(size=(30, 3)) * 1e3, rng.integers(0, 3, 30), 3)
    path = tmp_path / "round.csv"
    save_csv(data, path)
    back, mapping = load_csv(path)
    np.testing.assert_allclose(back.features, data.features, atol=1e-12, rtol=0)
    names = {v: int(k) for k, v in mapping.items()}
    assert [names[y] for y in back.labels] == data.labels.tolist()


def test_partition_round_trip(tmp_path):
    data = two_moons(230, 0.1, 5)
    llp = make_bags(data, 25, 6)
    path = tmp_path / "bags.csv"
    save_partition(llp, path)
    back = load_partition(data, path)
    assert back.num_bags == llp.num_bags
    for a, b in zip(llp.bags, back.bags):
        np.testing.assert_array_equal(a.instance_indices, b.instance_indices)
        np.testing.assert_array_equal(a.proportions, b.proportions)


def test_partition_overlap_rejected(tmp_path):
    data = two_moons(10, 0.1, 5)
    path = tmp_path / "bags.csv"
    path.write_text("instance_index,bag_index\n0,0\n1,0\n1,1\n", encoding="utf-8")
    with pytest.raises(CsvError, match="overlap"):
        load_partition(data, path)
