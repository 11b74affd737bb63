import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from tagfex.datastream import (AugmentConfig, CollisionSpec, RehearsalMemory, SplitSpec,
                               TaskDataset, generate_collision_dataset, herding_select,
                               load_dataset_dir, make_splits, read_cifar_binary,
                               rebalance_memory, save_dataset_dir, two_view_augment,
                               write_cifar_binary)

from oracles import herding_oracle


def _labelled(n_classes, per_class=2, size=4):
    labels = np.repeat(np.arange(n_classes), per_class)
    images = np.random.default_rng(0).random((len(labels), size, size, 3)).astype(np.float32)
    return images, labels


# ---------------------------------------------------------------- splits

@pytest.mark.parametrize("total,base,inc,sizes", [
    (100, 10, 10, [10] * 10),
    (100, 50, 10, [50, 10, 10, 10, 10, 10]),
    (10, 10, 10, [10]),
])
def test_make_splits_task_sizes(total, base, inc, sizes):
    images, labels = _labelled(total)
    tasks = make_splits(SplitSpec(total, base, inc), images, labels)
    assert [len(t.class_set) for t in tasks] == sizes
    assert [t.task_index for t in tasks] == list(range(len(sizes)))


def test_make_splits_rejects_remainder():
    with pytest.raises(ValueError):
        SplitSpec(100, 10, 7)


def test_class_order_is_seeded_permutation():
    images, labels = _labelled(20)
    spec = SplitSpec(20, 10, 5, class_order_seed=3)
    tasks = make_splits(spec, images, labels, class_names=[f"c{i}" for i in range(20)])
    order = spec.class_order()
    assert sorted(order) == list(range(20))
    # first class of task 0 is the original class order[0]
    assert tasks[0].class_names[0] == f"c{order[0]}"
    assert not np.array_equal(order, np.arange(20))
    again = make_splits(spec, images, labels)
    assert all(np.array_equal(a.labels, b.labels) for a, b in zip(tasks, again))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 5), st.integers(0, 10 ** 6))
def test_split_class_sets_are_disjoint_and_complete(base, inc, k, seed):
    total = base + k * inc
    images, labels = _labelled(total, per_class=1, size=2)
    tasks = make_splits(SplitSpec(total, base, inc, seed), images, labels)
    seen = [c for t in tasks for c in t.class_set]
    assert sorted(seen) == list(range(total))
    for t in tasks:
        assert set(np.unique(t.labels)) == set(t.class_set)


# ---------------------------------------------------------------- herding

def test_herding_picks_point_nearest_mean():
    assert herding_select([[0, 0], [1, 0], [2, 0]], 1) == [1]


def test_herding_exhaustion_is_permutation(rng):
    feats = rng.normal(size=(7, 3))
    assert sorted(herding_select(feats, 7)) == list(range(7))


def test_herding_matches_greedy_oracle(rng):
    feats = rng.normal(size=(10, 4))
    assert herding_select(feats, 3) == herding_oracle(feats, 3)


def test_herding_rejects_empty():
    with pytest.raises(ValueError):
        herding_select(np.zeros((0, 3)), 0)


# ---------------------------------------------------------------- memory

def _task(t, classes, per_class=12, size=4, seed=0):
    rng = np.random.default_rng(seed + t)
    labels = np.repeat(classes, per_class)
    images = rng.random((len(labels), size, size, 3)).astype(np.float32)
    return TaskDataset(t, images, labels, classes)


def _flat_features(images):
    return images.reshape(len(images), -1).astype(np.float64)


def test_rebalance_quotas_and_prefix_truncation():
    mem = RehearsalMemory(20)
    mem = rebalance_memory(mem, _task(0, [0, 1]), _flat_features)
    assert mem.per_class_quota == 10
    assert all(len(v) == 10 for v in mem.exemplars.values())
    before = {c: v.copy() for c, v in mem.exemplars.items()}
    mem = rebalance_memory(mem, _task(1, [2, 3]), _flat_features)
    assert mem.per_class_quota == 5
    for c in (0, 1):
        assert np.array_equal(mem.exemplars[c], before[c][:5])
    assert len(mem) == 20


def test_rebalance_full_capacity():
    mem = rebalance_memory(RehearsalMemory(2000), _task(0, list(range(10)), per_class=250),
                           _flat_features)
    assert mem.per_class_quota == 200
    assert len(mem) == 2000


def test_rebalance_floor():
    mem = rebalance_memory(RehearsalMemory(7), _task(0, [0, 1, 2]), _flat_features)
    assert mem.per_class_quota == 2
    assert len(mem) == 6


def test_rebalance_new_classes_follow_herding_order():
    task = _task(0, [0], per_class=9)
    mem = rebalance_memory(RehearsalMemory(4), task, _flat_features)
    order = herding_oracle(_flat_features(task.images), 4)
    assert np.array_equal(mem.exemplars[0], task.images[order])


def test_rebalance_checks_extractor_dim():
    def extractor(images):
        return np.zeros((len(images), 3))
    extractor.out_dim = 5
    with pytest.raises(ValueError):
        rebalance_memory(RehearsalMemory(4), _task(0, [0, 1]), extractor)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 50), st.lists(st.integers(1, 4), min_size=1, max_size=5))
def test_memory_never_exceeds_capacity(capacity, task_sizes):
    mem = RehearsalMemory(capacity)
    start = 0
    for t, size in enumerate(task_sizes):
        mem = rebalance_memory(mem, _task(t, list(range(start, start + size)), per_class=6,
                                          size=2), _flat_features)
        start += size
        assert len(mem) <= capacity
        assert mem.capacity == capacity


# ---------------------------------------------------------------- augmentation

def _natural_image(seed=0, size=32):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.stack([np.sin(3 * xx + yy), np.cos(2 * yy), xx * yy], -1) * 0.4 + 0.5
    return np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1).astype(np.float32)


def test_augment_is_deterministic():
    img = _natural_image()
    a, b = two_view_augment(img, 7), two_view_augment(img, 7)
    assert np.array_equal(a.view_a, b.view_a) and np.array_equal(a.view_b, b.view_b)


def test_identity_augment_returns_image():
    img = _natural_image()
    pair = two_view_augment(img, 3, AugmentConfig.identity())
    assert np.array_equal(pair.view_a, img) and np.array_equal(pair.view_b, img)


def test_different_seeds_give_different_views():
    img = _natural_image()
    views = [two_view_augment(img, s).view_a for s in range(100)]
    collisions = sum(np.array_equal(views[i], views[j])
                     for i in range(100) for j in range(i + 1, 100))
    assert collisions == 0
    pair = two_view_augment(img, 11)
    assert not np.array_equal(pair.view_a, pair.view_b)


def test_augmented_views_stay_in_range():
    pair = two_view_augment(_natural_image(), 5)
    for v in (pair.view_a, pair.view_b):
        assert v.shape == (32, 32, 3) and v.min() >= 0 and v.max() <= 1


# ---------------------------------------------------------------- collision data

def test_collision_layout():
    tasks = generate_collision_dataset(CollisionSpec(samples_per_class=5), 0)
    assert [t.class_set for t in tasks] == [(0, 1), (2, 3)]
    assert tasks[0].class_names == ("color0-square", "color1-triangle")
    assert tasks[1].class_names == ("color0-triangle", "color1-square")
    assert tasks[0].images.shape == (10, 32, 32, 3)


def test_collision_is_deterministic():
    a = generate_collision_dataset(CollisionSpec(samples_per_class=5), 4)
    b = generate_collision_dataset(CollisionSpec(samples_per_class=5), 4)
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_collision_rejects_small_palette():
    with pytest.raises(ValueError):
        generate_collision_dataset(CollisionSpec(classes_per_task=3), 0)


def test_mean_colour_separates_first_task_only():
    spec = CollisionSpec(samples_per_class=200)
    train = generate_collision_dataset(spec, 1)
    test = generate_collision_dataset(spec, 2)

    def mean_rgb(images):
        return images.mean(axis=(1, 2))

    clf = LogisticRegression(max_iter=2000).fit(mean_rgb(train[0].images), train[0].labels)
    assert clf.score(mean_rgb(test[0].images), test[0].labels) == 1.0

    xs = np.concatenate([t.images for t in train])
    ys = np.concatenate([t.labels for t in train])
    xt = np.concatenate([t.images for t in test])
    yt = np.concatenate([t.labels for t in test])
    clf = LogisticRegression(max_iter=2000).fit(mean_rgb(xs), ys)
    assert clf.score(mean_rgb(xt), yt) <= 0.55


# ---------------------------------------------------------------- dataset directories

def test_cifar_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    images = (rng.integers(0, 256, (5, 32, 32, 3)) / 255).astype(np.float32)
    labels = np.array([0, 3, 9, 1, 2])
    write_cifar_binary(tmp_path / "x.bin", images, labels)
    raw = np.fromfile(tmp_path / "x.bin", np.uint8).reshape(5, -1)
    assert raw.shape[1] == 1 + 3072
    assert raw[1, 0] == 3
    # red plane first, row-major
    assert raw[0, 1] == round(images[0, 0, 0, 0] * 255)
    assert raw[0, 2] == round(images[0, 0, 1, 0] * 255)
    assert raw[0, 1 + 1024] == round(images[0, 0, 0, 1] * 255)
    got_x, got_y = read_cifar_binary(tmp_path / "x.bin")
    assert np.array_equal(got_y, labels)
    assert np.allclose(got_x, images, atol=1e-6)


def test_cifar100_two_label_bytes(tmp_path):
    record = np.zeros((2, 2 + 3072), np.uint8)
    record[:, 0] = [4, 5]         # coarse
    record[:, 1] = [70, 81]       # fine
    record.tofile(tmp_path / "c100.bin")
    _, labels = read_cifar_binary(tmp_path / "c100.bin", label_bytes=2)
    assert labels.tolist() == [70, 81]


@pytest.mark.parametrize("fmt", ["npy", "cifar-binary"])
def test_dataset_dir_roundtrip(tmp_path, fmt):
    tasks = generate_collision_dataset(CollisionSpec(samples_per_class=3), 0)
    x = np.concatenate([t.images for t in tasks])
    y = np.concatenate([t.labels for t in tasks])
    names = [n for t in tasks for n in t.class_names]
    save_dataset_dir(tmp_path, {"train": (x, y), "test": (x[:4], y[:4])}, names, fmt=fmt)
    meta, splits = load_dataset_dir(tmp_path)
    assert meta["class_names"] == names
    assert meta["counts"] == {"train": 12, "test": 4}
    assert meta["image_size"] == [32, 32, 3]
    assert np.array_equal(splits["train"][1], y)
    tol = 0 if fmt == "npy" else 0.5 / 255 + 1e-6
    assert np.abs(splits["train"][0] - x).max() <= tol


def test_dataset_dir_count_mismatch(tmp_path):
    x = np.zeros((2, 4, 4, 3), np.float32)
    save_dataset_dir(tmp_path, {"train": (x, [0, 1])}, ["a", "b"])
    meta = json.loads((tmp_path / "meta.json").read_text())
    meta["counts"]["train"] = 3
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError):
        load_dataset_dir(tmp_path)
