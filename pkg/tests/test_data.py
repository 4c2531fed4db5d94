import struct

import numpy as np
import pytest

from uapfp import data, nn, zoo
from uapfp.numcore import RandomStream


# -------------------------------------------------------------- synthetic


def test_zero_noise_points_sit_on_their_class_template():
    spec = data.SynthSpec(M=16, N=3, points_per_class=10, noise=0.0, modes=1)
    d = data.synth_generate(spec, RandomStream(4))
    cents = data.class_centroids(spec, RandomStream(4).spawn(1))
    assert np.array_equal(d.inputs, cents[d.labels])


def test_same_seed_gives_bit_identical_data():
    spec = data.SynthSpec(points_per_class=20)
    a = data.synth_generate(spec, RandomStream(1))
    b = data.synth_generate(spec, RandomStream(1))
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    c = data.synth_generate(spec, RandomStream(1), sample_rng=RandomStream(99))
    assert not np.array_equal(a.inputs, c.inputs)


def test_generated_data_is_scaled_and_balanced():
    for structure in ("blobs", "rings"):
        d = data.synth_generate(data.SynthSpec(points_per_class=30, structure=structure), RandomStream(2))
        assert d.inputs.min() >= 0.0 and d.inputs.max() <= 1.0
        assert np.all(d.class_counts() == 30)


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        data.SynthSpec(structure="spiral").validate()
    with pytest.raises(ValueError):
        data.SynthSpec(points_per_class=2).validate()


def test_desk_data_is_learnable_by_a_reference_classifier():
    zd = zoo.load_zoo_data(zoo.DataConfig())
    assert (len(zd.train), len(zd.test), len(zd.victim)) == (4000, 1000, 2000)
    clf = nn.DenseClassifier(hidden_layer_sizes=(128, 128), activation="elu", epochs=30, schedule="cosine")
    clf.fit(zd.train.inputs, zd.train.labels)
    assert clf.score(zd.test.inputs, zd.test.labels) >= 0.85


def test_dataset_rejects_bad_values():
    with pytest.raises(ValueError):
        data.Dataset("x", np.array([[1.5]]), np.array([0]), 1)
    with pytest.raises(ValueError):
        data.Dataset("x", np.array([[0.5]]), np.array([2]), 2)


# -------------------------------------------------------------------- IDX


def _write_pair(tmp_path, pixels, labels, image_magic=0x803, label_magic=0x801):
    n = len(labels)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(struct.pack(">IIII", image_magic, n, 3, 3) + bytes(pixels))
    lp.write_bytes(struct.pack(">II", label_magic, n) + bytes(labels))
    return ip, lp


def test_idx_hand_built_pair_round_trip(tmp_path):
    pixels = list(range(0, 18 * 10, 10))  # two 3x3 images, bytes 0..170
    ip, lp = _write_pair(tmp_path, pixels, [7, 2])
    d = data.load_idx(ip, lp, n_classes=10)
    assert d.inputs.shape == (2, 9)
    assert np.array_equal(d.inputs.ravel() * 255.0, np.array(pixels, dtype=float))
    assert d.labels.tolist() == [7, 2]
    data.write_idx(d, tmp_path / "i2", tmp_path / "l2", shape=(3, 3))
    assert (tmp_path / "i2").read_bytes() == ip.read_bytes()
    assert (tmp_path / "l2").read_bytes() == lp.read_bytes()


def test_idx_all_255_image_scales_to_one(tmp_path):
    ip, lp = _write_pair(tmp_path, [255] * 9, [0])
    assert np.all(data.load_idx(ip, lp).inputs == 1.0)


def test_idx_labels_with_image_magic_rejected(tmp_path):
    ip, lp = _write_pair(tmp_path, [0] * 9, [0], label_magic=0x803)
    with pytest.raises(data.IdxFormatError, match="magic 0x00000803.*offset 0"):
        data.load_idx(ip, lp)


def test_idx_truncated_and_mismatched_files(tmp_path):
    ip, lp = _write_pair(tmp_path, [0] * 5, [0])
    with pytest.raises(data.IdxFormatError, match="truncated"):
        data.load_idx(ip, lp)
    ip, lp = _write_pair(tmp_path, [0] * 18, [0, 1])
    lp.write_bytes(struct.pack(">II", 0x801, 3) + bytes([0, 1, 2]))
    with pytest.raises(data.IdxFormatError, match="count"):
        data.load_idx(ip, lp)


# ---------------------------------------------------------------- splits


def _pool(n, n_classes=10, seed=0):
    labels = np.arange(n) % n_classes
    x = RandomStream(seed).uniform(n * 3).reshape(n, 3)
    return data.Dataset("pool", x, labels, n_classes)


def _overlap(a, b):
    return np.intersect1d(a.index, b.index).size / len(a)


def test_zero_overlap_gives_disjoint_subsets():
    v, h = data.split_with_overlap(_pool(1000), data.SplitSpec(0.5, 0.0, seed=3))
    assert _overlap(v, h) == 0.0


def test_overlap_rate_is_met_on_4000_points():
    for rate in (0.3, 0.6, 0.9):
        v, h = data.split_with_overlap(_pool(4000), data.SplitSpec(0.5, rate, seed=5))
        assert len(v) == len(h) == 2000
        assert abs(_overlap(v, h) - rate) <= 1 / 2000


def test_half_split_sizes_and_stratification():
    d = _pool(1000)
    v, h = data.split_with_overlap(d, data.SplitSpec(0.5, 0.0, seed=1))
    assert len(v) == len(h) == 500
    assert np.all(v.class_counts() == 50) and np.all(h.class_counts() == 50)


def test_homologous_seed_changes_only_the_homologous_side():
    d = _pool(1000)
    v1, h1 = data.split_with_overlap(d, data.SplitSpec(0.5, 0.5, seed=1, homologous_seed=10))
    v2, h2 = data.split_with_overlap(d, data.SplitSpec(0.5, 0.5, seed=1, homologous_seed=11))
    assert np.array_equal(v1.index, v2.index)
    assert not np.array_equal(h1.index, h2.index)


def test_split_spec_bounds():
    with pytest.raises(ValueError):
        data.SplitSpec(0.5, 0.95)
    with pytest.raises(ValueError):
        data.SplitSpec(0.6, 0.0)


def test_complement_and_holdout_partition_the_pool():
    d = _pool(500)
    train, test = data.stratified_holdout(d, 0.2, RandomStream(0))
    assert len(test) == 100 and np.intersect1d(train.index, test.index).size == 0
    rest = data.complement(d, train.index)
    assert np.array_equal(rest.index, test.index)
