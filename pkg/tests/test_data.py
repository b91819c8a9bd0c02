import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from teco import data as D


@pytest.fixture(scope="module")
def small():
    return D.generate_dataset(clips_per_class=3, seed=11)


def shape_centroids(clip: np.ndarray, background: np.ndarray) -> np.ndarray:
    """(T, 2) centroid of the pixels that differ from the static background."""
    out = []
    ys, xs = np.mgrid[0:clip.shape[-2], 0:clip.shape[-1]]
    for frame in clip:
        w = np.abs(frame - background).sum(axis=0)
        out.append((float((w * xs).sum() / w.sum()), float((w * ys).sum() / w.sum())))
    return np.array(out)


def test_classes_cover_shapes_and_directions():
    assert len(D.CLASS_NAMES) == 8
    assert {n.split("-")[0] for n in D.CLASS_NAMES} == {"circle", "square"}
    assert {n.split("-")[1] for n in D.CLASS_NAMES} == {"right", "left", "up", "down"}


def test_generation_is_byte_identical():
    a = D.generate_dataset(clips_per_class=2, seed=4)
    b = D.generate_dataset(clips_per_class=2, seed=4)
    assert a.clips.tobytes() == b.clips.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = D.generate_dataset(clips_per_class=2, seed=5)
    assert a.clips.tobytes() != c.clips.tobytes()


def test_values_in_unit_range(small):
    assert small.clips.min() >= 0 and small.clips.max() <= 1
    assert small.clips.shape == (24, 16, 3, 32, 32)
    assert np.bincount(small.labels).tolist() == [3] * 8


@pytest.mark.parametrize("name,axis,sign", [
    ("circle-right", 0, 1), ("square-left", 0, -1), ("circle-up", 1, -1), ("square-down", 1, 1),
])
@pytest.mark.parametrize("j", range(5))
def test_centroid_moves_with_label(name, axis, sign, j):
    label = D.CLASS_NAMES.index(name)
    params = D.sample_params(np.random.default_rng([0, label, j]), label)
    clip = D.render(params)
    background = D.render(params, with_shape=False)[0]
    c = shape_centroids(clip, background)
    assert np.all(np.diff(c[:, axis]) * sign > 0)
    # the orthogonal coordinate stays put
    assert np.ptp(c[:, 1 - axis]) < 0.5


def test_dataset_clip_matches_its_recipe():
    ds = D.generate_dataset(clips_per_class=2, seed=3)
    k = 1 * 8 + 5  # clip j=1 of class 5
    params = D.sample_params(np.random.default_rng([3, 5, 1]), 5)
    np.testing.assert_array_equal(ds.clips[k], D.render(params))


def test_speed_and_size_ranges():
    for j in range(50):
        p = D.sample_params(np.random.default_rng([0, j % 8, j]), j % 8)
        assert 1.0 <= p.speed <= 2.0


def test_bad_clip_count():
    with pytest.raises(ValueError):
        D.generate_dataset(clips_per_class=0)


def test_split_is_stratified(small):
    tr, te = D.train_test_split(small, 1 / 3, seed=0)
    assert np.bincount(te.labels).tolist() == [1] * 8
    assert len(tr) + len(te) == len(small)


# ------------------------------------------------------------------ samplers


def test_uniform_deterministic_example():
    assert D.uniform_indices(16, 4, True).tolist() == [2, 6, 10, 14]


def test_dense_deterministic_example():
    assert D.dense_indices(16, 4, 1, True).tolist() == [6, 7, 8, 9]


def test_k_equals_length():
    rng = np.random.default_rng(0)
    assert D.uniform_indices(8, 8, True).tolist() == list(range(8))
    assert D.uniform_indices(8, 8, False, rng).tolist() == list(range(8))
    assert D.dense_indices(8, 4, 2, False, rng).tolist() == [0, 2, 4, 6]
    assert D.dense_indices(8, 4, 2, True).tolist() == [0, 2, 4, 6]


def test_sampler_errors():
    with pytest.raises(ValueError):
        D.uniform_indices(4, 5, True)
    with pytest.raises(ValueError):
        D.dense_indices(16, 9, 2, True)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 32), st.integers(1, 32), st.integers(0, 1000))
def test_uniform_indices_properties(T_, K, seed):
    if K > T_:
        return
    idx = D.uniform_indices(T_, K, False, np.random.default_rng(seed))
    assert np.all(np.diff(idx) > 0)
    seg = (np.arange(K + 1) * T_) // K
    assert np.all((idx >= seg[:-1]) & (idx < seg[1:]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 32), st.integers(1, 8), st.integers(1, 4), st.integers(0, 1000))
def test_dense_indices_properties(T_, K, stride, seed):
    if K * stride > T_:
        return
    idx = D.dense_indices(T_, K, stride, False, np.random.default_rng(seed))
    assert np.all(np.diff(idx) == stride)
    assert 0 <= idx[0] <= T_ - K * stride


def test_samplers_deterministic_given_seed():
    clip = D.VideoClip(np.random.default_rng(0).random((16, 3, 32, 32), dtype=np.float32), 0)
    a = D.uniform_sample(clip, 8, deterministic=False, seed=7)
    b = D.uniform_sample(clip, 8, deterministic=False, seed=7)
    assert a.source_indices.tolist() == b.source_indices.tolist()
    d1 = D.dense_sample(clip, 4, 2, deterministic=False, seed=7)
    d2 = D.dense_sample(clip, 4, 2, deterministic=False, seed=7)
    assert d1.source_indices.tolist() == d2.source_indices.tolist()
    assert d1.pathway is D.Pathway.LOCAL and a.pathway is D.Pathway.GLOBAL
    np.testing.assert_array_equal(d1.frames, clip.frames[d1.source_indices])


def test_uniform_random_mode_is_uniform_within_segment():
    rng = np.random.default_rng(123)
    draws = np.array([D.uniform_indices(16, 3, False, rng) for _ in range(10_000)])
    seg = (np.arange(4) * 16) // 3
    for s in range(3):
        counts = np.bincount(draws[:, s] - seg[s], minlength=seg[s + 1] - seg[s])
        assert chisquare(counts).pvalue > 1e-3


def test_dense_random_start_is_uniform():
    rng = np.random.default_rng(321)
    starts = np.array([D.dense_indices(16, 5, 2, False, rng)[0] for _ in range(10_000)])
    counts = np.bincount(starts, minlength=7)
    assert len(counts) == 7
    assert chisquare(counts).pvalue > 1e-3


def test_sample_batch_layout(small):
    batch = D.sample_batch(small.clips[:4], 8, D.Pathway.GLOBAL, deterministic=True)
    assert batch.shape == (4, 3, 8, 32, 32)
    idx = D.uniform_indices(16, 8, True)
    np.testing.assert_array_equal(batch[2, :, 3], small.clips[2, idx[3]])


# -------------------------------------------------------------- augmentation


def test_flip_swaps_horizontal_direction_only():
    names = D.CLASS_NAMES
    assert names[D.hflip_label(names.index("circle-right"))] == "circle-left"
    assert names[D.hflip_label(names.index("square-left"))] == "square-right"
    assert names[D.hflip_label(names.index("square-up"))] == "square-up"


def test_augment_keeps_shape_and_range(small):
    batch = D.sample_batch(small.clips[:8], 8)
    out, labels = D.augment(batch, small.labels[:8], np.random.default_rng(0))
    assert out.shape == batch.shape and labels.shape == (8,)
    assert out.min() >= 0 and out.max() <= 1


# -------------------------------------------------------------------- TVDS


def test_tvds_roundtrip(tmp_path, small):
    path = tmp_path / "d.tvds"
    D.save_dataset(small, path)
    back = D.load_dataset(path)
    assert back.clips.tobytes() == small.clips.tobytes()
    assert back.labels.tolist() == small.labels.tolist()


def test_tvds_layout(tmp_path):
    ds = D.LabeledDataset(np.full((1, 2, 3, 4, 5), 0.5, np.float32), np.array([7]))
    path = tmp_path / "d.tvds"
    D.save_dataset(ds, path)
    raw = path.read_bytes()
    assert raw[:4] == b"TVDS"
    assert np.frombuffer(raw[4:32], "<u4").tolist() == [1, 1, 7, 2, 3, 4, 5]
    assert len(raw) == 32 + 4 * 120


def test_tvds_errors(tmp_path, small):
    good = tmp_path / "d.tvds"
    D.save_dataset(small.subset([0]), good)
    raw = good.read_bytes()
    for name, blob, msg in [
        ("magic", b"XXXX" + raw[4:], "magic"),
        ("trunc", raw[:-10], "truncated"),
        ("version", raw[:4] + (9).to_bytes(4, "little") + raw[8:], "version"),
    ]:
        p = tmp_path / name
        p.write_bytes(blob)
        with pytest.raises(D.DatasetFormatError, match=msg):
            D.load_dataset(p)
