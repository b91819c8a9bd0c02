import numpy as np
import pytest

from oracles import REL_TOL, gradcheck
from teco import data as D
from teco import tensor as T
from teco.model import ResBlock, Stem, VideoClassifier, cross_entropy, predict, train_clean
from teco.nn import StatMode, TemporalNonLocal

SEEDS = range(20)
# composites containing relu: a 1e-3 probe straddles activation kinks, so
# these are differenced with a finer float64 step
KINK_STEP = 1e-6


def clips(n=4, k=8, seed=0):
    return np.random.default_rng(seed).random((n, 3, k, 32, 32), dtype=np.float32)


@pytest.fixture(scope="module")
def tiny_data():
    return D.generate_dataset(clips_per_class=2, seed=1)


def test_logit_shape():
    assert VideoClassifier()(clips()).shape == (4, 8)


def test_zero_head_zero_input_is_uniform():
    m = VideoClassifier(zero_head=True)
    m.set_stat_mode(StatMode.SOURCE)
    logits = m(np.zeros((2, 3, 8, 32, 32), np.float32)).data
    assert np.all(logits == logits[0, 0])
    np.testing.assert_allclose(T.softmax(T.Tensor(logits), axis=1).data, 1 / 8, rtol=1e-6)


def test_duplicate_clips_give_duplicate_rows():
    m = VideoClassifier()
    m.set_stat_mode(StatMode.SOURCE)
    x = np.repeat(clips(1), 3, axis=0)
    out = m(x).data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_batch_permutation_invariance_under_source_stats():
    m = VideoClassifier(seed=3)
    m.set_stat_mode(StatMode.SOURCE)
    x = clips(5, seed=2)
    perm = np.array([3, 0, 4, 1, 2])
    np.testing.assert_array_equal(m(x).data[perm], m(x[perm]).data)


def test_bad_input_shapes():
    m = VideoClassifier()
    with pytest.raises(T.ShapeError):
        m(np.zeros((2, 3, 8, 28, 28), np.float32))
    with pytest.raises(T.ShapeError):
        m(np.zeros((2, 3, 4, 32, 32), np.float32))
    with pytest.raises(T.ShapeError):
        m(np.zeros((2, 1, 8, 32, 32), np.float32))


def test_tap_keeps_time():
    m = VideoClassifier()
    m.set_stat_mode(StatMode.SOURCE)
    z = m.forward_local_features(clips())
    assert z.shape[2] == 8
    assert z.shape[1] == m.tap_channels()


def test_fresh_attention_returns_raw_tap():
    m = VideoClassifier()
    m.set_stat_mode(StatMode.SOURCE)
    x = clips()
    raw = m.forward_local_features(x).data
    att = m.forward_local_features(x, TemporalNonLocal(m.tap_channels(), rng=np.random.default_rng(0))).data
    np.testing.assert_array_equal(raw, att)


@pytest.mark.parametrize("mode", [StatMode.SOURCE, StatMode.BLENDED])
def test_static_clip_gives_constant_features(mode):
    m = VideoClassifier(seed=1)
    m.set_stat_mode(mode, 0.4)
    frame = np.random.default_rng(0).random((2, 3, 1, 32, 32), dtype=np.float32)
    x = np.repeat(frame, 8, axis=2)
    att = TemporalNonLocal(m.tap_channels(), rng=np.random.default_rng(1), init_std=0.5)
    att.proj_g.data[:] = 0.3
    z = m.forward_local_features(x, att).data
    assert np.max(np.abs(z - z[:, :, :1])) < 1e-5


def test_invalid_stage():
    with pytest.raises(ValueError):
        VideoClassifier().features(T.Tensor(clips()), 5)


def test_deep_tap_too_short():
    m = VideoClassifier(frames=2)
    m.set_stat_mode(StatMode.SOURCE)
    with pytest.raises(T.ShapeError):
        m.forward_local_features(clips(k=2), stage=4)


# ------------------------------------------------------------------ gradients


def tiny_model(seed):
    m = VideoClassifier(widths=(2, 3, 3, 4), frames=4, seed=seed).to_dtype(np.float64)
    # zero shifts put dead-input units exactly on the relu kink; move off it
    rng = np.random.default_rng(100 + seed)
    for n in m.norms():
        n.gamma.data = rng.uniform(0.5, 1.5, n.gamma.shape)
        n.shift.data = rng.uniform(-0.5, 0.5, n.shift.shape)
    m.requires_grad_(True)
    return m


@pytest.mark.parametrize("seed", SEEDS)
def test_resblock_grad(seed):
    rng = np.random.default_rng(seed)
    b = ResBlock(2, 3, t_stride=int(rng.integers(1, 3)), rng=rng, t_kernel=int(rng.choice([1, 3]))).to_dtype(np.float64)
    b.requires_grad_(True)
    x = T.Tensor(rng.standard_normal((2, 2, 4, 6, 6)), requires_grad=True, dtype=np.float64)
    assert gradcheck(lambda a, *ps: b(a), [x] + b.parameters(), rng, step=KINK_STEP, max_coords=10) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_stem_grad(seed):
    rng = np.random.default_rng(seed)
    s = Stem(2, rng).to_dtype(np.float64)
    s.requires_grad_(True)
    x = T.Tensor(rng.random((2, 3, 2, 8, 8)), requires_grad=True, dtype=np.float64)
    assert gradcheck(lambda a, *ps: s(a), [x] + s.parameters(), rng, step=KINK_STEP, max_coords=10) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_grad(seed):
    rng = np.random.default_rng(seed)
    logits = T.Tensor(rng.standard_normal((5, 8)) * 2, requires_grad=True, dtype=np.float64)
    labels = rng.integers(0, 8, 5)
    assert gradcheck(lambda a: T.reshape(cross_entropy(a, labels), (1,)), [logits], rng) < REL_TOL


# detached test statistics would move under finite differences, so the whole
# model is checked with constant (source) or fully differentiated (train) stats
@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("mode", [StatMode.SOURCE, StatMode.TRAIN])
def test_full_model_grad(seed, mode):
    rng = np.random.default_rng(seed)
    m = tiny_model(seed)
    m.set_stat_mode(mode)
    x = rng.random((2, 3, 4, 32, 32))
    params = m.parameters()
    assert gradcheck(lambda *ps: m(T.Tensor(x, dtype=np.float64)), params, rng, step=KINK_STEP, max_coords=4) < REL_TOL


# ------------------------------------------------------------------ training


def test_train_rejects_empty():
    empty = D.LabeledDataset(np.zeros((0, 16, 3, 32, 32), np.float32), np.zeros(0))
    with pytest.raises(ValueError):
        train_clean(VideoClassifier(), empty, epochs=1)


def test_zero_lr_leaves_parameters(tiny_data):
    m = VideoClassifier(seed=2)
    before = {k: v.copy() for k, v in m.state_dict().items() if not k.endswith(("mu_s", "var_s"))}
    train_clean(m, tiny_data, epochs=1, lr=0.0, seed=0)
    for k, v in before.items():
        np.testing.assert_array_equal(m.state_dict()[k], v)


def test_training_is_bitwise_reproducible(tiny_data):
    a, b = VideoClassifier(seed=4), VideoClassifier(seed=4)
    train_clean(a, tiny_data, epochs=1, seed=9)
    train_clean(b, tiny_data, epochs=1, seed=9)
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_overfits_a_single_class_batch(tiny_data):
    one = tiny_data.subset(np.flatnonzero(tiny_data.labels == 3))
    one = D.LabeledDataset(np.concatenate([one.clips] * 4), np.concatenate([one.labels] * 4))
    r = train_clean(VideoClassifier(seed=0), one, epochs=6, lr=0.05, seed=0, augment=False)
    assert r.epoch_acc[-1] == 1.0
    assert np.all(predict(r.model, one.clips).argmax(1) == 3)


def test_training_leaves_source_mode(tiny_data):
    r = train_clean(VideoClassifier(seed=0), tiny_data, epochs=1, seed=0, test_set=tiny_data)
    assert all(n.mode is StatMode.SOURCE for n in r.model.norms())
    assert not any(p.requires_grad for p in r.model.parameters())
    assert 0 <= r.test_acc <= 1
    # evaluating twice gives identical logits
    np.testing.assert_array_equal(predict(r.model, tiny_data.clips), predict(r.model, tiny_data.clips))


def test_running_source_stats_move_during_training(tiny_data):
    m = VideoClassifier(seed=0)
    train_clean(m, tiny_data, epochs=1, seed=0)
    assert not np.allclose(m.stem.norm.stats.mu_s, 0)
