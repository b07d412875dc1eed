import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cecfscil.datasets import (
    CIFAR_RECORD, Dataset, load_cifar100_binary, make_session_split, rotate, rotate_arbitrary,
    rotate_right_angle, sample_pseudo_episode, split_from_manifest, synth_blob_dataset,
)

SQ = np.array([[1.0, 2.0], [3.0, 4.0]])


def test_rotate_90_convention():
    assert rotate_right_angle(SQ, 90).tolist() == [[2, 4], [1, 3]]


def test_rotate_180():
    assert rotate_right_angle(SQ, 180).tolist() == [[4, 3], [2, 1]]


def test_rotate_90_formula_on_multichannel():
    img = np.random.default_rng(0).random((3, 5, 5))
    out = rotate_right_angle(img, 90)
    w = img.shape[-1]
    for r in range(5):
        for c in range(5):
            assert np.array_equal(out[:, r, c], img[:, c, w - 1 - r])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 6, 6), elements=st.floats(0, 1)))
def test_right_angle_compositions_are_identity(img):
    x = img
    for _ in range(4):
        x = rotate_right_angle(x, 90)
    assert x.tobytes() == img.tobytes()
    assert rotate_right_angle(rotate_right_angle(img, 180), 180).tobytes() == img.tobytes()


def test_non_square_quarter_turn_rejected():
    with pytest.raises(ValueError):
        rotate_right_angle(np.zeros((2, 3)), 90)
    assert rotate_right_angle(np.arange(6.0).reshape(2, 3), 180).shape == (2, 3)


def test_rotate_arbitrary_constant_and_identity():
    const = np.full((1, 7, 7), 0.37)
    for deg in (0, 13, 45, 90, -20, 181):
        np.testing.assert_allclose(rotate_arbitrary(const, deg), const, atol=1e-9)
    img = np.random.default_rng(1).random((7, 7))
    np.testing.assert_allclose(rotate_arbitrary(img, 0), img, atol=1e-9)


def smooth(side):
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
    return 0.5 + 0.25 * np.sin(2 * yy) * np.cos(3 * xx) + 0.2 * xx * yy


@pytest.mark.parametrize("deg", [90, 180, 270, -90])
def test_rotate_arbitrary_matches_exact_permutation(deg):
    img = smooth(9)
    exact = rotate_right_angle(img, deg % 360)
    assert np.abs(rotate_arbitrary(img, deg) - exact).max() <= 1e-9


def test_rotate_arbitrary_stays_in_range():
    img = np.random.default_rng(2).random((1, 8, 8))
    out = rotate_arbitrary(img, 33)
    assert out.min() >= 0 and out.max() <= 1 and out.shape == img.shape


# --- splits -----------------------------------------------------------

def tiny_dataset(classes, n_train=6, n_test=2, side=8):
    return synth_blob_dataset(classes, n_train, n_test, side, seed=0)


def test_cifar_like_session_sizes():
    ds = tiny_dataset(100, n_train=5, n_test=1)
    split = make_session_split(ds, 60, 8, 5, 5, seed=0)
    sizes = [len(split.seen_classes(i)) for i in range(9)]
    assert sizes == [60, 65, 70, 75, 80, 85, 90, 95, 100]


def test_desk_session_sizes_and_disjointness():
    ds = tiny_dataset(20)
    split = make_session_split(ds, 12, 4, 2, 5, seed=3)
    assert [len(split.seen_classes(i)) for i in range(5)] == [12, 14, 16, 18, 20]
    seen = set()
    for s in split.sessions:
        assert not seen & set(s.classes)
        seen |= set(s.classes)
    for i in range(1, 5):
        assert all(len(split.sessions[i].train[c]) == 5 for c in split.sessions[i].classes)


def test_test_pool_is_cumulative():
    ds = tiny_dataset(20, n_test=3)
    split = make_session_split(ds, 12, 4, 2, 5, seed=0)
    prev = 0
    for i in range(5):
        x, y = split.test_pool(i)
        assert set(y.tolist()) == set(split.seen_classes(i))
        assert len(x) == sum(len(ds.test[c]) for c in split.seen_classes(i)) >= prev
        prev = len(x)


def test_degenerate_split():
    ds = tiny_dataset(5)
    split = make_session_split(ds, 5, 0, 0, 0, seed=0)
    assert split.n_sessions == 0
    assert set(split.test_pool(0)[1].tolist()) == set(range(5))
    assert len(split.sessions[0].train[0]) == len(ds.train[0])


def test_split_errors():
    ds = tiny_dataset(20, n_train=4)
    with pytest.raises(ValueError):
        make_session_split(ds, 12, 3, 2, 1, seed=0)
    with pytest.raises(ValueError):
        make_session_split(ds, 12, 4, 2, 5, seed=0)


def test_split_is_seeded_and_replayable_from_manifest():
    ds = tiny_dataset(20)
    a = make_session_split(ds, 12, 4, 2, 3, seed=7)
    b = make_session_split(ds, 12, 4, 2, 3, seed=7)
    assert a.manifest() == b.manifest()
    c = split_from_manifest(ds, a.manifest())
    for i in range(1, 5):
        for cls in a.sessions[i].classes:
            assert np.array_equal(a.sessions[i].train[cls], c.sessions[i].train[cls])
    assert make_session_split(ds, 12, 4, 2, 3, seed=8).manifest() != a.manifest()


# --- episodes ---------------------------------------------------------

@pytest.fixture(scope="module")
def base_data():
    return synth_blob_dataset(32, 12, 1, 8, seed=5).train


def test_episode_sizes(base_data):
    ep = sample_pseudo_episode(base_data, 15, 1, 10, seed=0)
    assert len(ep.support_base) == 15 and len(ep.query_base) == 150
    assert len(ep.support_inc) == 15 and len(ep.query_inc) == 150


def test_singleton_pool(base_data):
    ep = sample_pseudo_episode(base_data, 4, 2, 3, seed=1, angle_pool=(180,))
    assert set(ep.angles.values()) == {180.0}
    c = ep.inc_classes[0]
    rotated = ep.support_inc[ep.support_inc_labels == ep.synthetic_labels[c]]
    originals = np.stack([rotate_right_angle(r, 180) for r in rotated])
    pool = base_data[c]
    assert all(any(np.array_equal(o, p) for p in pool) for o in originals)


def test_episode_determinism(base_data):
    a = sample_pseudo_episode(base_data, 5, 1, 2, seed=11)
    b = sample_pseudo_episode(base_data, 5, 1, 2, seed=11)
    assert a.base_classes == b.base_classes and a.angles == b.angles
    assert np.array_equal(a.query_inc, b.query_inc)
    draws = {sample_pseudo_episode(base_data, 5, 1, 2, seed=s).base_classes for s in range(20)}
    assert len(draws) > 1


def test_episode_invariants_over_many_seeds(base_data):
    for seed in range(1000):
        ep = sample_pseudo_episode(base_data, 3, 1, 1, seed=seed)
        assert not set(ep.base_classes) & set(ep.inc_classes)
        synth = set(ep.synthetic_labels.values())
        assert len(synth) == 3
        assert not synth & (set(ep.base_classes) | set(ep.inc_classes) | set(base_data))
        assert set(ep.query_base_labels.tolist()) == set(ep.base_classes)
        assert set(ep.query_inc_labels.tolist()) == synth
        assert set(ep.angles.values()) <= {90.0, 180.0, 270.0}


def test_episode_errors(base_data):
    with pytest.raises(ValueError):
        sample_pseudo_episode(base_data, 17, 1, 1, seed=0)
    with pytest.raises(ValueError):
        sample_pseudo_episode(base_data, 2, 5, 10, seed=0)
    with pytest.raises(ValueError):
        sample_pseudo_episode(base_data, 2, 1, 1, seed=0, angle_pool=())


def test_arbitrary_angle_pool_runs(base_data):
    ep = sample_pseudo_episode(base_data, 2, 1, 1, seed=0, angle_pool=(20, -20))
    assert set(ep.angles.values()) <= {20.0, -20.0}
    assert ep.support_inc.min() >= 0 and ep.support_inc.max() <= 1


# --- CIFAR-100 binary ---------------------------------------------------

def cifar_records(labels, rng):
    raw = bytearray()
    images = []
    for coarse, fine in labels:
        pix = rng.integers(0, 256, size=3072, dtype=np.uint8)
        images.append(pix)
        raw += bytes([coarse, fine]) + pix.tobytes()
    return bytes(raw), images


def test_cifar_fixture_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    raw, images = cifar_records([(3, 0), (7, 1)], rng)
    (tmp_path / "train.bin").write_bytes(raw)
    ds = load_cifar100_binary(tmp_path)
    assert ds.num_classes == 2
    for label, pix in zip((0, 1), images):
        got = ds.train[label][0]
        assert got.shape == (3, 32, 32)
        assert np.array_equal(np.round(got * 255).astype(np.uint8).reshape(-1), pix)
        assert got[0, 0, 0] == pix[0] / 255.0 and got[2, 31, 31] == pix[-1] / 255.0


def test_cifar_truncated_rejected(tmp_path):
    raw, _ = cifar_records([(0, 0)], np.random.default_rng(0))
    bad = tmp_path / "bad.bin"
    bad.write_bytes(raw[: CIFAR_RECORD - 1])
    with pytest.raises(ValueError, match="multiple"):
        load_cifar100_binary(bad)


def test_cifar_label_out_of_range(tmp_path):
    raw, _ = cifar_records([(0, 100)], np.random.default_rng(0))
    (tmp_path / "x.bin").write_bytes(raw)
    with pytest.raises(ValueError, match="fine label"):
        load_cifar100_binary(tmp_path / "x.bin")


# --- synthetic blobs ---------------------------------------------------

def test_blob_counts_and_range():
    ds = synth_blob_dataset(20, 50, 10, 16, seed=0)
    assert sum(len(v) for v in ds.train.values()) == 1000
    assert sum(len(v) for v in ds.test.values()) == 200
    for v in list(ds.train.values()) + list(ds.test.values()):
        assert v.min() >= 0 and v.max() <= 1 and v.shape[1:] == (1, 16, 16)


def test_blob_determinism():
    a, b = synth_blob_dataset(6, 4, 2, 8, seed=3), synth_blob_dataset(6, 4, 2, 8, seed=3)
    for c in range(6):
        assert a.train[c].tobytes() == b.train[c].tobytes()
        assert a.test[c].tobytes() == b.test[c].tobytes()


def test_blobs_are_orientation_sensitive():
    ds = synth_blob_dataset(20, 50, 10, 16, seed=0)
    differs = 0
    for c in range(20):
        imgs = ds.train[c]
        gap = np.abs(rotate(imgs, 180) - imgs).mean()
        within = np.abs(imgs[1:] - imgs[:-1]).mean()
        differs += gap > within
    assert differs >= 19


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset({0: np.zeros((1, 1, 2, 2)), 2: np.zeros((1, 1, 2, 2))},
                {0: np.zeros((1, 1, 2, 2)), 2: np.zeros((1, 1, 2, 2))})
    with pytest.raises(ValueError):
        Dataset({0: np.zeros((1, 1, 2, 2))}, {0: np.zeros((0, 1, 2, 2))})
