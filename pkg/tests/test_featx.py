import numpy as np
import pytest

from lapsecount import numcore as nc
from lapsecount.featx import (
    HANDCRAFTED, TINYCONV, HandcraftedExtractor, TinyConvNet, extract, new_static_model, predict_static,
    static_frame_count, train_static,
)
from lapsecount.gridpart import JoinMethod, PartitionConfig, label_crops
from lapsecount.simkit import Frame


def test_extractor_shapes_and_names():
    rng = np.random.default_rng(0)
    crops = rng.random((3, 50, 50))
    assert extract(crops, TinyConvNet(rng)).shape == (3, 32)
    assert extract(crops[0], HandcraftedExtractor()).shape == (19,)
    assert TinyConvNet.arch == TINYCONV and HandcraftedExtractor.arch == HANDCRAFTED


def test_wrong_crop_size_rejected():
    with pytest.raises(nc.ShapeError):
        extract(np.zeros((2, 40, 40)), HandcraftedExtractor(50))
    with pytest.raises(nc.ShapeError):
        extract(np.zeros((2, 40, 40)), TinyConvNet(np.random.default_rng(0), 50))


def test_handcrafted_constant_zero_crop():
    v = extract(np.zeros((50, 50)), HandcraftedExtractor())
    assert v[0] == 1.0 and np.all(v[1:16] == 0)
    assert v[18] == 0.0  # mean gradient magnitude
    assert v[17] == 0.0  # std


def test_handcrafted_histogram_permutation_invariant():
    rng = np.random.default_rng(1)
    crop = rng.random((50, 50))
    shuffled = rng.permutation(crop.ravel()).reshape(50, 50)
    a, b = extract(np.stack([crop, shuffled]), HandcraftedExtractor())
    assert np.array_equal(a[:16], b[:16])
    assert a[:16].sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.isfinite(a))


def test_handcrafted_counts_isolated_peaks():
    yy, xx = np.mgrid[0:50, 0:50]
    crop = 0.2 + sum(0.6 * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / 8.0) for x, y in [(12, 12), (35, 20), (20, 38)])
    assert extract(crop, HandcraftedExtractor())[16] == 3


def test_identical_crops_identical_vectors():
    rng = np.random.default_rng(2)
    crop = rng.random((50, 50))
    for ext in (TinyConvNet(rng), HandcraftedExtractor()):
        a, b = extract(np.stack([crop, crop]), ext)
        assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(3))
def test_tinyconv_end_to_end_gradient(seed):
    model = new_static_model("tinyconv", seed=seed, window=10)
    rng = np.random.default_rng(100 + seed)
    x = rng.random((2, 10, 10))
    assert nc.gradient_check(model, x, np.array([1.0, 3.0]), tol=1e-4) < 1e-4


def test_train_static_is_deterministic():
    rng = np.random.default_rng(3)
    crops = rng.random((40, 12, 12))
    labels = rng.integers(0, 4, 40).astype(float)
    a, ha = train_static(crops, labels, epochs=2, seed=5)
    b, hb = train_static(crops, labels, epochs=2, seed=5)
    assert ha == hb
    for p, q in zip(a.params(), b.params()):
        assert np.array_equal(p.value, q.value)


def test_train_static_learns_brightness_count():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 5, 200)
    crops = np.stack([np.clip(0.1 + 0.15 * k + rng.normal(0, 0.02, (12, 12)), 0, 1) for k in labels])
    model, hist = train_static(crops, labels, epochs=30, seed=0, lr=1e-2)
    assert hist[-1] < 0.5 * hist[0]
    assert np.mean(np.abs(predict_static(crops, model) - labels)) < 0.5


def test_handcrafted_trains_head_only():
    rng = np.random.default_rng(5)
    crops = rng.random((30, 50, 50))
    model, hist = train_static(crops, np.zeros(30), kind="handcrafted", epochs=2)
    assert len(hist) == 2 and model.m == 19


def test_train_static_rejects_bad_labels():
    with pytest.raises(ValueError):
        train_static(np.zeros((2, 10, 10)), [1.0, -1.0], epochs=1)
    with pytest.raises(ValueError):
        train_static(np.zeros((2, 10, 10)), [1.0], epochs=1)


def test_static_frame_count_oracle_exact():
    rng = np.random.default_rng(6)
    cfg = PartitionConfig(50, 25, True)
    dots = [tuple(d) for d in rng.uniform(50, 150, size=(17, 2))]
    frame = Frame(np.zeros((200, 200)), 0.0, dots)
    for method in JoinMethod:
        count = static_frame_count(frame, lambda stack, crops: label_crops(crops, dots), cfg, method)
        assert abs(count - 17) < 1e-9
