import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cbsmseg.augment import (
    PROVENANCES,
    SamplePair,
    augment_dataset,
    contrast_adjust,
    gaussian_blur,
    gaussian_kernel,
    hflip,
)
from cbsmseg.dataset import SynthConfig, generate_synthetic
from cbsmseg.metrics import confusion, dice

unit_images = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                     elements=st.floats(0, 1, allow_nan=False))


def test_contrast_values():
    assert contrast_adjust(np.array([0.5]), 3.7)[0] == 0.5
    assert contrast_adjust(np.array([1.0]), 1.5)[0] == 1.0
    assert contrast_adjust(np.array([0.2]), 1.5)[0] == pytest.approx(0.05, abs=1e-15)
    with pytest.raises(ValueError):
        contrast_adjust(np.zeros(3), 0.0)


def test_kernel_radius_and_normalisation():
    for sigma in (0.3, 1.0, 1.7):
        k = gaussian_kernel(sigma)
        assert len(k) == 2 * math.ceil(3 * sigma) + 1
        assert abs(k.sum() - 1) < 1e-15
    with pytest.raises(ValueError):
        gaussian_blur(np.zeros((4, 4)), -1.0)


def test_blur_constant_image():
    np.testing.assert_allclose(gaussian_blur(np.full((7, 9), 0.37), 1.3), 0.37, atol=1e-15)


def test_blur_impulse_gives_normalised_kernel():
    sigma = 1.0
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    r = math.ceil(3 * sigma)
    w = np.array([math.exp(-0.5 * (i / sigma) ** 2) for i in range(-r, r + 1)])
    w /= w.sum()
    expected = np.zeros((21, 21))
    expected[10 - r:10 + r + 1, 10 - r:10 + r + 1] = np.outer(w, w)
    np.testing.assert_allclose(gaussian_blur(img, sigma), expected, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(unit_images, st.floats(0.3, 2.5))
def test_blur_preserves_mean_and_range(img, sigma):
    out = gaussian_blur(img, sigma)
    assert abs(out.mean() - img.mean()) <= 1e-9
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


@settings(max_examples=50, deadline=None)
@given(unit_images, st.floats(0.1, 4.0))
def test_contrast_stays_in_unit_range(img, alpha):
    out = contrast_adjust(img, alpha)
    assert out.min() >= 0 and out.max() <= 1


def _pair(rng, h=6, w=8, pid="p"):
    return SamplePair(pid, rng.random((h, w)), (rng.random((h, w)) > 0.5).astype(np.uint8))


def test_hflip_involution_and_row(rng):
    p = _pair(rng)
    back = hflip(hflip(p))
    assert np.array_equal(back.image, p.image) and np.array_equal(back.mask, p.mask)
    row = SamplePair("r", np.array([[0.1, 0.9]]), np.array([[1, 0]]))
    f = hflip(row)
    assert f.image.tolist() == [[0.9, 0.1]] and f.mask.tolist() == [[0, 1]]


def test_flip_keeps_overlap_for_equivariant_predictor(rng):
    pair = generate_synthetic(SynthConfig(count=1, size=32, seed=3))[0]

    def predictor(img):  # pointwise, hence flip-equivariant
        return (img > 0.4).astype(np.uint8)

    before = dice(confusion(predictor(pair.image), pair.mask))
    flipped = hflip(pair)
    after = dice(confusion(predictor(flipped.image), flipped.mask))
    assert before == after
    assert 0.5 < before <= 1.0


def test_augment_dataset_counts_and_masks(rng):
    pairs = [_pair(rng, pid=f"s{i}") for i in range(10)]
    out = augment_dataset(pairs)
    assert len(out) == 60
    assert Counter(p.provenance for p in out) == {tag: 10 for tag in PROVENANCES}
    for k, src in enumerate(pairs):
        group = out[6 * k:6 * k + 6]
        assert [p.id for p in group] == [f"{src.id}-{t}" for t in PROVENANCES]
        for p in group:
            assert p.image.shape == p.mask.shape == src.image.shape
            assert set(np.unique(p.mask)) <= {0, 1}
            assert p.image.min() >= 0 and p.image.max() <= 1
            expected = src.mask[:, ::-1] if p.provenance.startswith("flip") else src.mask
            assert np.array_equal(p.mask, expected)
        by_tag = {p.provenance: p for p in group}
        assert np.array_equal(by_tag["original"].image, src.image)
        assert np.array_equal(by_tag["flip"].image, src.image[:, ::-1])
        np.testing.assert_array_equal(by_tag["contrast"].image, contrast_adjust(src.image))
        np.testing.assert_array_equal(by_tag["blur"].image, gaussian_blur(contrast_adjust(src.image)))
        np.testing.assert_array_equal(by_tag["flip-blur"].image, gaussian_blur(contrast_adjust(src.image[:, ::-1])))


def test_augment_empty_and_rejects_augmented(rng):
    assert augment_dataset([]) == []
    out = augment_dataset([_pair(rng)])
    with pytest.raises(ValueError, match="p-contrast"):
        augment_dataset(out)


def test_sample_pair_validation(rng):
    with pytest.raises(ValueError):
        SamplePair("x", np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        SamplePair("x", np.zeros((3, 3)), np.full((3, 3), 2))
