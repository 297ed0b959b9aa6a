import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rffssl import augment
from rffssl.augment import (
    AugmentationSpec,
    RotationSet,
    add_noise_augment,
    composite_augment,
    flip_horizontal,
    flip_vertical,
    permute_segments,
    rotate,
    rotation_set_for,
    stochastic_permutation,
)
from rffssl.sigsim import ConfigError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
signals = st.builds(
    lambda re, im: re + 1j * im,
    arrays(np.float64, st.integers(2, 64), elements=finite),
    arrays(np.float64, 64, elements=finite),
).map(lambda z: z if z.ndim == 1 else z)


@st.composite
def complex_signals(draw, min_len=2, max_len=64):
    n = draw(st.integers(min_len, max_len))
    re = draw(arrays(np.float64, n, elements=finite))
    im = draw(arrays(np.float64, n, elements=finite))
    return re + 1j * im


@st.composite
def nonzero_signals(draw, min_len=2, max_len=64):
    x = draw(complex_signals(min_len, max_len))
    k = draw(st.integers(0, len(x) - 1))
    x[k] = x[k] if abs(x[k]) > 1e-3 else 1.0 + 0.5j
    return x


def magnitude_multiset(x):
    return np.sort(np.abs(x))


class TestRotate:
    def test_quarter_turn(self):
        assert np.array_equal(rotate(np.array([1 + 0j]), math.pi / 2), np.array([1j]))

    def test_inverse(self):
        x = np.random.default_rng(0).standard_normal(32) * (1 + 1j)
        back = rotate(rotate(x, math.radians(90)), math.radians(270))
        assert np.max(np.abs(back - x)) < 1e-12

    @settings(max_examples=300)
    @given(complex_signals(), st.floats(-10, 10))
    def test_preserves_magnitudes(self, x, theta):
        y = rotate(x, theta)
        assert len(y) == len(x)
        assert np.max(np.abs(np.abs(y) - np.abs(x))) <= 1e-12 * max(1.0, np.max(np.abs(x)))

    @settings(max_examples=200)
    @given(complex_signals(), st.integers(0, 3), st.integers(0, 3))
    def test_qpsk_rotations_form_z4(self, x, a, b):
        angles = rotation_set_for("QPSK").angles
        lhs = rotate(rotate(x, angles[a]), angles[b])
        rhs = rotate(x, angles[(a + b) % 4])
        assert np.array_equal(lhs, rhs)

    def test_nonfinite_angle(self):
        with pytest.raises(ValueError):
            rotate(np.ones(2), math.nan)


class TestFlip:
    def test_horizontal(self):
        assert flip_horizontal(np.array([2 + 3j]))[0] == -2 + 3j

    def test_vertical(self):
        assert flip_vertical(np.array([2 + 3j]))[0] == 2 - 3j

    @given(complex_signals())
    def test_involutions_and_composition(self, x):
        assert np.array_equal(flip_vertical(flip_vertical(x)), x)
        assert np.array_equal(flip_horizontal(flip_horizontal(x)), x)
        assert np.array_equal(flip_horizontal(flip_vertical(x)), rotate(x, math.pi))


class TestNoise:
    def test_zero_sigma_identity(self):
        x = np.arange(8) * (1 + 1j)
        assert np.array_equal(add_noise_augment(x, 0.0, np.random.default_rng(0)), x)

    def test_noise_power(self):
        x = np.zeros(1024, dtype=complex)
        y = add_noise_augment(x, 0.3, np.random.default_rng(5))
        assert abs(np.mean(np.abs(y - x) ** 2) / 0.09 - 1) < 0.10

    def test_deterministic(self):
        x = np.ones(64, dtype=complex)
        a = add_noise_augment(x, 0.5, np.random.default_rng(2))
        b = add_noise_augment(x, 0.5, np.random.default_rng(2))
        assert np.array_equal(a, b)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            add_noise_augment(np.ones(4), -1.0, np.random.default_rng(0))


class TestStochasticPermutation:
    def test_two_segment_swap(self):
        x = np.array(list("abcde"))
        assert list(permute_segments(x, np.array([3]), np.array([1, 0]))) == list("deabc")

    def test_two_segments_is_always_a_swap(self):
        x = np.arange(10)
        rec = {}
        y = stochastic_permutation(x, 2, np.random.default_rng(1), record=rec)
        c = rec["cuts"][0]
        assert list(y) == list(x[c:]) + list(x[:c])

    @settings(max_examples=300)
    @given(complex_signals(min_len=2), st.data())
    def test_preserves_values_and_reconstructs(self, x, data):
        k = data.draw(st.integers(2, len(x)))
        rec = {}
        y = stochastic_permutation(x, k, np.random.default_rng(data.draw(st.integers(0, 2**32))), record=rec)
        assert len(y) == len(x)
        assert sorted(y.tolist(), key=lambda z: (z.real, z.imag)) == sorted(x.tolist(), key=lambda z: (z.real, z.imag))
        # undo: put the segments back in their original order
        segments = np.split(np.arange(len(x)), rec["cuts"])
        positions = np.concatenate([segments[i] for i in rec["order"]])
        restored = np.empty_like(y)
        restored[positions] = y
        assert np.array_equal(restored, x)
        assert not np.array_equal(rec["order"], np.arange(k))

    def test_every_cut_position_observed(self):
        rng = np.random.default_rng(0)
        seen = Counter()
        for _ in range(1000):
            rec = {}
            stochastic_permutation(np.arange(16), 2, rng, record=rec)
            seen[int(rec["cuts"][0])] += 1
        assert set(seen) == set(range(1, 16))
        # uniform over 15 positions: each near 1000/15
        assert min(seen.values()) > 1000 / 15 / 2

    def test_non_identity_arrangement_with_distinct_values(self):
        rng = np.random.default_rng(3)
        x = np.arange(32)
        for k in (2, 3, 4, 8, 32):
            for _ in range(200):
                assert not np.array_equal(stochastic_permutation(x, k, rng), x)

    def test_too_many_segments(self):
        with pytest.raises(augment.SegmentationError):
            stochastic_permutation(np.arange(4), 5, np.random.default_rng(0))


class TestRotationSets:
    def test_qpsk(self):
        assert np.allclose(rotation_set_for("QPSK").degrees(), [0, 90, 180, 270])

    def test_bpsk(self):
        assert np.allclose(rotation_set_for("BPSK").degrees(), [0, 180])

    def test_8psk(self):
        d = rotation_set_for("8PSK").degrees()
        assert len(d) == 8 and np.allclose(np.diff(d), 45)

    def test_unsupported(self):
        with pytest.raises(ConfigError):
            rotation_set_for("QAM64")


class TestComposite:
    @settings(max_examples=300)
    @given(complex_signals(min_len=4), st.integers(0, 2**32))
    def test_preserves_length_and_magnitudes(self, x, seed):
        spec = AugmentationSpec(k_segments=min(4, len(x)))
        y = composite_augment(x, spec, np.random.default_rng(seed))
        assert len(y) == len(x)
        assert np.allclose(magnitude_multiset(y), magnitude_multiset(x), rtol=1e-12, atol=0)

    def test_degenerate_is_swap(self):
        spec = AugmentationSpec(RotationSet((0.0,)), 2)
        x = np.arange(6) + 0j
        rng_a, rng_b = np.random.default_rng(4), np.random.default_rng(4)
        y = composite_augment(x, spec, rng_a)
        rng_b.integers(1)  # rotation draw
        c = augment.draw_cuts(6, 2, rng_b)[0]
        assert np.array_equal(y, np.concatenate([x[c:], x[:c]]))

    @settings(max_examples=300)
    @given(nonzero_signals(), st.integers(0, 2**32))
    def test_identity_excluded_never_returns_input(self, x, seed):
        spec = AugmentationSpec(k_segments=2, exclude_identity_rotation=True)
        assert not np.array_equal(composite_augment(x, spec, np.random.default_rng(seed)), x)

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            AugmentationSpec(k_segments=1)
        with pytest.raises(ConfigError):
            AugmentationSpec(k_segments=256, max_segments=128)
        with pytest.raises(ConfigError):
            AugmentationSpec(RotationSet((0.0,)), 2, exclude_identity_rotation=True)

    def test_perturbation_angles_exclude_zero(self):
        spec = AugmentationSpec().perturbation()
        assert np.allclose(np.degrees(spec.angles()), [90, 180, 270])


@pytest.mark.parametrize("variant", ["none", "rotation", "flipping", "noise", "permutation", "permutation16", "composite"])
def test_make_augmenter_variants(variant):
    aug = augment.make_augmenter(variant)
    x = np.exp(1j * np.linspace(0, 3, 1024)).astype(np.complex64)
    out = x if aug is None else aug(x, np.random.default_rng(0))
    assert out.shape == x.shape


def test_make_augmenter_unknown():
    with pytest.raises(ConfigError):
        augment.make_augmenter("gan")
