"""Signal augmentations for complex baseband records.

The composite transform ``composite_augment`` picks a constellation
preserving rotation at random and then applies a k-segment stochastic
permutation. All functions work on 1-D complex arrays and are pure given
the generator passed in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rffssl.sigsim import ConfigError, Modulation, parse_modulation

Augmenter = Callable[[np.ndarray, np.random.Generator], np.ndarray]


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class RotationSet:
    angles: tuple[float, ...]

    @classmethod
    def cyclic(cls, order: int) -> "RotationSet":
        return cls(tuple(2 * math.pi * i / order for i in range(order)))

    def without_identity(self) -> tuple[float, ...]:
        return tuple(a for a in self.angles if not math.isclose(a % (2 * math.pi), 0.0, abs_tol=1e-12))

    def degrees(self) -> list[float]:
        return [math.degrees(a) for a in self.angles]


def rotation_set_for(modulation: Modulation | str) -> RotationSet:
    """Angles mapping the constellation onto itself: 2, 4 or 8 of them."""
    return RotationSet.cyclic(parse_modulation(modulation).order)


def rotate(signal: np.ndarray, theta: float) -> np.ndarray:
    if not math.isfinite(theta):
        raise ValueError("rotation angle must be finite")
    # exact phasors for multiples of 90 degrees keep magnitudes bit-exact
    quarter = theta / (math.pi / 2)
    if quarter == round(quarter):
        phasor = (1, 1j, -1, -1j)[int(round(quarter)) % 4]
    else:
        phasor = complex(math.cos(theta), math.sin(theta))
    return np.asarray(signal) * phasor


def flip_horizontal(signal: np.ndarray) -> np.ndarray:
    return np.conj(-np.asarray(signal))


def flip_vertical(signal: np.ndarray) -> np.ndarray:
    return np.conj(np.asarray(signal))


def add_noise_augment(signal: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add complex Gaussian noise with total variance ``sigma**2``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(signal)
    if sigma == 0:
        return x.copy()
    noise = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
    return (x + sigma / math.sqrt(2) * noise).astype(x.dtype, copy=False)


def draw_permutation(k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of ``range(k)`` other than the identity."""
    while True:
        order = rng.permutation(k)
        if np.any(order != np.arange(k)):
            return order


def draw_cuts(length: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(np.arange(1, length), size=k - 1, replace=False))


def permute_segments(signal: np.ndarray, cuts: np.ndarray, order: np.ndarray) -> np.ndarray:
    segments = np.split(np.asarray(signal), cuts)
    return np.concatenate([segments[i] for i in order])


def stochastic_permutation(
    signal: np.ndarray, k: int, rng: np.random.Generator, record: dict | None = None
) -> np.ndarray:
    """Cut at ``k - 1`` distinct interior points and reorder the segments.

    If ``record`` is a dict, the cuts and segment order are stored in it.
    """
    x = np.asarray(signal)
    if k < 2 or k > x.size:
        raise SegmentationError(f"cannot cut {x.size} samples into {k} segments")
    cuts = draw_cuts(x.size, k, rng)
    order = draw_permutation(k, rng)
    if record is not None:
        record["cuts"], record["order"] = cuts, order
    return permute_segments(x, cuts, order)


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_set: RotationSet = field(default_factory=lambda: rotation_set_for("QPSK"))
    k_segments: int = 2
    exclude_identity_rotation: bool = False
    # upper bound l/sps on k; None skips the check
    max_segments: int | None = None

    def __post_init__(self):
        if self.k_segments < 2:
            raise ConfigError("k_segments must be >= 2")
        if self.max_segments is not None and self.k_segments > self.max_segments:
            raise ConfigError(f"k_segments {self.k_segments} exceeds l/sps = {self.max_segments}")
        if self.exclude_identity_rotation and not self.rotation_set.without_identity():
            raise ConfigError("rotation set has no non-identity angle to draw from")

    def angles(self) -> tuple[float, ...]:
        if self.exclude_identity_rotation:
            return self.rotation_set.without_identity()
        return self.rotation_set.angles

    def perturbation(self) -> "AugmentationSpec":
        """Same transform with the identity rotation removed."""
        return AugmentationSpec(self.rotation_set, self.k_segments, True, self.max_segments)


def composite_augment(signal: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    angles = spec.angles()
    theta = angles[rng.integers(len(angles))]
    return stochastic_permutation(rotate(signal, theta), spec.k_segments, rng)


def composite(spec: AugmentationSpec) -> Augmenter:
    return lambda x, rng: composite_augment(x, spec, rng)


def random_rotation(rotation_set: RotationSet) -> Augmenter:
    def aug(x, rng):
        return rotate(x, rotation_set.angles[rng.integers(len(rotation_set.angles))])

    return aug


def random_flip(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    choice = rng.integers(3)
    if choice == 0:
        return x.copy()
    return flip_horizontal(x) if choice == 1 else flip_vertical(x)


def permutation_only(k: int) -> Augmenter:
    return lambda x, rng: stochastic_permutation(x, k, rng)


def relative_noise(snr_db: float) -> Augmenter:
    """Noise augmentation scaled to the record's own power."""

    def aug(x, rng):
        power = float(np.mean(np.abs(x) ** 2))
        return add_noise_augment(x, math.sqrt(power / 10 ** (snr_db / 10)), rng)

    return aug


def identity(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return x


def augment_batch(signals: np.ndarray, aug: Augmenter | None, rng: np.random.Generator) -> np.ndarray:
    if aug is None:
        return signals
    return np.stack([aug(x, rng) for x in signals]).astype(signals.dtype, copy=False)


def make_augmenter(variant: str, modulation: Modulation | str = "QPSK", k: int = 2, noise_snr_db: float = 20.0) -> Augmenter | None:
    """Build a labeled-data augmentation by name.

    Names: ``none``, ``rotation``, ``flipping``, ``noise``, ``permutation``
    (or ``permutation<k>``), ``composite``.
    """
    rot = rotation_set_for(modulation)
    if variant == "none":
        return None
    if variant == "rotation":
        return random_rotation(rot)
    if variant == "flipping":
        return random_flip
    if variant == "noise":
        return relative_noise(noise_snr_db)
    if variant.startswith("permutation"):
        return permutation_only(int(variant[len("permutation"):] or k))
    if variant == "composite":
        return composite(AugmentationSpec(rot, k))
    raise ConfigError(f"unknown augmentation variant {variant!r}")
