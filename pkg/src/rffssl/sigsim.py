"""Baseband simulation of transmitters with power-amplifier fingerprints.

Each simulated device emits random PSK symbols, pulse shaped by a root
raised cosine filter, distorted by a solid-state power amplifier (SSPA)
behavioral model with device specific coefficients, and received through
an AWGN channel. Everything is complex envelope; there is no carrier.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from rffssl.dataio import Dataset


class ConfigError(ValueError):
    """Invalid simulation or augmentation configuration."""


class InsufficientSymbolsError(ValueError):
    pass


class NumericDomainError(ArithmeticError):
    """The SSPA model produced a non-finite value for some input amplitude."""


class UndefinedSNRError(ValueError):
    pass


class Modulation(str, enum.Enum):
    BPSK = "BPSK"
    QPSK = "QPSK"
    PSK8 = "PSK8"

    @property
    def order(self) -> int:
        return {"BPSK": 2, "QPSK": 4, "PSK8": 8}[self.value]


def _gray(n: np.ndarray) -> np.ndarray:
    return n ^ (n >> 1)


def constellation(modulation: Modulation | str) -> np.ndarray:
    """Unit average power constellation indexed by the Gray-coded bit label."""
    modulation = parse_modulation(modulation)
    if modulation is Modulation.BPSK:
        return np.array([1.0 + 0j, -1.0 + 0j])
    if modulation is Modulation.QPSK:
        # bit b0 -> sign of I, bit b1 -> sign of Q
        labels = np.arange(4)
        i = 1 - 2 * (labels >> 1 & 1)
        q = 1 - 2 * (labels & 1)
        return (i + 1j * q) / math.sqrt(2.0)
    points = np.empty(8, dtype=complex)
    positions = np.arange(8)
    points[_gray(positions)] = np.exp(2j * np.pi * positions / 8)
    return points


def parse_modulation(modulation: Modulation | str) -> Modulation:
    if isinstance(modulation, Modulation):
        return modulation
    key = str(modulation).upper().replace("-", "")
    if key == "8PSK":
        key = "PSK8"
    try:
        return Modulation(key)
    except ValueError:
        raise ConfigError(f"unsupported modulation {modulation!r}") from None


@dataclass(frozen=True)
class DeviceProfile:
    """SSPA coefficients of one transmitter.

    ``alpha`` parameterizes the AM/AM curve and ``beta`` the AM/PM curve:

        A(r)   = (a1 r^a2 + a3 r^(a2+1)) / (1 + a4 r^(a2+1))
        Phi(r) = (b1 r^b2 + b3 r^(b2+1)) / (1 + b4 r^(b2+1))
    """

    id: int
    alpha: tuple[float, float, float, float]
    beta: tuple[float, float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.alpha) != 4 or len(self.beta) != 4:
            raise ConfigError("alpha and beta must have four coefficients")
        if not (self.alpha[1] > 0 and self.beta[1] > 0):
            raise ConfigError(f"device {self.id}: exponents alpha2, beta2 must be positive")
        r = np.linspace(0.0, 1.0, 1001)
        for name, c in (("alpha", self.alpha), ("beta", self.beta)):
            den = 1.0 + c[3] * r ** (c[1] + 1.0)
            if np.any(np.abs(den) < 1e-9):
                raise ConfigError(f"device {self.id}: {name} denominator vanishes on [0, 1]")


# Ten simulated transmitters derived from a measured GaAs FET amplifier.
DEVICE_TABLE: tuple[DeviceProfile, ...] = tuple(
    DeviceProfile(i, a, b)
    for i, (a, b) in enumerate(
        [
            ((10.2598, 1.9926, -0.2782, 9.5297), (6.0838, 1.3190, -0.0375, 16.2325)),
            ((10.7344, 2.0668, -0.5015, 9.5297), (6.3304, 1.3058, -0.0348, 16.2325)),
            ((11.6849, 2.0193, -0.6689, 9.5297), (6.7758, 2.0689, -0.0280, 16.2325)),
            ((10.2963, 1.7932, -0.2929, 9.5297), (6.1256, 1.4660, -0.0297, 16.2325)),
            ((11.3625, 2.0100, -0.4304, 9.5297), (6.6729, 2.2441, -0.0168, 16.2325)),
            ((11.4996, 2.0766, -0.5835, 9.5297), (6.7440, 2.9490, -0.0454, 16.2325)),
            ((10.5223, 1.7999, -0.5658, 9.5297), (6.4241, 1.4531, -0.0425, 16.2325)),
            ((10.4870, 1.8997, -0.4515, 9.5297), (6.4135, 1.4193, -0.0305, 16.2325)),
            ((11.3525, 2.2360, -0.2442, 9.5297), (6.9513, 2.1135, -0.0366, 16.2325)),
            ((10.0237, 1.9307, -0.4582, 9.5297), (6.0633, 2.4454, -0.0363, 16.2325)),
        ]
    )
)

# AM/PM output unit. The amplifier model gives no unit; radians are used.
PHASE_UNIT = "rad"


@dataclass(frozen=True)
class SimulationConfig:
    modulation: Modulation = Modulation.QPSK
    sps: int = 8
    rolloff: float = 0.35
    filter_span: int = 10
    sample_len: int = 1024
    snr_db: float = 18.0
    backoff_db: float = 0.0
    seed: int = 0
    # disables the amplifier stage; used for pipeline identity checks
    bypass_pa: bool = False

    def __post_init__(self):
        object.__setattr__(self, "modulation", parse_modulation(self.modulation))
        if self.sps < 1:
            raise ConfigError("sps must be >= 1")
        if not 0 < self.rolloff <= 1:
            raise ConfigError("rolloff must be in (0, 1]")
        if self.filter_span < 2:
            raise ConfigError("filter_span must be >= 2")
        if self.sample_len <= 0 or self.sample_len % self.sps:
            raise ConfigError("sample_len must be a positive multiple of sps")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ConfigError("snr_db must be finite (or +inf to disable noise)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modulation"] = self.modulation.value
        return d


@dataclass
class SymbolStream:
    symbols: np.ndarray
    modulation: Modulation
    indices: np.ndarray = field(repr=False, default=None)


def generate_symbols(n: int, modulation: Modulation | str, rng: np.random.Generator) -> SymbolStream:
    if n <= 0:
        raise ValueError("n must be positive")
    modulation = parse_modulation(modulation)
    points = constellation(modulation)
    idx = rng.integers(0, len(points), size=n)
    return SymbolStream(points[idx], modulation, idx)


def rrc_value(t: float, rolloff: float) -> float:
    """Root raised cosine impulse response at ``t`` symbol periods (Ts = 1)."""
    b = rolloff
    if t == 0.0:
        return 1.0 + b * (4.0 / math.pi - 1.0)
    if abs(abs(t) - 1.0 / (4.0 * b)) < 1e-12:
        return (b / math.sqrt(2.0)) * (
            (1 + 2 / math.pi) * math.sin(math.pi / (4 * b))
            + (1 - 2 / math.pi) * math.cos(math.pi / (4 * b))
        )
    num = math.sin(math.pi * t * (1 - b)) + 4 * b * t * math.cos(math.pi * t * (1 + b))
    den = math.pi * t * (1 - (4 * b * t) ** 2)
    return num / den


def rrc_taps(sps: int, rolloff: float, span: int) -> np.ndarray:
    """Unit-energy RRC filter with ``span * sps + 1`` taps."""
    if sps < 1 or not 0 < rolloff <= 1 or span < 2:
        raise ConfigError("rrc_taps requires sps >= 1, 0 < rolloff <= 1, span >= 2")
    n = np.arange(span * sps + 1) - span * sps / 2
    taps = np.array([rrc_value(k / sps, rolloff) for k in n])
    return taps / np.sqrt(np.sum(taps**2))


def pulse_shape(stream: SymbolStream | np.ndarray, config: SimulationConfig, trim: bool = True) -> np.ndarray:
    """Zero-stuff by ``sps`` and filter; returns ``config.sample_len`` samples.

    The full convolution is trimmed symmetrically. With ``trim=False`` the
    full convolution is returned instead.
    """
    symbols = stream.symbols if isinstance(stream, SymbolStream) else np.asarray(stream)
    if symbols.size == 0:
        raise InsufficientSymbolsError("empty symbol stream")
    taps = rrc_taps(config.sps, config.rolloff, config.filter_span)
    up = np.zeros((symbols.size - 1) * config.sps + 1, dtype=complex)
    up[:: config.sps] = symbols
    full = np.convolve(up, taps)
    if not trim:
        return full
    if full.size < config.sample_len:
        raise InsufficientSymbolsError(
            f"{symbols.size} symbols give {full.size} samples, need {config.sample_len}"
        )
    start = (full.size - config.sample_len) // 2
    return full[start : start + config.sample_len]


def symbols_per_record(config: SimulationConfig) -> int:
    """Symbol count that fills a record with no filter transient."""
    return config.sample_len // config.sps + config.filter_span + 1


def sspa_am_am(r: np.ndarray, alpha: Sequence[float]) -> np.ndarray:
    a1, a2, a3, a4 = alpha
    return (a1 * r**a2 + a3 * r ** (a2 + 1)) / (1 + a4 * r ** (a2 + 1))


def sspa_am_pm(r: np.ndarray, beta: Sequence[float]) -> np.ndarray:
    b1, b2, b3, b4 = beta
    phi = (b1 * r**b2 + b3 * r ** (b2 + 1)) / (1 + b4 * r ** (b2 + 1))
    return phi if PHASE_UNIT == "rad" else np.deg2rad(phi)


def apply_sspa(signal: np.ndarray, profile: DeviceProfile, backoff_db: float = 0.0) -> np.ndarray:
    """Drive the amplifier with peak magnitude ``10**(-backoff_db/20)``."""
    x = np.asarray(signal, dtype=complex)
    if not np.all(np.isfinite(x)):
        raise ValueError("input signal has non-finite samples")
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (10 ** (-backoff_db / 20) / peak)
    r = np.abs(x)
    with np.errstate(all="ignore"):
        gain = sspa_am_am(r, profile.alpha)
        phase = sspa_am_pm(r, profile.beta)
    if not (np.all(np.isfinite(gain)) and np.all(np.isfinite(phase))):
        raise NumericDomainError(
            f"SSPA output not finite for device {profile.id} "
            f"(alpha={profile.alpha}, beta={profile.beta})"
        )
    return gain * np.exp(1j * (np.angle(x) + phase))


def add_awgn(signal: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise at ``snr_db`` relative to measured power.

    ``snr_db = math.inf`` disables the noise and returns the input unchanged.
    """
    x = np.asarray(signal)
    if snr_db == math.inf:
        return x.copy()
    power = np.mean(np.abs(x) ** 2)
    if power <= 0:
        raise UndefinedSNRError("signal has zero power")
    noise_var = power / 10 ** (snr_db / 10)
    noise = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
    return x + math.sqrt(noise_var / 2) * noise


def synthesize_sample(profile: DeviceProfile, config: SimulationConfig, rng: np.random.Generator) -> np.ndarray:
    stream = generate_symbols(symbols_per_record(config), config.modulation, rng)
    x = pulse_shape(stream, config)
    if not config.bypass_pa:
        x = apply_sspa(x, profile, config.backoff_db)
    return add_awgn(x, config.snr_db, rng)


def perturb_profiles(
    base: DeviceProfile, offset_scale: float, n: int, rng: np.random.Generator
) -> list[DeviceProfile]:
    """Jitter the first three alpha/beta coefficients by a relative uniform offset."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if offset_scale < 0:
        raise ValueError("offset_scale must be non-negative")
    out = []
    for i in range(n):
        u = rng.uniform(-offset_scale, offset_scale, size=6)
        a = [base.alpha[k] * (1 + u[k]) for k in range(3)] + [base.alpha[3]]
        b = [base.beta[k] * (1 + u[3 + k]) for k in range(3)] + [base.beta[3]]
        out.append(DeviceProfile(i, tuple(a), tuple(b)))
    return out


def record_rng(master_seed: int, device: int, index: int) -> np.random.Generator:
    """Independent generator for one record, derived from a counter."""
    return np.random.default_rng([master_seed, device, index])


def config_digest(profiles: Sequence[DeviceProfile], config: SimulationConfig, per_device: int) -> bytes:
    payload = {
        "config": config.to_dict(),
        "profiles": [asdict(p) for p in profiles],
        "per_device": per_device,
        "phase_unit": PHASE_UNIT,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).digest()


def build_dataset(
    profiles: Sequence[DeviceProfile],
    config: SimulationConfig,
    per_device: int,
    seed: int | None = None,
) -> Dataset:
    """Synthesize ``per_device`` records for every profile.

    Labels are positions in ``profiles``. Each record draws from its own
    generator seeded by ``(seed, label, index)``; ``seed`` defaults to
    ``config.seed``.
    """
    if per_device < 1:
        raise ValueError("per_device must be >= 1")
    if len(profiles) < 2:
        raise ValueError("need at least two profiles")
    seed = config.seed if seed is None else seed
    signals = np.empty((len(profiles) * per_device, config.sample_len), dtype=np.complex64)
    labels = np.repeat(np.arange(len(profiles), dtype=np.uint16), per_device)
    row = 0
    for label, profile in enumerate(profiles):
        for i in range(per_device):
            signals[row] = synthesize_sample(profile, config, record_rng(seed, label, i))
            row += 1
    return Dataset(
        signals=signals,
        labels=labels,
        tags=np.zeros(len(labels), dtype=np.uint16),
        num_classes=len(profiles),
        digest=config_digest(profiles, config, per_device),
        provenance=f"sigsim {config.modulation.value} snr={config.snr_db}dB seed={seed}",
    )


def default_profiles(n: int = 10) -> list[DeviceProfile]:
    if not 2 <= n <= len(DEVICE_TABLE):
        raise ConfigError(f"the device table provides 2..{len(DEVICE_TABLE)} devices, asked for {n}")
    return list(DEVICE_TABLE[:n])


def with_seed(config: SimulationConfig, seed: int) -> SimulationConfig:
    return replace(config, seed=seed)
