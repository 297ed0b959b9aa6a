import math

import numpy as np
import pytest
from scipy import stats

from rffssl import sigsim
from rffssl.sigsim import (
    DEVICE_TABLE,
    DeviceProfile,
    Modulation,
    SimulationConfig,
    add_awgn,
    apply_sspa,
    build_dataset,
    generate_symbols,
    perturb_profiles,
    pulse_shape,
    rrc_taps,
    synthesize_sample,
)

XMTR0 = DEVICE_TABLE[0]


def textbook_rrc(t, beta):
    # independent scalar evaluation; limits handled by nudging off the singularity
    if t == 0:
        return 1 - beta + 4 * beta / math.pi
    if abs(abs(t) - 1 / (4 * beta)) < 1e-12:
        lo = textbook_rrc(t - 1e-7, beta)
        hi = textbook_rrc(t + 1e-7, beta)
        return 0.5 * (lo + hi)
    return (math.sin(math.pi * t * (1 - beta)) + 4 * beta * t * math.cos(math.pi * t * (1 + beta))) / (
        math.pi * t * (1 - (4 * beta * t) ** 2)
    )


def measured_snr_db(clean, noisy):
    noise = noisy - clean
    return 10 * math.log10(np.mean(np.abs(clean) ** 2) / np.mean(np.abs(noise) ** 2))


class TestSymbols:
    def test_bpsk_membership(self):
        s = generate_symbols(4, "BPSK", np.random.default_rng(3))
        assert len(s.symbols) == 4
        assert set(np.round(s.symbols, 12)) <= {1 + 0j, -1 + 0j}

    def test_qpsk_membership(self):
        s = generate_symbols(500, Modulation.QPSK, np.random.default_rng(1))
        h = math.sqrt(2) / 2
        assert np.allclose(np.abs(s.symbols.real), h) and np.allclose(np.abs(s.symbols.imag), h)

    @pytest.mark.parametrize("mod", list(Modulation))
    def test_unit_average_power(self, mod):
        assert abs(np.mean(np.abs(sigsim.constellation(mod)) ** 2) - 1) < 1e-9

    def test_8psk_gray_neighbours_differ_by_one_bit(self):
        pts = sigsim.constellation("8PSK")
        order = np.argsort(np.angle(pts) % (2 * np.pi))
        for a, b in zip(order, np.roll(order, -1)):
            assert bin(int(a) ^ int(b)).count("1") == 1

    def test_qpsk_frequencies_uniform(self):
        n = 100_000
        s = generate_symbols(n, "QPSK", np.random.default_rng(7))
        counts = np.bincount(s.indices, minlength=4)
        sigma = math.sqrt(n * 0.25 * 0.75)
        assert np.all(np.abs(counts - n / 4) < 3 * sigma)
        chi2 = np.sum((counts - n / 4) ** 2 / (n / 4))
        assert chi2 < stats.chi2.ppf(0.999, 3)

    def test_deterministic(self):
        a = generate_symbols(64, "PSK8", np.random.default_rng(5)).symbols
        b = generate_symbols(64, "PSK8", np.random.default_rng(5)).symbols
        assert np.array_equal(a, b)

    def test_bad_modulation(self):
        with pytest.raises(sigsim.ConfigError):
            generate_symbols(4, "QAM16", np.random.default_rng(0))


class TestRRC:
    def test_symmetric_and_unit_energy(self):
        taps = rrc_taps(8, 0.35, 10)
        assert len(taps) == 81
        assert np.array_equal(taps, taps[::-1])
        assert abs(np.sum(taps**2) - 1) < 1e-9

    def test_center_tap_matches_textbook_formula(self):
        sps, beta, span = 8, 0.35, 10
        raw = [textbook_rrc(k / sps, beta) for k in range(-span * sps // 2, span * sps // 2 + 1)]
        norm = math.sqrt(sum(v * v for v in raw))
        taps = rrc_taps(sps, beta, span)
        assert taps[len(taps) // 2] == pytest.approx(textbook_rrc(0.0, beta) / norm, abs=1e-12)
        assert np.allclose(taps, np.array(raw) / norm, atol=1e-12)

    def test_singular_points_use_limit(self):
        # rolloff 0.25 at sps 8 puts t = 1/(4*rolloff) = 1 symbol on a tap
        taps = rrc_taps(8, 0.25, 10)
        assert np.all(np.isfinite(taps))
        raw = [textbook_rrc(k / 8, 0.25) for k in range(-40, 41)]
        assert np.allclose(taps, np.array(raw) / np.linalg.norm(raw), atol=1e-9)

    def test_rejects_bad_parameters(self):
        with pytest.raises(sigsim.ConfigError):
            rrc_taps(8, 0.0, 10)
        with pytest.raises(sigsim.ConfigError):
            rrc_taps(8, 0.35, 1)


class TestPulseShape:
    def test_impulse_response(self):
        cfg = SimulationConfig()
        out = pulse_shape(np.array([1.0 + 0j]), cfg, trim=False)
        assert np.allclose(out, rrc_taps(8, 0.35, 10), atol=0)

    def test_output_length(self):
        cfg = SimulationConfig()
        stream = generate_symbols(sigsim.symbols_per_record(cfg), "QPSK", np.random.default_rng(0))
        assert len(pulse_shape(stream, cfg)) == 1024

    def test_too_few_symbols(self):
        with pytest.raises(sigsim.InsufficientSymbolsError):
            pulse_shape(np.ones(10, dtype=complex), SimulationConfig())

    def test_matched_filter_recovers_symbols(self):
        cfg = SimulationConfig()
        taps = rrc_taps(cfg.sps, cfg.rolloff, cfg.filter_span)
        pts = sigsim.constellation("QPSK")
        agree = total = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            stream = generate_symbols(sigsim.symbols_per_record(cfg), "QPSK", rng)
            rx = add_awgn(pulse_shape(stream, cfg), 18.0, rng)
            mf = np.convolve(rx, taps)
            # trimmed record starts span*sps after the first symbol's filter onset
            idx = np.arange(cfg.filter_span, cfg.sample_len // cfg.sps)
            decided = np.argmin(np.abs(mf[idx * cfg.sps, None] - pts[None, :]), axis=1)
            agree += np.sum(decided == stream.indices[idx])
            total += len(idx)
        assert agree / total >= 0.99


class TestSSPA:
    def scalar_oracle(self, r, c):
        return (c[0] * r ** c[1] + c[2] * r ** (c[1] + 1)) / (1 + c[3] * r ** (c[1] + 1))

    def test_zero_input(self):
        out = apply_sspa(np.array([0j, 1 + 0j]), XMTR0)
        assert out[0] == 0

    def test_xmtr0_at_unit_amplitude(self):
        out = apply_sspa(np.array([1 + 0j]), XMTR0)
        assert abs(out[0]) == pytest.approx(0.94795, abs=1e-5)
        assert np.angle(out[0]) == pytest.approx(0.35086, abs=1e-5)
        # exact quotient of the tabulated device coefficients
        assert abs(out[0]) == pytest.approx((10.2598 - 0.2782) / (1 + 9.5297), abs=1e-12)
        assert np.angle(out[0]) == pytest.approx((6.0838 - 0.0375) / (1 + 16.2325), abs=1e-12)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(256) + 1j * rng.standard_normal(256)
        out = apply_sspa(x, XMTR0)
        xs = x / np.max(np.abs(x))
        for xi, yi in zip(xs, out):
            r, ph = abs(xi), math.atan2(xi.imag, xi.real)
            a, p = self.scalar_oracle(r, XMTR0.alpha), self.scalar_oracle(r, XMTR0.beta)
            assert abs(yi - a * complex(math.cos(ph + p), math.sin(ph + p))) < 1e-12

    def test_backoff_scales_drive(self):
        x = np.array([0.5 + 0j, 2 + 0j])
        out = apply_sspa(x, XMTR0, backoff_db=6.0)
        r = 10 ** (-6 / 20)
        assert abs(out[1]) == pytest.approx(self.scalar_oracle(r, XMTR0.alpha), abs=1e-12)

    def test_profiles_distinguishable(self):
        cfg = SimulationConfig()
        stream = generate_symbols(sigsim.symbols_per_record(cfg), "QPSK", np.random.default_rng(0))
        x = pulse_shape(stream, cfg)
        outs = [apply_sspa(x, p) for p in DEVICE_TABLE]
        for i in range(len(outs)):
            for j in range(i + 1, len(outs)):
                assert np.max(np.abs(outs[i] - outs[j])) > 1e-6

    def test_degenerate_denominator_rejected(self):
        with pytest.raises(sigsim.ConfigError):
            DeviceProfile(0, (1.0, 1.0, 0.0, -1.0), XMTR0.beta)

    def test_non_finite_output_raises(self):
        # pass profile validation, then break it
        p = DeviceProfile(0, XMTR0.alpha, XMTR0.beta)
        object.__setattr__(p, "alpha", (1.0, 1.0, 0.0, -1.0))
        with pytest.raises(sigsim.NumericDomainError, match="device 0"):
            apply_sspa(np.array([1 + 0j]), p)


class TestAWGN:
    def test_disabled_noise(self):
        x = np.exp(1j * np.arange(16))
        assert np.array_equal(add_awgn(x, math.inf, np.random.default_rng(0)), x)

    def test_snr_calibration(self):
        cfg = SimulationConfig()
        realized = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            clean = apply_sspa(pulse_shape(generate_symbols(sigsim.symbols_per_record(cfg), "QPSK", rng), cfg), XMTR0)
            realized.append(measured_snr_db(clean, add_awgn(clean, 18.0, rng)))
        assert abs(np.mean(realized) - 18.0) <= 0.5
        assert all(abs(s - 18.0) < 1.0 for s in realized)

    def test_deterministic(self):
        x = np.ones(64, dtype=complex)
        a = add_awgn(x, 10, np.random.default_rng(9))
        b = add_awgn(x, 10, np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_zero_power(self):
        with pytest.raises(sigsim.UndefinedSNRError):
            add_awgn(np.zeros(8, dtype=complex), 10, np.random.default_rng(0))


class TestSynthesis:
    def test_length_and_determinism(self):
        cfg = SimulationConfig()
        a = synthesize_sample(XMTR0, cfg, np.random.default_rng(1))
        b = synthesize_sample(XMTR0, cfg, np.random.default_rng(1))
        assert len(a) == 1024
        assert a.tobytes() == b.tobytes()

    def test_pipeline_identity(self):
        cfg = SimulationConfig(bypass_pa=True, snr_db=math.inf)
        out = synthesize_sample(XMTR0, cfg, np.random.default_rng(4))
        stream = generate_symbols(sigsim.symbols_per_record(cfg), cfg.modulation, np.random.default_rng(4))
        assert np.array_equal(out, pulse_shape(stream, cfg))

    def test_config_validation(self):
        with pytest.raises(sigsim.ConfigError):
            SimulationConfig(sample_len=1001, sps=8)
        with pytest.raises(sigsim.ConfigError):
            SimulationConfig(rolloff=1.5)


class TestProfiles:
    def test_zero_offset_copies(self):
        out = perturb_profiles(XMTR0, 0.0, 3, np.random.default_rng(0))
        assert all(p.alpha == XMTR0.alpha and p.beta == XMTR0.beta for p in out)

    def test_fourth_coefficients_fixed(self):
        out = perturb_profiles(XMTR0, 0.05, 20, np.random.default_rng(0))
        assert all(p.alpha[3] == 9.5297 and p.beta[3] == 16.2325 for p in out)
        assert all(
            abs(p.alpha[k] / XMTR0.alpha[k] - 1) <= 0.05 + 1e-12 for p in out for k in range(3)
        )

    def test_table_devices_share_fourth_coefficients(self):
        assert {p.alpha[3] for p in DEVICE_TABLE} == {9.5297}
        assert {p.beta[3] for p in DEVICE_TABLE} == {16.2325}

    def test_table_leading_coefficients_close_to_xmtr0(self):
        # the linear-gain terms alpha1, beta1 stay within 15% of the reference device;
        # the exponents and cubic terms spread much further
        for p in DEVICE_TABLE:
            assert abs(p.alpha[0] / XMTR0.alpha[0] - 1) < 0.15
            assert abs(p.beta[0] / XMTR0.beta[0] - 1) < 0.15


class TestBuildDataset:
    def test_counts_and_histogram(self):
        ds = build_dataset(DEVICE_TABLE[:3], SimulationConfig(), 5, seed=11)
        assert len(ds) == 15
        assert list(ds.class_counts()) == [5, 5, 5]

    def test_deterministic_bytes(self):
        a = build_dataset(DEVICE_TABLE[:2], SimulationConfig(), 4, seed=3)
        b = build_dataset(DEVICE_TABLE[:2], SimulationConfig(), 4, seed=3)
        c = build_dataset(DEVICE_TABLE[:2], SimulationConfig(), 4, seed=4)
        assert a.equals(b)
        assert not a.equals(c)

    def test_needs_two_profiles(self):
        with pytest.raises(ValueError):
            build_dataset(DEVICE_TABLE[:1], SimulationConfig(), 4)

    @pytest.mark.slow
    def test_full_scale_record_count(self):
        ds = build_dataset(DEVICE_TABLE, SimulationConfig(), 10_000, seed=0)
        assert len(ds) == 100_000
        assert np.all(ds.class_counts() == 10_000)
