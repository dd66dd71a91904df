import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import db, fft_peak_amplitude
from uselab.audio import AudioBuffer, derive_stream, tone
from uselab.curate import speech_like_signal
from uselab.degrade import (MU, AssetBank, DegradationRecipe, LossModel, Step, add_noise, apply_recipe, bandlimit,
                            clip, codec_crush, mask_digest, mulaw_compress, mulaw_expand, packet_loss, realize_recipe,
                            scaled_noise, snr_db, synth_wind, wind_noise)
from uselab.errors import ValidationError
from uselab.rir import synthetic_rir

# frozen by running packet_loss once; guards against silent changes to stream derivation or loss drawing
PACKET_SNAPSHOT = {
    "lost": 48,
    "first": [21, 25, 43, 54, 59, 61, 65, 79, 83, 88],
    "sha256": "cf0435eded8ee93c6cfded325f58de77a815124f561edc029537324adf369d07",
}


@pytest.fixture
def speech():
    return speech_like_signal(1.0, 16000, seed=3)


@pytest.fixture
def white():
    return AudioBuffer(np.random.default_rng(9).standard_normal(12000), 16000)


class TestNoise:
    @pytest.mark.parametrize("snr", [-20, -5, 0, 5, 20, 60])
    def test_realized_snr(self, speech, white, snr):
        n = scaled_noise(speech, white, snr, derive_stream(0, b"n"))
        assert abs(snr_db(speech.samples, n) - snr) <= 0.01

    def test_sixty_db_energy(self, speech, white):
        y = add_noise(speech, white, 60)
        e = np.sum((y.samples - speech.samples) ** 2)
        assert abs(e / (1e-6 * speech.energy()) - 1) <= 0.01

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-20, 60), st.integers(0, 10**6))
    def test_snr_property(self, snr, seed):
        s = speech_like_signal(0.25, 8000, seed=1)
        noise = AudioBuffer(np.random.default_rng(seed).standard_normal(900), 8000)
        n = scaled_noise(s, noise, snr, derive_stream(seed, b"p"))
        assert abs(snr_db(s.samples, n) - snr) <= 0.01

    def test_zero_noise_rejected(self, speech):
        with pytest.raises(ValidationError):
            add_noise(speech, AudioBuffer(np.zeros(100), 16000), 5)

    def test_random_offset_tiling(self, speech):
        ramp = AudioBuffer(np.arange(1, 101, dtype=float), 16000)
        a = scaled_noise(speech, ramp, 0, derive_stream(1, b"a"))
        b = scaled_noise(speech, ramp, 0, derive_stream(1, b"a"))
        assert np.array_equal(a, b)
        # periodic with the noise length
        np.testing.assert_allclose(a[:100], a[100:200])


class TestClipBandlimit:
    def test_clip_identity(self, speech):
        assert clip(speech, 1.0) == speech

    def test_clip_level(self):
        x = np.sin(np.linspace(0, 20, 1000))
        x /= np.abs(x).max()
        assert np.abs(clip(AudioBuffer(x, 16000), 0.5).samples).max() == 0.5

    @pytest.mark.parametrize("bad", [0, -0.1, 1.5])
    def test_clip_bad_ratio(self, speech, bad):
        with pytest.raises(ValidationError):
            clip(speech, bad)

    def test_stopband(self):
        y = bandlimit(tone(6000, 1.0, 16000), 4000)
        mid = y.samples[2000:14000]
        assert db(fft_peak_amplitude(mid, 16000, 6000), 0.5) <= -60

    def test_passband(self):
        y = bandlimit(tone(1000, 1.0, 16000), 4000)
        assert abs(db(fft_peak_amplitude(y.samples[2000:14000], 16000, 1000), 0.5)) <= 0.5

    def test_nyquist_pass_through(self, speech):
        assert bandlimit(speech, 8000) == speech

    def test_energy_non_expansive(self, rng):
        for _ in range(10):
            x = AudioBuffer(rng.standard_normal(8000), 16000)
            y = bandlimit(x, float(rng.uniform(500, 7000)))
            assert 10 * math.log10(y.energy() / x.energy()) <= 0.1


class TestCodec:
    def test_sixteen_bit(self, rng):
        x = rng.uniform(-1, 1, 10000)
        y = codec_crush(AudioBuffer(x, 16000), 16)
        assert np.abs(y.samples - x).max() <= 2.0 ** -15

    def test_mulaw_bound(self, rng):
        x = np.concatenate([rng.uniform(-1, 1, 5000), [-1.0, 0.0, 1.0]])
        y = codec_crush(AudioBuffer(x, 16000), 8, mulaw=True).samples
        # oracle: quantizing the companded value moves it by at most half a step (one step at the clipped top code);
        # mapping that back through the expansion bounds the error sample by sample
        step = 2.0 / 2 ** 8
        c = np.abs(np.sign(x) * np.log(1 + 255 * np.abs(x)) / np.log(256))
        slack = np.where(c > 1 - step, step, step / 2)
        expand = lambda v: (256.0 ** np.minimum(v, 1.0) - 1) / 255
        bound = np.maximum(expand(c + slack) - expand(c), expand(c) - expand(np.maximum(c - slack, 0)))
        assert np.all(np.abs(y - x) <= bound + 1e-12)

    def test_mulaw_inverse(self, rng):
        x = rng.uniform(-1, 1, 100)
        np.testing.assert_allclose(mulaw_expand(mulaw_compress(x)), x, atol=1e-12)
        assert MU == 255

    @pytest.mark.parametrize("bits", [1, 17, 2.5])
    def test_bad_bits(self, speech, bits):
        with pytest.raises(ValidationError):
            codec_crush(speech, bits)


class TestPacketLoss:
    def test_identity_and_total_loss(self, speech):
        y, m = packet_loss(speech, 20, LossModel("bernoulli", 0.0), derive_stream(0, b"x"))
        assert y == speech and not m.any()
        y, m = packet_loss(speech, 20, LossModel("bernoulli", 1.0), derive_stream(0, b"x"))
        assert not y.samples.any() and m.all()

    def test_snapshot(self):
        s = AudioBuffer(np.ones(160000), 16000)
        y, m = packet_loss(s, 20, LossModel("bernoulli", 0.1), derive_stream(2024, b"packet-loss-snapshot"))
        assert m.size == 500
        # binomial oracle: 500 * 0.1 = 50, sd 6.7
        assert 30 <= m.sum() <= 70
        assert int(m.sum()) == PACKET_SNAPSHOT["lost"]
        assert np.flatnonzero(m)[:10].tolist() == PACKET_SNAPSHOT["first"]
        assert mask_digest(m) == PACKET_SNAPSHOT["sha256"]
        assert int((y.samples == 0).sum()) == 320 * PACKET_SNAPSHOT["lost"]

    def test_bernoulli_rate(self):
        s = AudioBuffer(np.ones(10_000 * 160), 8000)
        _, m = packet_loss(s, 20, LossModel("bernoulli", 0.2), derive_stream(5, b"rate"))
        sd = math.sqrt(0.2 * 0.8 / m.size)
        assert abs(m.mean() - 0.2) <= 3 * sd

    def test_gilbert_bursts(self):
        s = AudioBuffer(np.ones(20_000 * 160), 8000)
        _, m = packet_loss(s, 20, LossModel("gilbert", 0.05, 0.8), derive_stream(5, b"g"))
        # stationary loss rate p / (p + 1 - p_stay) = 0.2
        assert abs(m.mean() - 0.2) < 0.03
        after_loss = m[1:][m[:-1]]
        assert abs(after_loss.mean() - 0.8) < 0.03

    def test_never_increases_peak(self, speech):
        y, _ = packet_loss(speech, 10, LossModel("bernoulli", 0.3), derive_stream(1, b"q"))
        assert np.abs(y.samples).max() <= np.abs(speech.samples).max()

    def test_bad_model(self):
        with pytest.raises(ValidationError):
            LossModel("bernoulli", 1.5)
        with pytest.raises(ValidationError):
            LossModel("burst", 0.1)


class TestWind:
    def test_off(self, speech):
        assert wind_noise(speech, -math.inf, derive_stream(0, b"w")) == speech

    def test_centroid(self):
        w = synth_wind(16000 * 4, 16000, derive_stream(0, b"w"))
        power = np.abs(np.fft.rfft(w)) ** 2
        freqs = np.fft.rfftfreq(w.size, 1 / 16000)
        assert np.sum(freqs * power) / np.sum(power) < 500

    def test_deterministic(self, speech):
        a = wind_noise(speech, -10, derive_stream(0, b"w"))
        assert a == wind_noise(speech, -10, derive_stream(0, b"w"))
        assert a != speech

    def test_level(self, speech):
        y = wind_noise(speech, -10, derive_stream(0, b"w"))
        assert abs(snr_db(speech.samples, y.samples - speech.samples) - 10) < 1e-6


class TestRecipe:
    @pytest.fixture
    def bank(self, white):
        return AssetBank(noise={"white": white}, rir={"room": synthetic_rir(16000, np.random.default_rng(0))})

    def test_empty(self, speech):
        pair = apply_recipe(speech, DegradationRecipe([], "x"), None, 0)
        assert pair.input == speech and pair.target == speech

    def test_reverb_then_noise(self, speech, bank):
        r = DegradationRecipe([Step("reverb", {"asset": "room"}), Step("noise", {"asset": "white", "snr_db": 5})], "u1")
        pair = apply_recipe(speech, r, bank, 11)
        kinds = [m["kind"] for m in pair.metadata["realized"]]
        assert kinds == ["reverb", "noise"]
        assert abs(pair.metadata["realized"][1]["snr_db_realized"] - 5) <= 0.01
        n0 = pair.metadata["realized"][0]["n0"]
        assert not pair.target.samples[:n0].any()
        assert apply_recipe(speech, r, bank, 11).digest() == pair.digest()

    def test_order_respected(self, speech, bank):
        a = DegradationRecipe([Step("clip", {"threshold_ratio": 0.3}), Step("bandlimit", {"cutoff_hz": 2000})], "u")
        b = DegradationRecipe([Step("bandlimit", {"cutoff_hz": 2000}), Step("clip", {"threshold_ratio": 0.3})], "u")
        assert apply_recipe(speech, a, bank, 0).input != apply_recipe(speech, b, bank, 0).input

    def test_item_streams_differ(self, speech, bank):
        r = [Step("noise", {"asset": "white", "snr_db": 0})]
        a = apply_recipe(speech, DegradationRecipe(r, "a"), bank, 0)
        b = apply_recipe(speech, DegradationRecipe(r, "b"), bank, 0)
        assert a.input != b.input

    def test_serialization(self):
        r = DegradationRecipe([Step("codec", {"bits": 8, "mulaw": True}), Step("wind", {"gain_db": -12.5})], "id", 4)
        assert DegradationRecipe.from_json(r.to_json()).to_dict() == r.to_dict()

    def test_validation(self):
        with pytest.raises(ValidationError):
            Step("chorus", {})
        with pytest.raises(ValidationError):
            DegradationRecipe([Step("reverb", {"asset": "a"}), Step("reverb", {"asset": "b"})], "x")

    def test_missing_asset(self, speech, bank):
        with pytest.raises(ValidationError):
            apply_recipe(speech, DegradationRecipe([Step("noise", {"asset": "pink", "snr_db": 0})], "x"), bank, 0)

    def test_asset_resampled(self, speech):
        bank = AssetBank(noise={"w48": AudioBuffer(np.random.default_rng(1).standard_normal(48000), 48000)})
        pair = apply_recipe(speech, DegradationRecipe([Step("noise", {"asset": "w48", "snr_db": 10})], "x"), bank, 0)
        assert len(pair.input) == len(speech)

    def test_template(self, speech, bank):
        tmpl = {"steps": [{"kind": "noise", "params": {"asset": "*", "snr_db": {"uniform": [0, 20]}}},
                          {"kind": "bandlimit", "prob": 0.0, "params": {"cutoff_hz": 4000}},
                          {"kind": "codec", "params": {"bits": {"choice": [4, 8]}}}]}
        r = realize_recipe(tmpl, "item", 3, bank)
        assert [s.kind for s in r.steps] == ["noise", "codec"]
        assert 0 <= r.steps[0].params["snr_db"] <= 20 and r.steps[1].params["bits"] in (4, 8)
        assert realize_recipe(tmpl, "item", 3, bank).to_dict() == r.to_dict()
