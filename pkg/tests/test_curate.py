import json
import math

import numpy as np
import pytest

from conftest import write_manifest
from uselab.audio import AudioBuffer, write_wav
from uselab.curate import (REFERENCE_ANNOTATION, ManifestEntry, filter_by_threshold, ingest_manifest,
                           parse_manifest_lines, proxy_quality_score, quality_histogram, score_entries,
                           speech_like_signal)
from uselab.degrade import add_noise
from uselab.errors import ManifestError, ValidationError


def _row(i, dur=1.0, source="a"):
    return {"id": f"e{i}", "path": f"e{i}.wav", "source": source, "duration_s": dur, "fs": 16000}


def _entries(n, rng=None):
    rng = rng or np.random.default_rng(0)
    return [ManifestEntry(f"e{i}", f"e{i}.wav", "ab"[i % 2], float(rng.uniform(0.5, 20)), 16000) for i in range(n)]


class TestManifest:
    def test_three_lines(self, tmp_path):
        write_manifest(tmp_path / "m.jsonl", [_row(i) for i in range(3)])
        assert [e.id for e in ingest_manifest(tmp_path / "m.jsonl")] == ["e0", "e1", "e2"]

    def test_duplicate_named(self):
        lines = [json.dumps(_row(1)), json.dumps(_row(1))]
        with pytest.raises(ManifestError, match="e1"):
            parse_manifest_lines(lines)

    def test_zero_duration(self):
        with pytest.raises(ManifestError, match=":1:"):
            parse_manifest_lines([json.dumps(_row(1, dur=0))])

    def test_missing_field(self):
        rec = _row(1)
        del rec["source"]
        with pytest.raises(ManifestError, match="source"):
            parse_manifest_lines([json.dumps(rec)])

    def test_bad_json(self):
        with pytest.raises(ManifestError):
            parse_manifest_lines(["{nope"])


class TestScorer:
    def test_silence(self):
        assert proxy_quality_score(AudioBuffer(np.zeros(16000), 16000)) == 0.0

    def test_white_noise_low(self, rng):
        assert proxy_quality_score(AudioBuffer(0.1 * rng.standard_normal(32000), 16000)) < 0.2

    def test_noisy_lower(self, rng):
        s = speech_like_signal(2.0, 16000, seed=1)
        noisy = add_noise(s, AudioBuffer(rng.standard_normal(32000), 16000), 0.0)
        assert proxy_quality_score(noisy) < proxy_quality_score(s)

    def test_strictly_decreasing_over_snr(self):
        s = speech_like_signal(2.0, 16000, seed=0)
        noise = AudioBuffer(np.random.default_rng(5).standard_normal(32000), 16000)
        scores = [proxy_quality_score(add_noise(s, noise, snr)) for snr in (30, 20, 10, 0, -10)]
        assert all(b < a for a, b in zip(scores, scores[1:]))

    def test_range(self, rng):
        for _ in range(20):
            x = rng.standard_normal(8000) * rng.uniform(0, 1, 8000) ** 4
            assert 0.0 <= proxy_quality_score(AudioBuffer(x, 16000)) <= 1.0

    def test_parallel_equals_serial(self, tmp_path):
        entries = []
        for i in range(6):
            write_wav(speech_like_signal(0.5, 16000, seed=i), tmp_path / f"e{i}.wav")
            entries.append(ManifestEntry(f"e{i}", f"e{i}.wav", "a", 0.5, 16000))
        assert score_entries(entries, workers=1, root=tmp_path) == score_entries(entries, workers=3, root=tmp_path)


class TestFilter:
    def test_threshold_semantics(self):
        entries = _entries(11)
        scores = [0.1 * k for k in range(11)]
        rep = filter_by_threshold(entries[1:], scores[1:], 0.65)
        assert rep.kept == ["e7", "e8", "e9", "e10"]

    def test_inclusive(self):
        rep = filter_by_threshold(_entries(2), [0.65, 0.6499999], 0.65)
        assert rep.kept == ["e0"]

    def test_tau_zero(self, rng):
        e = _entries(20)
        rep = filter_by_threshold(e, rng.uniform(0, 1, 20), 0.0)
        assert rep.dropped_hours == 0 and len(rep.kept) == 20

    def test_hours_accounting(self, rng):
        e = _entries(200, rng)
        rep = filter_by_threshold(e, rng.uniform(0, 1, 200), 0.5)
        assert rep.kept_hours + rep.dropped_hours == rep.total_hours
        assert rep.kept_us + rep.dropped_us == sum(round(x.duration_s * 1e6) for x in e)
        # each duration is rounded to the microsecond
        assert abs(rep.total_hours - math.fsum(x.duration_s for x in e) / 3600) <= len(e) * 0.5e-6 / 3600 + 1e-12

    def test_monotone_in_tau(self, rng):
        e = _entries(100, rng)
        s = rng.uniform(0, 1, 100)
        prev_kept, prev_hours = None, math.inf
        for tau in np.linspace(0, 1, 21):
            rep = filter_by_threshold(e, s, tau)
            if prev_kept is not None:
                assert set(rep.kept) <= prev_kept
            assert rep.kept_hours <= prev_hours
            prev_kept, prev_hours = set(rep.kept), rep.kept_hours

    def test_reference_annotation_verbatim(self):
        rep = filter_by_threshold(_entries(2), [0.1, 0.9], 0.65)
        pairs = [(r["tau"], r["hours"]) for r in rep.annotations["thresholds_to_hours"]]
        assert pairs == [(0.50, 2518), (0.65, 2506), (0.72, 629)]
        assert rep.annotations["reproduced"] is False
        assert REFERENCE_ANNOTATION["thresholds_to_hours"][1]["hours"] == 2506

    def test_missing_score(self):
        with pytest.raises(ValidationError):
            filter_by_threshold(_entries(2), {"e0": 0.5}, 0.5)

    def test_bad_tau(self):
        with pytest.raises(ValidationError):
            filter_by_threshold(_entries(2), [0.1, 0.2], 1.5)

    def test_report_deterministic(self, rng):
        e = _entries(30, rng)
        s = rng.uniform(0, 1, 30)
        assert filter_by_threshold(e, s, 0.4).to_json() == filter_by_threshold(e, s, 0.4).to_json()

    def test_per_source_histograms(self, rng):
        rep = filter_by_threshold(_entries(10), rng.uniform(0, 1, 10), 0.5)
        assert set(rep.histograms) == {"all", "a", "b"}
        assert rep.histograms["a"].n + rep.histograms["b"].n == 10
        assert rep.histogram_csv().splitlines()[0] == "source,bin_low,bin_high,count,median"


class TestHistogram:
    def test_hand_case(self):
        h = quality_histogram([0.2, 0.4, 0.6, 0.8], 4)
        assert h.counts == [1, 1, 1, 1] and h.median == 0.5

    def test_single(self):
        assert quality_histogram([0.7], 5).median == 0.7

    def test_uniform_binomial(self):
        s = np.random.default_rng(3).uniform(0, 1, 10_000)
        h = quality_histogram(s, 10)
        sd = math.sqrt(10_000 * 0.1 * 0.9)
        assert all(abs(c - 1000) <= 3 * sd for c in h.counts)

    def test_includes_one(self):
        assert quality_histogram([1.0, 0.0], 4).counts == [1, 0, 0, 1]
