"""Quality-score based training data curation.

Scores come from a pluggable scorer. The built-in one,
:func:`proxy_quality_score`, is a blind SNR-style estimate: the spread
between loud and quiet frame energies, mapped onto [0, 1]. It is not a
neural quality model and its scale is not comparable to one, which is why
published thresholds are carried only as report annotations.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from uselab.audio import AudioBuffer, read_wav
from uselab.errors import ManifestError, ValidationError

SCORE_FRAME_MS = 32.0
SCORE_SPREAD_DB = 60.0
US_PER_HOUR = 3_600_000_000
_ENERGY_FLOOR = 1e-10

# reference thresholds and the training hours they left in the published study
REFERENCE_THRESHOLD_HOURS = (
    {"tau": 0.50, "hours": 2518, "note": "no filtering (original size)"},
    {"tau": 0.65, "hours": 2506, "note": "adopted threshold"},
    {"tau": 0.72, "hours": 629, "note": "strictest threshold"},
)
REFERENCE_ANNOTATION = {
    "scorer": "VQScore (neural); not reproduced here",
    "thresholds_to_hours": list(REFERENCE_THRESHOLD_HOURS),
    "reproduced": False,
}


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    source: str
    duration_s: float
    fs: int

    @property
    def hours(self) -> float:
        return self.duration_s / 3600.0

    @property
    def microseconds(self) -> int:
        return int(round(self.duration_s * 1e6))


_FIELDS = ("id", "path", "source", "duration_s", "fs")


def parse_manifest_lines(lines, origin="<manifest>") -> list:
    entries = []
    seen = set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{origin}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise ManifestError(f"{origin}:{lineno}: expected a JSON object")
        missing = [f for f in _FIELDS if f not in rec]
        if missing:
            raise ManifestError(f"{origin}:{lineno}: missing field(s) {', '.join(missing)}")
        try:
            entry = ManifestEntry(str(rec["id"]), str(rec["path"]), str(rec["source"]),
                                  float(rec["duration_s"]), int(rec["fs"]))
        except (TypeError, ValueError):
            raise ManifestError(f"{origin}:{lineno}: malformed field value") from None
        if not entry.duration_s > 0:
            raise ManifestError(f"{origin}:{lineno}: duration_s must be positive (id {entry.id!r})")
        if entry.fs <= 0:
            raise ManifestError(f"{origin}:{lineno}: fs must be positive (id {entry.id!r})")
        if entry.id in seen:
            raise ManifestError(f"{origin}:{lineno}: duplicate id {entry.id!r}")
        seen.add(entry.id)
        entries.append(entry)
    return entries


def ingest_manifest(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return parse_manifest_lines(fh, str(path))


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")


def frame_log_energies(buf: AudioBuffer, frame_ms: float = SCORE_FRAME_MS) -> np.ndarray:
    """Frame energies in dB (mean square, floored) over 50%-overlapping frames."""
    n = max(int(round(frame_ms / 1000.0 * buf.fs)), 2)
    hop = n // 2
    x = buf.samples
    if x.size < n:
        x = np.pad(x, (0, n - x.size))
    n_frames = 1 + (x.size - n) // hop
    idx = np.arange(n)[None, :] + hop * np.arange(n_frames)[:, None]
    ms = np.mean(x[idx] ** 2, axis=1)
    return 10.0 * np.log10(np.maximum(ms, _ENERGY_FLOOR))


def proxy_quality_score(buf: AudioBuffer) -> float:
    if len(buf) == 0:
        raise ValidationError("cannot score an empty buffer")
    if not np.any(buf.samples):
        return 0.0
    e = frame_log_energies(buf)
    p10, p90 = np.percentile(e, [10, 90])
    return float(min(max((p90 - p10) / SCORE_SPREAD_DB, 0.0), 1.0))


def _score_path(args):
    path, scorer = args
    return scorer(read_wav(path))


def score_entries(entries: Sequence[ManifestEntry], scorer: Callable = proxy_quality_score,
                  workers: int = 1, root: Path | None = None) -> list:
    paths = [str((root / e.path) if root is not None and not Path(e.path).is_absolute() else e.path) for e in entries]
    jobs = [(p, scorer) for p in paths]
    if workers <= 1:
        return [_score_path(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_score_path, jobs))


def load_scores(path) -> dict:
    """Sidecar scores: JSONL lines ``{"id": ..., "score": ...}``."""
    scores = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, val = str(rec["id"]), float(rec["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise ManifestError(f"{path}:{lineno}: expected {{\"id\": ..., \"score\": ...}}") from None
            if sid in scores:
                raise ManifestError(f"{path}:{lineno}: duplicate id {sid!r}")
            scores[sid] = val
    return scores


def write_scores(ids: Sequence[str], scores: Sequence[float], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, s in zip(ids, scores):
            fh.write(json.dumps({"id": i, "score": float(s)}, sort_keys=True) + "\n")


def align_scores(entries: Sequence[ManifestEntry], scores) -> np.ndarray:
    if isinstance(scores, Mapping):
        missing = [e.id for e in entries if e.id not in scores]
        if missing:
            raise ValidationError(f"no score for {len(missing)} entries (first: {missing[0]!r})")
        vals = [scores[e.id] for e in entries]
    else:
        vals = list(scores)
        if len(vals) != len(entries):
            raise ValidationError(f"{len(vals)} scores for {len(entries)} entries")
    arr = np.asarray(vals, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("scores must be finite")
    return arr


@dataclass
class Histogram:
    edges: list
    counts: list
    median: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def quality_histogram(scores, n_bins: int = 20) -> Histogram:
    """Equal-width histogram over [0, 1] plus the median (midpoint of the two middle values for even counts)."""
    if n_bins < 1:
        raise ValidationError(f"n_bins must be >= 1, got {n_bins}")
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("cannot build a histogram of zero scores")
    counts, edges = np.histogram(np.clip(arr, 0.0, 1.0), bins=n_bins, range=(0.0, 1.0))
    return Histogram([float(e) for e in edges], [int(c) for c in counts], float(np.median(arr)), int(arr.size))


@dataclass
class QualityReport:
    tau: float
    kept: list
    dropped: list
    kept_hours: float
    dropped_hours: float
    total_hours: float
    histograms: dict
    kept_us: int = 0
    dropped_us: int = 0
    annotations: dict = field(default_factory=lambda: json.loads(json.dumps(REFERENCE_ANNOTATION)))

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "kept": self.kept,
            "dropped": self.dropped,
            "kept_hours": self.kept_hours,
            "dropped_hours": self.dropped_hours,
            "total_hours": self.total_hours,
            "kept_us": self.kept_us,
            "dropped_us": self.dropped_us,
            "total_us": self.kept_us + self.dropped_us,
            "histograms": {k: v.to_dict() for k, v in self.histograms.items()},
            "annotations": self.annotations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "bin_low", "bin_high", "count", "median"])
        for src in sorted(self.histograms):
            h = self.histograms[src]
            for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
                w.writerow([src, f"{lo:.6g}", f"{hi:.6g}", c, f"{h.median:.6g}"])
        return buf.getvalue()


def filter_by_threshold(entries: Sequence[ManifestEntry], scores, tau: float, n_bins: int = 20) -> QualityReport:
    """Keep entries whose score is at least ``tau`` and account hours per side."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {tau}")
    arr = align_scores(entries, scores)
    keep = arr >= tau
    kept = [e.id for e, k in zip(entries, keep) if k]
    dropped = [e.id for e, k in zip(entries, keep) if not k]
    # integer microseconds make kept + dropped == total exact; hours are derived from them
    kept_us = sum(e.microseconds for e, k in zip(entries, keep) if k)
    dropped_us = sum(e.microseconds for e, k in zip(entries, keep) if not k)
    kept_hours = kept_us / US_PER_HOUR
    dropped_hours = dropped_us / US_PER_HOUR
    total_hours = kept_hours + dropped_hours
    histograms = {}
    if len(entries):
        histograms["all"] = quality_histogram(arr, n_bins)
        for src in sorted({e.source for e in entries}):
            sel = np.array([e.source == src for e in entries])
            histograms[src] = quality_histogram(arr[sel], n_bins)
    return QualityReport(float(tau), kept, dropped, kept_hours, dropped_hours, total_hours, histograms,
                         kept_us=kept_us, dropped_us=dropped_us)


def speech_like_signal(duration: float, fs: int, seed: int = 0) -> AudioBuffer:
    """Syllable-rate amplitude-modulated harmonic tone with short pauses.

    A stand-in for speech when testing scorers: strong frame-energy dynamics
    and a few harmonics below 4 kHz.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    f0 = 140.0 * (1 + 0.05 * np.sin(2 * np.pi * 0.7 * t))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    voice = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 12) if k * 140 < fs / 2.5)
    syllables = np.clip(np.sin(2 * np.pi * 4.0 * t), 0.0, None) ** 2
    pauses = (np.sin(2 * np.pi * 0.5 * t) > -0.5).astype(float)
    x = voice * syllables * pauses
    return AudioBuffer(0.3 * x / np.max(np.abs(x)), fs)
