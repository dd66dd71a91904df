"""Room impulse response decomposition and dereverberation targets.

A RIR ``r`` is split at its direct-path peak ``n0`` into a peak-normalized
early part (the first ``early_window_ms`` after the peak, peak included) and
a late remainder. Three training targets can be built from the clean signal:
the clean signal itself, the clean signal delayed by ``n0``, and the clean
signal convolved with the early part and delayed by ``n0``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from uselab.audio import AudioBuffer, _convolve_arrays
from uselab.errors import ValidationError

DEFAULT_EARLY_WINDOW_MS = 50.0
MAX_TARGET_WINDOW_MS = 100.0


class TargetKind(str, enum.Enum):
    ANECHOIC = "anechoic"
    SHIFTED_ANECHOIC = "shifted_anechoic"
    EARLY_REFLECTED = "early_reflected"


@dataclass(frozen=True)
class Target:
    kind: TargetKind
    window_ms: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", TargetKind(self.kind))
        if self.kind is TargetKind.EARLY_REFLECTED and not 0 <= self.window_ms <= MAX_TARGET_WINDOW_MS:
            raise ValidationError(f"early-reflection window must lie in [0, {MAX_TARGET_WINDOW_MS}] ms, got {self.window_ms}")

    @classmethod
    def parse(cls, spec) -> "Target":
        """Accept ``Target``, ``"shifted_anechoic"``, ``"early_reflected:50"`` or a dict."""
        if isinstance(spec, Target):
            return spec
        if isinstance(spec, TargetKind):
            return cls(spec, DEFAULT_EARLY_WINDOW_MS if spec is TargetKind.EARLY_REFLECTED else 0.0)
        if isinstance(spec, dict):
            return cls(spec["kind"], float(spec.get("window_ms", 0.0)))
        name, _, window = str(spec).partition(":")
        return cls(name, float(window) if window else (DEFAULT_EARLY_WINDOW_MS if name == "early_reflected" else 0.0))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "window_ms": self.window_ms}


def _window_samples(window_ms: float, fs) -> int:
    # offsets strictly below the window length count as early; the peak always does
    return max(int(round(window_ms / 1000.0 * fs)), 1)


def estimate_direct_path(rir: AudioBuffer) -> int:
    """Index of the largest-magnitude tap (smallest index on ties)."""
    if len(rir) == 0:
        raise ValidationError("empty RIR")
    mag = np.abs(rir.samples)
    if not np.any(mag > 0):
        raise ValidationError("all-zero RIR has no direct path")
    return int(np.argmax(mag))


@dataclass(frozen=True, eq=False)
class RirDecomposition:
    n0: int
    gain: float
    early: np.ndarray
    late: np.ndarray
    pre_peak: np.ndarray
    early_window_ms: float
    fs: int
    rir_length: int

    @property
    def tail(self) -> np.ndarray:
        """Normalized RIR from the peak onward, ``[early || late]`` without padding."""
        t = np.concatenate([self.early, self.late])
        return t[: self.rir_length - self.n0]

    def early_part(self, window_ms: float) -> np.ndarray:
        """Normalized early segment for an arbitrary window (zero-padded past the RIR end)."""
        n = _window_samples(window_ms, self.fs)
        tail = self.tail
        if n <= tail.size:
            return tail[:n].copy()
        return np.concatenate([tail, np.zeros(n - tail.size)])

    def reconstruct(self) -> np.ndarray:
        out = np.empty(self.rir_length)
        out[: self.n0] = self.pre_peak
        out[self.n0:] = self.gain * self.tail
        return out

    def to_record(self) -> dict:
        return {
            "n0": self.n0,
            "gain": self.gain,
            "early_window_ms": self.early_window_ms,
            "fs": self.fs,
            "lengths": {"rir": self.rir_length, "pre_peak": int(self.pre_peak.size),
                        "early": int(self.early.size), "late": int(self.late.size)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def decompose_rir(rir: AudioBuffer, early_window_ms: float = DEFAULT_EARLY_WINDOW_MS) -> RirDecomposition:
    """Split a RIR into pre-peak residue, normalized early part and late part.

    Segments are divided by the signed peak value so that the direct tap is
    exactly +1. A 0 ms window keeps only the peak tap.
    """
    if early_window_ms < 0:
        raise ValidationError(f"early window must be non-negative, got {early_window_ms}")
    n0 = estimate_direct_path(rir)
    r = rir.samples
    gain = float(r[n0])
    tail = r[n0:] / gain
    n_early = _window_samples(early_window_ms, rir.fs)
    early = tail[:n_early]
    if early.size < n_early:
        early = np.concatenate([early, np.zeros(n_early - early.size)])
    return RirDecomposition(
        n0=n0,
        gain=gain,
        early=early,
        late=tail[n_early:].copy(),
        pre_peak=r[:n0].copy(),
        early_window_ms=float(early_window_ms),
        fs=rir.fs,
        rir_length=len(rir),
    )


def render_reverberant(s: AudioBuffer, rir: AudioBuffer) -> AudioBuffer:
    """Reverberant observation, trimmed to the clean length."""
    if s.fs != rir.fs:
        raise ValidationError(f"sampling rate mismatch: {s.fs} vs {rir.fs}")
    if len(s) == 0 or len(rir) == 0:
        raise ValidationError("empty input")
    return AudioBuffer(_convolve_arrays(s.samples, rir.samples)[: len(s)], s.fs)


def _delay(x: np.ndarray, n0: int, length: int) -> np.ndarray:
    out = np.zeros(length)
    if n0 < length:
        out[n0:] = x[: length - n0]
    return out


def make_target(s: AudioBuffer, dec: RirDecomposition, kind=TargetKind.SHIFTED_ANECHOIC) -> AudioBuffer:
    """Build a dereverberation target of the same length as ``s``."""
    if s.fs != dec.fs:
        raise ValidationError(f"sampling rate mismatch: {s.fs} vs {dec.fs}")
    target = Target.parse(kind)
    n = len(s)
    if target.kind is TargetKind.ANECHOIC:
        return AudioBuffer(s.samples.copy(), s.fs)
    if target.kind is TargetKind.SHIFTED_ANECHOIC:
        return AudioBuffer(_delay(s.samples, dec.n0, n), s.fs)
    early = dec.early_part(target.window_ms)
    return AudioBuffer(_delay(_convolve_arrays(s.samples, early), dec.n0, n), s.fs)


def synthetic_rir(fs: int, rng: np.random.Generator, *, n0: int | None = None, rt60: float = 0.4,
                  length_s: float = 0.5, direct_gain: float = 1.0, pre_peak: bool = False) -> AudioBuffer:
    """Exponentially decaying noise tail behind a dominant direct-path tap.

    Used for tests and demos; not a room simulator.
    """
    n = int(round(length_s * fs))
    if n0 is None:
        n0 = int(rng.integers(int(0.005 * fs), int(0.03 * fs)))
    t = np.arange(n - n0) / fs
    decay = np.exp(-6.9078 * t / rt60)
    tail = 0.3 * rng.standard_normal(n - n0) * decay
    tail[0] = 0.0
    r = np.zeros(n)
    r[n0:] = tail
    # keep reflections clearly below the direct tap
    peak = np.max(np.abs(tail)) if tail.size else 0.0
    if peak >= 0.9 * abs(direct_gain):
        r[n0:] *= 0.9 * abs(direct_gain) / peak
    r[n0] = direct_gain
    if pre_peak and n0 > 0:
        r[:n0] = 0.01 * abs(direct_gain) * rng.standard_normal(n0)
    return AudioBuffer(r, fs)
