"""Signal containers, WAV I/O, convolution, resampling and per-item random streams.

Everything downstream passes audio around as :class:`AudioBuffer`, a mono
float64 sample array tagged with its sampling rate.
"""

from __future__ import annotations

import hashlib
import math
import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps

from uselab.errors import AudioFormatError, ValidationError

SUPPORTED_RATES = (8000, 16000, 22050, 24000, 32000, 44100, 48000)

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE

# direct convolution below this kernel/signal size; exact for short kernels
_DIRECT_CONV_MAX = 64


class NonstandardRateWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono audio: ``samples`` (float64, nominally in [-1, 1]) at ``fs`` Hz."""

    samples: np.ndarray
    fs: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValidationError(f"AudioBuffer is mono; got array of shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("AudioBuffer samples must be finite")
        if not self.fs > 0:
            raise ValidationError(f"sampling rate must be positive, got {self.fs}")
        if float(self.fs).is_integer():
            object.__setattr__(self, "fs", int(self.fs))
        if self.fs not in SUPPORTED_RATES:
            warnings.warn(f"nonstandard sampling rate {self.fs} Hz", NonstandardRateWarning, stacklevel=3)
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.fs

    @property
    def standard_rate(self) -> bool:
        return self.fs in SUPPORTED_RATES

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(np.asarray(samples, dtype=np.float64), self.fs)

    def __eq__(self, other):
        if not isinstance(other, AudioBuffer):
            return NotImplemented
        return self.fs == other.fs and np.array_equal(self.samples, other.samples)

    __hash__ = None


# --------------------------------------------------------------------------
# WAV I/O


def read_wav(path) -> AudioBuffer:
    """Read a mono RIFF/WAVE file (PCM-16, PCM-24 or IEEE float32).

    Integer codes are divided by ``2**(bits-1)`` so the result lies in [-1, 1).
    Chunks other than ``fmt `` and ``data`` are skipped.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8: pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise AudioFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 40:
                    raise AudioFormatError(f"{path}: truncated extensible fmt chunk")
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None or payload is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, fs, _, block_align, bits = fmt
    if channels != 1:
        raise AudioFormatError(f"{path}: expected 1 channel, found {channels}")
    if fs <= 0:
        raise AudioFormatError(f"{path}: invalid sampling rate {fs}")

    n = len(payload) // (bits // 8) if bits in (16, 24, 32) else 0
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        x = np.frombuffer(payload[: 2 * n], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _WAVE_FORMAT_PCM and bits == 24:
        raw = np.frombuffer(payload[: 3 * n], dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        codes = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        codes = np.where(codes >= 1 << 23, codes - (1 << 24), codes)
        x = codes.astype(np.float64) / float(1 << 23)
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        x = np.frombuffer(payload[: 4 * n], dtype="<f4").astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")
    return AudioBuffer(x, fs)


_ENCODINGS = {"pcm16": (_WAVE_FORMAT_PCM, 16), "pcm24": (_WAVE_FORMAT_PCM, 24), "float32": (_WAVE_FORMAT_IEEE_FLOAT, 32)}


def write_wav(buf: AudioBuffer, path, encoding: str = "float32") -> int:
    """Write ``buf`` as a mono WAV file and return the number of clamped samples.

    Samples outside [-1, 1] are clamped before integer encoding; ``1.0`` maps
    to the largest positive code. float32 output is written unclamped.
    """
    if encoding not in _ENCODINGS:
        raise ValidationError(f"unknown encoding {encoding!r}; choose from {sorted(_ENCODINGS)}")
    if not float(buf.fs).is_integer():
        raise ValidationError("WAV headers need an integer sampling rate")
    tag, bits = _ENCODINGS[encoding]
    x = buf.samples
    clamped = 0
    if encoding == "float32":
        payload = x.astype("<f4").tobytes()
    else:
        over = np.abs(x) > 1.0
        clamped = int(np.count_nonzero(over))
        scale = float(1 << (bits - 1))
        codes = np.clip(np.round(np.clip(x, -1.0, 1.0) * scale), -scale, scale - 1).astype(np.int32)
        if bits == 16:
            payload = codes.astype("<i2").tobytes()
        else:
            u = (codes & 0xFFFFFF).astype("<u4")
            payload = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()

    fs = int(buf.fs)
    block = bits // 8
    header = struct.pack("<4sI4s", b"RIFF", 36 + len(payload) + (len(payload) & 1), b"WAVE")
    header += struct.pack("<4sIHHIIHH", b"fmt ", 16, tag, 1, fs, fs * block, block, bits)
    header += struct.pack("<4sI", b"data", len(payload))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        if len(payload) & 1:
            fh.write(b"\x00")
    return clamped


# --------------------------------------------------------------------------
# Convolution and resampling


def _convolve_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if min(a.size, b.size) <= _DIRECT_CONV_MAX:
        return np.convolve(a, b)
    return sps.oaconvolve(a, b)


def convolve(sig: AudioBuffer, kernel: AudioBuffer, mode: str = "full") -> AudioBuffer:
    """Linear convolution in float64.

    ``mode="full"`` returns N+M-1 samples; ``"trim_to_signal"`` keeps the
    first N, which is what reverberant rendering and target construction use.
    Short kernels are convolved directly (so a unit impulse is an exact
    identity), longer ones with FFT overlap-add.
    """
    if sig.fs != kernel.fs:
        raise ValidationError(f"sampling rate mismatch: {sig.fs} vs {kernel.fs}")
    if len(sig) == 0 or len(kernel) == 0:
        raise ValidationError("convolution inputs must be non-empty")
    if mode not in ("full", "trim_to_signal"):
        raise ValidationError(f"unknown convolution mode {mode!r}")
    y = _convolve_arrays(sig.samples, kernel.samples)
    if mode == "trim_to_signal":
        y = y[: len(sig)]
    return AudioBuffer(y, sig.fs)


RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_KAISER_BETA = 8.6
RESAMPLE_CUTOFF = 0.95


def resampling_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc prototype for a polyphase ``up/down`` resampler."""
    ratio = max(up, down)
    numtaps = RESAMPLE_TAPS_PER_PHASE * ratio + 1
    # unit DC gain; resample_poly applies the factor ``up`` itself
    return sps.firwin(numtaps, RESAMPLE_CUTOFF / ratio, window=("kaiser", RESAMPLE_KAISER_BETA))


def resample(buf: AudioBuffer, target_fs) -> AudioBuffer:
    """Polyphase windowed-sinc rate conversion.

    Output length is ``round(N * target_fs / fs)``.
    """
    if not target_fs > 0:
        raise ValidationError(f"target rate must be positive, got {target_fs}")
    if target_fs == buf.fs:
        return AudioBuffer(buf.samples.copy(), buf.fs)
    ratio = Fraction(target_fs).limit_denominator(10**6) / Fraction(buf.fs).limit_denominator(10**6)
    up, down = ratio.numerator, ratio.denominator
    n_out = int(round(len(buf) * target_fs / buf.fs))
    if len(buf) == 0:
        return AudioBuffer(np.zeros(0), target_fs)
    y = sps.resample_poly(buf.samples, up, down, window=resampling_filter(up, down))
    if y.size < n_out:
        y = np.pad(y, (0, n_out - y.size))
    return AudioBuffer(y[:n_out], target_fs)


# --------------------------------------------------------------------------
# Random streams


def _as_bytes(item_id) -> bytes:
    if isinstance(item_id, bytes):
        return item_id
    return str(item_id).encode("utf-8")


@dataclass
class RandomStream:
    """Counter-based random stream keyed by ``(root_seed, item_id)``.

    Backed by a Philox generator whose key is a SHA-256 digest of the seed
    material, so two streams never share state and results do not depend on
    the order in which items are processed.
    """

    root_seed: int
    item_id: bytes
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.item_id = _as_bytes(self.item_id)
        digest = hashlib.sha256(b"%d\x00" % self.root_seed)
        digest.update(self.item_id)
        key = np.frombuffer(digest.digest()[:16], dtype="<u8")
        self.rng = np.random.Generator(np.random.Philox(key=key))

    @property
    def counter(self) -> np.ndarray:
        return np.asarray(self.rng.bit_generator.state["state"]["counter"])

    def child(self, label) -> "RandomStream":
        return RandomStream(self.root_seed, self.item_id + b"/" + _as_bytes(label))

    def random(self, size=None):
        return self.rng.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.rng.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.rng.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.rng.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.rng.choice(a, size=size, replace=replace, p=p)


def derive_stream(root_seed: int, item_id) -> RandomStream:
    return RandomStream(int(root_seed), item_id)


def tone(freq: float, duration: float, fs: int, amplitude: float = 0.5, phase: float = 0.0) -> AudioBuffer:
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    return AudioBuffer(amplitude * np.sin(2 * math.pi * freq * t + phase), fs)
