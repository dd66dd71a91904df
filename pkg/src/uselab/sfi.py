"""Sampling-frequency-independent STFT.

The analysis window always lasts 40 ms (320 samples at 8 kHz, scaled with
the rate), so the bin spacing is 25 Hz and the frame count depends only on
duration. Square-root Hann windows on both sides with a 50% hop give
perfect reconstruction.

Grids can be exchanged with other tools through a small binary format::

    offset  type     field
    0       4s       magic b"SFIG"
    4       <u4      format version (1)
    8       <f8      fs
    16      <u4      win_len
    20      <u4      hop_len
    24      <u4      frames
    28      <u4      bins
    32      <u8      original_length
    40      ...      frames*bins (real, imag) float32 pairs, row-major
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from uselab.audio import AudioBuffer
from uselab.errors import AudioFormatError, ValidationError

BASE_WINDOW = 320
BASE_RATE = 8000
WINDOW_SECONDS = BASE_WINDOW / BASE_RATE

_GRID_MAGIC = b"SFIG"
_GRID_HEADER = struct.Struct("<4sIdIIIIQ")


@dataclass(frozen=True)
class SfiParams:
    fs: int
    win_len: int
    hop_len: int
    n_bins: int

    @property
    def bin_spacing(self) -> float:
        return self.fs / self.win_len


def sfi_params(fs) -> SfiParams:
    """Window/hop/bin counts for ``fs``; the window must be an even integer length."""
    win = BASE_WINDOW * fs / BASE_RATE
    if fs <= 0 or not float(win).is_integer() or int(win) % 2:
        raise ValidationError(f"unsupported sampling rate {fs} Hz: window of {win} samples is not an even integer")
    win = int(win)
    return SfiParams(fs=int(fs) if float(fs).is_integer() else fs, win_len=win, hop_len=win // 2, n_bins=win // 2 + 1)


def sqrt_hann(n: int) -> np.ndarray:
    # periodic Hann, so the squared window overlap-adds to exactly one at 50% hop
    return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n))


@dataclass(frozen=True, eq=False)
class SpectrogramFrameGrid:
    """Complex STFT values, shape ``(frames, bins)``."""

    values: np.ndarray
    params: SfiParams
    original_length: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 2 or v.shape[1] != self.params.n_bins:
            raise ValidationError(f"grid shape {v.shape} inconsistent with {self.params.n_bins} bins")
        if not np.all(np.isfinite(v)):
            raise ValidationError("grid values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def with_values(self, values) -> "SpectrogramFrameGrid":
        return SpectrogramFrameGrid(values, self.params, self.original_length)


def n_frames_for(length: int, params: SfiParams) -> int:
    return math.ceil(length / params.hop_len) + 1


def _frame_signal(x: np.ndarray, params: SfiParams) -> np.ndarray:
    win, hop = params.win_len, params.hop_len
    n_frames = n_frames_for(x.size, params)
    padded = np.pad(x, (win // 2, win // 2), mode="reflect")
    need = (n_frames - 1) * hop + win
    if padded.size < need:
        padded = np.pad(padded, (0, need - padded.size))
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def stft(buf: AudioBuffer) -> SpectrogramFrameGrid:
    params = sfi_params(buf.fs)
    if len(buf) < params.win_len:
        raise ValidationError(f"input of {len(buf)} samples is shorter than the {params.win_len}-sample window")
    frames = _frame_signal(buf.samples, params) * sqrt_hann(params.win_len)
    return SpectrogramFrameGrid(np.fft.rfft(frames, axis=1), params, len(buf))


def istft(grid: SpectrogramFrameGrid) -> AudioBuffer:
    p = grid.params
    expected = n_frames_for(grid.original_length, p)
    if grid.n_frames != expected:
        raise ValidationError(f"grid has {grid.n_frames} frames, expected {expected} for {grid.original_length} samples")
    frames = np.fft.irfft(grid.values, n=p.win_len, axis=1) * sqrt_hann(p.win_len)
    out = np.zeros((grid.n_frames - 1) * p.hop_len + p.win_len)
    for i, frame in enumerate(frames):
        out[i * p.hop_len: i * p.hop_len + p.win_len] += frame
    start = p.win_len // 2
    return AudioBuffer(out[start: start + grid.original_length], p.fs)


def frame_energy(grid: SpectrogramFrameGrid) -> np.ndarray:
    """Per-frame time-domain energy recovered from one-sided spectra (Parseval)."""
    power = np.abs(grid.values) ** 2
    weights = np.full(grid.params.n_bins, 2.0)
    weights[0] = weights[-1] = 1.0
    return power @ weights / grid.params.win_len


@dataclass(frozen=True)
class BandPartition:
    bands: tuple
    band_width_hz: float
    fs: int
    n_bins: int

    def edges_hz(self) -> list:
        """Upper edge of each band in Hz (the last one is Nyquist)."""
        nyq = self.fs / 2
        return [min((i + 1) * self.band_width_hz, nyq) for i in range(len(self.bands))]

    def to_record(self) -> dict:
        lows = [0.0] + self.edges_hz()[:-1]
        return {
            "fs": self.fs,
            "band_width_hz": self.band_width_hz,
            "n_bins": self.n_bins,
            "bands": [{"low_hz": lo, "high_hz": hi, "low_bin": a, "high_bin": b}
                      for (a, b), lo, hi in zip(self.bands, lows, self.edges_hz())],
        }


def band_partition(fs, band_width_hz: float = 4000.0) -> BandPartition:
    """Split ``[0, n_bins)`` into bands of ``band_width_hz``; the last band reaches Nyquist.

    Band edges are placed at the nearest bin (``floor(x + 0.5)``), so a bin
    sitting exactly halfway belongs to the lower band.
    """
    if not band_width_hz > 0:
        raise ValidationError(f"band width must be positive, got {band_width_hz}")
    p = sfi_params(fs)
    nyq = fs / 2
    n_full = int(math.floor(nyq / band_width_hz))
    n_bands = n_full + (1 if nyq - n_full * band_width_hz > 1e-9 * nyq else 0)
    n_bands = max(n_bands, 1)
    cuts = [0]
    for k in range(1, n_bands):
        cuts.append(int(math.floor(k * band_width_hz / p.bin_spacing + 0.5)))
    cuts.append(p.n_bins)
    bands = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi > lo:
            bands.append((lo, hi))
        elif bands:
            bands[-1] = (bands[-1][0], hi)
    return BandPartition(tuple(bands), float(band_width_hz), p.fs, p.n_bins)


def save_grid(grid: SpectrogramFrameGrid, path) -> None:
    p = grid.params
    header = _GRID_HEADER.pack(_GRID_MAGIC, 1, float(p.fs), p.win_len, p.hop_len, grid.n_frames, p.n_bins,
                               grid.original_length)
    pairs = np.empty(grid.values.shape + (2,), dtype="<f4")
    pairs[..., 0] = grid.values.real
    pairs[..., 1] = grid.values.imag
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pairs.tobytes())


def load_grid(path) -> SpectrogramFrameGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _GRID_HEADER.size:
        raise AudioFormatError(f"{path}: truncated grid header")
    magic, version, fs, win, hop, frames, bins, orig = _GRID_HEADER.unpack_from(raw)
    if magic != _GRID_MAGIC or version != 1:
        raise AudioFormatError(f"{path}: not an SFI grid file")
    params = sfi_params(int(fs) if float(fs).is_integer() else fs)
    if (params.win_len, params.hop_len, params.n_bins) != (win, hop, bins):
        raise AudioFormatError(f"{path}: header parameters inconsistent with fs={fs}")
    body = np.frombuffer(raw, dtype="<f4", offset=_GRID_HEADER.size)
    if body.size != frames * bins * 2:
        raise AudioFormatError(f"{path}: expected {frames * bins} cells, found {body.size // 2}")
    pairs = body.reshape(frames, bins, 2).astype(np.float64)
    return SpectrogramFrameGrid(pairs[..., 0] + 1j * pairs[..., 1], params, orig)
