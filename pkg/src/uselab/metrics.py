"""Reference-based speech metrics: SDR, log-spectral distance, mel cepstral distortion.

LSD and MCD are computed on the 40 ms SFI-STFT grid, so both inputs must be
at a rate the SFI transform supports and at least one window long.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from uselab.audio import AudioBuffer, read_wav
from uselab.errors import ValidationError
from uselab.sfi import stft

SDR_CAP_DB = 100.0
LSD_EPS = 1e-10
MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)
MEL_FLOOR = 1e-10  # clamps mel energies of (near-)silent frames before the log


def _check_pair(ref: AudioBuffer, est: AudioBuffer) -> None:
    if ref.fs != est.fs:
        raise ValidationError(f"sampling rate mismatch: {ref.fs} vs {est.fs}")
    if len(ref) != len(est):
        raise ValidationError(f"length mismatch: {len(ref)} vs {len(est)}")


def sdr(ref: AudioBuffer, est: AudioBuffer) -> float:
    """``10 log10(|ref|^2 / |ref - est|^2)`` in dB, capped at +100 dB."""
    _check_pair(ref, est)
    e_ref = ref.energy()
    if e_ref == 0:
        raise ValidationError("reference has zero energy")
    resid = ref.samples - est.samples
    e_res = float(np.dot(resid, resid))
    if e_res < 1e-20 * e_ref:
        return SDR_CAP_DB
    return min(10.0 * math.log10(e_ref / e_res), SDR_CAP_DB)


def lsd(ref: AudioBuffer, est: AudioBuffer) -> float:
    """Frame-averaged RMS of the power-spectrum log ratio in dB."""
    _check_pair(ref, est)
    pr = np.abs(stft(ref).values) ** 2
    pe = np.abs(stft(est).values) ** 2
    d = 10.0 * np.log10((pr + LSD_EPS) / (pe + LSD_EPS))
    return float(np.mean(np.sqrt(np.mean(d ** 2, axis=1))))


@dataclass(frozen=True)
class MelParams:
    n_mels: int = 23
    n_cepstra: int = 13
    fmin: float = 0.0
    fmax: float | None = None

    def resolved_fmax(self, fs) -> float:
        return fs / 2 if self.fmax is None else self.fmax

    def validate(self, fs) -> None:
        fmax = self.resolved_fmax(fs)
        if not 0 <= self.fmin < fmax <= fs / 2:
            raise ValidationError(f"need 0 <= fmin < fmax <= Nyquist, got fmin={self.fmin}, fmax={fmax}")
        if not 1 <= self.n_cepstra < self.n_mels:
            raise ValidationError(f"need 1 <= n_cepstra < n_mels, got {self.n_cepstra} and {self.n_mels}")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(fs, n_fft: int, mel: MelParams) -> np.ndarray:
    """Triangular HTK-style filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    mel.validate(fs)
    freqs = np.arange(n_fft // 2 + 1) * fs / n_fft
    pts = mel_to_hz(np.linspace(hz_to_mel(mel.fmin), hz_to_mel(mel.resolved_fmax(fs)), mel.n_mels + 2))
    lower, center, upper = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lower) / (center - lower)
    down = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


def mel_cepstra(buf: AudioBuffer, mel: MelParams) -> np.ndarray:
    grid = stft(buf)
    fb = mel_filterbank(buf.fs, grid.params.win_len, mel)
    energies = (np.abs(grid.values) ** 2) @ fb.T
    c = dct(np.log(np.maximum(energies, MEL_FLOOR)), type=2, norm="ortho", axis=1)
    return c[:, 1: mel.n_cepstra + 1]


def mcd(ref: AudioBuffer, est: AudioBuffer, mel: MelParams | None = None) -> float:
    """Mel cepstral distortion over c1..c_n (c0 excluded), frame-aligned, no time warping."""
    _check_pair(ref, est)
    mel = mel or MelParams()
    diff = mel_cepstra(ref, mel) - mel_cepstra(est, mel)
    return float(MCD_CONST * np.mean(np.sqrt(np.sum(diff ** 2, axis=1))))


def evaluate_pair(ref: AudioBuffer, est: AudioBuffer, mel: MelParams | None = None) -> dict:
    return {"sdr": sdr(ref, est), "lsd": lsd(ref, est), "mcd": mcd(ref, est, mel)}


def evaluate_batch(pairs_path, out_path=None, root: Path | None = None) -> dict:
    """Score a JSONL of ``{"ref_path", "est_path"}``; returns per-pair rows and aggregate mean/std."""
    rows = []
    with open(pairs_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ref_p, est_p = rec["ref_path"], rec["est_path"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise ValidationError(f"{pairs_path}:{lineno}: expected {{\"ref_path\", \"est_path\"}}") from None
            if root is not None:
                ref_p, est_p = str(root / ref_p), str(root / est_p)
            row = {"ref_path": rec["ref_path"], "est_path": rec["est_path"]}
            row.update(evaluate_pair(read_wav(ref_p), read_wav(est_p)))
            rows.append(row)
    agg = {}
    for key in ("sdr", "lsd", "mcd"):
        vals = np.array([r[key] for r in rows]) if rows else np.zeros(0)
        agg[key] = {"mean": float(vals.mean()) if vals.size else None,
                    "std": float(vals.std()) if vals.size else None}
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return {"pairs": rows, "aggregate": agg, "count": len(rows)}
