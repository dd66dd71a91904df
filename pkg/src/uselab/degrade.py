"""Distortion simulation for building degraded/clean training pairs.

Seven distortion kinds are supported: additive noise, reverberation,
clipping, bandwidth limitation, codec artifacts (a mu-law/uniform
bit-crusher stands in for real codecs), packet loss and wind noise
(synthesized gusty Brownian noise). A :class:`DegradationRecipe` lists
steps in the order they are applied; every random draw comes from a stream
derived from ``(root_seed, item_id)`` so results do not depend on worker
count or processing order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import signal as sps

from uselab.audio import AudioBuffer, RandomStream, _convolve_arrays, derive_stream, resample
from uselab.errors import ValidationError
from uselab.rir import Target, TargetKind, decompose_rir, make_target, render_reverberant

DISTORTIONS = ("noise", "reverb", "clip", "bandlimit", "codec", "packet_loss", "wind")

MU = 255.0
BANDLIMIT_TAPS_MS = 8.0
BANDLIMIT_KAISER_BETA = 8.6
WIND_CUTOFF_HZ = 300.0
WIND_LEAK_HZ = 20.0


def _energy(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(_energy(signal) / _energy(noise))


def fit_noise(noise: AudioBuffer, length: int, stream: RandomStream | None = None) -> np.ndarray:
    """Tile or truncate ``noise`` to ``length`` samples starting at a random circular offset."""
    n = noise.samples
    offset = int(stream.integers(0, n.size)) if stream is not None and n.size > 1 else 0
    idx = (offset + np.arange(length)) % n.size
    return n[idx]


def scaled_noise(s: AudioBuffer, noise: AudioBuffer, snr: float, stream: RandomStream | None = None) -> np.ndarray:
    if s.fs != noise.fs:
        raise ValidationError(f"sampling rate mismatch: signal {s.fs}, noise {noise.fs}")
    if not math.isfinite(snr):
        raise ValidationError(f"SNR must be finite, got {snr}")
    es = s.energy()
    if es == 0 or noise.energy() == 0:
        raise ValidationError("signal and noise must both have nonzero energy")
    n = fit_noise(noise, len(s), stream)
    en = _energy(n)
    if en == 0:
        raise ValidationError("selected noise segment has zero energy")
    return n * math.sqrt(es / (en * 10.0 ** (snr / 10.0)))


def add_noise(s: AudioBuffer, noise: AudioBuffer, snr: float, stream: RandomStream | None = None) -> AudioBuffer:
    """Mix ``noise`` into ``s`` at ``snr`` dB (energy ratio over the whole signal)."""
    return s.with_samples(s.samples + scaled_noise(s, noise, snr, stream))


def clip(s: AudioBuffer, threshold_ratio: float) -> AudioBuffer:
    """Hard clip at ``threshold_ratio`` times the peak magnitude."""
    if not 0 < threshold_ratio <= 1:
        raise ValidationError(f"clipping ratio must lie in (0, 1], got {threshold_ratio}")
    if threshold_ratio == 1:
        return s.with_samples(s.samples.copy())
    level = threshold_ratio * float(np.max(np.abs(s.samples), initial=0.0))
    return s.with_samples(np.clip(s.samples, -level, level))


def lowpass_taps(fs, cutoff_hz: float) -> np.ndarray:
    numtaps = int(math.ceil(BANDLIMIT_TAPS_MS / 1000.0 * fs))
    numtaps += 1 - numtaps % 2
    return sps.firwin(numtaps, cutoff_hz, window=("kaiser", BANDLIMIT_KAISER_BETA), fs=fs)


def bandlimit(s: AudioBuffer, cutoff_hz: float) -> AudioBuffer:
    """Zero-phase-aligned linear-phase low-pass; pass-through near Nyquist."""
    if not cutoff_hz > 0:
        raise ValidationError(f"cutoff must be positive, got {cutoff_hz}")
    if cutoff_hz >= 0.99 * s.fs / 2 or len(s) == 0:
        return s.with_samples(s.samples.copy())
    h = lowpass_taps(s.fs, cutoff_hz)
    delay = (h.size - 1) // 2
    y = _convolve_arrays(s.samples, h)
    return s.with_samples(y[delay: delay + len(s)])


def mulaw_compress(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(MU * np.abs(x)) / math.log1p(MU)


def mulaw_expand(y: np.ndarray) -> np.ndarray:
    return np.sign(y) * np.expm1(np.abs(y) * math.log1p(MU)) / MU


def quantize_uniform(x: np.ndarray, bits: int) -> np.ndarray:
    half = float(1 << (bits - 1))
    return np.clip(np.round(x * half), -half, half - 1) / half


def codec_crush(s: AudioBuffer, bits: int, mulaw: bool = False) -> AudioBuffer:
    """Quantize to ``2**bits`` levels on [-1, 1], optionally in the mu-law domain."""
    if not (isinstance(bits, (int, np.integer)) and 2 <= bits <= 16):
        raise ValidationError(f"bits must be an integer in [2, 16], got {bits}")
    x = np.clip(s.samples, -1.0, 1.0)
    if mulaw:
        return s.with_samples(mulaw_expand(quantize_uniform(mulaw_compress(x), bits)))
    return s.with_samples(quantize_uniform(x, bits))


@dataclass(frozen=True)
class LossModel:
    """``bernoulli`` (i.i.d. loss with ``p``) or ``gilbert`` (two-state Markov).

    In Gilbert mode a received packet is followed by a loss with probability
    ``p``, and a lost packet by another loss with probability ``p_stay``.
    """

    mode: str = "bernoulli"
    p: float = 0.0
    p_stay: float = 0.0

    def __post_init__(self):
        if self.mode not in ("bernoulli", "gilbert"):
            raise ValidationError(f"unknown loss mode {self.mode!r}")
        for name in ("p", "p_stay"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"loss probability {name}={v} outside [0, 1]")

    def draw(self, n: int, stream: RandomStream) -> np.ndarray:
        u = stream.random(n)
        if self.mode == "bernoulli":
            return u < self.p
        lost = np.zeros(n, dtype=bool)
        state = False
        for i in range(n):
            state = bool(u[i] < (self.p_stay if state else self.p))
            lost[i] = state
        return lost


def packet_loss(s: AudioBuffer, packet_ms: float, loss: LossModel, stream: RandomStream):
    """Zero out lost packets; returns ``(buffer, per-packet loss mask)``."""
    if not packet_ms > 0:
        raise ValidationError(f"packet length must be positive, got {packet_ms}")
    plen = max(int(round(packet_ms * s.fs / 1000.0)), 1)
    n_packets = math.ceil(len(s) / plen)
    mask = loss.draw(n_packets, stream)
    sample_mask = np.repeat(mask, plen)[: len(s)]
    return s.with_samples(np.where(sample_mask, 0.0, s.samples)), mask


def mask_digest(mask: np.ndarray) -> str:
    return hashlib.sha256(np.packbits(mask.astype(bool)).tobytes() + str(mask.size).encode()).hexdigest()


def synth_wind(n: int, fs, stream: RandomStream) -> np.ndarray:
    """Unit-RMS gusty wind: leaky Brownian noise, 300 Hz low-pass, slow random envelope."""
    white = stream.normal(size=n)
    leak = math.exp(-2 * math.pi * WIND_LEAK_HZ / fs)
    brown = sps.lfilter([1.0], [1.0, -leak], white)
    sos = sps.butter(4, WIND_CUTOFF_HZ, btype="low", fs=fs, output="sos")
    rumble = sps.sosfilt(sos, brown - brown.mean())
    gust_rate = stream.uniform(0.5, 2.0)
    n_knots = int(math.ceil(n / fs * gust_rate)) + 2
    knots = stream.uniform(0.1, 1.0, n_knots)
    t = np.arange(n) / fs * gust_rate
    envelope = np.interp(t, np.arange(n_knots), knots)
    wind = rumble * envelope
    rms = math.sqrt(_energy(wind) / max(n, 1))
    return wind / rms if rms > 0 else wind


def wind_noise(s: AudioBuffer, gain_db: float, stream: RandomStream) -> AudioBuffer:
    """Add synthetic wind ``gain_db`` dB relative to the signal energy; ``-inf`` disables it."""
    if gain_db is None or gain_db == -math.inf:
        return s.with_samples(s.samples.copy())
    wind = synth_wind(len(s), s.fs, stream)
    ref = s.energy() if s.energy() > 0 else float(len(s))
    w_energy = _energy(wind)
    if w_energy == 0:
        return s.with_samples(s.samples.copy())
    return s.with_samples(s.samples + wind * math.sqrt(ref * 10.0 ** (gain_db / 10.0) / w_energy))


# --------------------------------------------------------------------------
# Recipes


@dataclass
class Step:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DISTORTIONS:
            raise ValidationError(f"unknown distortion {self.kind!r}; expected one of {DISTORTIONS}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


@dataclass
class DegradationRecipe:
    steps: list
    item_id: str = ""
    root_seed: int | None = None

    def __post_init__(self):
        self.steps = [s if isinstance(s, Step) else Step(s["kind"], dict(s.get("params", {}))) for s in self.steps]
        if sum(s.kind == "reverb" for s in self.steps) > 1:
            raise ValidationError("a recipe may contain at most one reverb step")

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "root_seed": self.root_seed, "steps": [s.to_dict() for s in self.steps]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DegradationRecipe":
        return cls(list(d.get("steps", [])), str(d.get("item_id", "")), d.get("root_seed"))

    @classmethod
    def from_json(cls, text: str) -> "DegradationRecipe":
        return cls.from_dict(json.loads(text))


@dataclass
class AssetBank:
    """Named noise and RIR assets. Lookups are read-only."""

    noise: dict = field(default_factory=dict)
    rir: dict = field(default_factory=dict)
    resample_assets: bool = True

    def get(self, bank: str, name: str, fs) -> AudioBuffer:
        table = getattr(self, bank)
        if name not in table:
            raise ValidationError(f"unresolvable {bank} asset {name!r}")
        buf = table[name]
        if buf.fs != fs:
            if not self.resample_assets:
                raise ValidationError(f"{bank} asset {name!r} is at {buf.fs} Hz, signal at {fs} Hz")
            buf = resample(buf, fs)
        return buf


@dataclass(eq=False)
class DegradedPair:
    input: AudioBuffer
    target: AudioBuffer
    metadata: dict

    def __post_init__(self):
        if len(self.input) != len(self.target) or self.input.fs != self.target.fs:
            raise ValidationError("degraded pair must share length and sampling rate")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.input.samples.tobytes())
        h.update(self.target.samples.tobytes())
        h.update(json.dumps(self.metadata, sort_keys=True).encode())
        return h.hexdigest()


def apply_recipe(s: AudioBuffer, recipe: DegradationRecipe, assets: AssetBank | None = None,
                 root_seed: int | None = None) -> DegradedPair:
    """Run the recipe's steps in order and return the degraded input with its target.

    Each step draws from its own child stream of ``(root_seed, item_id)``.
    A reverb step replaces the target by a RIR-derived target of the clean
    signal (shifted anechoic unless the step names another kind).
    """
    assets = assets or AssetBank()
    seed = root_seed if root_seed is not None else (recipe.root_seed or 0)
    base = derive_stream(seed, recipe.item_id)
    x = s
    target = s
    realized = []
    for i, step in enumerate(recipe.steps):
        p = step.params
        stream = base.child(f"{i}:{step.kind}")
        info = {"kind": step.kind}
        if step.kind == "noise":
            noise = assets.get("noise", p["asset"], s.fs)
            scaled = scaled_noise(x, noise, float(p["snr_db"]), stream)
            info.update(asset=p["asset"], snr_db_realized=snr_db(x.samples, scaled))
            x = x.with_samples(x.samples + scaled)
        elif step.kind == "reverb":
            rir = assets.get("rir", p["asset"], s.fs)
            dec = decompose_rir(rir, float(p.get("early_window_ms", 50.0)))
            kind = Target.parse(p.get("target", TargetKind.SHIFTED_ANECHOIC))
            target = make_target(s, dec, kind)
            x = render_reverberant(x, rir)
            info.update(asset=p["asset"], n0=dec.n0, gain=dec.gain, target=kind.to_dict())
        elif step.kind == "clip":
            ratio = float(p["threshold_ratio"])
            before = x.samples
            x = clip(x, ratio)
            info.update(threshold_ratio=ratio, clipped_fraction=float(np.mean(x.samples != before)) if len(x) else 0.0)
        elif step.kind == "bandlimit":
            x = bandlimit(x, float(p["cutoff_hz"]))
            info.update(cutoff_hz=float(p["cutoff_hz"]))
        elif step.kind == "codec":
            x = codec_crush(x, int(p["bits"]), bool(p.get("mulaw", False)))
            info.update(bits=int(p["bits"]), mulaw=bool(p.get("mulaw", False)))
        elif step.kind == "packet_loss":
            model = LossModel(p.get("mode", "bernoulli"), float(p.get("p", 0.0)), float(p.get("p_stay", 0.0)))
            x, mask = packet_loss(x, float(p.get("packet_ms", 20.0)), model, stream)
            info.update(n_packets=int(mask.size), n_lost=int(mask.sum()), mask_sha256=mask_digest(mask))
        elif step.kind == "wind":
            gain = float(p.get("gain_db", -math.inf))
            x = wind_noise(x, gain, stream)
            info.update(gain_db=gain)
        realized.append(info)
    metadata = {"item_id": recipe.item_id, "root_seed": seed, "recipe": recipe.to_dict(), "realized": realized}
    return DegradedPair(x, target, metadata)


def realize_recipe(template: Mapping, item_id: str, root_seed: int, assets: AssetBank | None = None) -> DegradationRecipe:
    """Turn a recipe template into a concrete recipe for one item.

    Parameter values may be literals, ``{"uniform": [lo, hi]}``,
    ``{"choice": [...]}``; an ``asset`` of ``"*"`` picks from the matching
    bank (sorted by name). A step with ``"prob": q`` is kept with
    probability ``q``.
    """
    stream = derive_stream(root_seed, f"{item_id}/template")
    steps = []
    for raw in template.get("steps", []):
        kind = raw["kind"]
        prob = float(raw.get("prob", 1.0))
        keep = stream.random() < prob
        params = {}
        for key, value in sorted(raw.get("params", {}).items()):
            if isinstance(value, dict) and "uniform" in value:
                lo, hi = value["uniform"]
                params[key] = float(stream.uniform(lo, hi))
            elif isinstance(value, dict) and "choice" in value:
                opts = list(value["choice"])
                params[key] = opts[int(stream.integers(0, len(opts)))]
            elif key == "asset" and value == "*":
                bank = "rir" if kind == "reverb" else "noise"
                names = sorted(getattr(assets, bank)) if assets is not None else []
                if not names:
                    raise ValidationError(f"template step {kind!r} needs a non-empty {bank} bank")
                params[key] = names[int(stream.integers(0, len(names)))]
            else:
                params[key] = value
        if keep:
            steps.append(Step(kind, params))
    return DegradationRecipe(steps, item_id, root_seed)
