"""Distortion-perception numerics on finite 1-D joint distributions.

A :class:`DiscreteJointModel` holds atoms ``(s, y, p)`` of a clean value
``s`` and an observation ``y``. From it we compute the posterior-mean
estimator, its MSE, the MSE of posterior sampling, squared 2-Wasserstein
costs between 1-D distributions (exactly, through the monotone coupling),
and the family of estimators that slide the posterior mean along the
optimal transport path to the clean marginal.

Squared costs are used throughout: ``wasserstein2_sq_1d`` returns the
minimal expected squared distance, not its square root.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from uselab.audio import RandomStream
from uselab.errors import ValidationError

_PROB_TOL = 1e-12
# coupling pieces lighter than this are treated as rounding slivers
_SLIVER = 1e-12
BRUTE_FORCE_MAX_ATOMS = 8


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        p = np.asarray(self.probs, dtype=np.float64).ravel()
        if v.shape != p.shape or v.size == 0:
            raise ValidationError("distribution needs matching, non-empty value and probability arrays")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(p))):
            raise ValidationError("distribution values and probabilities must be finite")
        if np.any(p < 0):
            raise ValidationError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > _PROB_TOL:
            raise ValidationError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, values) -> "DiscreteDistribution":
        v = np.asarray(values, dtype=np.float64).ravel()
        return cls(v, np.full(v.size, 1.0 / v.size))

    @classmethod
    def normalized(cls, values, weights) -> "DiscreteDistribution":
        w = np.asarray(weights, dtype=np.float64)
        return cls(values, w / w.sum())

    def consolidated(self) -> "DiscreteDistribution":
        """Merge atoms with identical values and drop zero-mass atoms."""
        keep = self.probs > 0
        vals, inv = np.unique(self.values[keep], return_inverse=True)
        return DiscreteDistribution(vals, np.bincount(inv, weights=self.probs[keep]))

    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    def quantile(self, u) -> np.ndarray:
        order = np.argsort(self.values, kind="stable")
        cum = np.cumsum(self.probs[order])
        idx = np.clip(np.searchsorted(cum, np.asarray(u), side="left"), 0, cum.size - 1)
        return self.values[order][idx]

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "probs": self.probs.tolist()}


def to_equal_atoms(dist: DiscreteDistribution, n: int = 512) -> DiscreteDistribution:
    """Resample to ``n`` equal-mass atoms at the mid-quantiles ``(k + 1/2) / n``."""
    return DiscreteDistribution.uniform(dist.quantile((np.arange(n) + 0.5) / n))


@dataclass(frozen=True, eq=False)
class DiscreteJointModel:
    s: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        s, y, p = (np.asarray(a, dtype=np.float64).ravel() for a in (self.s, self.y, self.p))
        if not (s.shape == y.shape == p.shape) or s.size == 0:
            raise ValidationError("joint model needs matching, non-empty s, y and p arrays")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(y)) and np.all(np.isfinite(p))):
            raise ValidationError("joint model atoms must be finite")
        if np.any(p <= 0):
            raise ValidationError("joint model probabilities must be strictly positive")
        if abs(p.sum() - 1.0) > _PROB_TOL:
            raise ValidationError(f"joint probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p", p)

    @classmethod
    def from_weights(cls, s, y, w) -> "DiscreteJointModel":
        s, y, w = (np.asarray(a, dtype=np.float64).ravel() for a in (s, y, w))
        keep = w > 0
        return cls(s[keep], y[keep], w[keep] / w[keep].sum())

    @classmethod
    def from_atoms(cls, atoms) -> "DiscreteJointModel":
        arr = np.asarray(list(atoms), dtype=np.float64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def scaled(self, c: float) -> "DiscreteJointModel":
        return DiscreteJointModel(self.s * c, self.y * c, self.p)

    def clean_marginal(self) -> DiscreteDistribution:
        return DiscreteDistribution(self.s, self.p).consolidated()

    def groups(self):
        """Unique observation values and, per atom, its group index."""
        return np.unique(self.y, return_inverse=True)

    def to_dict(self) -> dict:
        return {"atoms": np.stack([self.s, self.y, self.p], axis=1).tolist()}

    @classmethod
    def from_dict(cls, d) -> "DiscreteJointModel":
        return cls.from_atoms(d["atoms"])


# --------------------------------------------------------------------------
# Model factories


def gaussian_model(n_grid: int = 201, lo: float = -5.0, hi: float = 5.0,
                   signal_var: float = 1.0, noise_var: float = 1.0) -> DiscreteJointModel:
    """``s ~ N(0, signal_var)``, ``y = s + n`` with ``n ~ N(0, noise_var)``, both on the same grid."""
    g = np.linspace(lo, hi, n_grid)
    S, Y = np.meshgrid(g, g, indexing="ij")
    logw = -0.5 * S ** 2 / signal_var - 0.5 * (Y - S) ** 2 / noise_var
    return DiscreteJointModel.from_weights(S, Y, np.exp(logw - logw.max()))


def uninformative_model(values=(0.0, 1.0), observations=(0.0, 1.0)) -> DiscreteJointModel:
    """Clean values uniform over ``values``, observed independently of them."""
    S, Y = np.meshgrid(values, observations, indexing="ij")
    return DiscreteJointModel.from_weights(S, Y, np.ones(S.shape))


def deterministic_model(values, probs=None) -> DiscreteJointModel:
    """Noiseless observation: ``y = s``."""
    v = np.asarray(values, dtype=np.float64)
    w = np.ones(v.size) if probs is None else np.asarray(probs, dtype=np.float64)
    return DiscreteJointModel.from_weights(v, v, w)


def random_model(rng: np.random.Generator, n_s: int = 5, n_y: int = 4, noise: float = 1.0) -> DiscreteJointModel:
    """Random clean atoms observed through a Gaussian channel, quantized to ``n_y`` levels."""
    s_vals = rng.normal(size=n_s) * 2.0
    s_prob = rng.dirichlet(np.ones(n_s))
    y_vals = np.sort(rng.normal(size=n_y) * 2.0)
    lik = np.exp(-0.5 * ((y_vals[None, :] - s_vals[:, None]) / noise) ** 2) + 1e-3
    lik /= lik.sum(axis=1, keepdims=True)
    S, Y = np.meshgrid(s_vals, y_vals, indexing="ij")
    return DiscreteJointModel.from_weights(S, Y, s_prob[:, None] * lik)


# --------------------------------------------------------------------------
# Estimators


@dataclass(frozen=True, eq=False)
class PosteriorMean:
    y_values: np.ndarray
    s_star: np.ndarray
    p_y: np.ndarray

    def as_map(self) -> dict:
        return dict(zip(self.y_values.tolist(), self.s_star.tolist()))

    def distribution(self) -> DiscreteDistribution:
        return DiscreteDistribution(self.s_star, self.p_y)


def posterior_mean(model: DiscreteJointModel) -> PosteriorMean:
    """``s*(y) = E[s | y]`` per observation value, and the induced law of ``s*``."""
    yv, g = model.groups()
    p_y = np.bincount(g, weights=model.p, minlength=yv.size)
    num = np.bincount(g, weights=model.p * model.s, minlength=yv.size)
    return PosteriorMean(yv, num / p_y, p_y)


def mmse_distortion(model: DiscreteJointModel) -> float:
    pm = posterior_mean(model)
    _, g = model.groups()
    return float(np.dot(model.p, (model.s - pm.s_star[g]) ** 2))


def posterior_sampling_stats(model: DiscreteJointModel, n_samples: int, stream: RandomStream):
    """Monte Carlo mean and standard error of ``(s - s~)**2`` with ``s~ ~ p(s | y)``."""
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    _, g = model.groups()
    order = np.lexsort((np.arange(g.size), g))
    g_sorted = g[order]
    p_sorted = model.p[order]
    p_y = np.bincount(g_sorted, weights=p_sorted)
    cond = p_sorted / p_y[g_sorted]
    starts = np.r_[0, np.flatnonzero(np.diff(g_sorted)) + 1]
    cum = np.cumsum(cond)
    cum -= np.repeat(np.r_[0.0, cum[starts[1:] - 1]], np.diff(np.r_[starts, g_sorted.size]))
    # offset each group's conditional CDF by its index so one searchsorted serves all groups
    keyed = g_sorted + cum
    keyed[np.r_[starts[1:] - 1, g_sorted.size - 1]] = np.arange(starts.size) + 1.0

    joint = stream.choice(model.p.size, size=n_samples, p=model.p)
    s = model.s[joint]
    grp = g[joint]
    u = stream.random(n_samples)
    pick = np.searchsorted(keyed, grp + u, side="right")
    pick = np.minimum(pick, np.r_[starts[1:] - 1, g_sorted.size - 1][grp])
    s_tilde = model.s[order][pick]
    err = (s - s_tilde) ** 2
    return float(err.mean()), float(err.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else math.inf


def posterior_sampling_mse(model: DiscreteJointModel, n_samples: int, stream: RandomStream) -> float:
    return posterior_sampling_stats(model, n_samples, stream)[0]


# --------------------------------------------------------------------------
# 1-D optimal transport


@dataclass(frozen=True, eq=False)
class Coupling:
    """Monotone coupling as weighted pairs ``(src index, dst index, mass)`` into the original atoms."""

    src: np.ndarray
    dst: np.ndarray
    mass: np.ndarray

    def cost(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.dot(self.mass, (x[self.src] - y[self.dst]) ** 2))


def _sorted_cdf(d: DiscreteDistribution):
    # stable sort: ties keep original index order
    order = np.argsort(d.values, kind="stable")
    cum = np.cumsum(d.probs[order])
    cum /= cum[-1]
    return order, cum


def monotone_coupling(p: DiscreteDistribution, q: DiscreteDistribution) -> Coupling:
    """Quantile (north-west corner) coupling, optimal for convex costs in 1-D."""
    op, cp = _sorted_cdf(p)
    oq, cq = _sorted_cdf(q)
    breaks = np.union1d(cp, cq)
    mass = np.diff(np.r_[0.0, breaks])
    i = np.minimum(np.searchsorted(cp, breaks, side="left"), cp.size - 1)
    j = np.minimum(np.searchsorted(cq, breaks, side="left"), cq.size - 1)
    keep = mass > 0
    return Coupling(op[i[keep]], oq[j[keep]], mass[keep])


def wasserstein2_sq_1d(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Minimal expected squared distance between ``p`` and ``q``."""
    return monotone_coupling(p, q).cost(p.values, q.values)


def brute_force_coupling(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Exact minimal squared cost by enumerating every pairing of equal-mass atoms.

    Independent of :func:`wasserstein2_sq_1d`; limited to at most 8 atoms.
    """
    n = p.values.size
    if n > BRUTE_FORCE_MAX_ATOMS:
        raise ValidationError(f"brute force limited to {BRUTE_FORCE_MAX_ATOMS} atoms, got {n}")
    if q.values.size != n:
        raise ValidationError(f"atom counts differ: {n} vs {q.values.size}")
    if not (np.allclose(p.probs, 1.0 / n, rtol=0, atol=1e-15) and np.allclose(q.probs, 1.0 / n, rtol=0, atol=1e-15)):
        raise ValidationError("brute force requires equal-probability atoms")
    perms = np.array(list(itertools.permutations(range(n))))
    costs = ((p.values[None, :] - q.values[perms]) ** 2).sum(axis=1)
    return float(costs.min() / n)


def max_quantile_deviation(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    c = monotone_coupling(p, q)
    real = c.mass > _SLIVER
    return float(np.max(np.abs(p.values[c.src[real]] - q.values[c.dst[real]]), initial=0.0))


# --------------------------------------------------------------------------
# Transported estimators


@dataclass(frozen=True)
class DpCurvePoint:
    t: float
    perception: float
    distortion: float

    def __post_init__(self):
        if not (self.perception >= 0 and self.distortion >= 0):
            raise ValidationError("perception and distortion must be non-negative")


class TransportPath:
    """Estimators ``(1 - t) s* + t T(s*)`` with ``T`` the monotone map from the law of ``s*`` to the clean law.

    When the coupling splits an atom of ``s*`` over several clean atoms, the
    estimator randomizes accordingly, independently of ``s`` given ``y``.
    """

    def __init__(self, model: DiscreteJointModel):
        self.model = model
        self.pm = posterior_mean(model)
        self.p_s = model.clean_marginal()
        self.coupling = monotone_coupling(self.pm.distribution(), self.p_s)
        _, g = model.groups()
        # (coupling piece, atom in the same observation group) pairs
        order = np.argsort(g, kind="stable")
        counts = np.bincount(g, minlength=self.pm.y_values.size)
        starts = np.r_[0, np.cumsum(counts)[:-1]]
        grp = self.coupling.src
        reps = counts[grp]
        self._piece = np.repeat(np.arange(grp.size), reps)
        offs = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
        self._atom = order[np.repeat(starts[grp], reps) + offs]

    def values(self, t: float) -> np.ndarray:
        c = self.coupling
        return (1.0 - t) * self.pm.s_star[c.src] + t * self.p_s.values[c.dst]

    def distribution(self, t: float) -> DiscreteDistribution:
        return DiscreteDistribution(self.values(t), self.coupling.mass)

    def distortion(self, t: float) -> float:
        """``E[(s - s~_t)**2]`` summed over joint atoms and coupling pieces."""
        c = self.coupling
        v = self.values(t)
        cond = c.mass[self._piece] / self.pm.p_y[c.src[self._piece]]
        w = self.model.p[self._atom] * cond
        return float(np.dot(w, (self.model.s[self._atom] - v[self._piece]) ** 2))

    def point(self, t: float) -> DpCurvePoint:
        if not 0.0 <= t <= 1.0:
            raise ValidationError(f"t must lie in [0, 1], got {t}")
        perception = math.sqrt(max(wasserstein2_sq_1d(self.distribution(t), self.p_s), 0.0))
        return DpCurvePoint(float(t), perception, self.distortion(t))


def dp_curve(model: DiscreteJointModel, t_grid) -> list:
    ts = [float(t) for t in t_grid]
    if not ts or any(not 0.0 <= t <= 1.0 for t in ts):
        raise ValidationError("t grid must be non-empty with values in [0, 1]")
    path = TransportPath(model)
    return [path.point(t) for t in ts]


def convexity_defects(points) -> np.ndarray:
    """Generalized second differences of distortion against perception (negative means concave)."""
    pts = sorted(points, key=lambda q: q.perception)
    x = np.array([q.perception for q in pts])
    d = np.array([q.distortion for q in pts])
    dx = np.diff(x)
    ok = dx > 1e-12
    x, d = np.r_[x[:1], x[1:][ok]], np.r_[d[:1], d[1:][ok]]
    if x.size < 3:
        return np.zeros(0)
    slopes = np.diff(d) / np.diff(x)
    return np.diff(slopes) * (x[2:] - x[:-2]) / 2.0


@dataclass
class IdentityReport:
    D0_direct: float
    D_star: float
    W2_sq: float
    residual: float
    max_quantile_deviation: float
    within_tolerance: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_d0_identity(model: DiscreteJointModel, tol: float = 1e-9) -> IdentityReport:
    """Check that transporting the posterior mean to the clean law costs exactly ``D* + W2^2``.

    ``D0_direct`` is the MSE of the transported estimator computed from the
    joint model; ``residual`` is its gap to ``D* + W2_sq``.
    """
    path = TransportPath(model)
    d_star = mmse_distortion(model)
    w2 = wasserstein2_sq_1d(path.pm.distribution(), path.p_s)
    d0 = path.distortion(1.0)
    residual = abs(d0 - (d_star + w2))
    return IdentityReport(d0, d_star, w2, residual, max_quantile_deviation(path.distribution(1.0), path.p_s),
                          bool(residual <= tol))


def curve_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "perception", "distortion"])
    for q in points:
        w.writerow([repr(q.t), repr(q.perception), repr(q.distortion)])
    return buf.getvalue()


def curve_json(points) -> str:
    return json.dumps([q.__dict__ for q in points], sort_keys=True)
