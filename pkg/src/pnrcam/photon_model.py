"""Photon-number statistics of split single-mode thermal light.

A single-mode thermal field with mean photon number ``n_bar`` is split by a
coupler of angle ``theta`` (arm a receives ``cos(theta)**2`` of the intensity)
and detected by two photon-number-resolving detectors with efficiencies
``eta_a``, ``eta_b`` and Poissonian dark counts of mean ``nu_a``, ``nu_b`` per
time bin.

All probabilities are per time bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConfigError, TruncationError, UndefinedStatisticError

__all__ = [
    "DetectorParams",
    "JointPND",
    "MarginalPND",
    "default_n_max",
    "thermal_pn",
    "poisson_pmf",
    "joint_pnd",
    "noise_pnd",
    "marginal_a",
    "marginal_b",
    "g2_from_dist",
    "g2_from_counts",
]

# Safety cap; beyond this the log-factorial tables get silly.
N_MAX_LIMIT = 20000


@dataclass(frozen=True)
class DetectorParams:
    """Detector efficiencies, dark-count means (per bin) and splitter angle."""

    eta_a: float = 1.0
    eta_b: float = 1.0
    nu_a: float = 0.0
    nu_b: float = 0.0
    theta: float = math.pi / 4

    def __post_init__(self):
        for name in ("eta_a", "eta_b", "nu_a", "nu_b", "theta"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ConfigError(f"{name} must be finite, got {value}")
        if not (0.0 <= self.eta_a <= 1.0 and 0.0 <= self.eta_b <= 1.0):
            raise ConfigError(f"efficiencies must lie in [0, 1], got {self.eta_a}, {self.eta_b}")
        if self.nu_a < 0 or self.nu_b < 0:
            raise ConfigError(f"dark-count means must be >= 0, got {self.nu_a}, {self.nu_b}")
        if not (0.0 <= self.theta <= math.pi / 2):
            raise ConfigError(f"theta must lie in [0, pi/2], got {self.theta}")

    @property
    def split_a(self) -> float:
        """Intensity fraction routed to arm a, cos^2(theta)."""
        return math.cos(self.theta) ** 2

    @property
    def split_b(self) -> float:
        return math.sin(self.theta) ** 2

    def swapped(self) -> "DetectorParams":
        """The same setup with the roles of the two arms exchanged."""
        return DetectorParams(self.eta_b, self.eta_a, self.nu_b, self.nu_a, math.pi / 2 - self.theta)

    def to_dict(self) -> dict:
        return {"eta_a": self.eta_a, "eta_b": self.eta_b, "nu_a": self.nu_a,
                "nu_b": self.nu_b, "theta": self.theta}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectorParams":
        return cls(**{k: float(d[k]) for k in ("eta_a", "eta_b", "nu_a", "nu_b", "theta") if k in d})


@dataclass(frozen=True)
class JointPND:
    """Truncated joint distribution ``probs[n, m] = P(n_a = n, n_b = m)``."""

    n_max: int
    probs: np.ndarray = field(repr=False)
    truncation_mass: float

    def __post_init__(self):
        self.probs.setflags(write=False)

    @property
    def total(self) -> float:
        return float(self.probs.sum())


@dataclass(frozen=True)
class MarginalPND:
    n_max: int
    probs: np.ndarray = field(repr=False)
    truncation_mass: float = 0.0

    def __post_init__(self):
        self.probs.setflags(write=False)

    def mean(self) -> float:
        p = self.probs
        return float(np.dot(np.arange(p.size), p))


def default_n_max(n_bar: float, params: DetectorParams | None = None) -> int:
    """Truncation order ``ceil(10 (n_bar + nu_a + nu_b)) + 20``.

    For bright fields (n_bar above ~1) the Bose-Einstein tail decays slowly, so
    the order is raised until the thermal tail mass drops below 1e-12.
    """
    nu = 0.0 if params is None else params.nu_a + params.nu_b
    n = math.ceil(10.0 * (n_bar + nu)) + 20
    if n_bar > 0:
        ratio = n_bar / (1.0 + n_bar)
        n = max(n, math.ceil(math.log(1e-12) / math.log(ratio)))
    return n


@lru_cache(maxsize=16)
def _log_factorials(n: int) -> np.ndarray:
    table = gammaln(np.arange(n + 1, dtype=float) + 1.0)
    table.setflags(write=False)
    return table


def _xlogy(k: np.ndarray, x: float) -> np.ndarray:
    """``k * log(x)`` with the convention ``0 * log(0) = 0``."""
    k = np.asarray(k, dtype=float)
    if x > 0:
        return k * math.log(x)
    return np.where(k == 0, 0.0, -np.inf)


def _check_n_bar(n_bar: float) -> float:
    n_bar = float(n_bar)
    if not math.isfinite(n_bar) or n_bar < 0:
        raise ConfigError(f"mean photon number must be finite and >= 0, got {n_bar}")
    return n_bar


def thermal_pn(n_bar: float, n):
    """Bose-Einstein probability ``n_bar**n / (1 + n_bar)**(n + 1)``.

    ``n`` may be an integer or an integer array.
    """
    n_bar = _check_n_bar(n_bar)
    k = np.asarray(n)
    if np.any(k < 0):
        raise ConfigError("photon number must be >= 0")
    logp = _xlogy(k, n_bar) - (k + 1.0) * math.log1p(n_bar)
    out = np.exp(logp)
    return float(out) if np.ndim(out) == 0 else out


def _log_poisson(mean: float, k: np.ndarray) -> np.ndarray:
    k = np.asarray(k)
    return _xlogy(k, mean) - mean - _log_factorials(int(k.max()) if k.size else 0)[k]


def poisson_pmf(mean: float, k):
    """Poisson pmf evaluated in log space (exact zeros for ``mean == 0``)."""
    if mean < 0:
        raise ConfigError(f"Poisson mean must be >= 0, got {mean}")
    out = np.exp(_log_poisson(float(mean), np.asarray(k, dtype=int)))
    return float(out) if np.ndim(out) == 0 else out


def _finalize(probs: np.ndarray, n_max: int, what: str) -> JointPND:
    if not np.all(np.isfinite(probs)):
        raise TruncationError(f"{what}: non-finite probabilities at n_max={n_max}")
    total = float(probs.sum())
    if total > 1.0:
        # pure rounding; keeps sum(probs) <= 1 exact
        probs = probs / total
        total = float(probs.sum())
    return JointPND(n_max=n_max, probs=probs, truncation_mass=max(0.0, 1.0 - total))


def _blocked_lse(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Log-domain matrix product: ``out[r, c] = logsumexp_k left[r, k] + right[k, c]``."""
    rows, inner = left.shape
    cols = right.shape[1]
    out = np.empty((rows, cols))
    step = max(1, 4_000_000 // max(1, inner * cols))
    with np.errstate(invalid="ignore", divide="ignore"):
        for r0 in range(0, rows, step):
            block = left[r0:r0 + step, :, None] + right[None, :, :]
            out[r0:r0 + step] = logsumexp(block, axis=1)
    return out


def joint_pnd(n_bar_t: float, params: DetectorParams, n_max: int | None = None) -> JointPND:
    """Joint photocount distribution of the two arms.

    Evaluates the finite double sum over signal counts ``i <= n`` (arm a) and
    ``j <= m`` (arm b),

        p(n, m) = sum_{i,j} C(i+j, i) a^i b^j / (1 + k n_bar)
                            * Pois(n - i; nu_a) * Pois(m - j; nu_b),

    with ``k = eta_a cos^2 + eta_b sin^2``, ``a = eta_a cos^2 n_bar / (1 + k n_bar)``
    and ``b = eta_b sin^2 n_bar / (1 + k n_bar)``.  Terms are combined with
    log-sum-exp, one arm at a time.
    """
    n_bar = _check_n_bar(n_bar_t)
    if n_max is None:
        n_max = default_n_max(n_bar, params)
    n_max = int(n_max)
    if n_max < 0:
        raise ConfigError(f"n_max must be >= 0, got {n_max}")
    if n_max > N_MAX_LIMIT:
        raise TruncationError(f"n_max={n_max} exceeds the supported limit {N_MAX_LIMIT}")

    lf = _log_factorials(2 * n_max + 1)
    k = np.arange(n_max + 1)
    denom = 1.0 + (params.eta_a * params.split_a + params.eta_b * params.split_b) * n_bar
    a = params.eta_a * params.split_a * n_bar / denom
    b = params.eta_b * params.split_b * n_bar / denom

    # log of the noiseless signal distribution S(i, j)
    i = k[:, None]
    j = k[None, :]
    with np.errstate(invalid="ignore"):
        log_s = lf[i + j] - lf[i] - lf[j] + _xlogy(i, a) + _xlogy(j, b) - math.log(denom)

    log_pa = _log_poisson(params.nu_a, k)
    log_pb = _log_poisson(params.nu_b, k)
    # Toeplitz tables: L[n, i] = log Pois(n - i), -inf above the diagonal
    diff = k[:, None] - k[None, :]
    lower = diff >= 0
    toe_a = np.where(lower, log_pa[np.clip(diff, 0, None)], -np.inf)
    toe_b = np.where(lower, log_pb[np.clip(diff, 0, None)], -np.inf)

    # T[n, j] = logsumexp_i (log_s[i, j] + toe_a[n, i])
    t = _blocked_lse(toe_a, log_s)
    # p[n, m] = logsumexp_j (T[n, j] + toe_b[m, j])
    logp = _blocked_lse(toe_b, t.T).T
    with np.errstate(over="raise"):
        try:
            probs = np.exp(logp)
        except FloatingPointError as exc:
            raise TruncationError(f"overflow evaluating joint distribution at n_max={n_max}") from exc
    return _finalize(probs, n_max, "joint_pnd")


def noise_pnd(params: DetectorParams, n_max: int | None = None) -> JointPND:
    """Dark-count-only joint distribution: independent Poisson(nu_a) x Poisson(nu_b)."""
    if n_max is None:
        n_max = default_n_max(0.0, params)
    if n_max < 0:
        raise ConfigError(f"n_max must be >= 0, got {n_max}")
    k = np.arange(int(n_max) + 1)
    probs = np.outer(poisson_pmf(params.nu_a, k), poisson_pmf(params.nu_b, k))
    return _finalize(probs, int(n_max), "noise_pnd")


def marginal_a(joint: JointPND) -> MarginalPND:
    return MarginalPND(joint.n_max, joint.probs.sum(axis=1), joint.truncation_mass)


def marginal_b(joint: JointPND) -> MarginalPND:
    return MarginalPND(joint.n_max, joint.probs.sum(axis=0), joint.truncation_mass)


def _g2(probs: np.ndarray) -> float:
    total = probs.sum()
    if total <= 0:
        raise UndefinedStatisticError("g2 undefined: empty distribution")
    p = probs / total
    n = np.arange(p.size, dtype=float)
    mean = float(np.dot(n, p))
    if mean <= 0:
        raise UndefinedStatisticError("g2 undefined: zero mean photon number")
    return float(np.dot(n * (n - 1.0), p)) / mean**2


def g2_from_dist(dist: MarginalPND | Sequence[float] | np.ndarray) -> float:
    """Second-order coherence ``<n(n-1)> / <n>^2`` of a (renormalized) distribution."""
    probs = dist.probs if isinstance(dist, MarginalPND) else np.asarray(dist, dtype=float)
    return _g2(np.asarray(probs, dtype=float))


def g2_from_counts(counts: Mapping[int, int] | Sequence[int] | np.ndarray) -> float:
    """Empirical g2 from a photon-number histogram.

    ``counts`` is either a mapping ``{n: occurrences}`` or an array indexed by n.
    """
    if isinstance(counts, Mapping):
        if not counts:
            raise UndefinedStatisticError("g2 undefined: empty histogram")
        if min(counts) < 0:
            raise ConfigError("photon numbers must be >= 0")
        hist = np.zeros(max(counts) + 1)
        for n, c in counts.items():
            hist[n] += c
    else:
        hist = np.asarray(counts, dtype=float)
    if hist.size == 0 or hist.sum() <= 0:
        raise UndefinedStatisticError("g2 undefined: empty histogram")
    if np.any(hist < 0):
        raise ConfigError("histogram counts must be >= 0")
    return _g2(hist)
