"""Conditional measurements: Fock post-selection and photon subtraction.

Works on analytic distributions (the SNR laws) and on event logs (per-pattern
measurement vectors for reconstruction).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataFormatError, InfiniteSNRError, StarvedConditionError
from .photon_model import (DetectorParams, JointPND, default_n_max, joint_pnd, marginal_a,
                           noise_pnd, poisson_pmf)
from .sampler import EventLog

__all__ = [
    "ConditioningRule",
    "MeasurementVector",
    "SNRCurve",
    "snr_post",
    "snr_sub",
    "snr_curve",
    "conditional_mean_a",
    "condition_events",
    "conditional_histogram",
    "write_measurements",
    "read_measurements",
]

MODES = ("none", "post", "joint", "sub")
_RULE_RE = re.compile(r"^\s*(none|post|sub|joint)\s*(?::\s*(\d+)\s*(?:,\s*(\d+)\s*)?)?$")


@dataclass(frozen=True)
class ConditioningRule:
    """``post:N`` keeps bins with ``n1 == N`` (arm b ignored), ``joint:n,m`` keeps
    ``(n1, n2) == (n, m)``, ``sub:N`` averages ``n1`` over bins with ``n2 == N``,
    and ``none`` averages ``n1`` over every bin."""

    mode: str = "none"
    N: int = 0
    m: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown conditioning mode {self.mode!r}")
        if self.N < 0 or self.m < 0:
            raise ConfigError("photon numbers in a conditioning rule must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "ConditioningRule":
        match = _RULE_RE.match(text)
        if not match:
            raise ConfigError(f"cannot parse conditioning rule {text!r}; "
                              "expected post:N, sub:N, joint:n,m or none")
        mode, a, b = match.groups()
        if mode == "none":
            if a is not None:
                raise ConfigError(f"rule 'none' takes no arguments: {text!r}")
            return cls("none")
        if a is None or (mode == "joint") != (b is not None):
            raise ConfigError(f"malformed {mode} rule {text!r}")
        return cls(mode, int(a), int(b) if b is not None else 0)

    def __str__(self) -> str:
        if self.mode == "none":
            return "none"
        if self.mode == "joint":
            return f"joint:{self.N},{self.m}"
        return f"{self.mode}:{self.N}"

    @property
    def statistic_kind(self) -> str:
        return "probability" if self.mode in ("post", "joint") else "conditional_mean_intensity"


@dataclass
class MeasurementVector:
    """One statistic per pattern, with starved patterns flagged ``missing``."""

    y: np.ndarray = field(repr=False)
    statistic_kind: str
    events_used: np.ndarray = field(repr=False)
    missing: np.ndarray = field(repr=False)
    pattern_index: np.ndarray = field(repr=False)
    rule: ConditioningRule = field(default_factory=ConditioningRule)
    source_log_hash: str | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.events_used = np.asarray(self.events_used, dtype=np.int64)
        self.missing = np.asarray(self.missing, dtype=bool)
        self.pattern_index = np.asarray(self.pattern_index, dtype=np.int64)
        n = self.y.size
        if not (self.events_used.size == self.missing.size == self.pattern_index.size == n):
            raise ConfigError("measurement vector fields must have equal length")

    def __len__(self):
        return self.y.size

    @property
    def n_missing(self) -> int:
        return int(self.missing.sum())


@dataclass
class SNRCurve:
    N_values: list[int]
    snr: list[float]
    scheme: str
    n_bar: float = math.nan
    params: DetectorParams | None = None

    def __post_init__(self):
        if len(self.N_values) != len(self.snr):
            raise ConfigError("N_values and snr must have the same length")
        if self.scheme not in ("post", "sub"):
            raise ConfigError(f"scheme must be 'post' or 'sub', got {self.scheme!r}")


# ---------------------------------------------------------------------------
# analytic SNR laws


def _n_max_for(n_bar: float, params: DetectorParams, N: int, n_max: int | None) -> int:
    if n_max is not None:
        if N > n_max:
            raise ConfigError(f"N={N} exceeds the truncation order n_max={n_max}")
        return n_max
    return max(default_n_max(n_bar, params), N + 20)


def snr_post(n_bar_t: float, params: DetectorParams, N: int, n_max: int | None = None) -> float:
    """Arm-a post-selection SNR: ``P(n_a = N | signal) / Pois(N; nu_a)``."""
    if N < 0:
        raise ConfigError(f"N must be >= 0, got {N}")
    if params.nu_a == 0 and N >= 1:
        raise InfiniteSNRError(f"noise reference Pois({N}; nu_a=0) is zero; SNR is infinite")
    n_max = _n_max_for(n_bar_t, params, N, n_max)
    signal = float(marginal_a(joint_pnd(n_bar_t, params, n_max)).probs[N])
    noise = poisson_pmf(params.nu_a, N)
    if n_bar_t == 0:
        return 1.0
    return signal / noise


def conditional_mean_a(joint: JointPND, N: int, arm_label: str = "signal") -> tuple[float, float]:
    """Mean of ``n_a`` given ``n_b = N`` and a rough truncation error bound.

    The bound charges the whole truncated mass of the joint distribution to the
    conditioning row at count ``n_max + 1``.
    """
    if N > joint.n_max:
        raise ConfigError(f"N={N} exceeds the truncation order n_max={joint.n_max}")
    col = joint.probs[:, N]
    mass = float(col.sum())
    if mass <= 0:
        raise StarvedConditionError(
            f"{arm_label}: P(n_b = {N}) is zero in arm b; photon subtraction of {N} is impossible")
    k = np.arange(col.size)
    mean = float(np.dot(k, col)) / mass
    bound = joint.truncation_mass * (joint.n_max + 1 + mean) / mass
    return mean, bound


def snr_sub(n_bar_t: float, params: DetectorParams, N: int, n_max: int | None = None) -> float:
    """Photon-subtraction SNR: ``<n_a>_N (signal) / <n_a>_N (noise only)``."""
    if N < 0:
        raise ConfigError(f"N must be >= 0, got {N}")
    n_max = _n_max_for(n_bar_t, params, N, n_max)
    noise_mean, _ = conditional_mean_a(noise_pnd(params, n_max), N, "noise reference")
    if noise_mean <= 0:
        raise InfiniteSNRError("noise reference mean in arm a is zero (nu_a = 0); SNR is infinite")
    if n_bar_t == 0:
        return 1.0
    signal_mean, _ = conditional_mean_a(joint_pnd(n_bar_t, params, n_max), N, "signal")
    return signal_mean / noise_mean


def snr_curve(n_bar_t: float, params: DetectorParams, N_values: Sequence[int], scheme: str) -> SNRCurve:
    fn = {"post": snr_post, "sub": snr_sub}.get(scheme)
    if fn is None:
        raise ConfigError(f"scheme must be 'post' or 'sub', got {scheme!r}")
    n_values = [int(n) for n in N_values]
    n_max = max(default_n_max(n_bar_t, params), max(n_values, default=0) + 20)
    return SNRCurve(n_values, [fn(n_bar_t, params, n, n_max) for n in n_values], scheme,
                    float(n_bar_t), params)


# ---------------------------------------------------------------------------
# event-log conditioning


def _selection(hist: np.ndarray, rule: ConditioningRule) -> np.ndarray:
    """Boolean mask over the ``(n1, n2)`` outcome grid of ``hist``."""
    k1, k2 = hist.shape[-2:]
    n1 = np.arange(k1)[:, None]
    n2 = np.arange(k2)[None, :]
    if rule.mode == "none":
        return np.ones((k1, k2), dtype=bool)
    if rule.mode == "post":
        return np.broadcast_to(n1 == rule.N, (k1, k2))
    if rule.mode == "joint":
        return (n1 == rule.N) & (n2 == rule.m)
    return np.broadcast_to(n2 == rule.N, (k1, k2))


def condition_events(log: EventLog, rule: ConditioningRule) -> MeasurementVector:
    """Reduce an event log to one statistic per pattern.

    Probabilities (``post``, ``joint``) are fractions of all bins, with the
    number of matching bins reported in ``events_used``.  Conditional means
    (``sub``, ``none``) average ``n1`` over the selected bins; a pattern with no
    selected bin is flagged missing rather than set to zero.
    """
    if log.n_records == 0:
        raise ConfigError("event log is empty")
    hist = log.joint_histograms
    sel = _selection(hist, rule)
    n1 = np.arange(hist.shape[1])[:, None]
    selected = np.where(sel, hist, 0)
    events = selected.sum(axis=(1, 2))
    if rule.statistic_kind == "probability":
        y = events / log.bins_per_pattern
        missing = np.zeros(events.size, dtype=bool)
    else:
        missing = events == 0
        sums = (selected * n1).sum(axis=(1, 2))
        y = np.where(missing, np.nan, sums / np.maximum(events, 1))
    return MeasurementVector(y, rule.statistic_kind, events, missing, log.patterns.copy(),
                             rule, log.digest())


def conditional_histogram(log: EventLog, rule: ConditioningRule, pooled: bool = True) -> np.ndarray:
    """Arm-a count histogram over the bins selected by ``rule``.

    Pooled over patterns by default; otherwise shape ``(P, K1)``.
    """
    hist = log.joint_histograms
    sel = _selection(hist, rule)
    per_pattern = np.where(sel, hist, 0).sum(axis=2)
    if per_pattern.sum() == 0:
        raise StarvedConditionError(f"rule {rule} selects no events in this log")
    if not pooled:
        return per_pattern
    out = per_pattern.sum(axis=0)
    nz = np.flatnonzero(out)
    return out[: nz[-1] + 1]


# ---------------------------------------------------------------------------
# measurement files


def write_measurements(path, mv: MeasurementVector) -> None:
    """CSV ``t,y,events_used,missing`` plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write("t,y,events_used,missing\n")
        for t, y, ev, miss in zip(mv.pattern_index, mv.y, mv.events_used, mv.missing):
            yv = "" if miss else repr(float(y))
            fh.write(f"{int(t)},{yv},{int(ev)},{int(bool(miss))}\n")
    meta = {"rule": str(mv.rule), "source_log_hash": mv.source_log_hash,
            "statistic_kind": mv.statistic_kind}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_measurements(path) -> MeasurementVector:
    path = Path(path)
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "t,y,events_used,missing":
            raise DataFormatError("measurement CSV: expected header 't,y,events_used,missing'", "line 1")
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 4:
                raise DataFormatError(f"measurement CSV: expected 4 fields, got {len(parts)}", f"line {lineno}")
            try:
                t, ev, miss = int(parts[0]), int(parts[2]), bool(int(parts[3]))
                y = math.nan if miss else float(parts[1])
            except ValueError as exc:
                raise DataFormatError("measurement CSV: bad field", f"line {lineno}") from exc
            rows.append((t, y, ev, miss))
    if not rows:
        raise DataFormatError("measurement CSV: no rows", "line 2")
    meta_path = path.with_suffix(path.suffix + ".json")
    rule, kind, src = ConditioningRule(), "conditional_mean_intensity", None
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        rule = ConditioningRule.parse(meta.get("rule", "none"))
        kind = meta.get("statistic_kind", rule.statistic_kind)
        src = meta.get("source_log_hash")
    t, y, ev, miss = map(np.array, zip(*rows))
    return MeasurementVector(y, kind, ev, miss, t, rule, src)
