"""Monte Carlo photocount acquisition and event-log I/O.

Each time bin is an independent single-mode thermal draw: the intensity is
exponential with mean ``n_bar_t`` (the thermal P-function), and each arm then
counts Poisson(eta * intensity * split + nu).  This reproduces the analytic
joint distribution of :func:`pnrcam.photon_model.joint_pnd` exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataFormatError
from .photon_model import DetectorParams
from .scene import SceneImage, SensingMatrix, pattern_means

__all__ = [
    "AcquisitionConfig",
    "EventLog",
    "pattern_rng",
    "sample_bin",
    "sample_bins",
    "run_acquisition",
    "write_event_log",
    "read_event_log",
    "merge_logs",
    "bin_timetags",
    "read_timetags",
    "eventlog_from_timetags",
]

_CHUNK = 1 << 18
HEADER_KEYS = ("M", "X", "bins_per_pattern", "params", "seed", "scene_hash")


@dataclass(frozen=True)
class AcquisitionConfig:
    bins_per_pattern: int = 1_000_000
    params: DetectorParams = field(default_factory=DetectorParams)
    seed: int = 0

    def __post_init__(self):
        if int(self.bins_per_pattern) < 1:
            raise ConfigError(f"bins_per_pattern must be >= 1, got {self.bins_per_pattern}")


def pattern_rng(seed: int, t: int) -> np.random.Generator:
    """Counter-based Philox substream keyed by ``(seed, t)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(t),))))


def sample_bins(n_bar_t: float, params: DetectorParams, rng: np.random.Generator,
                size: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``size`` independent bins; returns int64 count arrays ``(n1, n2)``."""
    if not (n_bar_t >= 0 and math.isfinite(n_bar_t)):
        raise ConfigError(f"mean photon number must be finite and >= 0, got {n_bar_t}")
    if n_bar_t > 0:
        intensity = rng.exponential(n_bar_t, size)
    else:
        intensity = np.zeros(size)
    n1 = rng.poisson(params.eta_a * params.split_a * intensity + params.nu_a)
    n2 = rng.poisson(params.eta_b * params.split_b * intensity + params.nu_b)
    return n1, n2


def sample_bin(n_bar_t: float, params: DetectorParams, rng: np.random.Generator) -> tuple[int, int]:
    n1, n2 = sample_bins(n_bar_t, params, rng, 1)
    return int(n1[0]), int(n2[0])


@dataclass(eq=False)
class EventLog:
    """Per-bin two-arm counts for a set of patterns.

    ``n1[k, b]`` and ``n2[k, b]`` are the arm-a / arm-b counts of bin ``b`` of
    pattern ``patterns[k]``.
    """

    n1: np.ndarray = field(repr=False)
    n2: np.ndarray = field(repr=False)
    patterns: np.ndarray
    M: int
    X: int
    params: DetectorParams = field(default_factory=DetectorParams)
    seed: int | None = None
    scene_hash: str | None = None

    def __post_init__(self):
        self.patterns = np.asarray(self.patterns, dtype=np.int64)
        if self.n1.shape != self.n2.shape or self.n1.ndim != 2:
            raise ConfigError("n1 and n2 must be 2-D arrays of equal shape")
        if self.n1.shape[0] != self.patterns.size:
            raise ConfigError("one row of counts is required per pattern")
        if self.patterns.size and (self.patterns.min() < 0 or self.patterns.max() >= self.M):
            raise ConfigError(f"pattern indices must lie in [0, {self.M})")
        if np.unique(self.patterns).size != self.patterns.size:
            raise ConfigError("duplicate pattern indices in event log")

    @property
    def bins_per_pattern(self) -> int:
        return self.n1.shape[1]

    @property
    def n_records(self) -> int:
        return self.n1.size

    def header(self) -> dict:
        head = {
            "M": int(self.M),
            "X": int(self.X),
            "bins_per_pattern": int(self.bins_per_pattern),
            "params": self.params.to_dict(),
            "seed": self.seed,
            "scene_hash": self.scene_hash,
        }
        if not np.array_equal(self.patterns, np.arange(self.M)):
            head["patterns"] = [int(t) for t in self.patterns]
        return head

    def records(self) -> Iterator[tuple[int, int, int, int]]:
        """All ``(t, bin, n1, n2)`` records in (t, bin) order, zeros included."""
        for k, t in enumerate(self.patterns):
            for b, (c1, c2) in enumerate(zip(self.n1[k].tolist(), self.n2[k].tolist())):
                yield int(t), b, c1, c2

    @cached_property
    def joint_histograms(self) -> np.ndarray:
        """Counts of each ``(n1, n2)`` outcome per pattern, shape ``(P, K1, K2)``."""
        k1 = int(self.n1.max(initial=0)) + 1
        k2 = int(self.n2.max(initial=0)) + 1
        out = np.zeros((self.patterns.size, k1, k2), dtype=np.int64)
        for k in range(self.patterns.size):
            codes = self.n1[k].astype(np.int64) * k2 + self.n2[k]
            out[k] = np.bincount(codes, minlength=k1 * k2).reshape(k1, k2)
        out.setflags(write=False)
        return out

    def digest(self) -> str:
        """SHA-256 over the header and the raw count arrays (dtype independent)."""
        h = hashlib.sha256(json.dumps(self.header(), sort_keys=True).encode())
        h.update(self.patterns.astype("<i8").tobytes())
        h.update(np.ascontiguousarray(self.n1, dtype="<u2").tobytes())
        h.update(np.ascontiguousarray(self.n2, dtype="<u2").tobytes())
        return h.hexdigest()

    def subset(self, patterns: Sequence[int]) -> "EventLog":
        index = {int(t): k for k, t in enumerate(self.patterns)}
        rows = [index[int(t)] for t in patterns]
        return EventLog(self.n1[rows], self.n2[rows], np.asarray(patterns), self.M, self.X,
                        self.params, self.seed, self.scene_hash)


def _count_dtype(max_count: int):
    if max_count <= np.iinfo(np.uint8).max:
        return np.uint8
    if max_count <= np.iinfo(np.uint16).max:
        return np.uint16
    raise ConfigError(f"photon count {max_count} exceeds the supported range")


def run_acquisition(scene: SceneImage, q: SensingMatrix, cfg: AcquisitionConfig,
                    threads: int = 1) -> EventLog:
    """Simulate ``cfg.bins_per_pattern`` bins for every pattern of ``q``.

    Pattern ``t`` draws from its own substream ``pattern_rng(cfg.seed, t)`` so
    the result does not depend on ``threads`` or on scheduling order.
    """
    means = pattern_means(q, scene).n_bar
    m, bins = q.m_rows, int(cfg.bins_per_pattern)
    n1 = np.zeros((m, bins), dtype=np.uint8)
    n2 = np.zeros((m, bins), dtype=np.uint8)
    wide: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def work(t: int) -> None:
        rng = pattern_rng(cfg.seed, t)
        row1 = np.empty(bins, dtype=np.int64)
        row2 = np.empty(bins, dtype=np.int64)
        for start in range(0, bins, _CHUNK):
            stop = min(bins, start + _CHUNK)
            row1[start:stop], row2[start:stop] = sample_bins(means[t], cfg.params, rng, stop - start)
        if max(row1.max(), row2.max()) > 255:
            wide[t] = (row1, row2)
        else:
            n1[t] = row1
            n2[t] = row2

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(m)))
    else:
        for t in range(m):
            work(t)

    if wide:
        top = max(int(max(a.max(), b.max())) for a, b in wide.values())
        dtype = _count_dtype(top)
        n1, n2 = n1.astype(dtype), n2.astype(dtype)
        for t in sorted(wide):
            n1[t], n2[t] = wide[t]
    return EventLog(n1, n2, np.arange(m), m, scene.X, cfg.params, int(cfg.seed), scene.digest())


def merge_logs(a: EventLog, b: EventLog) -> EventLog:
    """Union of two logs of the same session with disjoint pattern sets."""
    if (a.M, a.X, a.bins_per_pattern) != (b.M, b.X, b.bins_per_pattern):
        raise ConfigError("cannot merge event logs with different M, X or bins_per_pattern")
    if np.intersect1d(a.patterns, b.patterns).size:
        raise ConfigError("cannot merge event logs with overlapping patterns")
    patterns = np.concatenate([a.patterns, b.patterns])
    order = np.argsort(patterns, kind="stable")
    dtype = np.result_type(a.n1, b.n1)
    n1 = np.concatenate([a.n1, b.n1]).astype(dtype)[order]
    n2 = np.concatenate([a.n2, b.n2]).astype(dtype)[order]
    return EventLog(n1, n2, patterns[order], a.M, a.X, a.params, a.seed, a.scene_hash)


# ---------------------------------------------------------------------------
# event-log files


def write_event_log(path, log: EventLog) -> None:
    """Sparse CSV: JSON header line, ``t,bin,n1,n2`` rows for non-empty bins,
    and a ``#total_bins`` footer."""
    with open(path, "w", newline="\n") as fh:
        fh.write("# " + json.dumps(log.header(), sort_keys=True) + "\n")
        fh.write("t,bin,n1,n2\n")
        for k, t in enumerate(log.patterns):
            nz = np.flatnonzero((log.n1[k] > 0) | (log.n2[k] > 0))
            for lo in range(0, nz.size, _CHUNK):
                idx = nz[lo:lo + _CHUNK]
                block = np.column_stack([np.full(idx.size, t), idx, log.n1[k, idx], log.n2[k, idx]])
                # one C-level format call per chunk; np.savetxt is far slower
                fh.write(("%d,%d,%d,%d\n" * idx.size) % tuple(block.ravel().tolist()))
        fh.write(f"#total_bins {log.n_records}\n")


def read_event_log(path) -> EventLog:
    """Parse a file written by :func:`write_event_log`, validating its schema."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DataFormatError("event log: missing '#' JSON header", "line 1")
    try:
        head = json.loads(lines[0][1:])
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"event log: header is not valid JSON ({exc.msg})", "line 1") from exc
    if not isinstance(head, dict):
        raise DataFormatError("event log: header must be a JSON object", "line 1")
    for key in HEADER_KEYS:
        if key not in head:
            raise DataFormatError(f"event log: header is missing key {key!r}", "line 1")
    try:
        m, x, bins = int(head["M"]), int(head["X"]), int(head["bins_per_pattern"])
        params = DetectorParams.from_dict(head["params"])
    except (TypeError, ValueError, KeyError) as exc:
        raise DataFormatError(f"event log: invalid header value ({exc})", "line 1") from exc
    try:
        patterns = np.asarray(head.get("patterns", range(m)), dtype=np.int64).ravel()
    except (TypeError, ValueError) as exc:
        raise DataFormatError("event log: 'patterns' must be a list of integers", "line 1") from exc
    if m < 1 or bins < 1 or (patterns.size and (patterns.min() < 0 or patterns.max() >= m)):
        raise DataFormatError("event log: header M, bins_per_pattern or patterns out of range", "line 1")

    if len(lines) < 2 or lines[1].strip() != "t,bin,n1,n2":
        raise DataFormatError("event log: expected column line 't,bin,n1,n2'", "line 2")
    body = lines[2:]
    fast = _parse_rows_fast(body)
    if fast is None:
        fast = _parse_rows_checked(body)
    data, footer = fast
    if footer != patterns.size * bins:
        raise DataFormatError(
            f"event log: total_bins {footer} != {patterns.size} patterns x {bins} bins",
            f"line {len(lines)}")

    lookup = np.full(m, -1, dtype=np.int64)
    lookup[patterns] = np.arange(patterns.size)
    t, b, c1, c2 = data.T
    bad = np.flatnonzero((t < 0) | (t >= m) | (lookup[np.clip(t, 0, m - 1)] < 0)
                         | (b < 0) | (b >= bins) | (c1 < 0) | (c2 < 0))
    if bad.size:
        k = int(bad[0])
        raise DataFormatError(f"event log: invalid record {data[k].tolist()} (pattern outside the log, "
                              f"bin outside [0, {bins}) or negative count)", f"line {k + 3}")
    n1 = np.zeros((patterns.size, bins), dtype=np.int64)
    n2 = np.zeros((patterns.size, bins), dtype=np.int64)
    n1[lookup[t], b] = c1
    n2[lookup[t], b] = c2
    top = int(max(n1.max(initial=0), n2.max(initial=0)))
    dtype = _count_dtype(top)
    return EventLog(n1.astype(dtype), n2.astype(dtype), patterns, m, x, params,
                    head["seed"], head["scene_hash"])


def _parse_rows_fast(body: list[str]):
    """Vectorized parse of well-formed data rows; None if anything looks off."""
    if not body or not body[-1].startswith("#total_bins "):
        return None
    rows = body[:-1]
    if any(not r or r[0] == "#" for r in rows):
        return None
    try:
        footer = int(body[-1].split()[1])
        flat = np.array(",".join(rows).split(","), dtype=np.int64) if rows else np.zeros(0, np.int64)
    except (ValueError, IndexError):
        return None
    if flat.size != 4 * len(rows):
        return None
    return flat.reshape(-1, 4), footer


def _parse_rows_checked(body: list[str]):
    """Line-by-line parse that reports the first malformed line."""
    footer = None
    rows = []
    for lineno, line in enumerate(body, 3):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "total_bins":
                try:
                    footer = int(parts[1])
                except ValueError as exc:
                    raise DataFormatError("event log: bad total_bins footer", f"line {lineno}") from exc
                continue
            raise DataFormatError(f"event log: unexpected comment {line!r}", f"line {lineno}")
        if footer is not None:
            raise DataFormatError("event log: data after the total_bins footer", f"line {lineno}")
        fields_ = line.split(",")
        if len(fields_) != 4:
            raise DataFormatError(f"event log: expected 4 fields, got {len(fields_)}", f"line {lineno}")
        try:
            rows.append([int(v) for v in fields_])
        except ValueError as exc:
            raise DataFormatError("event log: non-integer field", f"line {lineno}") from exc
    if footer is None:
        raise DataFormatError("event log: missing '#total_bins' footer", f"line {len(body) + 2}")
    return np.array(rows, dtype=np.int64).reshape(-1, 4), footer


# ---------------------------------------------------------------------------
# time tags


def bin_timetags(timestamps, bin_width: float, n_bins: int | None = None,
                 start: float = 0.0) -> np.ndarray:
    """Count arrivals in half-open bins ``[start + k w, start + (k+1) w)``.

    ``timestamps`` must be sorted; they are never sorted silently.  Without
    ``n_bins`` the bins cover the last arrival.
    """
    ts = np.asarray(timestamps, dtype=float)
    if bin_width <= 0:
        raise ConfigError(f"bin width must be > 0, got {bin_width}")
    if ts.size and np.any(np.diff(ts) < 0):
        bad = int(np.flatnonzero(np.diff(ts) < 0)[0]) + 1
        raise DataFormatError("time tags are not sorted", f"event {bad}")
    idx = np.floor((ts - start) / bin_width).astype(np.int64)
    if idx.size and idx[0] < 0:
        raise DataFormatError("time tag precedes the start of the first bin", "event 0")
    if n_bins is None:
        n_bins = int(idx[-1]) + 1 if idx.size else 0
    idx = idx[idx < n_bins]
    return np.bincount(idx, minlength=n_bins).astype(np.int64)


def read_timetags(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``arm,timestamp_ns`` CSV; arms are ``a``/``b`` (or ``1``/``2``)."""
    arms = {"a": [], "b": []}
    alias = {"a": "a", "1": "a", "b": "b", "2": "b"}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if lineno == 1 and line.replace(" ", "") == "arm,timestamp_ns":
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise DataFormatError(f"timetag CSV: expected 2 fields, got {len(parts)}", f"line {lineno}")
            arm = alias.get(parts[0].lower())
            if arm is None:
                raise DataFormatError(f"timetag CSV: unknown arm {parts[0]!r}", f"line {lineno}")
            try:
                arms[arm].append(float(parts[1]))
            except ValueError as exc:
                raise DataFormatError("timetag CSV: bad timestamp", f"line {lineno}") from exc
    return np.array(arms["a"]), np.array(arms["b"])


def eventlog_from_timetags(ts_a, ts_b, bin_width_ns: float = 1000.0,
                           bins_per_pattern: int | None = None,
                           n_patterns: int | None = None, X: int = 0,
                           params: DetectorParams | None = None) -> EventLog:
    """Bin two time-tag streams and cut them into consecutive pattern windows.

    Pattern ``t`` occupies bins ``[t * bins_per_pattern, (t+1) * bins_per_pattern)``.
    """
    last = max([ts[-1] for ts in (np.asarray(ts_a), np.asarray(ts_b)) if len(ts)], default=0.0)
    total = int(math.floor(last / bin_width_ns)) + 1
    if bins_per_pattern is None:
        bins_per_pattern = total if n_patterns is None else math.ceil(total / n_patterns)
    if n_patterns is None:
        n_patterns = max(1, math.ceil(total / bins_per_pattern))
    n_bins = n_patterns * bins_per_pattern
    c1 = bin_timetags(ts_a, bin_width_ns, n_bins)
    c2 = bin_timetags(ts_b, bin_width_ns, n_bins)
    dtype = _count_dtype(int(max(c1.max(initial=0), c2.max(initial=0))))
    shape = (n_patterns, bins_per_pattern)
    return EventLog(c1.reshape(shape).astype(dtype), c2.reshape(shape).astype(dtype),
                    np.arange(n_patterns), n_patterns, X, params or DetectorParams())
