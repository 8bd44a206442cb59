"""End-to-end experiments: simulate, condition, reconstruct, analyze.

Experiment configs are flat ``key = value`` text files with JSON values and
``#`` comments, for example::

    # hbar target, dim illumination
    scene.name = "hbar"
    scene.pattern_n_bar = 0.8
    sensing.fraction = 0.25
    detector.nu_a = 2.0
    rules = ["none", "post:0", "post:7"]

Keys are grouped by prefix (``scene``, ``sensing``, ``detector``,
``acquisition``, ``solver``) plus top-level ``rules``, ``out`` and ``threads``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .conditioning import (ConditioningRule, SNRCurve, condition_events, conditional_histogram,
                           snr_post, snr_sub, write_measurements)
from .errors import (ConfigError, DataFormatError, InfiniteSNRError, NumericalError, PnrcamError,
                     StarvedConditionError, UndefinedStatisticError)
from .photon_model import DetectorParams, g2_from_counts, poisson_pmf
from .sampler import (AcquisitionConfig, EventLog, eventlog_from_timetags, read_event_log,
                      read_timetags, run_acquisition, write_event_log)
from .scene import (BUILTIN_SCENES, SceneImage, SensingMatrix, builtin_scene, load_scene,
                    make_pattern_set, pattern_means, save_matrix, save_scene)
from .tvmin import SolverConfig, quality_metrics, reconstruct, save_reconstruction

__all__ = [
    "SceneSpec",
    "SensingSpec",
    "ExperimentConfig",
    "RuleReport",
    "ExperimentReport",
    "load_config",
    "parse_config",
    "build_scene",
    "build_matrix",
    "calibrate_scene",
    "run_experiment",
    "sweep_snr",
    "write_sweep_csv",
    "empirical_snr",
    "ingest",
    "with_overrides",
]


@dataclass(frozen=True)
class SceneSpec:
    """Builtin name or PGM path, plus the brightness target.

    ``peak`` sets the brightest pixel (photons per bin); ``pattern_n_bar``
    instead rescales the scene so the mean of ``Q_t . s0`` over the pattern set
    equals the given value.  At most one of the two may be set; with neither,
    builtins use a peak of 0.8 and files keep their recorded scaling.
    """

    name: str = "hbar"
    width: int = 32
    height: int = 32
    peak: float | None = None
    pattern_n_bar: float | None = None

    def __post_init__(self):
        if self.peak is not None and self.pattern_n_bar is not None:
            raise ConfigError("set at most one of scene.peak and scene.pattern_n_bar")
        for key in ("peak", "pattern_n_bar"):
            v = getattr(self, key)
            if v is not None and not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"scene.{key} must be finite and >= 0, got {v}")
        if self.width < 1 or self.height < 1:
            raise ConfigError("scene dimensions must be >= 1")


@dataclass(frozen=True)
class SensingSpec:
    fraction: float = 0.25
    density: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"sensing.fraction must lie in (0, 1], got {self.fraction}")
        if not 0 < self.density < 1:
            raise ConfigError(f"sensing.density must lie in (0, 1), got {self.density}")


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    sensing: SensingSpec = field(default_factory=SensingSpec)
    params: DetectorParams = field(default_factory=DetectorParams)
    bins_per_pattern: int = 200_000
    seed: int = 0
    rules: tuple[ConditioningRule, ...] = (ConditioningRule(),)
    solver: SolverConfig = field(default_factory=SolverConfig)
    out: str | None = None
    threads: int = 1
    save_log: bool = False

    def __post_init__(self):
        rules = tuple(ConditioningRule.parse(r) if isinstance(r, str) else r for r in self.rules)
        if not rules:
            raise ConfigError("at least one conditioning rule is required")
        if len(set(map(str, rules))) != len(rules):
            raise ConfigError("conditioning rules must be distinct")
        object.__setattr__(self, "rules", rules)
        if int(self.bins_per_pattern) < 1:
            raise ConfigError("acquisition.bins_per_pattern must be >= 1")
        if int(self.threads) < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def m_rows(self) -> int:
        x = self.scene.width * self.scene.height
        return max(1, int(round(self.sensing.fraction * x)))

    def to_dict(self) -> dict:
        """Resolved settings as plain JSON values (``out`` and ``threads`` excluded)."""
        return {
            "scene": asdict(self.scene),
            "sensing": asdict(self.sensing),
            "detector": self.params.to_dict(),
            "acquisition": {"bins_per_pattern": int(self.bins_per_pattern), "seed": int(self.seed)},
            "rules": [str(r) for r in self.rules],
            "solver": asdict(self.solver),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_GROUPS = {
    "scene": {f.name for f in fields(SceneSpec)},
    "sensing": {f.name for f in fields(SensingSpec)},
    "detector": {f.name for f in fields(DetectorParams)},
    "acquisition": {"bins_per_pattern", "seed"},
    "solver": {f.name for f in fields(SolverConfig)},
}
_TOP = {"rules", "out", "threads", "save_log"}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse the flat key-value format described in the module docstring."""
    groups: dict[str, dict] = {g: {} for g in _GROUPS}
    top: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        try:
            val = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{lineno}: value for {key!r} is not valid JSON") from exc
        group, _, name = key.rpartition(".")
        if not group and name in _TOP:
            top[name] = val
        elif group in _GROUPS and name in _GROUPS[group]:
            groups[group][name] = val
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    try:
        solver = groups["solver"]
        for k in ("mu", "beta", "tol", "cg_tol"):
            if k in solver:
                solver[k] = float(solver[k])
        acq = groups["acquisition"]
        rules = top.get("rules", ["none"])
        if isinstance(rules, str):
            rules = [rules]
        return ExperimentConfig(
            scene=SceneSpec(**groups["scene"]),
            sensing=SensingSpec(**groups["sensing"]),
            params=DetectorParams.from_dict(groups["detector"]),
            bins_per_pattern=int(acq.get("bins_per_pattern", 200_000)),
            seed=int(acq.get("seed", 0)),
            rules=tuple(rules),
            solver=SolverConfig(**solver),
            out=top.get("out"),
            threads=int(top.get("threads", 1)),
            save_log=bool(top.get("save_log", False)),
        )
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


@contextmanager
def _stage(name: str):
    # re-raise package errors with the pipeline stage prepended
    try:
        yield
    except PnrcamError as exc:
        if str(exc).startswith(f"[{name}]"):
            raise
        raise type(exc)(f"[{name}] {exc}") from exc


def build_scene(spec: SceneSpec) -> SceneImage:
    """Scene at its nominal brightness (``pattern_n_bar`` is applied later)."""
    if spec.name in BUILTIN_SCENES:
        return builtin_scene(spec.name, spec.width, spec.height,
                             0.8 if spec.peak is None else spec.peak)
    scene = load_scene(spec.name, spec.peak)
    if scene.shape != (spec.height, spec.width):
        raise ConfigError(f"scene file is {scene.shape[1]}x{scene.shape[0]}, "
                          f"config says {spec.width}x{spec.height}")
    return scene


def build_matrix(cfg: ExperimentConfig) -> SensingMatrix:
    return make_pattern_set(cfg.scene.width * cfg.scene.height, cfg.m_rows,
                            cfg.sensing.density, cfg.sensing.seed)


def calibrate_scene(scene: SceneImage, q: SensingMatrix, target: float | None) -> SceneImage:
    if target is None:
        return scene
    current = float(pattern_means(q, scene).n_bar.mean())
    if current == 0:
        if target == 0:
            return scene
        raise ConfigError("scene is dark under every pattern; cannot reach scene.pattern_n_bar")
    return scene.scaled(target / current)


@dataclass
class RuleReport:
    rule: str
    status: str
    metrics: dict | None = None
    analytic_snr: float | None = None
    empirical_snr: float | None = None
    g2: float | None = None
    events_total: int = 0
    events_min: int = 0
    events_mean: float = 0.0
    missing: int = 0
    iterations: int | None = None
    converged: bool | None = None
    trace_monotone: bool | None = None
    files: dict = field(default_factory=dict)
    message: str | None = None


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    versions: dict
    scene_hash: str
    log_digest: str
    n_bar_mean: float
    rules: list[RuleReport]
    wall_time: float = 0.0
    # kept in memory only; not serialized
    log: EventLog | None = field(default=None, repr=False)
    results: dict = field(default_factory=dict, repr=False)

    def rule(self, name: str) -> RuleReport:
        for r in self.rules:
            if r.rule == str(ConditioningRule.parse(name)):
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "versions": self.versions,
            "scene_hash": self.scene_hash,
            "log_digest": self.log_digest,
            "n_bar_mean": self.n_bar_mean,
            "image_snr_definition": "mean(s | support) / mean(s | background)",
            "rules": [_clean(asdict(r)) for r in self.rules],
            "wall_time": self.wall_time,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _clean(obj):
    # JSON has no NaN/inf; store them as null
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def _versions() -> dict:
    import scipy

    return {"pnrcam": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _analytic_snr(rule: ConditioningRule, n_bar: float, params: DetectorParams) -> float | None:
    """Analytic SNR of ``rule`` at the pattern-mean photon number, if defined."""
    try:
        if rule.mode == "post":
            return snr_post(n_bar, params, rule.N)
        if rule.mode == "sub":
            return snr_sub(n_bar, params, rule.N)
        if rule.mode == "none" and params.nu_a > 0:
            return (params.eta_a * params.split_a * n_bar + params.nu_a) / params.nu_a
    except InfiniteSNRError:
        return math.inf
    except StarvedConditionError:
        return None
    return None


def empirical_snr(log: EventLog, rule: ConditioningRule) -> float:
    """Pooled statistic of ``rule`` over ``log`` divided by its noise-only value.

    NaN when the rule selects no events, when the noise-only reference
    condition is impossible, or for rules without a noise reference.
    """
    hist = log.joint_histograms.sum(axis=0)
    k1, k2 = hist.shape
    n1 = np.arange(k1)
    p = log.params
    if rule.mode == "post":
        if rule.N >= k1:
            return 0.0
        ref = poisson_pmf(p.nu_a, rule.N)
        frac = hist[rule.N].sum() / hist.sum()
        return math.inf if ref == 0 else float(frac / ref)
    if rule.mode in ("sub", "none"):
        if rule.mode == "none":
            col = hist.sum(axis=1)
        else:
            col = hist[:, rule.N] if rule.N < k2 else np.zeros(k1)
        if col.sum() == 0:
            return math.nan
        mean = float(n1 @ col) / col.sum()
        if rule.mode == "sub" and rule.N > 0 and p.nu_b == 0:
            return math.nan  # noise alone never yields n2 = N > 0
        # noise-only arms are independent, so the reference is nu_a for any N
        ref = p.nu_a
        return math.inf if ref == 0 else mean / ref
    return math.nan


def _reconstruct_rule(q, scene, log, rule, solver, n_bar, params):
    rep = RuleReport(str(rule), "ok")
    mv = condition_events(log, rule)
    rep.events_total = int(mv.events_used.sum())
    rep.events_min = int(mv.events_used.min())
    rep.events_mean = float(mv.events_used.mean())
    rep.missing = mv.n_missing
    rep.analytic_snr = _analytic_snr(rule, n_bar, params)
    rep.empirical_snr = empirical_snr(log, rule)
    try:
        rep.g2 = g2_from_counts(conditional_histogram(log, rule))
    except NumericalError:
        rep.g2 = None
    if mv.n_missing == len(mv):
        rep.status = "starved"
        rep.message = f"rule {rule} selected no events for any pattern"
        return rep, mv, None
    result = reconstruct(q, mv, scene.shape, solver)
    try:
        rep.metrics = quality_metrics(result.s, scene.s0).to_dict()
    except UndefinedStatisticError as exc:
        # e.g. every pattern saw zero heralds, so the image is flat
        rep.status = "degenerate"
        rep.message = str(exc)
    rep.iterations = result.iterations
    rep.converged = result.converged
    trace = np.asarray(result.objective_trace)
    rep.trace_monotone = bool(np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]) + 1e-12))
    return rep, mv, result


def _rule_stem(rule: ConditioningRule) -> str:
    return str(rule).replace(":", "_").replace(",", "_")


def run_experiment(cfg: ExperimentConfig, log: EventLog | None = None) -> ExperimentReport:
    """Acquire once, then condition and reconstruct for every rule.

    Passing ``log`` skips simulation (for ingested data); it must match the
    configured pattern set.  With ``cfg.out`` set, writes ``report.json``, the
    scene, the sensing matrix, per-rule measurements and reconstructions, and
    the raw event log when ``cfg.save_log`` is true (it can be large).
    """
    start = time.perf_counter()
    with _stage("scene"):
        scene = build_scene(cfg.scene)
        q = build_matrix(cfg)
        scene = calibrate_scene(scene, q, cfg.scene.pattern_n_bar)
        n_bar = float(pattern_means(q, scene).n_bar.mean())
    with _stage("acquisition"):
        if log is None:
            log = run_acquisition(scene, q, AcquisitionConfig(cfg.bins_per_pattern, cfg.params, cfg.seed),
                                  threads=cfg.threads)
        elif log.M != q.m_rows or (log.X and log.X != q.x_cols):
            raise ConfigError(f"event log has M={log.M}, X={log.X}; config gives "
                              f"M={q.m_rows}, X={q.x_cols}")

    def work(rule):
        with _stage(f"rule {rule}"):
            return _reconstruct_rule(q, scene, log, rule, cfg.solver, n_bar, log.params)

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        outcomes = list(pool.map(work, cfg.rules))

    report = ExperimentReport(cfg.to_dict(), cfg.digest(), _versions(), scene.digest(),
                              log.digest(), n_bar, [o[0] for o in outcomes], log=log,
                              results={str(r): (o[1], o[2]) for r, o in zip(cfg.rules, outcomes)})
    if cfg.out:
        with _stage("output"):
            _write_outputs(Path(cfg.out), cfg, scene, q, log, report)
    report.wall_time = time.perf_counter() - start
    if cfg.out:
        report.write(Path(cfg.out) / "report.json")
    return report


def _write_outputs(out: Path, cfg, scene, q, log, report) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_scene(out / "scene.pgm", scene)
        save_matrix(out / "patterns.csv", q)
        if cfg.save_log:
            write_event_log(out / "events.csv", log)
        for rep in report.rules:
            rule = ConditioningRule.parse(rep.rule)
            mv, result = report.results[rep.rule]
            stem = out / f"rule_{_rule_stem(rule)}"
            write_measurements(stem.with_suffix(".meas.csv"), mv)
            rep.files = {"measurements": stem.with_suffix(".meas.csv").name}
            if result is not None:
                save_reconstruction(stem, result, {"rule": rep.rule})
                rep.files.update({"image": stem.with_suffix(".pgm").name,
                                  "pixels": stem.with_suffix(".csv").name})
    except OSError as exc:
        raise DataFormatError(f"cannot write outputs to {out}: {exc.strerror}") from exc


# ---------------------------------------------------------------------------
# SNR sweeps


def sweep_snr(grid: Iterable[tuple[float, DetectorParams]], scheme: str, N_values: Sequence[int],
              log: EventLog | None = None) -> list[tuple[SNRCurve, list[float]]]:
    """Analytic SNR curves for each ``(n_bar, params)`` in ``grid``.

    Each curve is paired with an empirical overlay from ``log`` (pooled over
    its patterns).  Points whose condition is starved (zero conditional mass
    analytically, or no selected events in the log) hold NaN.
    """
    fn = {"post": snr_post, "sub": snr_sub}.get(scheme)
    if fn is None:
        raise ConfigError(f"scheme must be 'post' or 'sub', got {scheme!r}")
    n_values = [int(n) for n in N_values]
    out = []
    for n_bar, params in grid:
        snr = []
        for n in n_values:
            try:
                snr.append(fn(n_bar, params, n))
            except InfiniteSNRError:
                snr.append(math.inf)
            except StarvedConditionError:
                snr.append(math.nan)
        curve = SNRCurve(n_values, snr, scheme, float(n_bar), params)
        emp = [empirical_snr(log, ConditioningRule(scheme, n)) if log is not None else math.nan
               for n in n_values]
        out.append((curve, emp))
    return out


def write_sweep_csv(path, curves: Sequence[tuple[SNRCurve, list[float]]]) -> None:
    cols = ["scheme", "n_bar", "eta_a", "eta_b", "nu_a", "nu_b", "theta", "N",
            "snr_analytic", "snr_empirical", "starved"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for curve, emp in curves:
            p = curve.params or DetectorParams()
            for n, s, e in zip(curve.N_values, curve.snr, emp):
                writer.writerow([curve.scheme, repr(curve.n_bar), repr(p.eta_a), repr(p.eta_b),
                                 repr(p.nu_a), repr(p.nu_b), repr(p.theta), n,
                                 "" if math.isnan(s) else repr(float(s)),
                                 "" if math.isnan(e) else repr(float(e)),
                                 int(math.isnan(s) or math.isnan(e))])


# ---------------------------------------------------------------------------
# ingest


def _looks_like_event_log(path: Path) -> bool:
    with open(path) as fh:
        return fh.readline().startswith("# {")


def ingest(path, bin_width_ns: float = 1000.0, bins_per_pattern: int | None = None,
           n_patterns: int | None = None, X: int = 0,
           params: DetectorParams | None = None) -> EventLog:
    """Load an event log, or bin a two-arm ``arm,timestamp_ns`` time-tag file."""
    path = Path(path)
    try:
        if _looks_like_event_log(path):
            return read_event_log(path)
        ts_a, ts_b = read_timetags(path)
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc.strerror}") from exc
    return eventlog_from_timetags(ts_a, ts_b, bin_width_ns, bins_per_pattern, n_patterns, X, params)


def with_overrides(cfg: ExperimentConfig, seed: int | None = None, out: str | None = None,
                   threads: int | None = None, rules: Sequence[str] | None = None,
                   save_log: bool | None = None) -> ExperimentConfig:
    """Apply command-line overrides to a config."""
    changes = {}
    if seed is not None:
        changes["seed"] = int(seed)
    if out is not None:
        changes["out"] = out
    if threads is not None:
        changes["threads"] = int(threads)
    if rules:
        changes["rules"] = tuple(rules)
    if save_log:
        changes["save_log"] = True
    return replace(cfg, **changes) if changes else cfg
