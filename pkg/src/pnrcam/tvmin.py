"""Total-variation regularized compressive-sensing reconstruction.

Minimizes the anisotropic TV objective

    F(s) = sum_i |(D_x s)_i| + |(D_y s)_i| + (mu / 2) ||A s - y||^2

with an augmented-Lagrangian splitting ``w = D s``: soft-thresholding for the
gradient block, conjugate gradients for the image block, and scaled multiplier
updates.  Forward differences use a replicate boundary, so the last row and
column of each difference field are zero.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, NumericalError, UndefinedStatisticError
from .scene import SensingMatrix, write_pgm

__all__ = [
    "SolverConfig",
    "ReconstructionResult",
    "QualityMetrics",
    "tv_gradient",
    "tv_adjoint",
    "total_variation",
    "shrink",
    "conjugate_gradient",
    "reconstruct",
    "quality_metrics",
    "save_reconstruction",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings; ``mu`` and ``beta`` refer to data scaled to unit max."""

    mu: float = 2.0**8
    beta: float = 2.0**5
    max_outer_iters: int = 300
    max_inner_iters: int = 50
    tol: float = 1e-4
    nonneg: bool = False
    boundary: str = "replicate"
    cg_tol: float = 1e-10
    check_divergence: bool = True

    def __post_init__(self):
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise ConfigError(f"mu must be > 0, got {self.mu}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise ConfigError("iteration caps must be >= 1")
        if self.boundary != "replicate":
            raise ConfigError(f"unsupported boundary {self.boundary!r}")


@dataclass
class ReconstructionResult:
    s: np.ndarray = field(repr=False)
    shape: tuple[int, int]
    objective_trace: list[float] = field(repr=False)
    residual: float
    iterations: int
    converged: bool
    scale: float = 1.0

    @property
    def image(self) -> np.ndarray:
        return self.s.reshape(self.shape)


def tv_gradient(image: np.ndarray) -> np.ndarray:
    """Forward differences ``(dx, dy)`` stacked on axis 0, zero on the far edge."""
    u = np.asarray(image, dtype=float)
    if u.ndim != 2:
        raise ConfigError("tv_gradient expects a 2-D image")
    g = np.zeros((2,) + u.shape)
    g[0, :, :-1] = u[:, 1:] - u[:, :-1]
    g[1, :-1, :] = u[1:, :] - u[:-1, :]
    return g


def tv_adjoint(p: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`tv_gradient` (negative divergence)."""
    px, py = p[0], p[1]
    out = np.zeros(px.shape)
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    out[:-1, :] -= py[:-1, :]
    out[1:, :] += py[:-1, :]
    return out


def total_variation(image: np.ndarray) -> float:
    """Anisotropic TV: sum of ``|dx| + |dy|``."""
    return float(np.abs(tv_gradient(image)).sum())


def shrink(v: np.ndarray, threshold: float) -> np.ndarray:
    """Soft threshold, the minimizer of ``|w| + (w - v)^2 / (2 threshold)``."""
    return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)


def conjugate_gradient(apply, b: np.ndarray, x0: np.ndarray, max_iter: int,
                       tol: float) -> tuple[np.ndarray, int]:
    """Plain CG for a symmetric positive definite operator ``apply``."""
    x = x0.copy()
    r = b - apply(x)
    p = r.copy()
    rs = float(r @ r)
    stop = tol * tol * max(float(b @ b), 1e-300)
    it = 0
    while it < max_iter and rs > stop:
        ap = apply(p)
        denom = float(p @ ap)
        if denom <= 0:
            break
        alpha = rs / denom
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p *= rs_new / rs
        p += r
        rs = rs_new
        it += 1
    return x, it


def _canonical_order(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    # lexicographic on rows, then y, so row permutations give identical input
    keys = [y] + [a[:, j] for j in range(a.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def _as_system(q, y):
    """Resolve a sensing matrix and measurement vector into dense ``(A, y)``.

    Rows whose measurement is flagged missing are dropped.
    """
    from .conditioning import MeasurementVector  # local: avoid import cycle

    a = q.as_float() if isinstance(q, SensingMatrix) else np.asarray(q, dtype=float)
    if isinstance(y, MeasurementVector):
        rows = y.pattern_index[~y.missing]
        vals = y.y[~y.missing]
        a = a[rows]
    else:
        vals = np.asarray(y, dtype=float).ravel()
        if vals.size != a.shape[0]:
            raise ConfigError(f"{a.shape[0]} patterns but {vals.size} measurements")
    return a, np.asarray(vals, dtype=float)


def reconstruct(q, y, shape: tuple[int, int], cfg: SolverConfig | None = None) -> ReconstructionResult:
    """Recover an image of ``shape = (height, width)`` from ``y ~ Q s``.

    ``q`` is a :class:`SensingMatrix` or dense array; ``y`` a
    :class:`~pnrcam.conditioning.MeasurementVector` (missing rows are deleted)
    or a plain vector.  Data are divided by ``max|y|`` before solving and the
    result is scaled back, so ``mu`` is independent of the measurement units.

    The returned iterate and ``objective_trace`` follow the best objective seen
    so far, which makes the trace non-increasing.
    """
    cfg = cfg or SolverConfig()
    a, yv = _as_system(q, y)
    h, w = int(shape[0]), int(shape[1])
    if a.ndim != 2 or a.shape[1] != h * w:
        raise ConfigError(f"sensing matrix has {a.shape[1]} columns, image has {h * w} pixels")
    if a.shape[0] == 0:
        raise ConfigError("no measurements left after removing missing rows")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(yv))):
        raise NumericalError("non-finite sensing matrix or measurements")

    order = _canonical_order(a, yv)
    a = np.ascontiguousarray(a[order])
    yv = yv[order]
    scale = float(np.max(np.abs(yv)))
    if scale == 0.0:
        scale = 1.0
    yn = yv / scale
    mu, beta = cfg.mu, cfg.beta

    def objective(s):
        r = a @ s - yn
        return total_variation(s.reshape(h, w)) + 0.5 * mu * float(r @ r)

    def normal_op(v):
        return mu * (a.T @ (a @ v)) + beta * tv_adjoint(tv_gradient(v.reshape(h, w))).ravel()

    aty = mu * (a.T @ yn)
    s = np.zeros(h * w)
    wv = np.zeros((2, h, w))
    u = np.zeros((2, h, w))
    best = s.copy()
    best_f = objective(s)
    trace: list[float] = []
    rising = 0
    prev_raw = math.inf
    converged = False
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        rhs = aty + beta * tv_adjoint(wv - u).ravel()
        s_new, _ = conjugate_gradient(normal_op, rhs, s, cfg.max_inner_iters, cfg.cg_tol)
        if cfg.nonneg:
            np.maximum(s_new, 0.0, out=s_new)
        grad = tv_gradient(s_new.reshape(h, w))
        wv = shrink(grad + u, 1.0 / beta)
        u += grad - wv

        change = np.linalg.norm(s_new - s) / max(np.linalg.norm(s), 1e-12)
        s = s_new
        raw = objective(s)
        if not math.isfinite(raw):
            raise DivergenceError(f"objective became non-finite at iteration {it}; try a smaller mu")
        if raw <= best_f:
            best_f, best = raw, s.copy()
        trace.append(best_f)

        rising = rising + 1 if raw > prev_raw * (1 + 1e-9) + 1e-12 else 0
        prev_raw = raw
        if cfg.check_divergence and rising >= 3 and raw > 10.0 * trace[0]:
            raise DivergenceError(
                f"objective increased for {rising} consecutive iterations (iteration {it}); "
                f"try a smaller mu than {mu:g}")
        if change < cfg.tol:
            converged = True
            break

    s_out = best * scale
    resid = float(np.linalg.norm(a @ s_out - yv))
    if not np.all(np.isfinite(s_out)):
        raise NumericalError("reconstruction is not finite")
    return ReconstructionResult(s_out, (h, w), trace, resid, it, converged, scale)


@dataclass(frozen=True)
class QualityMetrics:
    correlation: float
    mse: float
    image_snr: float

    def to_dict(self) -> dict:
        return {"correlation": self.correlation, "mse": self.mse, "image_snr": self.image_snr}


def quality_metrics(s, s0, support_mask=None) -> QualityMetrics:
    """Pearson correlation, MSE after the best affine match of ``s`` to ``s0``,
    and the support contrast ``mean(s | support) / mean(s | background)``."""
    s = np.asarray(s, dtype=float).ravel()
    s0 = np.asarray(s0, dtype=float).ravel()
    if s.shape != s0.shape:
        raise ConfigError(f"shape mismatch: {s.shape} vs {s0.shape}")
    if np.ptp(s) == 0 or np.ptp(s0) == 0:
        raise UndefinedStatisticError("correlation undefined for a constant image")
    corr = float(np.corrcoef(s, s0)[0, 1])
    design = np.column_stack([s, np.ones_like(s)])
    coef, *_ = np.linalg.lstsq(design, s0, rcond=None)
    mse = float(np.mean((design @ coef - s0) ** 2))
    mask = (s0 > 0) if support_mask is None else np.asarray(support_mask, dtype=bool).ravel()
    if mask.all() or not mask.any():
        snr = math.nan
    else:
        off = float(s[~mask].mean())
        snr = float(s[mask].mean()) / off if off != 0 else math.inf
    return QualityMetrics(corr, mse, snr)


def save_reconstruction(stem, result: ReconstructionResult, extra: dict | None = None) -> None:
    """Write ``<stem>.pgm`` (16-bit, min-max scaled), ``<stem>.json`` with the
    scaling, and ``<stem>.csv`` with the raw pixel values."""
    stem = Path(stem)
    img = result.image
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    levels = np.zeros(img.shape, dtype=np.int64) if span == 0 else np.rint((img - lo) / span * 65535)
    write_pgm(stem.with_suffix(".pgm"), levels.astype(np.int64), 65535)
    meta = {"min": lo, "max": hi, "maxval": 65535, "shape": list(result.shape),
            "iterations": result.iterations, "converged": result.converged,
            "residual": result.residual}
    meta.update(extra or {})
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    np.savetxt(stem.with_suffix(".csv"), img, delimiter=",", fmt="%.17g")
