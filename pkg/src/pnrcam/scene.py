"""Scenes, random binary sensing patterns and per-pattern mean photon numbers."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

__all__ = [
    "SceneImage",
    "SensingMatrix",
    "PatternMeans",
    "make_pattern_set",
    "pattern_means",
    "builtin_scene",
    "BUILTIN_SCENES",
    "load_scene",
    "save_scene",
    "read_pgm",
    "write_pgm",
    "save_matrix",
    "load_matrix",
]


@dataclass(frozen=True)
class SceneImage:
    """Mean signal photons per pixel per time bin, stored row-major."""

    width: int
    height: int
    s0: np.ndarray = field(repr=False)

    def __post_init__(self):
        s0 = np.ascontiguousarray(self.s0, dtype=float).ravel()
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"scene dimensions must be >= 1, got {self.width}x{self.height}")
        if s0.size != self.width * self.height:
            raise ConfigError(f"scene has {s0.size} pixels, expected {self.width}x{self.height}")
        if not np.all(np.isfinite(s0)) or np.any(s0 < 0):
            raise ConfigError("scene values must be finite and >= 0")
        s0.setflags(write=False)
        object.__setattr__(self, "s0", s0)

    @property
    def X(self) -> int:
        return self.width * self.height

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def image(self) -> np.ndarray:
        return self.s0.reshape(self.shape)

    @property
    def support(self) -> np.ndarray:
        """Boolean mask of illuminated pixels."""
        return self.s0 > 0

    def scaled(self, factor: float) -> "SceneImage":
        return SceneImage(self.width, self.height, self.s0 * factor)

    def digest(self) -> str:
        h = hashlib.sha256(f"{self.width}x{self.height}:".encode())
        h.update(self.s0.astype("<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SensingMatrix:
    """``M x X`` binary pattern matrix; row ``t`` is the pattern ``Q_t``."""

    bits: np.ndarray = field(repr=False)
    seed: int | None = None
    density: float | None = None

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ConfigError(f"sensing matrix must be a non-empty 2-D array, got shape {bits.shape}")
        if np.any(bits > 1):
            raise ConfigError("sensing matrix entries must be 0 or 1")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def m_rows(self) -> int:
        return self.bits.shape[0]

    @property
    def x_cols(self) -> int:
        return self.bits.shape[1]

    def as_float(self) -> np.ndarray:
        return self.bits.astype(float)

    def rows_unique(self) -> bool:
        return len({row.tobytes() for row in np.packbits(self.bits, axis=1)}) == self.m_rows

    def take(self, rows) -> "SensingMatrix":
        return SensingMatrix(self.bits[np.asarray(rows)], self.seed, self.density)


@dataclass(frozen=True)
class PatternMeans:
    n_bar: np.ndarray = field(repr=False)

    def __len__(self):
        return self.n_bar.size


def make_pattern_set(x_cols: int, m_rows: int, density: float = 0.5, seed: int = 0) -> SensingMatrix:
    """Draw ``m_rows`` distinct Bernoulli(density) binary rows of length ``x_cols``.

    Entries come from a Philox stream keyed by ``seed``; duplicate rows are
    redrawn from the same stream until every row is unique.
    """
    x_cols, m_rows = int(x_cols), int(m_rows)
    if x_cols < 1 or m_rows < 1:
        raise ConfigError(f"need x_cols >= 1 and m_rows >= 1, got {x_cols}, {m_rows}")
    if not (0.0 < density < 1.0):
        raise ConfigError(f"density must lie in (0, 1), got {density}")
    if x_cols < 63 and m_rows > 2**x_cols:
        raise ConfigError(f"cannot draw {m_rows} unique binary rows of length {x_cols}")

    rng = np.random.Generator(np.random.Philox(int(seed)))
    bits = (rng.random((m_rows, x_cols)) < density).astype(np.uint8)
    seen: dict[bytes, int] = {}
    # Redraw budget is generous; exhausting it means the row space is too small.
    budget = 1000 * m_rows + 10000
    for t in range(m_rows):
        key = bits[t].tobytes()
        while key in seen:
            budget -= 1
            if budget < 0:
                raise ConfigError(
                    f"could not draw {m_rows} unique rows of length {x_cols} at density {density}")
            bits[t] = rng.random(x_cols) < density
            key = bits[t].tobytes()
        seen[key] = t
    return SensingMatrix(bits, seed=int(seed), density=float(density))


def pattern_means(q: SensingMatrix, scene: SceneImage) -> PatternMeans:
    """``n_bar_t = Q_t . s0`` for every pattern (no normalization)."""
    if q.x_cols != scene.X:
        raise ConfigError(f"sensing matrix has {q.x_cols} columns but the scene has {scene.X} pixels")
    n_bar = q.as_float() @ scene.s0
    return PatternMeans(n_bar)


# ---------------------------------------------------------------------------
# builtin scenes


def _block(w: int, h: int) -> np.ndarray:
    img = np.zeros((h, w))
    bw, bh = max(1, w // 2), max(1, h // 2)
    x0, y0 = (w - bw) // 2, (h - bh) // 2
    img[y0:y0 + bh, x0:x0 + bw] = 1.0
    return img


def _checker(w: int, h: int) -> np.ndarray:
    tile_w, tile_h = max(1, w // 4), max(1, h // 4)
    yy, xx = np.mgrid[0:h, 0:w]
    return (((xx // tile_w) + (yy // tile_h)) % 2).astype(float)


def _hbar(w: int, h: int) -> np.ndarray:
    """Binary raster of the reduced-Planck glyph: an 'h' with a crossbar."""
    # strokes as (x0, y0, x1, y1) rectangles in unit coordinates
    strokes = [
        (0.22, 0.10, 0.36, 0.90),  # ascender
        (0.36, 0.45, 0.70, 0.58),  # shoulder
        (0.64, 0.45, 0.78, 0.90),  # right leg
        (0.10, 0.26, 0.52, 0.36),  # bar through the ascender
    ]
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    img = np.zeros((h, w))
    for x0, y0, x1, y1 in strokes:
        img[(u >= x0) & (u < x1) & (v >= y0) & (v < y1)] = 1.0
    return img


BUILTIN_SCENES = {"block": _block, "checker": _checker, "hbar": _hbar}


def builtin_scene(name: str, width: int = 64, height: int = 64, peak: float = 0.8) -> SceneImage:
    """A binary test object whose bright pixels carry ``peak`` photons per bin."""
    if name not in BUILTIN_SCENES:
        raise ConfigError(f"unknown builtin scene {name!r}; choose from {sorted(BUILTIN_SCENES)}")
    if not (peak >= 0 and math.isfinite(peak)):
        raise ConfigError(f"peak must be finite and >= 0, got {peak}")
    if width < 1 or height < 1:
        raise ConfigError(f"scene dimensions must be >= 1, got {width}x{height}")
    img = BUILTIN_SCENES[name](int(width), int(height))
    return SceneImage(int(width), int(height), img.ravel() * peak)


# ---------------------------------------------------------------------------
# PGM I/O


def read_pgm(path) -> tuple[np.ndarray, int, dict]:
    """Parse a P2 (ASCII) or P5 (binary) PGM file.

    Returns ``(image, maxval, meta)`` where ``meta`` collects ``key=value``
    pairs found in header comments.
    """
    data = Path(path).read_bytes()
    pos = 0
    meta: dict[str, str] = {}

    def skip_space_and_comments():
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c.isspace():
                pos += 1
            elif c == b"#":
                end = data.find(b"\n", pos)
                end = len(data) if end < 0 else end
                comment = data[pos + 1:end].strip()
                if b"=" in comment:
                    k, _, v = comment.partition(b"=")
                    meta[k.strip().decode("ascii", "replace")] = v.strip().decode("ascii", "replace")
                pos = end + 1
            else:
                break

    def token(what: str) -> bytes:
        nonlocal pos
        skip_space_and_comments()
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataFormatError(f"PGM: expected {what}, found end of file", f"byte {start}")
        return data[start:pos]

    magic = token("magic number")
    if magic not in (b"P2", b"P5"):
        raise DataFormatError(f"PGM: bad magic number {magic!r}", "byte 0")
    fields = []
    for what in ("width", "height", "maxval"):
        start = pos
        tok = token(what)
        if not tok.isdigit():
            raise DataFormatError(f"PGM: {what} must be a positive integer, got {tok!r}", f"byte {start}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1 or not (1 <= maxval <= 65535):
        raise DataFormatError(f"PGM: invalid header values {width}x{height} maxval={maxval}", f"byte {pos}")
    n = width * height

    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = n * dtype.itemsize
        if len(data) - pos < need:
            raise DataFormatError(
                f"PGM: pixel data truncated, expected {need} bytes, found {len(data) - pos}", f"byte {pos}")
        img = np.frombuffer(data, dtype=dtype, count=n, offset=pos).astype(np.int64)
    else:
        vals = []
        for _ in range(n):
            start = pos
            tok = token("pixel value")
            if not tok.isdigit():
                raise DataFormatError(f"PGM: non-numeric pixel value {tok!r}", f"byte {start}")
            vals.append(int(tok))
        img = np.array(vals, dtype=np.int64)
    bad = np.flatnonzero(img > maxval)
    if bad.size:
        raise DataFormatError(f"PGM: pixel {bad[0]} exceeds maxval {maxval}", f"pixel {bad[0]}")
    return img.reshape(height, width), maxval, meta


def write_pgm(path, image: np.ndarray, maxval: int = 65535, comments: dict | None = None) -> None:
    """Write an integer image as binary PGM (P5); 16-bit when ``maxval > 255``."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ConfigError("PGM images must be 2-D")
    if np.any(image < 0) or np.any(image > maxval):
        raise ConfigError("PGM pixel values out of range")
    h, w = image.shape
    header = b"P5\n"
    for k, v in (comments or {}).items():
        header += f"# {k}={v}\n".encode("ascii")
    header += f"{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    Path(path).write_bytes(header + np.asarray(image).astype(dtype).tobytes())


def load_scene(path, peak: float | None = None) -> SceneImage:
    """Load a grayscale PGM and scale it linearly so the brightest pixel equals ``peak``.

    When ``peak`` is omitted the ``# peak=`` header comment written by
    :func:`save_scene` is used; without one, values are mapped to [0, 1].
    """
    img, maxval, meta = read_pgm(path)
    if peak is None:
        try:
            peak = float(meta["peak"]) if "peak" in meta else 1.0
        except ValueError as exc:
            raise DataFormatError(f"PGM: bad peak comment {meta['peak']!r}") from exc
    if not (peak >= 0 and math.isfinite(peak)):
        raise ConfigError(f"peak must be finite and >= 0, got {peak}")
    top = img.max()
    s0 = img.astype(float) * (peak / top) if top > 0 else np.zeros(img.shape)
    return SceneImage(img.shape[1], img.shape[0], s0.ravel())


def save_scene(path, scene: SceneImage, maxval: int = 65535) -> None:
    """Write a scene as 16-bit PGM with its peak recorded in a header comment."""
    peak = float(scene.s0.max())
    levels = np.zeros(scene.shape, dtype=np.int64)
    if peak > 0:
        levels = np.rint(scene.image / peak * maxval).astype(np.int64)
    write_pgm(path, levels, maxval, comments={"peak": repr(peak)})


# ---------------------------------------------------------------------------
# sensing-matrix export


def save_matrix(path, q: SensingMatrix) -> None:
    """CSV of 0/1 rows plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    np.savetxt(path, q.bits, fmt="%d", delimiter=",")
    sidecar = {"seed": q.seed, "density": q.density, "M": q.m_rows, "X": q.x_cols}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_matrix(path) -> SensingMatrix:
    path = Path(path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [int(v) for v in line.split(",")]
            except ValueError as exc:
                raise DataFormatError("matrix CSV: non-integer entry", f"line {lineno}") from exc
            if rows and len(row) != len(rows[0]):
                raise DataFormatError(f"matrix CSV: expected {len(rows[0])} columns, got {len(row)}",
                                      f"line {lineno}")
            if any(v not in (0, 1) for v in row):
                raise DataFormatError("matrix CSV: entries must be 0 or 1", f"line {lineno}")
            rows.append(row)
    if not rows:
        raise DataFormatError("matrix CSV: no rows", "line 1")
    sidecar_path = path.with_suffix(path.suffix + ".json")
    seed = density = None
    if sidecar_path.exists():
        meta = json.loads(sidecar_path.read_text())
        seed, density = meta.get("seed"), meta.get("density")
        if meta.get("M") not in (None, len(rows)) or meta.get("X") not in (None, len(rows[0])):
            raise DataFormatError("matrix sidecar dimensions do not match the CSV body")
    return SensingMatrix(np.array(rows, dtype=np.uint8), seed=seed, density=density)
