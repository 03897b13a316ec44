"""Grid and annotation data model, deterministic RNG, and shared file I/O.

Everything downstream (supervision targets, losses, decoding, metrics,
training) is built on three carriers defined here: ``DenseGrid`` for 2-D
rasters, ``PointAnnotation``/``ImageRecord`` for labeled scenes, and
``Rng`` for reproducible randomness. Grids and records are immutable after
construction and safe to share across threads; an ``Rng`` is single-owner.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

GRID_MAGIC = b"DPG1"
_GRID_HEADER = struct.Struct("<II")


class ToolkitError(Exception):
    """Base class for errors raised by this package."""


class FormatError(ToolkitError):
    """A file exists but its contents do not match the expected format."""


class DataValidationError(ToolkitError):
    """A value violates a documented invariant."""


class DivergenceError(ToolkitError):
    """Training produced a non-finite loss."""


class DenseGrid:
    """Immutable 2-D float64 raster.

    Row-major with y as the row index and x as the column index; the origin
    is the top-left pixel center. Used for images, heatmaps, density maps,
    and gradients alike. All values must be finite.
    """

    __slots__ = ("values",)

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64, order="C")
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataValidationError(
                f"grid must be 2-D with positive dims, got shape {arr.shape}"
            )
        if not np.isfinite(arr).all():
            raise DataValidationError("grid contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("DenseGrid is immutable")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "DenseGrid":
        return cls(np.zeros((height, width)))

    @classmethod
    def from_flat(cls, height: int, width: int, flat) -> "DenseGrid":
        arr = np.asarray(flat, dtype=np.float64)
        if arr.size != height * width:
            raise DataValidationError(
                f"expected {height * width} values for a {height}x{width} grid, "
                f"got {arr.size}"
            )
        return cls(arr.reshape(height, width))

    def __repr__(self) -> str:
        return f"DenseGrid({self.height}x{self.width})"


@dataclass(frozen=True)
class PointAnnotation:
    """A head center (x = column, y = row) with its box extent in pixels."""

    x: float
    y: float
    box_w: float
    box_h: float

    def __post_init__(self):
        for name in ("x", "y", "box_w", "box_h"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v)):
                raise DataValidationError(f"point field {name!r} must be finite, got {v!r}")
        if self.box_w <= 0 or self.box_h <= 0:
            raise DataValidationError(
                f"box extents must be strictly positive, got {self.box_w}x{self.box_h}"
            )


@dataclass(frozen=True)
class ImageRecord:
    """An image with its point annotations.

    ``pixels`` is optional: annotation-only records are valid (e.g. when
    scoring externally produced predictions). When present it must be a
    grayscale grid in [0, 1] matching the declared size.
    """

    id: str
    width: int
    height: int
    points: tuple[PointAnnotation, ...]
    pixels: DenseGrid | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DataValidationError(f"image {self.id!r}: non-positive dimensions")
        object.__setattr__(self, "points", tuple(self.points))
        for i, p in enumerate(self.points):
            if not (0 <= p.x < self.width and 0 <= p.y < self.height):
                raise DataValidationError(
                    f"image {self.id!r}: point {i} at ({p.x}, {p.y}) is outside "
                    f"the {self.width}x{self.height} image"
                )
        if self.pixels is not None:
            if self.pixels.shape != (self.height, self.width):
                raise DataValidationError(
                    f"image {self.id!r}: pixel grid {self.pixels.shape} does not match "
                    f"declared size ({self.height}, {self.width})"
                )
            v = self.pixels.values
            if v.min() < 0.0 or v.max() > 1.0:
                raise DataValidationError(
                    f"image {self.id!r}: pixel intensities must lie in [0, 1]"
                )

    def count(self) -> int:
        return len(self.points)


class Rng:
    """Deterministic pseudo-random stream (PCG64 behind numpy's Generator).

    The same seed yields the same draw sequence on every platform and run.
    ``split`` derives independent child streams via ``SeedSequence.spawn``,
    so subsystems can each own a stream without coupling draw orders.
    """

    __slots__ = ("seed", "_seq", "_gen")

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)) or not 0 <= seed < 2**64:
            raise DataValidationError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @classmethod
    def _from_sequence(cls, seed: int, seq: np.random.SeedSequence) -> "Rng":
        rng = object.__new__(cls)
        rng.seed = seed
        rng._seq = seq
        rng._gen = np.random.Generator(np.random.PCG64(seq))
        return rng

    def split(self, n: int) -> list["Rng"]:
        """Spawn ``n`` independent child streams (deterministic in call order)."""
        return [self._from_sequence(self.seed, child) for child in self._seq.spawn(n)]

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in the half-open range [low, high)."""
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size=size)

    def random(self, size=None):
        return self._gen.random(size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# --- annotation files ---------------------------------------------------

def load_annotations(path) -> list[ImageRecord]:
    """Load point annotations from a JSON file.

    The file is a JSON array of objects
    ``{"id", "width", "height", "points": [{"x", "y", "w", "h"}, ...]}``.
    Structural problems raise :class:`FormatError` (with line context where
    available); out-of-bounds points raise :class:`DataValidationError`
    naming the offending image. No point is ever silently dropped.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not UTF-8 text ({e})") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(doc, list):
        raise FormatError(f"{path}: top level must be a JSON array")

    records = []
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict):
            raise FormatError(f"{path}: entry {i} is not an object")
        rec_id = entry.get("id")
        try:
            rec_id = str(rec_id)
            width = int(entry["width"])
            height = int(entry["height"])
            raw_points = entry["points"]
            if not isinstance(raw_points, list):
                raise TypeError("'points' must be an array")
            points = []
            for rp in raw_points:
                points.append(
                    PointAnnotation(
                        x=float(rp["x"]), y=float(rp["y"]),
                        box_w=float(rp["w"]), box_h=float(rp["h"]),
                    )
                )
        except DataValidationError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: entry {i} (id={rec_id!r}): {e}") from e
        records.append(ImageRecord(rec_id, width, height, tuple(points)))
    return records


def store_annotations(records, path) -> None:
    """Write records to the annotation JSON format (pixels are not stored)."""
    doc = [
        {
            "id": r.id,
            "width": r.width,
            "height": r.height,
            "points": [
                {"x": p.x, "y": p.y, "w": p.box_w, "h": p.box_h} for p in r.points
            ],
        }
        for r in records
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# --- grid files ----------------------------------------------------------

def store_grid(grid: DenseGrid, path) -> None:
    """Write a grid as magic ``DPG1`` + u32 LE height/width + f64 LE payload."""
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(_GRID_HEADER.pack(grid.height, grid.width))
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def load_grid(path) -> DenseGrid:
    """Read a grid file written by :func:`store_grid` (bit-exact round trip)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(GRID_MAGIC) + _GRID_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    if data[: len(GRID_MAGIC)] != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic header")
    height, width = _GRID_HEADER.unpack_from(data, len(GRID_MAGIC))
    if height < 1 or width < 1:
        raise FormatError(f"{path}: non-positive dimensions {height}x{width}")
    offset = len(GRID_MAGIC) + _GRID_HEADER.size
    expected = offset + height * width * 8
    if len(data) != expected:
        raise FormatError(
            f"{path}: length mismatch (header says {height}x{width} = "
            f"{expected} bytes, file has {len(data)})"
        )
    values = np.frombuffer(data, dtype="<f8", offset=offset).reshape(height, width)
    return DenseGrid(values)


# --- image export ---------------------------------------------------------

def _round_half_away(a: np.ndarray) -> np.ndarray:
    # values are non-negative here, so half-away-from-zero == floor(v + 0.5)
    return np.floor(a + 0.5)


def export_pgm(grid: DenseGrid, path, normalize: bool = False) -> None:
    """Export as binary 8-bit PGM.

    With ``normalize`` the value range [min, max] maps linearly to [0, 255]
    (a constant grid maps to all zeros); otherwise values are clamped to
    [0, 1] and scaled. Rounding is half-away-from-zero.
    """
    v = grid.values
    if normalize:
        lo, hi = v.min(), v.max()
        scaled = np.zeros_like(v) if hi == lo else (v - lo) * (255.0 / (hi - lo))
    else:
        scaled = np.clip(v, 0.0, 1.0) * 255.0
    pixels = _round_half_away(scaled).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def export_ppm(rgb: np.ndarray, path) -> None:
    """Export an (H, W, 3) uint8 array as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataValidationError(f"expected (H, W, 3) array, got shape {rgb.shape}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
