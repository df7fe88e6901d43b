"""Rotated-crop geometry: sampling, resampling, compositing.

Conventions (every oracle must mirror these exactly):

* Pixel (r, c) sits at continuous coordinate (r, c): unit spacing, origin
  at the first pixel center, row axis pointing down, column axis right.
* A positive angle rotates counter-clockwise as displayed on screen
  (row-down), so a displacement d = (dr, dc) maps to
  R(theta) d = (cos(t) dr - sin(t) dc,  sin(t) dr + cos(t) dc).
* The crop keeps the scene scale: destination pixel at offset d from the
  region center takes the bilinear sample of the source image at
  (center + R(theta) d).  At theta = 0 every source coordinate is an exact
  integer, so the crop is bit-identical to the region.

The region is an axis-aligned a-square at (row0, col0).  Rotating its
content requires the enclosing square of side h = sqrt(2) * a, centered on
the region, to lie fully inside the image; the a-square is the largest
square inscribed in that rotated h-square for every angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .images import Image


@dataclass(frozen=True)
class RotatedCropSpec:
    """Placement of one rotated crop: a-square corner, side, angle (radians)."""

    row0: int
    col0: int
    a: int
    theta: float

    @property
    def h(self) -> float:
        """Side of the enclosing square that must fit inside the image."""
        return math.sqrt(2.0) * self.a

    @property
    def margin(self) -> float:
        """Clearance (h - a) / 2 required on every side of the a-square."""
        return (self.h - self.a) / 2.0

    def validate_fit(self, height: int, width: int) -> None:
        if self.a < 1:
            raise ValidationError("crop side a must be >= 1")
        if not math.isfinite(self.theta):
            raise ValidationError("theta must be finite")
        m = self.margin
        if self.row0 < m or self.col0 < m:
            raise ValidationError(
                f"crop at ({self.row0}, {self.col0}) leaves less than the "
                f"required {m:.3f}px clearance to the top/left edge"
            )
        if self.row0 + self.a + m > height or self.col0 + self.a + m > width:
            raise ValidationError(
                f"crop at ({self.row0}, {self.col0}) side {self.a} does not fit "
                f"a {self.h:.3f}px enclosing square inside {height}x{width}"
            )


def feasible_starts(extent: int, p: int, a: int) -> np.ndarray:
    """Multiples of p that leave (h - a)/2 clearance on both sides of one axis."""
    margin = (math.sqrt(2.0) * a - a) / 2.0
    lo = int(math.ceil(margin / p))
    hi = int(math.floor((extent - a - margin) / p))
    if hi < lo:
        return np.empty(0, dtype=np.int64)
    return np.arange(lo, hi + 1, dtype=np.int64) * p


def sample_crop_spec(
    height: int,
    width: int,
    p: int,
    a: int,
    theta_range: tuple[float, float],
    rng: np.random.Generator,
) -> RotatedCropSpec:
    """Draw a placement uniformly over the feasible patch-aligned corners and
    an angle uniformly over theta_range (radians)."""
    if p < 1:
        raise ValidationError("patch size p must be >= 1")
    if a < p or a % p != 0:
        raise ValidationError(f"crop side a={a} must be a positive multiple of p={p}")
    lo, hi = theta_range
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ValidationError(f"bad theta range [{lo}, {hi}]")
    rows = feasible_starts(height, p, a)
    cols = feasible_starts(width, p, a)
    if rows.size == 0 or cols.size == 0:
        raise ValidationError(
            f"no feasible crop position: side {a} needs a {math.sqrt(2.0) * a:.2f}px "
            f"enclosing square inside {height}x{width}"
        )
    row0 = int(rng.choice(rows))
    col0 = int(rng.choice(cols))
    theta = float(rng.uniform(lo, hi))
    return RotatedCropSpec(row0=row0, col0=col0, a=a, theta=theta)


def _bilinear(img: Image, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear samples at continuous (rows, cols); neighbor indices are
    clamped to the image so weight-zero corners never read out of bounds."""
    h, w, _ = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    r0c = np.clip(r0, 0, h - 1)
    r1c = np.clip(r0 + 1, 0, h - 1)
    c0c = np.clip(c0, 0, w - 1)
    c1c = np.clip(c0 + 1, 0, w - 1)
    fr = fr[..., None]
    fc = fc[..., None]
    return (
        img[r0c, c0c] * (1.0 - fr) * (1.0 - fc)
        + img[r0c, c1c] * (1.0 - fr) * fc
        + img[r1c, c0c] * fr * (1.0 - fc)
        + img[r1c, c1c] * fr * fc
    )


def _offset_grid(a: int) -> tuple[np.ndarray, np.ndarray]:
    d = np.arange(a, dtype=np.float64) - (a - 1) / 2.0
    return np.meshgrid(d, d, indexing="ij")  # (dr, dc), each (a, a)


def scaling_center_crop(img: Image, spec: RotatedCropSpec) -> np.ndarray:
    """Resample the rotated view of the region: an (a, a, C) crop whose pixel
    at offset d from the region center reads the source at center + R(theta) d.
    Raises if the enclosing square does not fit; every sample provably stays
    inside it, which is asserted."""
    h, w, _ = img.shape
    spec.validate_fit(h, w)
    cr = spec.row0 + (spec.a - 1) / 2.0
    cc = spec.col0 + (spec.a - 1) / 2.0
    dr, dc = _offset_grid(spec.a)
    cos_t, sin_t = math.cos(spec.theta), math.sin(spec.theta)
    src_r = cr + cos_t * dr - sin_t * dc
    src_c = cc + sin_t * dr + cos_t * dc
    half = spec.h / 2.0
    if (
        src_r.min() < cr - half
        or src_r.max() > cr + half
        or src_c.min() < cc - half
        or src_c.max() > cc + half
    ):
        raise RuntimeError("resampling escaped the enclosing square")
    return _bilinear(img, src_r, src_c)


def composite(img: Image, spec: RotatedCropSpec) -> Image:
    """Original image with the region replaced by its rotated crop; pixels
    outside the a-square are bit-identical to the input."""
    out = img.copy()
    out[spec.row0 : spec.row0 + spec.a, spec.col0 : spec.col0 + spec.a] = (
        scaling_center_crop(img, spec)
    )
    return out


def random_rotation_baseline(img: Image, spec: RotatedCropSpec) -> Image:
    """Defective baseline for contrast: rotate the a-square in place, writing
    zeros where the source falls outside the region.  Only the a-square has to
    fit inside the image; corners black out as the angle grows."""
    h, w, _ = img.shape
    if spec.a < 1:
        raise ValidationError("crop side a must be >= 1")
    if spec.row0 < 0 or spec.col0 < 0 or spec.row0 + spec.a > h or spec.col0 + spec.a > w:
        raise ValidationError("a-square does not fit inside the image")
    cr = spec.row0 + (spec.a - 1) / 2.0
    cc = spec.col0 + (spec.a - 1) / 2.0
    dr, dc = _offset_grid(spec.a)
    cos_t, sin_t = math.cos(spec.theta), math.sin(spec.theta)
    src_r = cr + cos_t * dr - sin_t * dc
    src_c = cc + sin_t * dr + cos_t * dc
    inside = (
        (src_r >= spec.row0)
        & (src_r <= spec.row0 + spec.a - 1)
        & (src_c >= spec.col0)
        & (src_c <= spec.col0 + spec.a - 1)
    )
    block = _bilinear(img, src_r, src_c)
    block[~inside] = 0.0
    out = img.copy()
    out[spec.row0 : spec.row0 + spec.a, spec.col0 : spec.col0 + spec.a] = block
    return out
