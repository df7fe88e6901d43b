"""Raster I/O and synthetic scene generation.

Images are numpy float64 arrays of shape (height, width, channels) with
values in [0, 1]; channels is 1 (grayscale) or 3 (RGB).  Files are binary
portable pixmaps: P5 for grayscale, P6 for RGB, maxval 255.  Pixels are
quantized to 8 bits only at the file boundary; everything in memory stays
float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

Image = np.ndarray  # (H, W, C) float64 in [0, 1]

SHAPE_KINDS = ("oriented_bar", "oriented_ellipse", "checker")

# Supersampling factor for anti-aliased shape edges.
_SS = 4


def validate_image(img: Image) -> None:
    if not isinstance(img, np.ndarray) or img.ndim != 3:
        raise ValidationError("image must be a (H, W, C) array")
    h, w, c = img.shape
    if h < 1 or w < 1 or c not in (1, 3):
        raise ValidationError(f"bad image shape {img.shape}; channels must be 1 or 3")
    if not np.all(np.isfinite(img)):
        raise ValidationError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError("image values must lie in [0, 1]")


def _read_header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # Tokens are separated by whitespace; '#' starts a comment to end of line.
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValidationError("truncated header")
    return buf[start:pos], pos


def load_image(path: str | Path) -> Image:
    """Read a binary P5/P6 file into a float image in [0, 1]."""
    raw = Path(path).read_bytes()
    try:
        magic, pos = _read_header_token(raw, 0)
    except ValidationError:
        raise ValidationError(f"{path}: empty or truncated file")
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise ValidationError(f"{path}: unsupported magic {magic!r}; expected P5 or P6")
    fields = []
    for _ in range(3):
        try:
            tok, pos = _read_header_token(raw, pos)
        except ValidationError:
            raise ValidationError(f"{path}: truncated header")
        if not tok.isdigit():
            raise ValidationError(f"{path}: malformed header token {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ValidationError(f"{path}: maxval {maxval} unsupported; expected 255")
    if width < 1 or height < 1:
        raise ValidationError(f"{path}: bad dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    expected = height * width * channels
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise ValidationError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(height, width, channels)


def save_image(path: str | Path, img: Image) -> None:
    """Quantize to 8 bits and write P5 (1 channel) or P6 (3 channels)."""
    validate_image(img)
    h, w, c = img.shape
    magic = b"P5" if c == 1 else b"P6"
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a deterministic synthetic dataset."""

    count: int
    size: int
    channels: int = 3
    seed: int = 0
    shape_kind: str = "oriented_bar"

    def validate(self) -> None:
        if self.count < 1:
            raise ValidationError("count must be >= 1")
        if self.size < 8:
            raise ValidationError("size must be >= 8")
        if self.channels not in (1, 3):
            raise ValidationError("channels must be 1 or 3")
        if self.shape_kind not in SHAPE_KINDS:
            raise ValidationError(f"shape_kind must be one of {SHAPE_KINDS}")


def _textured_background(rng: np.random.Generator, s: int, channels: int) -> np.ndarray:
    # Two low-frequency plane waves per channel plus faint grain, so no two
    # patches of one image are identical.
    v = (np.arange(s) + 0.5) / s
    vv, uu = np.meshgrid(v, v, indexing="ij")
    img = np.empty((s, s, channels))
    for c in range(channels):
        base = rng.uniform(0.30, 0.60)
        img[:, :, c] = base
        for _ in range(2):
            amp = rng.uniform(0.06, 0.16)
            fr, fc = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            img[:, :, c] += amp * np.sin(2.0 * math.pi * (fr * vv + fc * uu) + phase)
    img += rng.normal(0.0, 0.015, size=img.shape)
    return img


def _shape_frame(rng: np.random.Generator, s: int) -> tuple[np.ndarray, np.ndarray]:
    # Coordinates of each supersampled pixel relative to a jittered shape
    # center, rotated into the shape frame (angle uniform over [0, pi)).
    phi = rng.uniform(0.0, math.pi)
    cy = 0.5 + rng.uniform(-0.08, 0.08)
    cx = 0.5 + rng.uniform(-0.08, 0.08)
    v = (np.arange(s) + 0.5) / s
    vv, uu = np.meshgrid(v, v, indexing="ij")
    dy, dx = vv - cy, uu - cx
    x = math.cos(phi) * dx + math.sin(phi) * dy
    y = -math.sin(phi) * dx + math.cos(phi) * dy
    return x, y


def _render_one(rng: np.random.Generator, spec: DatasetSpec) -> Image:
    s = spec.size * _SS
    img = _textured_background(rng, s, spec.channels)
    x, y = _shape_frame(rng, s)
    color = rng.uniform(0.0, 1.0, size=spec.channels)
    if spec.shape_kind == "oriented_bar":
        length = rng.uniform(0.40, 0.70)
        width = rng.uniform(0.08, 0.16)
        mask = (np.abs(x) <= length / 2) & (np.abs(y) <= width / 2)
        img[mask] = color
    elif spec.shape_kind == "oriented_ellipse":
        ra = rng.uniform(0.22, 0.35)
        rb = ra * rng.uniform(0.25, 0.45)
        mask = (x / ra) ** 2 + (y / rb) ** 2 <= 1.0
        img[mask] = color
    else:  # checker
        side = rng.uniform(0.45, 0.70)
        tile = side / rng.integers(3, 6)
        color2 = rng.uniform(0.0, 1.0, size=spec.channels)
        mask = (np.abs(x) <= side / 2) & (np.abs(y) <= side / 2)
        parity = (np.floor(x / tile) + np.floor(y / tile)).astype(np.int64) % 2 == 0
        img[mask & parity] = color
        img[mask & ~parity] = color2
    img = img.reshape(spec.size, _SS, spec.size, _SS, spec.channels).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: DatasetSpec) -> list[Image]:
    """Render `spec.count` scenes, each one oriented shape on a textured
    background, anti-aliased by 4x supersampling.  Deterministic in
    `spec.seed`: per-image generators are spawned from one root sequence."""
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    return [_render_one(np.random.default_rng(c), spec) for c in children]


def write_dataset(spec: DatasetSpec, out_dir: str | Path) -> list[Path]:
    """Write synth_{index:06}.ppm files plus a manifest.txt of the recipe."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(generate_synthetic(spec)):
        p = out / f"synth_{i:06d}.ppm"
        save_image(p, img)
        paths.append(p)
    manifest = (
        f"count={spec.count}\nsize={spec.size}\nchannels={spec.channels}\n"
        f"seed={spec.seed}\nshape_kind={spec.shape_kind}\n"
    )
    (out / "manifest.txt").write_text(manifest)
    return paths


def load_dataset(dir_path: str | Path) -> list[Image]:
    """Load every .ppm/.pgm image in a directory, sorted by name."""
    files = sorted(
        p for p in Path(dir_path).iterdir() if p.suffix.lower() in (".ppm", ".pgm")
    )
    if not files:
        raise ValidationError(f"{dir_path}: no .ppm/.pgm images found")
    return [load_image(p) for p in files]
