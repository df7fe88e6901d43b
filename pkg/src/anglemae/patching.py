"""Patch grids, crop/background index split, and split random masking.

Patch index k counts row-major over the (H/p, W/p) grid.  Patch pixels are
flattened row-major then channel, i.e. C-order over the (p, p, C) block.
Visible counts follow visible = round(n * (1 - ratio)) with Python round
semantics, which reproduces the reference counts (36 -> 9 at 0.75,
160 -> 40 at 0.75, 36 -> 7 at 0.80).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import RotatedCropSpec
from .images import Image


@dataclass(frozen=True)
class MaskLayout:
    """Index bookkeeping for one masked sample.  All arrays are sorted
    ascending and jointly partition range(n_patches)."""

    crop_visible: np.ndarray
    crop_masked: np.ndarray
    bg_visible: np.ndarray
    bg_masked: np.ndarray

    @property
    def crop_indices(self) -> np.ndarray:
        return np.sort(np.concatenate([self.crop_visible, self.crop_masked]))

    @property
    def background_indices(self) -> np.ndarray:
        return np.sort(np.concatenate([self.bg_visible, self.bg_masked]))

    @property
    def visible_indices(self) -> np.ndarray:
        """Encoder token order: crop visibles first, then background, each
        ascending."""
        return np.concatenate([self.crop_visible, self.bg_visible])

    @property
    def n_patches(self) -> int:
        return (
            self.crop_visible.size
            + self.crop_masked.size
            + self.bg_visible.size
            + self.bg_masked.size
        )


def patchify(img: Image, p: int) -> np.ndarray:
    """(H, W, C) -> (N, p*p*C) with N = (H/p)*(W/p)."""
    h, w, c = img.shape
    if p < 1 or h % p != 0 or w % p != 0:
        raise ValidationError(f"image {h}x{w} not divisible by patch size {p}")
    gr, gc = h // p, w // p
    x = img.reshape(gr, p, gc, p, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(gr * gc, p * p * c)


def unpatchify(patches: np.ndarray, height: int, width: int, p: int) -> Image:
    """Inverse of patchify for the stated image shape."""
    n, d = patches.shape
    gr, gc = height // p, width // p
    if n != gr * gc or d % (p * p) != 0:
        raise ValidationError("patch array does not match the stated geometry")
    c = d // (p * p)
    x = patches.reshape(gr, gc, p, p, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(height, width, c)


def split_indices(
    height: int, width: int, p: int, spec: RotatedCropSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Partition patch indices into (crop, background).  The crop side and
    corner must align to the patch grid, so membership is exact."""
    if height % p != 0 or width % p != 0:
        raise ValidationError(f"image {height}x{width} not divisible by p={p}")
    if spec.row0 % p != 0 or spec.col0 % p != 0 or spec.a % p != 0:
        raise ValidationError("crop spec is not aligned to the patch grid")
    gr, gc = height // p, width // p
    rows = np.arange(spec.row0 // p, (spec.row0 + spec.a) // p)
    cols = np.arange(spec.col0 // p, (spec.col0 + spec.a) // p)
    crop = (rows[:, None] * gc + cols[None, :]).reshape(-1)
    mask = np.zeros(gr * gc, dtype=bool)
    mask[crop] = True
    return np.sort(crop), np.flatnonzero(~mask)


def visible_count(n: int, ratio: float) -> int:
    """Count law shared by both populations."""
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"mask ratio {ratio} outside [0, 1]")
    return int(round(n * (1.0 - ratio)))


def _pick_visible(
    population: np.ndarray, ratio: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    k = visible_count(population.size, ratio)
    visible = np.sort(rng.choice(population, size=k, replace=False))
    keep = np.isin(population, visible, assume_unique=True)
    return visible.astype(np.int64), population[~keep]


def sample_mask(
    crop_indices: np.ndarray,
    bg_indices: np.ndarray,
    ratio_crop: float,
    ratio_bg: float,
    rng: np.random.Generator,
) -> MaskLayout:
    """Mask the two populations independently, uniformly over subsets of the
    implied visible size."""
    cv, cm = _pick_visible(np.sort(np.asarray(crop_indices)), ratio_crop, rng)
    bv, bm = _pick_visible(np.sort(np.asarray(bg_indices)), ratio_bg, rng)
    return MaskLayout(crop_visible=cv, crop_masked=cm, bg_visible=bv, bg_masked=bm)


def sample_mask_joint(
    crop_indices: np.ndarray,
    bg_indices: np.ndarray,
    ratio: float,
    rng: np.random.Generator,
) -> MaskLayout:
    """Single mask drawn over the union of both populations (the no-split
    ablation); region membership is kept for downstream consumers."""
    crop_indices = np.sort(np.asarray(crop_indices))
    bg_indices = np.sort(np.asarray(bg_indices))
    every = np.sort(np.concatenate([crop_indices, bg_indices]))
    visible, _ = _pick_visible(every, ratio, rng)
    in_crop = np.isin(visible, crop_indices, assume_unique=True)
    cv = visible[in_crop]
    bv = visible[~in_crop]
    cm = crop_indices[~np.isin(crop_indices, cv, assume_unique=True)]
    bm = bg_indices[~np.isin(bg_indices, bv, assume_unique=True)]
    return MaskLayout(crop_visible=cv, crop_masked=cm, bg_visible=bv, bg_masked=bm)


def layout_to_text(layout: MaskLayout) -> str:
    """Sidecar form: one `name: indices` line per index set."""
    def fmt(name: str, arr: np.ndarray) -> str:
        return f"{name}: " + " ".join(str(int(i)) for i in arr)

    return (
        "\n".join(
            [
                fmt("crop_visible", layout.crop_visible),
                fmt("crop_masked", layout.crop_masked),
                fmt("bg_visible", layout.bg_visible),
                fmt("bg_masked", layout.bg_masked),
            ]
        )
        + "\n"
    )


def layout_from_text(text: str) -> MaskLayout:
    fields: dict[str, np.ndarray] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        name, _, rest = line.partition(":")
        fields[name.strip()] = np.array(
            [int(t) for t in rest.split()], dtype=np.int64
        )
    try:
        return MaskLayout(
            crop_visible=fields["crop_visible"],
            crop_masked=fields["crop_masked"],
            bg_visible=fields["bg_visible"],
            bg_masked=fields["bg_masked"],
        )
    except KeyError as e:
        raise ValidationError(f"layout sidecar missing field {e}") from None
