"""Raster types, alpha composition and trimap handling.

Images are float arrays in ``[0, 1]``: RGB images are ``(H, W, 3)``, alpha
mattes are ``(H, W)``.  Trimaps are ``(H, W)`` uint8 arrays of :class:`Label`
values; on disk they use the ``{0, 128, 255}`` encoding.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage


class Label(enum.IntEnum):
    BACKGROUND = 0
    UNKNOWN = 1
    FOREGROUND = 2


TRIMAP_ENCODING = {Label.BACKGROUND: 0, Label.UNKNOWN: 128, Label.FOREGROUND: 255}


class ShapeMismatchError(ValueError):
    pass


class TrimapDecodeError(ValueError):
    pass


def as_rgb(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"RGB image must have shape (H, W, 3), got {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("RGB image values must lie in [0, 1]")
    return arr


def as_alpha(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"alpha matte must have shape (H, W), got {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("alpha values must lie in [0, 1]")
    return arr


def as_trimap(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError(f"trimap must have shape (H, W), got {arr.shape}")
    if not np.isin(arr, [int(v) for v in Label]).all():
        raise ValueError("trimap labels must be 0 (background), 1 (unknown) or 2 (foreground)")
    return arr.astype(np.uint8)


def _check_same_hw(**arrays):
    shapes = {k: v.shape[:2] for k, v in arrays.items() if v is not None}
    if len(set(shapes.values())) > 1:
        desc = ", ".join(f"{k}={s}" for k, s in shapes.items())
        raise ShapeMismatchError(f"dimension mismatch: {desc}")


@dataclass(eq=False)
class MattingSample:
    image: np.ndarray
    trimap: np.ndarray
    alpha: Optional[np.ndarray] = None
    fg: Optional[np.ndarray] = None
    bg: Optional[np.ndarray] = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        self.image = as_rgb(self.image)
        self.trimap = as_trimap(self.trimap)
        if self.alpha is not None:
            self.alpha = as_alpha(self.alpha)
        if self.fg is not None:
            self.fg = as_rgb(self.fg)
        if self.bg is not None:
            self.bg = as_rgb(self.bg)
        _check_same_hw(image=self.image, trimap=self.trimap, alpha=self.alpha,
                       fg=self.fg, bg=self.bg)

    @property
    def shape(self):
        return self.trimap.shape

    def __eq__(self, other):
        # exact array equality of every member; the name is only a label
        if not isinstance(other, MattingSample):
            return NotImplemented
        for key in ("image", "trimap", "alpha", "fg", "bg"):
            a, b = getattr(self, key), getattr(other, key)
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        return True


def composite(fg, bg, alpha) -> np.ndarray:
    """Blend ``fg`` over ``bg``: ``C = alpha * F + (1 - alpha) * B`` per channel."""
    fg, bg, alpha = as_rgb(fg), as_rgb(bg), as_alpha(alpha)
    _check_same_hw(fg=fg, bg=bg, alpha=alpha)
    a = alpha[..., None]
    # B + a (F - B) with exact endpoints; the composition loss uses the same form
    out = np.where(a == 1.0, fg, np.where(a == 0.0, bg, bg + a * (fg - bg)))
    return np.clip(out, 0.0, 1.0)


def generate_trimap(alpha, radius: int) -> np.ndarray:
    """Trimap whose unknown band is the fractional-alpha region dilated by a
    ``(2 * radius + 1)`` square."""
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    alpha = as_alpha(alpha)
    seed = (alpha > 0) & (alpha < 1)
    if radius > 0 and seed.any():
        size = 2 * radius + 1
        unknown = ndimage.binary_dilation(seed, structure=np.ones((size, size), bool))
    else:
        unknown = seed
    trimap = np.full(alpha.shape, Label.BACKGROUND, dtype=np.uint8)
    trimap[alpha >= 1] = Label.FOREGROUND
    trimap[unknown] = Label.UNKNOWN
    return trimap


def unknown_mask(trimap) -> np.ndarray:
    return np.asarray(trimap) == Label.UNKNOWN


def encode_trimap(trimap) -> np.ndarray:
    """Labels to the ``{0, 128, 255}`` raster encoding."""
    trimap = as_trimap(trimap)
    lut = np.array([TRIMAP_ENCODING[lab] for lab in Label], dtype=np.uint8)
    return lut[trimap]


def decode_trimap(raster) -> np.ndarray:
    raster = np.asarray(raster)
    bad = ~np.isin(raster, list(TRIMAP_ENCODING.values()))
    if bad.any():
        values = np.unique(raster[bad])[:5].tolist()
        raise TrimapDecodeError(f"trimap contains values outside {{0, 128, 255}}: {values}")
    out = np.empty(raster.shape, dtype=np.uint8)
    for lab, v in TRIMAP_ENCODING.items():
        out[raster == v] = lab
    return out


def trimap_plane(trimap) -> np.ndarray:
    """Network input encoding of a trimap: background 0, unknown 0.5, foreground 1."""
    return np.asarray(trimap, dtype=np.float32) * 0.5


# -- PNG I/O --------------------------------------------------------------

def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return img


def load_rgb(path) -> np.ndarray:
    return np.asarray(_open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_alpha(path) -> np.ndarray:
    return np.asarray(_open(path).convert("L"), dtype=np.float32) / 255.0


def load_trimap(path) -> np.ndarray:
    raster = np.asarray(_open(path).convert("L"))
    try:
        return decode_trimap(raster)
    except TrimapDecodeError as exc:
        raise TrimapDecodeError(f"{path}: {exc}") from None


def to_uint8(data) -> np.ndarray:
    return np.clip(np.round(np.asarray(data, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(path, image) -> None:
    Image.fromarray(to_uint8(as_rgb(image))).save(Path(path))


def save_alpha(path, alpha) -> None:
    Image.fromarray(to_uint8(as_alpha(alpha))).save(Path(path))


def save_trimap(path, trimap) -> None:
    Image.fromarray(encode_trimap(trimap)).save(Path(path))
