"""Composition-style dataset synthesis and training-time augmentation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .matting_core import (
    MattingSample,
    composite,
    generate_trimap,
    load_alpha,
    load_rgb,
    load_trimap,
    save_alpha,
    save_rgb,
    save_trimap,
    unknown_mask,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
MANIFEST_NAME = "manifest.jsonl"


class DatasetError(ValueError):
    pass


def sub_seed(seed: int, *index: int) -> int:
    """Deterministic 63-bit seed derived from ``(seed, *index)``."""
    state = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *index]).generate_state(2, np.uint32)
    return int((int(state[0]) << 32 | int(state[1])) >> 1)


@dataclass
class DatasetSpec:
    fg_dir: Path
    alpha_dir: Path
    bg_dir: Path
    output_dir: Path
    backgrounds_per_foreground: int = 1
    seed: int = 0
    trimap_radius: tuple[int, int] = (1, 15)

    def __post_init__(self):
        for name in ("fg_dir", "alpha_dir", "bg_dir", "output_dir"):
            setattr(self, name, Path(getattr(self, name)))
        if self.backgrounds_per_foreground < 1:
            raise DatasetError("backgrounds_per_foreground must be >= 1")
        lo, hi = self.trimap_radius
        if not 0 <= lo <= hi:
            raise DatasetError(f"invalid trimap radius range {self.trimap_radius}")


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DatasetError(f"directory does not exist: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"directory contains no images: {directory}")
    return files


def fit_background(bg: np.ndarray, height: int, width: int) -> np.ndarray:
    """Upscale ``bg`` until it covers ``(height, width)``, then take the top-left window."""
    bh, bw = bg.shape[:2]
    ratio = max(height / bh, width / bw)
    if ratio > 1:
        size = (math.ceil(bw * ratio), math.ceil(bh * ratio))
        bg = np.clip(cv2.resize(bg, size, interpolation=cv2.INTER_LINEAR), 0.0, 1.0)
    return np.ascontiguousarray(bg[:height, :width])


def synthesize_dataset(spec: DatasetSpec) -> list[dict]:
    """Composite every foreground onto ``backgrounds_per_foreground`` distinct
    backgrounds and write the dataset tree plus ``manifest.jsonl``.

    Each sample depends only on the inputs, ``spec.seed`` and its index, so the
    output is reproducible byte for byte.
    """
    fgs = _list_images(spec.fg_dir)
    alphas = {p.stem: p for p in _list_images(spec.alpha_dir)}
    bgs = _list_images(spec.bg_dir)
    n = spec.backgrounds_per_foreground
    if n > len(bgs):
        raise DatasetError(f"need {n} distinct backgrounds per foreground, found {len(bgs)}")
    for fg_path in fgs:
        if fg_path.stem not in alphas:
            raise DatasetError(f"missing alpha matte for foreground '{fg_path.stem}'")

    out = spec.output_dir
    for sub in ("fg", "alpha", "bg", "merged", "trimap"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    records = []
    for i, fg_path in enumerate(fgs):
        fg = load_rgb(fg_path)
        alpha = load_alpha(alphas[fg_path.stem])
        if alpha.shape != fg.shape[:2]:
            raise DatasetError(f"alpha/foreground size mismatch for '{fg_path.stem}': "
                               f"{alpha.shape} vs {fg.shape[:2]}")
        picker = np.random.default_rng(sub_seed(spec.seed, i))
        chosen = sorted(picker.choice(len(bgs), size=n, replace=False).tolist())
        for j, b in enumerate(chosen):
            index = i * n + j
            seed = sub_seed(spec.seed, i, j)
            rng = np.random.default_rng(seed)
            bg = fit_background(load_rgb(bgs[b]), *alpha.shape)
            merged = composite(fg, bg, alpha)
            trimap = generate_trimap(alpha, int(rng.integers(spec.trimap_radius[0],
                                                             spec.trimap_radius[1] + 1)))
            name = f"{fg_path.stem}_{bgs[b].stem}"
            rel = {sub: f"{sub}/{name}.png" for sub in ("merged", "alpha", "fg", "bg", "trimap")}
            save_rgb(out / rel["merged"], merged)
            save_alpha(out / rel["alpha"], alpha)
            save_rgb(out / rel["fg"], fg)
            save_rgb(out / rel["bg"], bg)
            save_trimap(out / rel["trimap"], trimap)
            records.append({"index": index, "name": name, **rel, "seed": seed,
                            "fg_source": fg_path.name, "bg_source": bgs[b].name})

    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    log.info("wrote %d samples to %s", len(records), out)
    return records


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_record(record: dict, root) -> MattingSample:
    root = Path(root)
    return MattingSample(
        image=load_rgb(root / record["merged"]),
        trimap=load_trimap(root / record["trimap"]),
        alpha=load_alpha(root / record["alpha"]),
        fg=load_rgb(root / record["fg"]) if record.get("fg") else None,
        bg=load_rgb(root / record["bg"]) if record.get("bg") else None,
        name=record.get("name", ""),
    )


# -- augmentation -----------------------------------------------------------

@dataclass
class AugmentationConfig:
    crop_sizes: tuple[int, ...] = (512, 640, 800)
    train_size: int = 512
    flip_probability: float = 0.5
    hue: float = 0.1
    saturation: float = 0.2
    brightness: float = 0.2
    rotation: float = 10.0
    translation: float = 0.05
    scale: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        self.crop_sizes = tuple(int(s) for s in self.crop_sizes)
        if not self.crop_sizes or min(self.crop_sizes) < 32:
            raise ValueError("every crop size must be >= 32")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")
        if self.scale[0] <= 0 or self.scale[0] > self.scale[1]:
            raise ValueError(f"invalid scale bounds {self.scale}")

    @classmethod
    def identity(cls, size: int) -> "AugmentationConfig":
        """No flip, jitter or affine; crops at ``size`` and keeps it."""
        return cls(crop_sizes=(size,), train_size=size, flip_probability=0.0, hue=0.0,
                   saturation=0.0, brightness=0.0, rotation=0.0, translation=0.0,
                   scale=(1.0, 1.0))


def _members(sample: MattingSample) -> dict:
    return {k: getattr(sample, k) for k in ("image", "trimap", "alpha", "fg", "bg")
            if getattr(sample, k) is not None}


def _rebuild(sample: MattingSample, **members) -> MattingSample:
    return replace(sample, **members)


def crop_unknown_centered(sample: MattingSample, cfg: AugmentationConfig,
                          rng: np.random.Generator) -> MattingSample:
    """Square crop centred on a random unknown pixel, shifted to stay inside the image."""
    if not unknown_mask(sample.trimap).any():
        raise DatasetError("no transition region")
    size = int(rng.choice(sorted(cfg.crop_sizes)))
    members = _members(sample)
    h, w = sample.shape
    if h < size or w < size:
        ph, pw = max(size - h, 0), max(size - w, 0)
        pad = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
        members = {k: np.pad(v, pad + ((0, 0),) * (v.ndim - 2), mode="reflect")
                   for k, v in members.items()}
        h, w = members["trimap"].shape
    ys, xs = np.nonzero(unknown_mask(members["trimap"]))
    k = int(rng.integers(len(ys)))
    top = min(max(int(ys[k]) - size // 2, 0), h - size)
    left = min(max(int(xs[k]) - size // 2, 0), w - size)
    cropped = {key: np.ascontiguousarray(v[top:top + size, left:left + size])
               for key, v in members.items()}
    return _rebuild(sample, **cropped)


def hflip(sample: MattingSample) -> MattingSample:
    return _rebuild(sample, **{k: np.ascontiguousarray(v[:, ::-1])
                               for k, v in _members(sample).items()})


def jitter_colors(image: np.ndarray, dh: float, ds: float, dv: float) -> np.ndarray:
    """Shift hue by ``dh`` turns, scale saturation by ``1 + ds`` and value by ``1 + dv``."""
    hsv = cv2.cvtColor(np.ascontiguousarray(image, dtype=np.float32), cv2.COLOR_RGB2HSV)
    hsv[..., 0] = np.mod(hsv[..., 0] + dh * 360.0, 360.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + ds), 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * (1.0 + dv), 0.0, 1.0)
    return np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0.0, 1.0)


def affine_matrix(h: int, w: int, angle: float, scale: float, tx: float, ty: float) -> np.ndarray:
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, scale)
    m[0, 2] += tx * w
    m[1, 2] += ty * h
    return m


def warp(arr: np.ndarray, m: np.ndarray, nearest: bool = False) -> np.ndarray:
    h, w = arr.shape[:2]
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    out = cv2.warpAffine(arr, m, (w, h), flags=interp, borderMode=cv2.BORDER_REFLECT_101)
    return out if nearest else np.clip(out, 0.0, 1.0)


def resize(arr: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    out = cv2.resize(arr, (size, size), interpolation=interp)
    return out if nearest else np.clip(out, 0.0, 1.0)


def augment(sample: MattingSample, cfg: AugmentationConfig,
            rng: np.random.Generator) -> MattingSample:
    """Flip, colour jitter, affine warp and resize to ``cfg.train_size``.

    When the sample carries ``fg``/``bg``, the jitter is applied to both and the
    image is re-composited, so the composition identity survives augmentation.
    """
    if rng.random() < cfg.flip_probability:
        sample = hflip(sample)

    dh, ds, dv = (rng.uniform(-r, r) if r > 0 else 0.0
                  for r in (cfg.hue, cfg.saturation, cfg.brightness))
    if dh or ds or dv:
        if sample.fg is not None and sample.bg is not None and sample.alpha is not None:
            fg = jitter_colors(sample.fg, dh, ds, dv)
            bg = jitter_colors(sample.bg, dh, ds, dv)
            sample = _rebuild(sample, fg=fg, bg=bg, image=composite(fg, bg, sample.alpha))
        else:
            sample = _rebuild(sample, image=jitter_colors(sample.image, dh, ds, dv))

    angle = rng.uniform(-cfg.rotation, cfg.rotation) if cfg.rotation > 0 else 0.0
    scale = rng.uniform(*cfg.scale) if cfg.scale[0] < cfg.scale[1] else cfg.scale[0]
    tx, ty = ((rng.uniform(-cfg.translation, cfg.translation), rng.uniform(-cfg.translation, cfg.translation))
              if cfg.translation > 0 else (0.0, 0.0))
    if angle or scale != 1.0 or tx or ty:
        h, w = sample.shape
        m = affine_matrix(h, w, angle, scale, tx, ty)
        sample = _rebuild(sample, **{k: warp(v, m, nearest=(k == "trimap"))
                                     for k, v in _members(sample).items()})

    return _rebuild(sample, **{k: resize(v, cfg.train_size, nearest=(k == "trimap"))
                               for k, v in _members(sample).items()})


class MattingDataset:
    """Indexable training set: each draw crops and augments a source sample.

    ``draw(index, rng)`` depends only on the sample and the generator state, so
    results are independent of worker count and order.
    """

    def __init__(self, samples: Sequence[MattingSample], aug: AugmentationConfig | None = None):
        if not samples:
            raise DatasetError("dataset is empty")
        self.samples = list(samples)
        self.aug = aug

    @classmethod
    def from_manifest(cls, path, aug: AugmentationConfig | None = None) -> "MattingDataset":
        path = Path(path)
        root = path.parent
        return cls([load_record(r, root) for r in read_manifest(path)], aug)

    def __len__(self):
        return len(self.samples)

    def draw(self, index: int, rng: np.random.Generator) -> MattingSample:
        sample = self.samples[index]
        if self.aug is None:
            return sample
        return augment(crop_unknown_centered(sample, self.aug, rng), self.aug, rng)
