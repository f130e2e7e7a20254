"""Dataset ingestion, compositing, augmentation, and synthetic fixtures.

Samples pair an RGB image with a ground-truth alpha matte, both float32
in [0,1]. The synthetic fixture generator makes the whole test suite
runnable without the original portrait dataset; any directory following
the `<id>.png` / `<id>_matte.png` convention ingests the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from . import ops as F


@dataclass
class Sample:
    image: np.ndarray  # (3, h, w) float32 in [0,1]
    alpha: np.ndarray  # (1, h, w) float32 in [0,1]
    source_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3,h,w), got {self.image.shape}")
        if self.alpha.ndim != 3 or self.alpha.shape[0] != 1:
            raise ValueError(f"alpha must be (1,h,w), got {self.alpha.shape}")
        if self.image.shape[1:] != self.alpha.shape[1:]:
            raise ValueError("image and alpha must be spatially equal")


@dataclass(frozen=True)
class AugmentConfig:
    target_size: int = 256
    scale_min: float = 1.0
    scale_max: float = 1.15
    rotation_degrees: float = 15.0
    rotation_prob: float = 0.5
    flip_prob: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.rotation_prob <= 1.0 and 0.0 <= self.flip_prob <= 1.0):
            raise ValueError("probabilities must be in [0,1]")
        if self.scale_min < 1.0 or self.scale_max < self.scale_min:
            raise ValueError("scale range must satisfy 1 <= min <= max")


def composite(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Per-pixel mix I = alpha*F + (1-alpha)*B, alpha broadcast over RGB."""
    fg, bg, alpha = (np.asarray(a, dtype=np.float32) for a in (fg, bg, alpha))
    if fg.shape != bg.shape or fg.shape[-2:] != alpha.shape[-2:]:
        raise ValueError("foreground/background/alpha spatial sizes must match")
    return alpha * fg + (1.0 - alpha) * bg


# ---------------------------------------------------------------------------
# geometry


def warp_affine(
    img: np.ndarray, matrix: np.ndarray, fill: str = "edge"
) -> np.ndarray:
    """Bilinear inverse warp of a (c,h,w) array.

    matrix is 2x3 mapping output pixel coords (x, y, 1) to source coords.
    fill: 'edge' replicates border pixels, 'zero' fills with zeros.
    """
    c, h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = matrix[0, 0] * xs + matrix[0, 1] * ys + matrix[0, 2]
    sy = matrix[1, 0] * xs + matrix[1, 1] * ys + matrix[1, 2]

    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = (sx - x0).astype(np.float32)
    fy = (sy - y0).astype(np.float32)

    def gather(yy, xx):
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        vals = img[:, yc, xc]
        if fill == "zero":
            inside = ((yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)).astype(np.float32)
            vals = vals * inside
        return vals

    top = gather(y0, x0) * (1 - fx) + gather(y0, x0 + 1) * fx
    bot = gather(y0 + 1, x0) * (1 - fx) + gather(y0 + 1, x0 + 1) * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def _resize_chw(arr: np.ndarray, size: int) -> np.ndarray:
    return F.bilinear_resize(arr[None], size, size)[0]


def augment(s: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random scale / rotation / flip, identical geometry for image and alpha.

    Pipeline: resize to target -> scale in [min,max] -> rotate with
    probability rotation_prob -> crop back to target at a random valid
    offset -> horizontal flip with probability flip_prob. Out-of-frame
    regions replicate edges for the image and are zero for the alpha.
    """
    t = cfg.target_size
    image = _resize_chw(s.image, t)
    alpha = _resize_chw(s.alpha, t)

    scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    theta = 0.0
    if rng.random() < cfg.rotation_prob:
        theta = math.radians(
            float(rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees))
        )
    scaled = t * scale
    max_off = max(scaled - t, 0.0)
    ox = float(rng.uniform(0.0, max_off))
    oy = float(rng.uniform(0.0, max_off))

    if scale != 1.0 or theta != 0.0:
        # inverse map: crop pixel -> rotated/scaled frame -> source pixel
        cx = cy = (scaled - 1) / 2.0
        cos_t, sin_t = math.cos(-theta), math.sin(-theta)
        a = cos_t / scale
        b = -sin_t / scale
        m = np.zeros((2, 3))
        m[0, 0], m[0, 1] = a, b
        m[1, 0], m[1, 1] = sin_t / scale, cos_t / scale
        # constant terms from expanding full(0, 0)
        m[0, 2] = a * (ox - cx) + b * (oy - cy) + cx / scale
        m[1, 2] = (sin_t / scale) * (ox - cx) + (cos_t / scale) * (oy - cy) + cy / scale
        image = warp_affine(image, m, fill="edge")
        alpha = warp_affine(alpha, m, fill="zero")

    if rng.random() < cfg.flip_prob:
        image = image[:, :, ::-1].copy()
        alpha = alpha[:, :, ::-1].copy()

    return Sample(
        image=np.clip(image, 0.0, 1.0),
        alpha=np.clip(alpha, 0.0, 1.0),
        source_id=s.source_id,
    )


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-sample stream so parallel augmentation stays
    deterministic."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


# ---------------------------------------------------------------------------
# file I/O

MATTE_SUFFIX = "_matte"


def load_dataset(directory) -> List[Sample]:
    """Load `<id>.png` / `<id>_matte.png` pairs in lexicographic id order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    images, mattes = {}, {}
    for path in directory.glob("*.png"):
        stem = path.stem
        if stem.endswith(MATTE_SUFFIX):
            mattes[stem[: -len(MATTE_SUFFIX)]] = path
        else:
            images[stem] = path
    unpaired = sorted(set(images) ^ set(mattes))
    if unpaired:
        raise ValueError(f"unpaired dataset entries: {', '.join(unpaired)}")
    samples = []
    for sid in sorted(images):
        samples.append(
            Sample(
                image=_read_rgb(images[sid]),
                alpha=_read_gray(mattes[sid]),
                source_id=sid,
            )
        )
    return samples


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise ValueError(f"cannot decode matte {path}: {exc}") from exc
    return arr[None]


def save_sample(directory, s: Sample):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgb = np.clip(np.round(s.image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    gray = np.clip(np.round(s.alpha[0] * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(directory / f"{s.source_id}.png")
    Image.fromarray(gray, mode="L").save(
        directory / f"{s.source_id}{MATTE_SUFFIX}.png"
    )


# ---------------------------------------------------------------------------
# synthetic fixtures


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random RGB texture from upsampled low-frequency noise."""
    coarse = rng.random((3, 8, 8)).astype(np.float32)
    return F.bilinear_resize(coarse[None], size, size)[0]


def _soft_blob_alpha(rng: np.random.Generator, size: int) -> np.ndarray:
    """Soft-edged ellipse with a wobbled radius; values span (0,1)."""
    cy = size * rng.uniform(0.38, 0.62)
    cx = size * rng.uniform(0.38, 0.62)
    ry = size * rng.uniform(0.2, 0.3)
    rx = size * rng.uniform(0.2, 0.3)
    ys, xs = np.mgrid[0:size, 0:size]
    ang = np.arctan2(ys - cy, xs - cx)
    wobble = 1.0 + 0.08 * np.sin(3 * ang + rng.uniform(0, 2 * np.pi))
    dist = np.sqrt(((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2) / wobble
    # edge width ~4 px regardless of resolution, wide enough that the
    # matte stays representable after the decoder's bilinear upsampling
    alpha = 1.0 / (1.0 + np.exp((dist - 1.0) * size / 4.0))
    return alpha.astype(np.float32)[None]


def synth_fixtures(
    n: int, size: int, seed: int = 0, return_layers: bool = False
):
    """Procedural portrait-like fixtures: blob mattes over textured layers."""
    samples, layers = [], []
    for i in range(n):
        rng = sample_rng(seed, i)
        alpha = _soft_blob_alpha(rng, size)
        fg = np.clip(_texture(rng, size) * 0.6 + 0.4, 0, 1)
        bg = np.clip(_texture(rng, size) * 0.6, 0, 1)
        image = composite(fg, bg, alpha)
        samples.append(Sample(image=image, alpha=alpha, source_id=f"synth{i:03d}"))
        layers.append((fg, bg))
    if return_layers:
        return samples, layers
    return samples
