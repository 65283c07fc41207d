"""Mask representations, resampling, blurring, and blending.

Conventions:
  - A Mask is a (H, W) float tensor with values in {0, 1}; 1 marks the hole
    (the region to generate), 0 the region to preserve.
  - ResizedMask is the cubic-downsampled latent-resolution form, clamped to
    [0, 1].
  - SoftMask is the Gaussian-blurred form, also in [0, 1].
  - Masks serialize as 8-bit single-channel PNG: 255 = hole, 0 = keep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import GenerationError, MaskFilterError, ParameterError, ShapeError

Tensor = torch.Tensor

IMAGE_SIZE = 64
LATENT_FACTOR = 4


def _cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic interpolation kernel (a = -0.5)."""
    ax = np.abs(x)
    out = np.zeros_like(ax)
    inner = ax <= 1.0
    outer = (ax > 1.0) & (ax < 2.0)
    out[inner] = (a + 2.0) * ax[inner] ** 3 - (a + 3.0) * ax[inner] ** 2 + 1.0
    out[outer] = a * ax[outer] ** 3 - 5.0 * a * ax[outer] ** 2 + 8.0 * a * ax[outer] - 4.0 * a
    return out


def _cubic_resample_1d(values: np.ndarray, factor: int) -> np.ndarray:
    """Separable cubic resampling along the first axis, pixel-center aligned.

    Destination sample i reads source coordinate (i + 0.5) * factor - 0.5 and
    mixes the 4 nearest source samples with the Keys kernel; borders clamp to
    the edge sample.
    """
    n_src = values.shape[0]
    n_dst = n_src // factor
    src_x = (np.arange(n_dst, dtype=np.float64) + 0.5) * factor - 0.5
    base = np.floor(src_x).astype(np.int64)
    frac = src_x - base
    out = np.zeros((n_dst,) + values.shape[1:], dtype=np.float64)
    for k in range(-1, 3):
        idx = np.clip(base + k, 0, n_src - 1)
        w = _cubic_kernel(frac - k)
        out += w.reshape((-1,) + (1,) * (values.ndim - 1)) * values[idx]
    return out


def downsample_mask(mask: Tensor, factor: int = LATENT_FACTOR) -> Tensor:
    """Cubic-kernel downsampling to latent resolution, clamped to [0, 1]."""
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {tuple(mask.shape)}")
    h, w = mask.shape
    if factor < 1 or h % factor or w % factor:
        raise ParameterError(f"factor {factor} must divide mask dims {h}x{w}")
    arr = mask.detach().cpu().numpy().astype(np.float64)
    arr = _cubic_resample_1d(arr, factor)
    arr = _cubic_resample_1d(arr.T, factor).T
    arr = np.clip(arr, 0.0, 1.0)
    return torch.from_numpy(arr).to(mask.dtype)


def make_masked_image(image: Tensor, mask: Tensor) -> Tensor:
    """Zero out hole pixels; preserved pixels are copied bit-exactly."""
    if image.ndim != 3 or image.shape[1:] != mask.shape:
        raise ShapeError(
            f"image {tuple(image.shape)} and mask {tuple(mask.shape)} dims differ"
        )
    keep = (mask == 0).to(image.dtype)
    return image * keep


def latent_blend(z_gen: Tensor, z_masked_t: Tensor, m_resized_hole: Tensor) -> Tensor:
    """z_gen * m_hole + z_masked_t * (1 - m_hole), mask broadcast over channels.

    m_hole marks the generated region, so the preserved region (m_hole = 0)
    stays exactly equal to z_masked_t.
    """
    if z_gen.shape != z_masked_t.shape:
        raise ShapeError(
            f"latent shapes differ: {tuple(z_gen.shape)} vs {tuple(z_masked_t.shape)}"
        )
    if m_resized_hole.shape != z_gen.shape[-2:]:
        raise ShapeError(
            f"mask {tuple(m_resized_hole.shape)} does not match latent "
            f"spatial dims {tuple(z_gen.shape[-2:])}"
        )
    m = m_resized_hole.to(z_gen.dtype)
    return z_gen * m + z_masked_t * (1.0 - m)


def blur_mask(mask: Tensor, sigma: float) -> Tensor:
    """Gaussian blur with kernel radius ceil(4*sigma) and reflective borders.

    sigma = 0 returns the mask unchanged. The normalized kernel maps constant
    masks to themselves; output is clamped to [0, 1].
    """
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {tuple(mask.shape)}")
    if sigma == 0:
        return mask.clone()
    radius = math.ceil(4.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    arr = mask.detach().cpu().numpy().astype(np.float64)
    for axis in (0, 1):
        padded = np.pad(
            arr, [(radius, radius) if ax == axis else (0, 0) for ax in (0, 1)],
            mode="reflect",
        )
        arr = np.apply_along_axis(
            lambda v: np.convolve(v, kernel, mode="valid"), axis, padded
        )
    arr = np.clip(arr, 0.0, 1.0)
    return torch.from_numpy(arr).to(mask.dtype)


BLEND_MODES = ("none", "paste", "blur")


def pixel_blend(
    generated: Tensor,
    original: Tensor,
    mask: Tensor,
    mode: str = "blur",
    sigma: float = 3.0,
) -> Tensor:
    """out = generated * m + original * (1 - m) with m per blend mode.

    mode 'none' returns the generated image (m = 1 everywhere), 'paste' uses
    the binary mask, 'blur' uses blur_mask(mask, sigma). Every output pixel is
    clamped into the closed interval spanned by the two source pixels, so the
    result is a convex combination even after rounding.
    """
    if generated.shape != original.shape:
        raise ShapeError(
            f"image shapes differ: {tuple(generated.shape)} vs {tuple(original.shape)}"
        )
    if generated.shape[1:] != mask.shape:
        raise ShapeError(
            f"mask {tuple(mask.shape)} does not match image dims "
            f"{tuple(generated.shape[1:])}"
        )
    if mode == "none":
        return generated.clone()
    if mode == "paste":
        m = mask
    elif mode == "blur":
        m = blur_mask(mask, sigma)
    else:
        raise ParameterError(f"unknown blend mode {mode!r}")
    g = generated.double()
    o = original.double()
    md = m.double()
    out = g * md + o * (1.0 - md)
    out = torch.clamp(out, torch.minimum(g, o), torch.maximum(g, o))
    return out.to(generated.dtype)


@dataclass(frozen=True)
class BrushConfig:
    """Random-walk stroke parameters for training masks."""

    strokes_min: int = 2
    strokes_max: int = 5
    width_min: int = 4
    width_max: int = 10
    coverage_min: float = 0.05
    coverage_max: float = 0.50
    steps_min: int = 40
    steps_max: int = 120
    max_retries: int = 50
    size: int = IMAGE_SIZE


def _stamp_disk(canvas: np.ndarray, cy: float, cx: float, radius: float) -> None:
    h, w = canvas.shape
    r = int(math.ceil(radius))
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    canvas[y0:y1, x0:x1][inside] = 1.0


def _draw_stroke(canvas: np.ndarray, rng: np.random.Generator, cfg: BrushConfig) -> None:
    h, w = canvas.shape
    y = rng.uniform(2, h - 3)
    x = rng.uniform(2, w - 3)
    angle = rng.uniform(0, 2 * math.pi)
    width = rng.integers(cfg.width_min, cfg.width_max + 1)
    radius = max(1.0, width / 2.0)
    steps = rng.integers(cfg.steps_min, cfg.steps_max + 1)
    _stamp_disk(canvas, y, x, radius)
    for _ in range(steps):
        angle += rng.uniform(-0.6, 0.6)
        # half-pixel moves keep consecutive stamps overlapping (4-connected)
        y = float(np.clip(y + 0.5 * math.sin(angle), 1, h - 2))
        x = float(np.clip(x + 0.5 * math.cos(angle), 1, w - 2))
        _stamp_disk(canvas, y, x, radius)


def gen_brush_mask(seed: int, params: BrushConfig = BrushConfig()) -> Tensor:
    """Union of random-walk strokes; deterministic per seed.

    Retries with derived sub-seeds until coverage lands inside the configured
    bounds, then returns a binary (size, size) mask with 1 = hole.
    """
    for attempt in range(params.max_retries):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, attempt])))
        canvas = np.zeros((params.size, params.size), dtype=np.float64)
        for _ in range(int(rng.integers(params.strokes_min, params.strokes_max + 1))):
            _draw_stroke(canvas, rng, params)
        coverage = canvas.mean()
        if params.coverage_min <= coverage <= params.coverage_max:
            return torch.from_numpy(canvas).to(torch.float32)
    raise GenerationError(
        f"coverage bounds [{params.coverage_min}, {params.coverage_max}] "
        f"unsatisfiable after {params.max_retries} attempts (seed {seed})"
    )


# Mask size filter: fractions of the frame, stand-in for "reasonable mask size"
SEG_AREA_MIN = 0.02
SEG_AREA_MAX = 0.95


def gen_seg_mask(scene, object_index: int, side: str) -> Tensor:
    """Segmentation mask for one scene object: the exact rendered coverage
    (side='inside') or its complement (side='outside').

    Masks whose area falls outside [2%, 95%] of the frame are rejected.
    """
    from .scenes import render_object_mask  # deferred: scenes imports masks

    if side not in ("inside", "outside"):
        raise ParameterError(f"side must be 'inside' or 'outside', got {side!r}")
    if not 0 <= object_index < len(scene.objects):
        raise ParameterError(
            f"object_index {object_index} out of range for {len(scene.objects)} objects"
        )
    mask = render_object_mask(scene, object_index)
    if side == "outside":
        mask = 1.0 - mask
    area = float(mask.mean())
    if not SEG_AREA_MIN <= area <= SEG_AREA_MAX:
        raise MaskFilterError(
            f"{side} mask area {area:.3f} outside [{SEG_AREA_MIN}, {SEG_AREA_MAX}]"
        )
    return mask


def save_mask_png(mask: Tensor, path: str | Path) -> None:
    """8-bit single-channel PNG, 255 = hole, 0 = keep."""
    arr = (mask.detach().cpu().numpy() > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def load_mask_png(path: str | Path) -> Tensor:
    img = Image.open(path).convert("L")
    arr = (np.asarray(img, dtype=np.uint8) >= 128).astype(np.float32)
    return torch.from_numpy(arr)
