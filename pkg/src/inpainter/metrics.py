"""Region-restricted preservation metrics and analytic proxies.

PSNR/MSE follow the preservation protocol: they are computed over a caller
supplied pixel region (normally the unmasked region) between the generated
and original image. The perceptual proxy replaces a learned perceptual net
with distances between the trained codec encoder's activations, and the
caption probe replaces a text-image similarity model with an exact color
check against the captioned object's palette color.
"""

from __future__ import annotations

import math

import torch

from .codec import CodecParams
from .errors import ParameterError, ProtocolError, ShapeError
from .scenes import PALETTE, SceneSpec, render_object_mask

Tensor = torch.Tensor

PSNR_CAP_DB = 99.0
PROBE_TOLERANCE = 0.15


def region_metrics(generated: Tensor, original: Tensor, region: Tensor) -> tuple[float, float]:
    """(psnr_db, mse) over the pixels where region == 1.

    mse averages squared differences over region pixels and channels;
    psnr = 10*log10(1/mse) for signal peak 1.0, and exactly 99 dB when
    mse == 0.
    """
    if generated.shape != original.shape:
        raise ShapeError(
            f"image shapes differ: {tuple(generated.shape)} vs {tuple(original.shape)}"
        )
    if generated.shape[1:] != region.shape:
        raise ShapeError(
            f"region {tuple(region.shape)} does not match image dims "
            f"{tuple(generated.shape[1:])}"
        )
    sel = region > 0.5
    n = int(sel.sum())
    if n == 0:
        raise ParameterError("region is empty")
    diff = (generated - original)[:, sel]
    mse = float((diff.double() ** 2).mean())
    psnr = PSNR_CAP_DB if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
    return psnr, mse


def lpips_proxy(a: Tensor, b: Tensor, codec: CodecParams) -> float:
    """Normalized squared distance between codec-encoder activations.

    Symmetric, non-negative, and zero exactly when the activations agree.
    """
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        feats_a = codec.net.encoder_features(a[None])
        feats_b = codec.net.encoder_features(b[None])
    num = 0.0
    den = 1e-12
    for fa, fb in zip(feats_a, feats_b):
        num += float(((fa - fb) ** 2).mean())
        den += 0.5 * (float((fa**2).mean()) + float((fb**2).mean()))
    return num / den


def caption_probe(image: Tensor, scene: SceneSpec, hole: Tensor) -> float:
    """Fraction of hole pixels within color tolerance of the captioned
    object's palette color.

    The hole must cover exactly one object's ground-truth region (the
    inside-inpainting protocol); anything else is a protocol error.
    """
    if image.shape[1:] != hole.shape:
        raise ShapeError(
            f"hole {tuple(hole.shape)} does not match image dims {tuple(image.shape[1:])}"
        )
    hole_b = hole > 0.5
    if not bool(hole_b.any()):
        raise ProtocolError("hole is empty: it must cover exactly one object")
    covered = []
    for i in range(len(scene.objects)):
        obj = render_object_mask(scene, i) > 0.5
        if bool((obj & ~hole_b).sum() == 0):
            covered.append(i)
    if len(covered) != 1:
        raise ProtocolError(
            f"hole covers {len(covered)} objects; the probe needs exactly one"
        )
    color = torch.tensor(PALETTE[scene.objects[covered[0]].color])
    dist = (image[:, hole_b] - color[:, None]).abs().amax(dim=0)
    return float((dist <= PROBE_TOLERANCE).float().mean())
