"""Masked-image feature branch and the end-to-end inpainting pipeline.

The branch is a clone of the base denoiser with every cross-attention layer
removed, its input convolution widened to accept the concatenated
[noisy latent, masked-image latent, resized mask] stack, and a zero-initialized
1x1 convolution in front of every feature it hands to the base network. Zero
initialization makes the combined model exactly equal to the base model until
training moves the zero convolutions away from zero.

The branch has no text path: its features depend only on the image-side
inputs, the step index, and its own parameters. That is what makes it
plug-and-play across base checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
from torch import nn

from .codec import CodecParams, decode, encode
from .diffusion import NoiseSchedule, SamplerConfig, add_noise, sample
from .errors import CompatibilityError, ParameterError, ShapeError
from .masks import downsample_mask, latent_blend, make_masked_image, pixel_blend
from .text import TextEncoder, embed_text
from .unet import DenoiserConfig, UNet

Tensor = torch.Tensor

ENCODERS = ("codec", "conv")
TOGGLE = ("with", "without")
INJECTIONS = ("full", "half", "cn")
BLENDS = ("none", "paste", "blur")


@dataclass(frozen=True)
class AblationAxes:
    """One cell of the architecture ablation grid."""

    encoder: str = "codec"  # codec | conv
    mask_in_input: str = "with"  # with | without
    cross_attn: str = "without"  # with | without
    injection: str = "full"  # full | half | cn
    blend: str = "blur"  # none | paste | blur

    def __post_init__(self):
        checks = [
            (self.encoder, ENCODERS, "encoder"),
            (self.mask_in_input, TOGGLE, "mask_in_input"),
            (self.cross_attn, TOGGLE, "cross_attn"),
            (self.injection, INJECTIONS, "injection"),
            (self.blend, BLENDS, "blend"),
        ]
        for value, allowed, name in checks:
            if value not in allowed:
                raise ParameterError(f"{name} must be one of {allowed}, got {value!r}")

    def tag(self) -> str:
        return (
            f"{self.encoder}_mask-{self.mask_in_input}_attn-{self.cross_attn}"
            f"_{self.injection}_{self.blend}"
        )

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder,
            "mask_in_input": self.mask_in_input,
            "cross_attn": self.cross_attn,
            "injection": self.injection,
            "blend": self.blend,
        }

    @staticmethod
    def from_dict(d: dict) -> "AblationAxes":
        return AblationAxes(**d)


@dataclass(frozen=True)
class InpaintOptions:
    w: float = 1.0
    blend_mode: str = "blur"
    blur_sigma: float = 3.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    prompt: str = ""

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ParameterError(f"w must be in [0, 1], got {self.w}")
        if self.blend_mode not in BLENDS:
            raise ParameterError(f"blend_mode must be one of {BLENDS}, got {self.blend_mode!r}")
        if self.blur_sigma < 0:
            raise ParameterError(f"blur_sigma must be >= 0, got {self.blur_sigma}")


class BranchParams(nn.Module):
    """Cloned denoiser (no cross-attention), widened input convolution, and
    per-insertion-point zero convolutions."""

    def __init__(self, base_config: DenoiserConfig, axes: AblationAxes):
        super().__init__()
        self.axes = axes
        in_ch = 4 + 4 + (1 if axes.mask_in_input == "with" else 0)
        self.unet = UNet(
            replace(base_config, in_channels=in_ch),
            cross_attention=(axes.cross_attn == "with"),
            encoder_only=(axes.injection == "cn"),
        )
        points = base_config.insertion_points()
        self.inject_indices = _inject_indices(base_config, axes.injection)
        self.zero_convs = nn.ModuleDict()
        for i in self.inject_indices:
            p = points[i]
            conv = nn.Conv2d(p.channels, p.channels, 1)
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
            self.zero_convs[str(i)] = conv
        if axes.encoder == "conv":
            # randomly initialized strided stack replacing the codec encoder
            self.conv_encoder = nn.Sequential(
                nn.Conv2d(3, 16, 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(32, 4, 3, padding=1),
            )
        else:
            self.conv_encoder = None
        if axes.cross_attn == "with":
            # retained cross-attention layers attend to a learned context,
            # never to the prompt: the branch stays text-free
            self.text_context = nn.Parameter(
                torch.zeros(base_config.text_len, base_config.text_dim)
            )
        else:
            self.text_context = None

    @property
    def n_points(self) -> int:
        return self.unet.config.n_insertion_points


def _inject_indices(config: DenoiserConfig, injection: str) -> list[int]:
    points = config.insertion_points()
    if injection == "full":
        return [p.index for p in points]
    if injection == "half":
        # decoder-side points only
        return [p.index for p in points if p.stage == "up"]
    if injection == "cn":
        return [p.index for p in points if p.stage in ("mid", "up")]
    raise ParameterError(f"unknown injection mode {injection!r}")


# ControlNet-style mapping: the encoder-only branch's own activations that
# stand in for the base's mid/up-point features. The down-path activations
# mirror the skip tensors the base decoder consumes at those points.
def _cn_source_indices(config: DenoiserConfig) -> dict[int, int]:
    points = config.insertion_points()
    down_blocks = [p.index for p in points if p.stage == "down" and ".block" in p.location]
    mid = [p.index for p in points if p.stage == "mid"][0]
    ups = [p.index for p in points if p.stage == "up"]
    # base up blocks pop skips in reverse push order
    return {mid: mid, **{u: down_blocks[-(k + 1)] for k, u in enumerate(ups)}}


def init_from_base(base: UNet, axes: AblationAxes = AblationAxes(), seed: int = 0) -> BranchParams:
    """Clone the base denoiser into a branch per the ablation axes.

    The cloned weights equal the base's bit-exactly; the widened input
    convolution keeps the base weights on its first 4 channels and zeros on
    the extra ones; every zero convolution starts at exactly zero, so the
    combined model's output equals the frozen base's until training begins.
    """
    if base.config.in_channels != base.config.latent_channels:
        raise CompatibilityError("base denoiser must take bare latents as input")
    torch.manual_seed(seed)  # randomly initialized parts (conv encoder stack)
    branch = BranchParams(base.config, axes)
    base_state = base.state_dict()
    branch_state = branch.unet.state_dict()
    loaded = {}
    for name, tensor in branch_state.items():
        if name == "conv_in.weight":
            widened = torch.zeros_like(tensor)
            widened[:, : base.config.in_channels] = base_state[name]
            loaded[name] = widened
        elif name in base_state and base_state[name].shape == tensor.shape:
            loaded[name] = base_state[name].clone()
        else:
            loaded[name] = tensor  # branch-only parameters keep their init
    branch.unet.load_state_dict(loaded)
    return branch


def branch_forward(
    z_t: Tensor,
    z0_masked: Tensor,
    m_resized: Tensor,
    t: int,
    params: BranchParams,
) -> list:
    """Zero-convolved features for every insertion point.

    Entries at points the axes exclude are None. With encoder='conv',
    ``z0_masked`` is the masked image (3,64,64) instead of its latent.
    """
    feats = _branch_features_batched(
        z_t[None], z0_masked[None], m_resized[None], torch.tensor([t]), params
    )
    return [f[0] if f is not None else None for f in feats]


def _branch_features_batched(
    z_t: Tensor, masked: Tensor, m_resized: Tensor, t: Tensor, params: BranchParams
) -> list:
    cfg = params.unet.config
    if params.conv_encoder is not None:
        if masked.shape[1:] != (3, 64, 64):
            raise ShapeError(
                f"conv encoder expects masked images (3,64,64), got {tuple(masked.shape[1:])}"
            )
        masked = params.conv_encoder(masked)
    elif masked.shape[1:] != (4, cfg.latent_size, cfg.latent_size):
        raise ShapeError(
            f"expected masked latent (4,{cfg.latent_size},{cfg.latent_size}), "
            f"got {tuple(masked.shape[1:])}"
        )
    if m_resized.shape[1:] != (cfg.latent_size, cfg.latent_size):
        raise ShapeError(
            f"expected resized mask ({cfg.latent_size},{cfg.latent_size}), "
            f"got {tuple(m_resized.shape[1:])}"
        )
    parts = [z_t, masked]
    if params.axes.mask_in_input == "with":
        parts.append(m_resized[:, None])
    x = torch.cat(parts, dim=1)
    ctx = None
    if params.text_context is not None:
        ctx = params.text_context[None].expand(x.shape[0], -1, -1)
    _, captured = params.unet._run(x, t, ctx, capture=True)
    n = params.n_points
    out: list = [None] * n
    if params.axes.injection == "cn":
        source = _cn_source_indices(cfg)
        for i in params.inject_indices:
            out[i] = params.zero_convs[str(i)](captured[source[i]])
    else:
        for i in params.inject_indices:
            out[i] = params.zero_convs[str(i)](captured[i])
    return out


def _make_denoiser(base: UNet, cond: Tensor, uncond: Tensor, guidance_scale: float,
                   feats_fn=None, w: float = 1.0):
    """Denoiser callable for the sampler.

    When both guided predictions are needed, the conditional call computes the
    pair in one batch-2 forward and caches the unconditional half for the
    sampler's immediately following call. Branch features (from ``feats_fn``)
    are computed once per step and shared by both rows; they are skipped
    entirely at w = 0 so that path is bit-identical to the plain base model.
    """
    pair_mode = guidance_scale not in (0.0, 1.0)
    state: dict = {}

    def feats_for(z: Tensor, t: int):
        if feats_fn is None or w == 0.0:
            return None
        key = (t, id(z))
        if state.get("fkey") != key:
            state["fkey"] = key
            state["feats"] = feats_fn(z, t)
        return state["feats"]

    def denoiser(z: Tensor, t: int, ctx: Tensor) -> Tensor:
        feats = feats_for(z, t)
        inj = None if feats is None else [
            f[None] if f is not None else None for f in feats
        ]
        with torch.no_grad():
            if pair_mode:
                key = (t, id(z))
                if ctx is uncond and state.get("pkey") == key:
                    return state.pop("puncond")
                if ctx is not cond:  # unexpected order: fall back to one call
                    eps, _ = base._run(z[None], torch.tensor([t]), ctx[None],
                                       injected=inj, w=w)
                    return eps[0]
                zb = z[None].expand(2, *z.shape)
                ctxb = torch.stack([cond, uncond])
                inj2 = None if inj is None else [
                    f.expand(2, *f.shape[1:]) if f is not None else None for f in inj
                ]
                eps, _ = base._run(zb, torch.tensor([t, t]), ctxb, injected=inj2, w=w)
                state["pkey"] = key
                state["puncond"] = eps[1]
                return eps[0]
            eps, _ = base._run(z[None], torch.tensor([t]), ctx[None], injected=inj, w=w)
            return eps[0]

    return denoiser


def inpaint(
    image: Tensor,
    mask: Tensor,
    options: InpaintOptions,
    base: UNet,
    branch: BranchParams,
    codec: CodecParams,
    schedule: NoiseSchedule,
    text_encoder: TextEncoder,
    per_step_hook=None,
) -> Tensor:
    """Full pipeline: mask the image, encode, sample with per-layer feature
    injection, decode, and blend. Deterministic given the seed."""
    if image.shape[1:] != mask.shape:
        raise ShapeError(
            f"image {tuple(image.shape)} and mask {tuple(mask.shape)} dims differ"
        )
    x0_masked = make_masked_image(image, mask)
    masked_in = (
        encode(x0_masked, codec) if branch.conv_encoder is None else x0_masked
    )
    m_resized = downsample_mask(mask)

    cond = embed_text(options.prompt, text_encoder)
    uncond = embed_text("", text_encoder)

    gen = torch.Generator().manual_seed(options.sampler.seed)
    z_T = torch.randn(
        (base.config.latent_channels, base.config.latent_size, base.config.latent_size),
        generator=gen,
    )

    def feats_fn(z: Tensor, t: int):
        with torch.no_grad():
            return branch_forward(z, masked_in, m_resized, t, branch)

    denoiser = _make_denoiser(
        base, cond, uncond, options.sampler.guidance_scale, feats_fn, options.w
    )
    with torch.no_grad():
        z0 = sample(
            denoiser, z_T, cond, uncond, options.sampler, schedule, per_step_hook
        )
        decoded = decode(z0, codec)
    return pixel_blend(decoded, image, mask, options.blend_mode, options.blur_sigma)


def text_to_image(
    prompt: str,
    base: UNet,
    codec: CodecParams,
    schedule: NoiseSchedule,
    text_encoder: TextEncoder,
    sampler: SamplerConfig = SamplerConfig(),
) -> Tensor:
    """Plain text-to-image sampling with the base model alone."""
    cond = embed_text(prompt, text_encoder)
    uncond = embed_text("", text_encoder)
    gen = torch.Generator().manual_seed(sampler.seed)
    z_T = torch.randn(
        (base.config.latent_channels, base.config.latent_size, base.config.latent_size),
        generator=gen,
    )
    denoiser = _make_denoiser(base, cond, uncond, sampler.guidance_scale)
    with torch.no_grad():
        z0 = sample(denoiser, z_T, cond, uncond, sampler, schedule)
        return decode(z0, codec)


def sdi_inpaint(
    image: Tensor,
    mask: Tensor,
    options: InpaintOptions,
    model: UNet,
    codec: CodecParams,
    schedule: NoiseSchedule,
    text_encoder: TextEncoder,
) -> Tensor:
    """Single-branch baseline: a channel-expanded denoiser consumes the
    concatenated [noisy latent, masked latent, resized mask] directly."""
    x0_masked = make_masked_image(image, mask)
    z0_masked = encode(x0_masked, codec)
    m_resized = downsample_mask(mask)
    cond = embed_text(options.prompt, text_encoder)
    uncond = embed_text("", text_encoder)
    gen = torch.Generator().manual_seed(options.sampler.seed)
    z_T = torch.randn(z0_masked.shape, generator=gen)

    def denoiser(z: Tensor, t: int, ctx: Tensor) -> Tensor:
        x = torch.cat([z, z0_masked, m_resized[None]], dim=0)
        with torch.no_grad():
            eps, _ = model._run(x[None], torch.tensor([t]), ctx[None])
        return eps[0]

    with torch.no_grad():
        z0 = sample(denoiser, z_T, cond, uncond, options.sampler, schedule)
        decoded = decode(z0, codec)
    return pixel_blend(decoded, image, mask, options.blend_mode, options.blur_sigma)


def bld_inpaint(
    image: Tensor,
    mask: Tensor,
    options: InpaintOptions,
    base: UNet,
    codec: CodecParams,
    schedule: NoiseSchedule,
    text_encoder: TextEncoder,
) -> Tensor:
    """Latent-blending baseline: plain sampling where, after every step, the
    preserved region of the latent is overwritten with the noised masked-image
    latent at the step's noise level."""
    x0_masked = make_masked_image(image, mask)
    z0_masked = encode(x0_masked, codec)
    m_resized = downsample_mask(mask)

    cond = embed_text(options.prompt, text_encoder)
    uncond = embed_text("", text_encoder)
    gen = torch.Generator().manual_seed(options.sampler.seed)
    eps_init = torch.randn(z0_masked.shape, generator=gen)
    z_T = add_noise(z0_masked, eps_init, schedule.T, schedule)

    def hook(z: Tensor, t_prev: int) -> Tensor:
        if t_prev == 0:
            z_masked_t = z0_masked
        else:
            eps = torch.randn(z0_masked.shape, generator=gen)
            z_masked_t = add_noise(z0_masked, eps, t_prev, schedule)
        return latent_blend(z, z_masked_t, m_resized)

    denoiser = _make_denoiser(base, cond, uncond, options.sampler.guidance_scale)
    with torch.no_grad():
        z0 = sample(denoiser, z_T, cond, uncond, options.sampler, schedule, hook)
        decoded = decode(z0, codec)
    return pixel_blend(decoded, image, mask, options.blend_mode, options.blur_sigma)
