"""Toy-scale dual-branch latent diffusion inpainting."""

from .branch import AblationAxes, BranchParams, InpaintOptions, branch_forward, init_from_base, inpaint
from .codec import CodecParams, decode, encode, train_codec
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    add_noise,
    ddim_step,
    denoise_loss,
    make_schedule,
    sample,
)
from .masks import (
    blur_mask,
    downsample_mask,
    gen_brush_mask,
    gen_seg_mask,
    latent_blend,
    make_masked_image,
    pixel_blend,
)
from .metrics import caption_probe, lpips_proxy, region_metrics
from .scenes import SceneSpec, render_scene, synth_dataset
from .text import TextEncoder, embed_text
from .unet import DenoiserConfig, UNet

__all__ = [
    "AblationAxes",
    "BranchParams",
    "CodecParams",
    "DenoiserConfig",
    "InpaintOptions",
    "NoiseSchedule",
    "SamplerConfig",
    "SceneSpec",
    "TextEncoder",
    "UNet",
    "add_noise",
    "blur_mask",
    "branch_forward",
    "caption_probe",
    "ddim_step",
    "decode",
    "denoise_loss",
    "downsample_mask",
    "embed_text",
    "encode",
    "gen_brush_mask",
    "gen_seg_mask",
    "init_from_base",
    "inpaint",
    "latent_blend",
    "lpips_proxy",
    "make_masked_image",
    "make_schedule",
    "pixel_blend",
    "region_metrics",
    "render_scene",
    "sample",
    "synth_dataset",
    "train_codec",
]
