"""Training loops for the base denoiser and the inpainting branch.

All loops use plain stochastic gradient descent with momentum, a fixed seed,
and single-writer weight updates, so two runs with the same seed produce
bit-identical checkpoints under single-threaded execution. Prompts are
dropped to the learned null sequence 10% of the time so classifier-free
guidance has a trained unconditional path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .branch import AblationAxes, BranchParams, _branch_features_batched, init_from_base
from .checkpoint import Checkpoint, VERSION, load_into
from .codec import CodecParams, CodecTrainConfig, encode_batch, train_codec
from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_T,
    NoiseSchedule,
    make_schedule,
)
from .errors import CompatibilityError, ParameterError, TrainingError
from .masks import downsample_mask, load_mask_png
from .scenes import DatasetRecord, load_image_png, record_paths
from .text import TextEncoder
from .unet import DenoiserConfig, UNet

Tensor = torch.Tensor


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    steps: int = 20000
    batch_size: int = 8
    seed: int = 0
    freeze_base: bool = True
    axes: AblationAxes = field(default_factory=AblationAxes)
    single_branch: bool = False  # SDI-style: channel-expanded base, no branch
    momentum: float = 0.9
    cond_dropout: float = 0.1

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ParameterError("steps and batch_size must be positive")


def ema_criterion(losses: list[float], decay: float = 0.99) -> dict:
    """Exponential-moving-average loss; final-10%-mean vs first-10%-mean."""
    ema = []
    value = losses[0]
    for loss in losses:
        value = decay * value + (1 - decay) * loss
        ema.append(value)
    k = max(1, len(ema) // 10)
    head = float(np.mean(ema[:k]))
    tail = float(np.mean(ema[-k:]))
    return {"head": head, "tail": tail, "ok": tail < 0.9 * head}


@dataclass
class TrainingData:
    """Per-record tensors prepared once before the loop."""

    images: Tensor  # (M, 3, 64, 64) unique scene images
    image_index: Tensor  # (N,) record -> image row
    latents: Tensor  # (M, 4, 16, 16)
    masks: Tensor  # (N, 64, 64) float {0,1}
    masked_latents: Tensor  # (N, 4, 16, 16)
    m_resized: Tensor  # (N, 16, 16)
    token_ids: Tensor  # (N, text_len)


def prepare_training_data(
    records: list[DatasetRecord],
    manifest_dir: str | Path,
    codec: CodecParams,
    text_encoder: TextEncoder,
    chunk: int = 64,
) -> TrainingData:
    image_rows: dict[str, int] = {}
    images = []
    image_index = []
    masks = []
    token_ids = []
    for rec in records:
        img_path, mask_path = record_paths(rec, manifest_dir)
        if rec.image not in image_rows:
            image_rows[rec.image] = len(images)
            images.append(load_image_png(img_path))
        image_index.append(image_rows[rec.image])
        masks.append(load_mask_png(mask_path))
        token_ids.append(text_encoder.token_ids(rec.caption))
    images_t = torch.stack(images)
    masks_t = torch.stack(masks)
    index_t = torch.tensor(image_index, dtype=torch.long)

    def enc(batched: Tensor) -> Tensor:
        outs = [encode_batch(batched[i : i + chunk], codec) for i in range(0, len(batched), chunk)]
        return torch.cat(outs)

    latents = enc(images_t)
    masked_images = images_t[index_t] * (1.0 - masks_t)[:, None]
    masked_latents = enc(masked_images)
    m_resized = torch.stack([downsample_mask(m) for m in masks_t])
    return TrainingData(
        images=images_t,
        image_index=index_t,
        latents=latents,
        masks=masks_t,
        masked_latents=masked_latents,
        m_resized=m_resized,
        token_ids=torch.tensor(token_ids, dtype=torch.long),
    )


def _abar_lookup(schedule: NoiseSchedule, dtype: torch.dtype) -> Tensor:
    return torch.from_numpy(schedule.alpha_bar).to(dtype)


def _noisy_batch(
    z0: Tensor, eps: Tensor, t: Tensor, abar: Tensor
) -> Tensor:
    a = abar[t][:, None, None, None]
    return a.sqrt() * z0 + (1.0 - a).sqrt() * eps


def _context_batch(
    text_encoder: TextEncoder,
    ids: Tensor,
    drop: Tensor,
) -> Tensor:
    ctx = text_encoder.forward_ids(ids)
    null = text_encoder.null_seq[None].expand_as(ctx)
    return torch.where(drop[:, None, None], null, ctx)


def schedule_config(schedule: NoiseSchedule) -> dict:
    # the ramp is reconstructed from these on load
    return {"T": schedule.T, "beta_start": schedule.beta_start, "beta_end": schedule.beta_end}


def train_base(
    records: list[DatasetRecord],
    config: TrainConfig,
    codec: CodecParams,
    manifest_dir: str | Path,
    schedule: NoiseSchedule | None = None,
    denoiser_config: DenoiserConfig = DenoiserConfig(),
) -> tuple[Checkpoint, dict]:
    """Text-to-image pretraining of the denoiser on encoded scene images."""
    schedule = schedule or make_schedule()
    torch.manual_seed(config.seed)
    unet = UNet(denoiser_config)
    text_encoder = TextEncoder(denoiser_config.text_dim, denoiser_config.text_len)
    data = prepare_training_data(records, manifest_dir, codec, text_encoder)

    params = list(unet.parameters()) + list(text_encoder.parameters())
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    gen = torch.Generator().manual_seed(config.seed)
    abar = _abar_lookup(schedule, torch.float32)
    B = config.batch_size
    losses: list[float] = []
    for step in range(config.steps):
        idx = torch.randint(0, len(data.token_ids), (B,), generator=gen)
        z0 = data.latents[data.image_index[idx]]
        t = torch.randint(1, schedule.T + 1, (B,), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        drop = torch.rand(B, generator=gen) < config.cond_dropout
        z_t = _noisy_batch(z0, eps, t, abar)
        ctx = _context_batch(text_encoder, data.token_ids[idx], drop)
        pred, _ = unet._run(z_t, t, ctx)
        loss = ((eps - pred) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"base training loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())

    tensors = {f"unet.{k}": v for k, v in unet.state_dict().items()}
    tensors.update({f"text.{k}": v for k, v in text_encoder.state_dict().items()})
    ckpt = Checkpoint(
        version=VERSION,
        config={
            "kind": "base",
            "denoiser": denoiser_config.to_dict(),
            "schedule": schedule_config(schedule),
            "seed": config.seed,
            "steps": config.steps,
        },
        tensors=tensors,
    )
    history = {"losses": losses, "ema": ema_criterion(losses)}
    return ckpt, history


def build_base(ckpt: Checkpoint) -> tuple[UNet, TextEncoder, NoiseSchedule]:
    if ckpt.config.get("kind") not in ("base", "single"):
        raise CompatibilityError(f"expected a base checkpoint, got {ckpt.config.get('kind')!r}")
    cfg = DenoiserConfig.from_dict(ckpt.config["denoiser"])
    unet = UNet(cfg)
    text_encoder = TextEncoder(cfg.text_dim, cfg.text_len)
    load_into(unet, ckpt, prefix="unet.")
    load_into(text_encoder, ckpt, prefix="text.")
    sc = ckpt.config["schedule"]
    schedule = make_schedule(sc["T"], sc["beta_start"], sc["beta_end"])
    return unet, text_encoder, schedule


def train_inpainting(
    records: list[DatasetRecord],
    base_ckpt: Checkpoint,
    config: TrainConfig,
    codec: CodecParams,
    manifest_dir: str | Path,
) -> tuple[Checkpoint, dict]:
    """Train the masked-image branch against a (usually frozen) base model.

    With config.single_branch the base itself is widened to take the
    concatenated inpainting input and fine-tuned end to end instead
    (the dedicated-inpainting-model baseline); no branch exists then.
    """
    if base_ckpt.config.get("kind") != "base":
        raise CompatibilityError("train_inpainting needs a kind='base' checkpoint")
    base, text_encoder, schedule = build_base(base_ckpt)
    torch.manual_seed(config.seed)
    data = prepare_training_data(records, manifest_dir, codec, text_encoder)
    abar = _abar_lookup(schedule, torch.float32)
    B = config.batch_size
    gen = torch.Generator().manual_seed(config.seed)

    if config.single_branch:
        model = _widen_for_single_branch(base)
        trainable = list(model.parameters()) + list(text_encoder.parameters())
    else:
        branch = init_from_base(base, config.axes, seed=config.seed)
        base.requires_grad_(False)
        trainable = list(branch.parameters())
        if not config.freeze_base:
            base.requires_grad_(True)
            trainable += list(base.parameters()) + list(text_encoder.parameters())

    opt = torch.optim.SGD(trainable, lr=config.learning_rate, momentum=config.momentum)
    use_conv_encoder = (not config.single_branch) and config.axes.encoder == "conv"
    losses: list[float] = []
    for step in range(config.steps):
        idx = torch.randint(0, len(data.token_ids), (B,), generator=gen)
        z0 = data.latents[data.image_index[idx]]
        t = torch.randint(1, schedule.T + 1, (B,), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        drop = torch.rand(B, generator=gen) < config.cond_dropout
        z_t = _noisy_batch(z0, eps, t, abar)
        ctx = _context_batch(text_encoder, data.token_ids[idx], drop)
        if use_conv_encoder:
            masked = data.images[data.image_index[idx]] * (1.0 - data.masks[idx])[:, None]
        else:
            masked = data.masked_latents[idx]
        if config.single_branch:
            x = torch.cat([z_t, masked, data.m_resized[idx][:, None]], dim=1)
            pred, _ = model._run(x, t, ctx)
        else:
            feats = _branch_features_batched(z_t, masked, data.m_resized[idx], t, branch)
            pred, _ = base._run(z_t, t, ctx, injected=feats, w=1.0)
        loss = ((eps - pred) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"inpainting training loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())

    history = {"losses": losses, "ema": ema_criterion(losses)}
    if config.single_branch:
        tensors = {f"unet.{k}": v for k, v in model.state_dict().items()}
        tensors.update({f"text.{k}": v for k, v in text_encoder.state_dict().items()})
        ckpt = Checkpoint(
            version=VERSION,
            config={
                "kind": "single",
                "denoiser": model.config.to_dict(),
                "schedule": schedule_config(schedule),
                "seed": config.seed,
                "steps": config.steps,
            },
            tensors=tensors,
        )
        return ckpt, history

    tensors = {f"branch.{k}": v for k, v in branch.state_dict().items()}
    config_out = {
        "kind": "branch",
        "axes": config.axes.to_dict(),
        "denoiser": base.config.to_dict(),
        "schedule": schedule_config(schedule),
        "freeze_base": config.freeze_base,
        "includes_base": not config.freeze_base,
        "seed": config.seed,
        "steps": config.steps,
    }
    if not config.freeze_base:
        tensors.update({f"unet.{k}": v for k, v in base.state_dict().items()})
        tensors.update({f"text.{k}": v for k, v in text_encoder.state_dict().items()})
    ckpt = Checkpoint(version=VERSION, config=config_out, tensors=tensors)
    return ckpt, history


def _widen_for_single_branch(base: UNet) -> UNet:
    """Clone the base with a 9-channel input convolution (extra channels
    zero-initialized, the standard channel-expansion trick)."""
    cfg = replace(base.config, in_channels=9)
    model = UNet(cfg)
    state = model.state_dict()
    base_state = base.state_dict()
    for name, tensor in state.items():
        if name == "conv_in.weight":
            widened = torch.zeros_like(tensor)
            widened[:, : base.config.in_channels] = base_state[name]
            state[name] = widened
        else:
            state[name] = base_state[name].clone()
    model.load_state_dict(state)
    return model


def build_branch(ckpt: Checkpoint) -> BranchParams:
    if ckpt.config.get("kind") != "branch":
        raise CompatibilityError(f"expected a branch checkpoint, got {ckpt.config.get('kind')!r}")
    cfg = DenoiserConfig.from_dict(ckpt.config["denoiser"])
    axes = AblationAxes.from_dict(ckpt.config["axes"])
    branch = BranchParams(cfg, axes)
    load_into(branch, ckpt, prefix="branch.")
    return branch


def build_codec(ckpt: Checkpoint) -> CodecParams:
    if ckpt.config.get("kind") != "codec":
        raise CompatibilityError(f"expected a codec checkpoint, got {ckpt.config.get('kind')!r}")
    codec = CodecParams()
    load_into(codec, ckpt, prefix="codec.")
    return codec


def codec_checkpoint(codec: CodecParams, extra: dict | None = None) -> Checkpoint:
    cfg = {"kind": "codec", "latent_scale": float(codec.latent_scale)}
    if extra:
        cfg.update(extra)
    return Checkpoint(
        version=VERSION,
        config=cfg,
        tensors={f"codec.{k}": v for k, v in codec.state_dict().items()},
    )


def train_codec_from_records(
    records: list[DatasetRecord],
    manifest_dir: str | Path,
    config: CodecTrainConfig = CodecTrainConfig(),
) -> tuple[CodecParams, dict]:
    seen = set()
    images = []
    for rec in records:
        if rec.image in seen:
            continue
        seen.add(rec.image)
        images.append(load_image_png(record_paths(rec, manifest_dir)[0]))
    return train_codec(images, config)
