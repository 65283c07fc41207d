"""Deterministic convolutional image codec: 64x64x3 images <-> 4x16x16 latents.

The codec is a plain autoencoder (no KL term, no latent sampling) trained
with mean-squared reconstruction plus a small latent-magnitude penalty. It is
intentionally lossy; pixel blending exists downstream to compensate. After
training, latents are rescaled to roughly unit standard deviation so the
diffusion noise schedule applies cleanly; the scale is stored with the
weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ParameterError, ShapeError, TrainingError

Tensor = torch.Tensor

IMAGE_SHAPE = (3, 64, 64)
LATENT_SHAPE = (4, 16, 16)


class CodecNet(nn.Module):
    """3 conv stages down to factor 4; mirror-image decoder with sigmoid out."""

    def __init__(self):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),   # 64 -> 32
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),  # 32 -> 16
            nn.SiLU(),
            nn.Conv2d(64, 4, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(4, 64, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(64, 32, 3, padding=1),             # 16 -> 32
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(32, 16, 3, padding=1),             # 32 -> 64
            nn.SiLU(),
            nn.Conv2d(16, 3, 3, padding=1),
            nn.Sigmoid(),
        )

    def encoder_features(self, x: Tensor) -> list[Tensor]:
        """Intermediate encoder activations (used by the perceptual proxy)."""
        feats = []
        h = x
        for layer in self.encoder:
            h = layer(h)
            if isinstance(layer, nn.SiLU):
                feats.append(h)
        feats.append(h)
        return feats


class CodecParams(nn.Module):
    """Trained codec weights plus the latent rescaling factor."""

    def __init__(self, latent_scale: float = 1.0):
        super().__init__()
        self.net = CodecNet()
        self.register_buffer("latent_scale", torch.tensor(float(latent_scale)))


def _check_image(image: Tensor) -> None:
    if tuple(image.shape) != IMAGE_SHAPE:
        raise ShapeError(f"expected image of shape {IMAGE_SHAPE}, got {tuple(image.shape)}")


def encode(image: Tensor, codec: CodecParams) -> Tensor:
    """Image (3,64,64) in [0,1] -> latent (4,16,16). Deterministic."""
    _check_image(image)
    with torch.no_grad():
        z = codec.net.encoder(image[None])[0]
    return z / codec.latent_scale


def decode(latent: Tensor, codec: CodecParams) -> Tensor:
    """Latent (4,16,16) -> image (3,64,64) clamped to [0,1]. Deterministic."""
    if tuple(latent.shape) != LATENT_SHAPE:
        raise ShapeError(f"expected latent of shape {LATENT_SHAPE}, got {tuple(latent.shape)}")
    with torch.no_grad():
        x = codec.net.decoder(latent[None] * codec.latent_scale)[0]
    return torch.clamp(x, 0.0, 1.0)


def encode_batch(images: Tensor, codec: CodecParams) -> Tensor:
    with torch.no_grad():
        return codec.net.encoder(images) / codec.latent_scale


def decode_batch(latents: Tensor, codec: CodecParams) -> Tensor:
    with torch.no_grad():
        return torch.clamp(codec.net.decoder(latents * codec.latent_scale), 0.0, 1.0)


@dataclass(frozen=True)
class CodecTrainConfig:
    learning_rate: float = 3e-3
    steps: int = 5000
    batch_size: int = 16
    seed: int = 0
    holdout_fraction: float = 0.1
    latent_penalty: float = 1e-4


def train_codec(
    dataset: list[Tensor], config: CodecTrainConfig = CodecTrainConfig()
) -> tuple[CodecParams, dict]:
    """Train the codec on a list of (3,64,64) images.

    Returns the trained CodecParams and a history dict with the step losses
    and the held-out reconstruction MSE. Deterministic given the seed under
    single-threaded execution.
    """
    if not dataset:
        raise ParameterError("dataset must be non-empty")
    torch.manual_seed(config.seed)
    model = CodecParams()
    model.train()
    images = torch.stack(dataset)
    n_hold = max(1, int(len(dataset) * config.holdout_fraction))
    if len(dataset) <= n_hold:
        n_hold = 0
    train_imgs = images[: len(images) - n_hold] if n_hold else images
    hold_imgs = images[len(images) - n_hold:] if n_hold else images

    # Adam: the codec is plumbing, and SGD needs several times the steps to
    # clear the reconstruction threshold on this architecture
    opt = torch.optim.Adam(model.net.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    losses = []
    for step in range(config.steps):
        idx = torch.randint(0, len(train_imgs), (config.batch_size,), generator=gen)
        batch = train_imgs[idx]
        z = model.net.encoder(batch)
        recon = model.net.decoder(z)
        loss = ((recon - batch) ** 2).mean() + config.latent_penalty * (z**2).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"codec loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())

    model.eval()
    with torch.no_grad():
        z_all = model.net.encoder(train_imgs)
        scale = float(z_all.std())
        model.latent_scale.fill_(scale if scale > 0 else 1.0)
        recon = model.net.decoder(model.net.encoder(hold_imgs))
        holdout_mse = float(((recon - hold_imgs) ** 2).mean())
    history = {"losses": losses, "holdout_mse": holdout_mse}
    return model, history
