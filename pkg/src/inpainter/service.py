"""HTTP inpainting service.

Weights are loaded once at startup and never mutated; every request owns its
sampler state, so identical requests with identical seeds return identical
images even when handled concurrently. Requests run on a bounded worker pool
and are rejected with a budget error when they exceed the time limit.
"""

from __future__ import annotations

import base64
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel

from .branch import BranchParams, InpaintOptions, inpaint
from .checkpoint import load_checkpoint
from .codec import CodecParams
from .diffusion import NoiseSchedule, SamplerConfig
from .errors import ParameterError
from .text import TextEncoder
from .training import build_base, build_branch, build_codec
from .unet import UNet

JOB_TIME_LIMIT_S = 60.0


@dataclass
class LoadedBase:
    unet: UNet
    text_encoder: TextEncoder
    schedule: NoiseSchedule


@dataclass
class ModelStore:
    codec: CodecParams
    bases: dict[str, LoadedBase] = field(default_factory=dict)
    branches: dict[str, BranchParams] = field(default_factory=dict)
    branch_axes: dict[str, dict] = field(default_factory=dict)

    @property
    def default_base(self) -> str:
        return next(iter(self.bases))

    @property
    def default_branch(self) -> str:
        return next(iter(self.branches))


def load_model_store(
    codec_path: str | Path,
    base_paths: dict[str, str | Path],
    branch_paths: dict[str, str | Path],
) -> ModelStore:
    """Load all checkpoints; any failure here aborts startup."""
    codec = build_codec(load_checkpoint(codec_path))
    codec.eval()
    store = ModelStore(codec=codec)
    for name, path in base_paths.items():
        unet, text_encoder, schedule = build_base(load_checkpoint(path))
        unet.eval()
        text_encoder.eval()
        store.bases[name] = LoadedBase(unet, text_encoder, schedule)
    for name, path in branch_paths.items():
        ckpt = load_checkpoint(path)
        branch = build_branch(ckpt)
        branch.eval()
        store.branches[name] = branch
        store.branch_axes[name] = ckpt.config.get("axes", {})
    if not store.bases or not store.branches:
        raise ParameterError("need at least one base and one branch checkpoint")
    return store


class InpaintRequest(BaseModel):
    image: str  # base64 PNG, RGB
    mask: str  # base64 PNG, single channel, 255 = hole
    prompt: str = ""
    w: float = 1.0
    blend_mode: str = "blur"
    blur_sigma: float = 3.0
    steps: int = 50
    guidance: float = 7.5
    seed: int = 0
    base_id: str | None = None
    branch_id: str | None = None


def _client_error(field_name: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=400, content={"field": field_name, "error": message})


def _decode_png(b64: str, field_name: str, mode: str):
    try:
        raw = base64.b64decode(b64, validate=True)
    except Exception as e:
        raise ValueError(f"{field_name}: invalid base64: {e}") from e
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as e:
        raise ValueError(f"{field_name}: not a decodable image: {e}") from e
    return img.convert(mode)


def _encode_png(image: torch.Tensor) -> str:
    arr = (image.detach().cpu().numpy().clip(0, 1) * 255.0).round().astype(np.uint8)
    img = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def make_app(store: ModelStore, time_limit_s: float = JOB_TIME_LIMIT_S) -> FastAPI:
    app = FastAPI(title="inpainter")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    workers = max(1, os.cpu_count() or 1)
    executor = ThreadPoolExecutor(max_workers=workers)

    @app.get("/health")
    def health():
        return {
            "status": "ready",
            "bases": sorted(store.bases),
            "branches": sorted(store.branches),
        }

    @app.get("/models")
    def models():
        catalog = [
            {"id": name, "role": "base"} for name in sorted(store.bases)
        ] + [
            {"id": name, "role": "branch", "axes": store.branch_axes[name]}
            for name in sorted(store.branches)
        ]
        return {"models": catalog}

    @app.post("/inpaint")
    def handle_inpaint(req: InpaintRequest):
        base_id = req.base_id or store.default_base
        branch_id = req.branch_id or store.default_branch
        if base_id not in store.bases:
            return _client_error("base_id", f"unknown base model {base_id!r}")
        if branch_id not in store.branches:
            return _client_error("branch_id", f"unknown branch model {branch_id!r}")
        loaded = store.bases[base_id]
        T = loaded.schedule.T
        if not 0.0 <= req.w <= 1.0:
            return _client_error("w", f"w must be in [0, 1], got {req.w}")
        if not 1 <= req.steps <= T:
            return _client_error("steps", f"steps must be in [1, {T}], got {req.steps}")
        if req.guidance < 0:
            return _client_error("guidance", f"guidance must be >= 0, got {req.guidance}")
        if req.blend_mode not in ("none", "paste", "blur"):
            return _client_error("blend_mode", f"unknown blend mode {req.blend_mode!r}")
        if req.blur_sigma < 0:
            return _client_error("blur_sigma", f"blur_sigma must be >= 0, got {req.blur_sigma}")
        try:
            image_pil = _decode_png(req.image, "image", "RGB")
        except ValueError as e:
            return _client_error("image", str(e))
        try:
            mask_pil = _decode_png(req.mask, "mask", "L")
        except ValueError as e:
            return _client_error("mask", str(e))
        if image_pil.size != mask_pil.size:
            return _client_error(
                "mask", f"mask dims {mask_pil.size} do not match image dims {image_pil.size}"
            )
        if image_pil.size != (64, 64):
            return _client_error("image", f"expected a 64x64 image, got {image_pil.size}")

        image = torch.from_numpy(
            np.asarray(image_pil, dtype=np.float32).transpose(2, 0, 1) / 255.0
        )
        mask = torch.from_numpy(
            (np.asarray(mask_pil, dtype=np.uint8) >= 128).astype(np.float32)
        )
        options = InpaintOptions(
            w=req.w,
            blend_mode=req.blend_mode,
            blur_sigma=req.blur_sigma,
            prompt=req.prompt,
            sampler=SamplerConfig(steps=req.steps, guidance_scale=req.guidance, seed=req.seed),
        )

        def job():
            return inpaint(
                image, mask, options, loaded.unet, store.branches[branch_id],
                store.codec, loaded.schedule, loaded.text_encoder,
            )

        start = time.monotonic()
        future = executor.submit(job)
        try:
            result = future.result(timeout=time_limit_s)
        except FutureTimeout:
            future.cancel()
            return JSONResponse(
                status_code=503,
                content={"error": f"job exceeded the {time_limit_s:.0f}s budget"},
            )
        except ParameterError as e:
            return _client_error("request", str(e))
        except Exception as e:
            return JSONResponse(status_code=500, content={"error": f"inpainting failed: {e}"})
        elapsed_ms = (time.monotonic() - start) * 1000.0

        return {
            "image": _encode_png(result),
            "timing_ms": elapsed_ms,
            "options": {
                "prompt": req.prompt,
                "w": req.w,
                "blend_mode": req.blend_mode,
                "blur_sigma": req.blur_sigma,
                "steps": req.steps,
                "guidance": req.guidance,
                "seed": req.seed,
            },
            "model_id": {"base": base_id, "branch": branch_id},
        }

    return app


def serve(
    host: str,
    port: int,
    codec_path: str | Path,
    base_paths: dict[str, str | Path],
    branch_paths: dict[str, str | Path],
) -> None:
    """Load checkpoints and serve until shutdown. Missing or unreadable
    checkpoints raise before the socket opens."""
    import uvicorn

    torch.set_num_threads(1)  # per-request determinism; parallelism is per-worker
    store = load_model_store(codec_path, base_paths, branch_paths)
    app = make_app(store)
    uvicorn.run(app, host=host, port=port, log_level="info")
