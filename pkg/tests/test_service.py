import base64
import io
import threading

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient
from PIL import Image

from inpainter.branch import init_from_base
from inpainter.checkpoint import save_checkpoint
from inpainter.codec import CodecParams
from inpainter.diffusion import make_schedule
from inpainter.errors import CheckpointError
from inpainter.service import load_model_store, make_app
from inpainter.text import TextEncoder
from inpainter.training import codec_checkpoint, schedule_config
from inpainter.unet import DenoiserConfig, UNet

SCHEDULE_T = 40


def _write_checkpoints(tmp_path, seed=0, extra_base=False):
    """Small untrained checkpoints are enough to exercise the service."""
    torch.manual_seed(seed)
    codec = CodecParams(latent_scale=1.0)
    unet = UNet(DenoiserConfig())
    text = TextEncoder()
    branch = init_from_base(unet)

    ck = codec_checkpoint(codec)
    save_checkpoint(ck.tensors, ck.config, tmp_path / "codec.ckpt")

    schedule = make_schedule(T=SCHEDULE_T)
    base_cfg = {
        "kind": "base",
        "denoiser": unet.config.to_dict(),
        "schedule": schedule_config(schedule) | {"T": SCHEDULE_T},
    }
    tensors = {f"unet.{k}": v for k, v in unet.state_dict().items()}
    tensors.update({f"text.{k}": v for k, v in text.state_dict().items()})
    save_checkpoint(tensors, base_cfg, tmp_path / "base.ckpt")
    if extra_base:
        torch.manual_seed(seed + 100)
        unet2 = UNet(DenoiserConfig())
        text2 = TextEncoder()
        tensors2 = {f"unet.{k}": v for k, v in unet2.state_dict().items()}
        tensors2.update({f"text.{k}": v for k, v in text2.state_dict().items()})
        save_checkpoint(tensors2, base_cfg, tmp_path / "base2.ckpt")

    branch_cfg = {
        "kind": "branch",
        "axes": branch.axes.to_dict(),
        "denoiser": unet.config.to_dict(),
        "schedule": schedule_config(schedule) | {"T": SCHEDULE_T},
        "freeze_base": True,
        "includes_base": False,
    }
    save_checkpoint(
        {f"branch.{k}": v for k, v in branch.state_dict().items()},
        branch_cfg,
        tmp_path / "branch.ckpt",
    )


@pytest.fixture(scope="module")
def client(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("svc")
    _write_checkpoints(tmp_path, extra_base=True)
    store = load_model_store(
        tmp_path / "codec.ckpt",
        {"base": tmp_path / "base.ckpt", "base2": tmp_path / "base2.ckpt"},
        {"branch": tmp_path / "branch.ckpt"},
    )
    return TestClient(make_app(store))


def _png_b64(arr: np.ndarray, mode: str) -> str:
    img = Image.fromarray(arr, mode=mode)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _request_images(seed=0):
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    mask = np.zeros((64, 64), dtype=np.uint8)
    return _png_b64(image, "RGB"), _png_b64(mask, "L"), image


def test_health_ready(client):
    res = client.get("/health")
    assert res.status_code == 200
    body = res.json()
    assert body["status"] == "ready"
    assert "base" in body["bases"]


def test_models_catalog(client):
    res = client.get("/models")
    assert res.status_code == 200
    models = res.json()["models"]
    roles = {(m["id"], m["role"]) for m in models}
    assert ("base", "base") in roles
    assert ("base2", "base") in roles
    assert ("branch", "branch") in roles
    branch_entry = [m for m in models if m["role"] == "branch"][0]
    assert branch_entry["axes"]["injection"] == "full"
    # catalog stable across calls
    assert client.get("/models").json() == res.json()


def test_inpaint_zero_mask_paste_round_trips_image(client):
    image_b64, mask_b64, original = _request_images(1)
    res = client.post(
        "/inpaint",
        json={
            "image": image_b64,
            "mask": mask_b64,
            "prompt": "a red circle",
            "blend_mode": "paste",
            "steps": 3,
            "seed": 11,
        },
    )
    assert res.status_code == 200, res.text
    body = res.json()
    out = np.asarray(
        Image.open(io.BytesIO(base64.b64decode(body["image"]))).convert("RGB")
    )
    assert np.array_equal(out, original)
    assert body["model_id"] == {"base": "base", "branch": "branch"}
    assert body["timing_ms"] > 0


def test_inpaint_defaults_echoed(client):
    image_b64, mask_b64, _ = _request_images(2)
    res = client.post("/inpaint", json={"image": image_b64, "mask": mask_b64, "steps": 3})
    assert res.status_code == 200
    opts = res.json()["options"]
    assert opts["guidance"] == 7.5
    assert opts["blend_mode"] == "blur"
    assert opts["blur_sigma"] == 3.0
    assert opts["w"] == 1.0

    # with steps omitted, the echo resolves to the 50-step default; T=40 here
    # so the validator rejects it, proving the default was applied
    res2 = client.post("/inpaint", json={"image": image_b64, "mask": mask_b64})
    assert res2.status_code == 400
    assert res2.json()["field"] == "steps"
    assert "[1, 40]" in res2.json()["error"]


def test_inpaint_truncated_base64_names_field(client):
    image_b64, mask_b64, _ = _request_images(3)
    res = client.post(
        "/inpaint",
        json={"image": image_b64, "mask": mask_b64[: len(mask_b64) // 2] + "!!", "steps": 3},
    )
    assert res.status_code == 400
    assert res.json()["field"] == "mask"


def test_inpaint_dim_mismatch_rejected(client):
    image_b64, _, _ = _request_images(4)
    small_mask = _png_b64(np.zeros((32, 32), dtype=np.uint8), "L")
    res = client.post(
        "/inpaint", json={"image": image_b64, "mask": small_mask, "steps": 3}
    )
    assert res.status_code == 400
    assert res.json()["field"] == "mask"


def test_inpaint_out_of_range_options(client):
    image_b64, mask_b64, _ = _request_images(5)
    for payload, field in (
        ({"w": 2.0}, "w"),
        ({"steps": 0}, "steps"),
        ({"steps": 500}, "steps"),
        ({"guidance": -1.0}, "guidance"),
        ({"blend_mode": "alpha"}, "blend_mode"),
        ({"blur_sigma": -2.0}, "blur_sigma"),
        ({"base_id": "nope"}, "base_id"),
        ({"branch_id": "nope"}, "branch_id"),
    ):
        body = {"image": image_b64, "mask": mask_b64, "steps": 3, **payload}
        res = client.post("/inpaint", json=body)
        assert res.status_code == 400, field
        assert res.json()["field"] == field


def test_identical_requests_identical_images_concurrently(client):
    image_b64, mask_b64, _ = _request_images(6)
    payload = {
        "image": image_b64,
        "mask": mask_b64,
        "prompt": "a blue square",
        "steps": 3,
        "seed": 123,
        "blend_mode": "none",
    }
    results = [None, None]

    def hit(i):
        results[i] = client.post("/inpaint", json=payload).json()["image"]

    threads = [threading.Thread(target=hit, args=(i,)) for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results[0] == results[1]


def test_plug_and_play_across_bases(client):
    """Same branch, two different bases: both succeed, model ids echo, and
    the outputs differ (the base changed) while the branch stayed shared."""
    image_b64, mask_b64, _ = _request_images(7)
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[20:40, 20:40] = 255
    mask_b64 = _png_b64(mask, "L")
    payload = {
        "image": image_b64,
        "mask": mask_b64,
        "steps": 3,
        "seed": 5,
        "blend_mode": "none",
    }
    res_a = client.post("/inpaint", json={**payload, "base_id": "base"})
    res_b = client.post("/inpaint", json={**payload, "base_id": "base2"})
    assert res_a.status_code == 200 and res_b.status_code == 200
    assert res_a.json()["model_id"]["base"] == "base"
    assert res_b.json()["model_id"]["base"] == "base2"
    assert res_a.json()["model_id"]["branch"] == "branch"
    assert res_a.json()["image"] != res_b.json()["image"]


def test_branch_features_identical_across_bases(tmp_path):
    """The plug-and-play contract underneath: branch outputs depend only on
    branch weights, never on which base consumes them."""
    from inpainter.branch import branch_forward
    from inpainter.training import build_base, build_branch
    from inpainter.checkpoint import load_checkpoint

    _write_checkpoints(tmp_path, extra_base=True)
    branch = build_branch(load_checkpoint(tmp_path / "branch.ckpt"))
    g = torch.Generator().manual_seed(0)
    z = torch.randn(4, 16, 16, generator=g)
    masked = torch.randn(4, 16, 16, generator=g)
    m = torch.rand(16, 16, generator=g)
    feats = branch_forward(z, masked, m, 10, branch)
    # loading and using either base cannot perturb the branch
    for name in ("base.ckpt", "base2.ckpt"):
        unet, _, _ = build_base(load_checkpoint(tmp_path / name))
        with torch.no_grad():
            unet.forward_injected(z, 10, torch.zeros(8, 64), feats, w=1.0)
        feats_again = branch_forward(z, masked, m, 10, branch)
        for a, b in zip(feats, feats_again):
            assert torch.equal(a, b)


def test_missing_checkpoint_fails_startup(tmp_path):
    with pytest.raises((FileNotFoundError, CheckpointError)):
        load_model_store(
            tmp_path / "nope.ckpt", {"b": tmp_path / "nope2.ckpt"}, {}
        )
