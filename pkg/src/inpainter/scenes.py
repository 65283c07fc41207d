"""Procedural scene synthesis: flat-color shapes on flat backgrounds.

Scenes are the training and benchmark corpus. Every scene carries exact
ground truth: per-object coverage masks straight from the renderer and a
templated caption that parses back to the scene's attributes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import MaskFilterError, ParameterError
from .masks import IMAGE_SIZE, gen_brush_mask, gen_seg_mask, save_mask_png

Tensor = torch.Tensor

# Palette colors are pairwise >= 0.3 apart in L-infinity so the caption probe
# cannot confuse them at its 0.15 tolerance.
PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.75),
    "orange": (0.90, 0.50, 0.10),
    "cyan": (0.10, 0.80, 0.85),
    "white": (0.92, 0.92, 0.92),
    "gray": (0.50, 0.50, 0.50),
}

SHAPES = ("circle", "square", "triangle")


@dataclass(frozen=True)
class SceneObject:
    shape: str  # circle | square | triangle
    color: str  # palette key
    center: tuple[int, int]  # (row, col)
    size: int  # radius / half-side / half-height, >= 6 px

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ParameterError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise ParameterError(f"unknown color {self.color!r}")
        if self.size < 6:
            raise ParameterError(f"object size must be >= 6 px, got {self.size}")


@dataclass(frozen=True)
class SceneSpec:
    background: str  # palette key
    objects: tuple[SceneObject, ...]  # 1..3, non-overlapping

    @property
    def caption(self) -> str:
        parts = [f"a {o.color} {o.shape}" for o in self.objects]
        return f"{' and '.join(parts)} on a {self.background} background"

    def to_dict(self) -> dict:
        return {
            "background": self.background,
            "objects": [
                {"shape": o.shape, "color": o.color, "center": list(o.center), "size": o.size}
                for o in self.objects
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        objs = tuple(
            SceneObject(o["shape"], o["color"], (o["center"][0], o["center"][1]), o["size"])
            for o in d["objects"]
        )
        return SceneSpec(background=d["background"], objects=objs)


def parse_caption(caption: str) -> tuple[list[tuple[str, str]], str]:
    """Invert the caption template: [(color, shape), ...] plus background."""
    head, _, tail = caption.rpartition(" on a ")
    if not head or not tail.endswith(" background"):
        raise ParameterError(f"caption does not match template: {caption!r}")
    background = tail[: -len(" background")]
    pairs = []
    for part in head.split(" and "):
        words = part.split()
        if len(words) != 3 or words[0] != "a":
            raise ParameterError(f"caption does not match template: {caption!r}")
        pairs.append((words[1], words[2]))
    return pairs, background


def _object_coverage(obj: SceneObject, size: int = IMAGE_SIZE) -> np.ndarray:
    """Exact pixel-center coverage for one shape."""
    ry, rx = np.mgrid[0:size, 0:size]
    cy, cx = obj.center
    s = obj.size
    if obj.shape == "circle":
        return ((ry - cy) ** 2 + (rx - cx) ** 2 <= s**2)
    if obj.shape == "square":
        return (np.abs(ry - cy) <= s) & (np.abs(rx - cx) <= s)
    # isoceles triangle: apex up, base at cy + s
    inside_y = (ry >= cy - s) & (ry <= cy + s)
    half_width = (ry - (cy - s)) / 2.0
    return inside_y & (np.abs(rx - cx) <= half_width)


def render_object_mask(scene: SceneSpec, object_index: int) -> Tensor:
    """Ground-truth visible coverage for one object (1 = rendered pixel).

    Later objects draw on top, so occluded pixels do not count as coverage.
    Scenes from the synthesizer never overlap; this matters only for
    hand-built scenes.
    """
    cov = _object_coverage(scene.objects[object_index])
    for later in scene.objects[object_index + 1 :]:
        cov &= ~_object_coverage(later)
    return torch.from_numpy(cov.astype(np.float32))


def render_scene(scene: SceneSpec) -> Tensor:
    """Flat-color render at (3, 64, 64), values in [0, 1], no antialiasing."""
    img = np.empty((3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    bg = PALETTE[scene.background]
    for c in range(3):
        img[c].fill(bg[c])
    for obj in scene.objects:
        cov = _object_coverage(obj)
        col = PALETTE[obj.color]
        for c in range(3):
            img[c][cov] = col[c]
    return torch.from_numpy(img)


# size range per shape, chosen so every object covers >= 5% of the frame
# (keeps both the inside and the outside segmentation mask within the
# [2%, 95%] area filter)
_SIZE_RANGES = {"circle": (9, 11), "square": (8, 10), "triangle": (10, 12)}


def _placement_cells(rng: np.random.Generator, n: int) -> list[tuple[int, int, int, int]]:
    """Disjoint (y0, y1, x0, x1) regions, one per object."""
    s = IMAGE_SIZE
    if n == 1:
        return [(0, s, 0, s)]
    if n == 2:
        if rng.integers(2):
            return [(0, s, 0, s // 2), (0, s, s // 2, s)]
        return [(0, s // 2, 0, s), (s // 2, s, 0, s)]
    quads = [
        (0, s // 2, 0, s // 2),
        (0, s // 2, s // 2, s),
        (s // 2, s, 0, s // 2),
        (s // 2, s, s // 2, s),
    ]
    order = rng.permutation(4)[:n]
    return [quads[i] for i in order]


def make_scene(
    rng: np.random.Generator, shapes: list[str], obj_colors: list[str]
) -> SceneSpec:
    """One scene with the given (pre-balanced) shapes and colors. Each object
    lives in its own placement cell, so objects never overlap."""
    colors = list(PALETTE)
    background = colors[int(rng.integers(len(colors)))]
    cells = _placement_cells(rng, len(shapes))
    objects: list[SceneObject] = []
    for (shape, color), (y0, y1, x0, x1) in zip(zip(shapes, obj_colors), cells):
        if color == background:
            color = colors[(colors.index(color) + 4) % len(colors)]
        lo_s, hi_s = _SIZE_RANGES[shape]
        size = int(rng.integers(lo_s, hi_s + 1))
        cy = int(rng.integers(y0 + size + 2, y1 - size - 2))
        cx = int(rng.integers(x0 + size + 2, x1 - size - 2))
        objects.append(SceneObject(shape=shape, color=color, center=(cy, cx), size=size))
    return SceneSpec(background=background, objects=tuple(objects))


@dataclass
class DatasetRecord:
    """One training / benchmark example; refs are paths relative to the
    manifest unless absolute."""

    image: str
    mask: str
    caption: str
    side: str  # inside | outside | brush
    object_index: int
    seed: int
    scene: SceneSpec

    def to_json(self) -> str:
        return json.dumps(
            {
                "image": self.image,
                "mask": self.mask,
                "caption": self.caption,
                "metadata": {
                    "side": self.side,
                    "object_index": self.object_index,
                    "seed": self.seed,
                    "scene": self.scene.to_dict(),
                },
            }
        )

    @staticmethod
    def from_json(line: str) -> "DatasetRecord":
        d = json.loads(line)
        md = d["metadata"]
        return DatasetRecord(
            image=d["image"],
            mask=d["mask"],
            caption=d["caption"],
            side=md["side"],
            object_index=md["object_index"],
            seed=md["seed"],
            scene=SceneSpec.from_dict(md["scene"]),
        )


def save_image_png(image: Tensor, path: str | Path) -> None:
    arr = (image.detach().cpu().numpy().clip(0, 1) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_image_png(path: str | Path) -> Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))


def synth_dataset(
    count: int, seed: int, kind: str, out_dir: str | Path
) -> list[DatasetRecord]:
    """Generate `count` scenes and write images, masks, and a JSONL manifest.

    kind='seg' emits an inside and an outside record per scene (one object
    picked round-robin); kind='brush' pairs each scene with a random brush
    mask. Deterministic per seed; shape classes are balanced by a seeded
    cycle so class frequencies stay within 5% of uniform.
    """
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    if kind not in ("seg", "brush"):
        raise ParameterError(f"kind must be 'seg' or 'brush', got {kind!r}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    color_names = list(PALETTE)
    records: list[DatasetRecord] = []
    obj_counter = 0
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i])))
        # shape and color classes cycle deterministically so frequencies stay
        # within 5% of uniform regardless of the draw
        n_objects = i % 3 + 1
        shapes = [SHAPES[(i + k) % len(SHAPES)] for k in range(n_objects)]
        obj_colors = [
            color_names[(obj_counter + k) % len(color_names)] for k in range(n_objects)
        ]
        obj_counter += n_objects
        scene = make_scene(rng, shapes, obj_colors)
        image = render_scene(scene)
        image_rel = f"images/scene_{i:05d}.png"
        save_image_png(image, out_dir / image_rel)

        if kind == "seg":
            obj_idx = i % len(scene.objects)
            for side in ("inside", "outside"):
                try:
                    mask = gen_seg_mask(scene, obj_idx, side)
                except MaskFilterError:
                    continue
                mask_rel = f"masks/scene_{i:05d}_{side}.png"
                save_mask_png(mask, out_dir / mask_rel)
                records.append(
                    DatasetRecord(
                        image=image_rel,
                        mask=mask_rel,
                        caption=scene.caption,
                        side=side,
                        object_index=obj_idx,
                        seed=i,
                        scene=scene,
                    )
                )
        else:
            mask = gen_brush_mask(seed * 1_000_003 + i)
            mask_rel = f"masks/scene_{i:05d}_brush.png"
            save_mask_png(mask, out_dir / mask_rel)
            records.append(
                DatasetRecord(
                    image=image_rel,
                    mask=mask_rel,
                    caption=scene.caption,
                    side="brush",
                    object_index=-1,
                    seed=i,
                    scene=scene,
                )
            )

    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    return records


def load_manifest(path: str | Path) -> list[DatasetRecord]:
    path = Path(path)
    with open(path) as f:
        return [DatasetRecord.from_json(line) for line in f if line.strip()]


def record_paths(record: DatasetRecord, manifest_dir: str | Path) -> tuple[Path, Path]:
    base = Path(manifest_dir)
    return base / record.image, base / record.mask
