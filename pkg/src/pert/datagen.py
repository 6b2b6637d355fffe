"""Synthetic paired data: (image with text, text-free ground truth, box mask).

Text is rendered onto a box-sized layer and pasted inside its axis-aligned
box, so the image and ground truth are bit-identical outside the mask.

On-disk layout::

    out_dir/original/<id>.png   out_dir/gt/<id>.png   out_dir/mask/<id>.png
    out_dir/manifest.json       {id, seed, boxes: [[x, y, w, h], ...]}
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

MANIFEST_VERSION = 1
MAX_ROTATION = 30.0
FONT_CANDIDATES = (
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSans-Bold.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSerif.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSansMono-Bold.ttf",
)
CHARSET = string.ascii_letters + string.digits


@dataclass
class TextInstance:
    text: str
    font_size: int
    color: tuple
    rotation: float = 0.0
    box: tuple = (0, 0, 0, 0)  # x, y, w, h
    font: int = 0


@dataclass
class SyntheticSampleSpec:
    canvas_size: tuple = (64, 64)
    background: str = "gradient"  # gradient | noise | image
    text_instances: list = field(default_factory=list)
    seed: int = 0
    background_dir: Optional[str] = None


@dataclass
class PairedSample:
    """Float32 arrays: ``original``/``gt`` H x W x 3, ``mask_gt`` H x W x 1 in {0, 1}."""

    original: np.ndarray
    gt: np.ndarray
    mask_gt: np.ndarray
    id: str = ""


@lru_cache(maxsize=None)
def available_fonts() -> tuple:
    found = tuple(p for p in FONT_CANDIDATES if Path(p).exists())
    return found or ("<default>",)


@lru_cache(maxsize=256)
def _font(index: int, size: int):
    path = available_fonts()[index % len(available_fonts())]
    if path == "<default>":
        return ImageFont.load_default(size=size)
    return ImageFont.truetype(path, size)


def render_text_layer(inst: TextInstance) -> Image.Image:
    """Tight RGBA layer with the (rotated) text, before cropping to the box."""
    font = _font(inst.font, inst.font_size)
    left, top, right, bottom = font.getbbox(inst.text)
    w, h = right - left, bottom - top
    if w <= 0 or h <= 0:
        raise ValueError(f"text {inst.text!r} renders to an empty glyph box")
    layer = Image.new("RGBA", (w + 2, h + 2), (0, 0, 0, 0))
    ImageDraw.Draw(layer).text((1 - left, 1 - top), inst.text, font=font, fill=tuple(inst.color) + (255,))
    if inst.rotation:
        layer = layer.rotate(inst.rotation, resample=Image.BILINEAR, expand=True)
    bbox = layer.getbbox()
    if bbox is None:
        raise ValueError(f"text {inst.text!r} has no renderable glyphs")
    return layer.crop(bbox)


def _boxes_overlap(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def validate_spec(spec: SyntheticSampleSpec) -> None:
    H, W = spec.canvas_size
    boxes = [tuple(int(v) for v in inst.box) for inst in spec.text_instances]
    for inst, (x, y, w, h) in zip(spec.text_instances, boxes):
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > W or y + h > H:
            raise ValueError(f"box {(x, y, w, h)} is outside the {H}x{W} canvas")
        if abs(inst.rotation) > MAX_ROTATION:
            raise ValueError(f"rotation {inst.rotation} exceeds {MAX_ROTATION} degrees")
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if _boxes_overlap(boxes[i], boxes[j]):
                raise ValueError(f"boxes {boxes[i]} and {boxes[j]} overlap")


def make_background(kind: str, size, rng: np.random.Generator, background_dir=None) -> np.ndarray:
    """uint8 H x W x 3 background."""
    H, W = size
    if kind == "gradient":
        c0, c1 = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        t = (np.cos(theta) * xx / W + np.sin(theta) * yy / H)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = c0 + (c1 - c0) * t[..., None]
        freq = rng.uniform(1, 4)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0, 12) * np.sin(2 * np.pi * freq * (xx + yy) / (H + W) + phase)[..., None]
    elif kind == "noise":
        coarse = rng.uniform(0, 255, (4, 4, 3))
        img = ndimage.zoom(coarse, (H / 4, W / 4, 1), order=3, mode="nearest")[:H, :W]
        img += rng.normal(0, 4, img.shape)
    elif kind == "image":
        if background_dir is None:
            raise ValueError("background 'image' needs background_dir")
        files = sorted(p for p in Path(background_dir).iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
        if not files:
            raise ValueError(f"no background images in {background_dir}")
        with Image.open(files[rng.integers(len(files))]) as im:
            im = im.convert("RGB")
            scale = max(H / im.height, W / im.width)
            if scale > 1:
                im = im.resize((int(np.ceil(im.width * scale)), int(np.ceil(im.height * scale))), Image.BICUBIC)
            x = int(rng.integers(im.width - W + 1))
            y = int(rng.integers(im.height - H + 1))
            img = np.asarray(im.crop((x, y, x + W, y + H)), dtype=np.float64)
    else:
        raise ValueError(f"unknown background kind {kind!r}")
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_sample_uint8(spec: SyntheticSampleSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    gt = make_background(spec.background, spec.canvas_size, rng, spec.background_dir)
    canvas = Image.fromarray(gt)
    mask = np.zeros(spec.canvas_size, dtype=np.uint8)
    for inst in spec.text_instances:
        x, y, w, h = (int(v) for v in inst.box)
        layer = render_text_layer(inst)
        # centre the glyphs in the box; anything outside it is cropped away
        ox, oy = (w - layer.width) // 2, (h - layer.height) // 2
        boxed = Image.new("RGBA", (w, h), (0, 0, 0, 0))
        boxed.paste(layer, (ox, oy))
        region = canvas.crop((x, y, x + w, y + h)).convert("RGBA")
        canvas.paste(Image.alpha_composite(region, boxed).convert("RGB"), (x, y))
        mask[y : y + h, x : x + w] = 255
    return np.asarray(canvas, dtype=np.uint8).copy(), gt, mask


def render_sample(spec: SyntheticSampleSpec, sample_id: str = "") -> PairedSample:
    original, gt, mask = render_sample_uint8(spec)
    return PairedSample(
        original.astype(np.float32) / 255,
        gt.astype(np.float32) / 255,
        (mask[..., None] > 0).astype(np.float32),
        sample_id,
    )


def _contrasting_color(bg: np.ndarray, rng: np.random.Generator) -> tuple:
    luma = float(bg.reshape(-1, 3).mean(0) @ np.array([0.299, 0.587, 0.114]))
    if luma > 128:
        lo, hi = 0, max(luma - 90, 1)
    else:
        lo, hi = min(luma + 90, 254), 255
    base = rng.uniform(lo, hi)
    tint = rng.uniform(-25, 25, 3)
    return tuple(int(v) for v in np.clip(base + tint, 0, 255))


def random_spec(
    seed: int,
    canvas_size=(64, 64),
    background: str = "mixed",
    max_instances: int = 3,
    font_size_range=(11, 18),
    max_rotation: float = 15.0,
    background_dir=None,
) -> SyntheticSampleSpec:
    """Draw a sample spec; boxes are sized to the rendered text and never overlap."""
    rng = np.random.default_rng([seed, 1])
    H, W = canvas_size
    if background == "mixed":
        background = "gradient" if rng.random() < 0.5 else "noise"
    spec = SyntheticSampleSpec(tuple(canvas_size), background, [], int(seed), background_dir)
    gt = make_background(background, canvas_size, np.random.default_rng(spec.seed), background_dir)
    n = int(rng.integers(1, max_instances + 1))
    boxes = []
    for _ in range(n):
        for _attempt in range(20):
            size = int(rng.integers(font_size_range[0], font_size_range[1] + 1))
            length = int(rng.integers(2, 6))
            text = "".join(rng.choice(list(CHARSET), length))
            inst = TextInstance(text, size, (0, 0, 0), float(rng.uniform(-max_rotation, max_rotation)),
                                font=int(rng.integers(len(available_fonts()))))
            layer = render_text_layer(inst)
            w, h = min(layer.width, W), min(layer.height, H)
            x = int(rng.integers(0, W - w + 1))
            y = int(rng.integers(0, H - h + 1))
            box = (x, y, w, h)
            if any(_boxes_overlap(box, b) for b in boxes):
                continue
            inst.box = box
            inst.color = _contrasting_color(gt[y : y + h, x : x + w], rng)
            boxes.append(box)
            spec.text_instances.append(inst)
            break
    return spec


def derive_seeds(master_seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def build_dataset(n: int, out_dir, canvas_size=(64, 64), seed: int = 0, background: str = "mixed",
                  background_dir=None, **spec_kwargs) -> dict:
    """Write ``n`` triples plus ``manifest.json``; a pure function of ``seed``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    if n > 0:
        for sub in ("original", "gt", "mask"):
            (out_dir / sub).mkdir(exist_ok=True)
    for i, s in enumerate(derive_seeds(seed, n)):
        spec = random_spec(s, canvas_size, background, background_dir=background_dir, **spec_kwargs)
        original, gt, mask = render_sample_uint8(spec)
        sid = f"{i:05d}"
        Image.fromarray(original).save(out_dir / "original" / f"{sid}.png")
        Image.fromarray(gt).save(out_dir / "gt" / f"{sid}.png")
        Image.fromarray(mask, mode="L").save(out_dir / "mask" / f"{sid}.png")
        samples.append({"id": sid, "seed": s, "boxes": [list(inst.box) for inst in spec.text_instances]})
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "master_seed": seed,
        "canvas_size": list(canvas_size),
        "n": n,
        "samples": samples,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def manifest_hash(out_dir) -> str:
    return hashlib.sha256((Path(out_dir) / "manifest.json").read_bytes()).hexdigest()


def _read_png(path, mode):
    with Image.open(path) as im:
        return np.asarray(im.convert(mode), dtype=np.float32) / 255


def load_dataset(root, ids: Optional[Sequence[str]] = None) -> list[PairedSample]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    wanted = ids if ids is not None else [s["id"] for s in manifest["samples"]]
    out = []
    for sid in wanted:
        mask = _read_png(root / "mask" / f"{sid}.png", "L")[..., None]
        out.append(PairedSample(
            _read_png(root / "original" / f"{sid}.png", "RGB"),
            _read_png(root / "gt" / f"{sid}.png", "RGB"),
            (mask > 0.5).astype(np.float32),
            sid,
        ))
    return out


def sample_augmentation(rng: np.random.Generator, max_angle: float = 10.0, flip_prob: float = 0.3):
    """Draw (rotation angle in degrees, horizontal flip flag)."""
    return float(rng.uniform(-max_angle, max_angle)), bool(rng.random() < flip_prob)


def apply_augmentation(sample: PairedSample, angle: float, flip: bool) -> PairedSample:
    """Rotate, then flip, all three arrays with one geometric transform.

    Nearest-neighbour sampling with reflected borders: each output pixel reads
    the same source pixel in every array, so the pairing invariant survives.
    """

    def rot(a):
        if angle == 0:
            return a
        return ndimage.rotate(a, angle, axes=(1, 0), reshape=False, order=0, mode="reflect")

    original, gt, mask = rot(sample.original), rot(sample.gt), rot(sample.mask_gt)
    if flip:
        original, gt, mask = original[:, ::-1], gt[:, ::-1], mask[:, ::-1]
    mask = (mask > 0.5).astype(np.float32)
    return PairedSample(np.ascontiguousarray(original), np.ascontiguousarray(gt), np.ascontiguousarray(mask), sample.id)


def augment(sample: PairedSample, rng: np.random.Generator, max_angle: float = 10.0, flip_prob: float = 0.3) -> PairedSample:
    angle, flip = sample_augmentation(rng, max_angle, flip_prob)
    return apply_augmentation(sample, angle, flip)
