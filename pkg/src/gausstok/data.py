"""Dataset ingestion and the synthetic structural toy corpus.

The toy generator composes each image from a solid background, a few filled
(possibly rotated) rectangles, glyph-like polyline strokes two pixels wide, and
one high-frequency texture patch. Stroke and texture masks are recorded so
metrics can be restricted to structural vs textural regions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")
MANIFEST_NAME = "manifest.tsv"


@dataclass
class ImageDataset:
    """Decoded images, all at one resolution, values in [0, 1]."""

    images: np.ndarray             # (N, H, W, 3) float32
    ids: list[str]
    split: str
    resolution: int
    masks: Optional[dict[str, np.ndarray]] = None  # name -> (N, H, W) bool

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.ids) != self.images.shape[0]:
            raise ValueError("ids and images disagree on length")

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# PPM / PGM codecs (binary variants, maxval 255)


def write_ppm(path: Path, image_u8: np.ndarray) -> None:
    h, w, c = image_u8.shape
    assert c == 3 and image_u8.dtype == np.uint8
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image_u8.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields_, pos = [], 0
    while len(fields_) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields_.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields_[0] != b"P6" or fields_[3] != b"255":
        raise ValueError(f"{path}: not a binary maxval-255 PPM")
    w, h = int(fields_[1]), int(fields_[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def write_pgm(path: Path, mask: np.ndarray) -> None:
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((mask.astype(np.uint8) * 255).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    header, rest = data.split(b"\n255\n", 1)
    magic, dims = header.split(b"\n", 1)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in dims.split())
    return (np.frombuffer(rest, dtype=np.uint8, count=h * w).reshape(h, w) > 127)


# ---------------------------------------------------------------------------
# Directory loading


def _decode_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _crop_resize(image_u8: np.ndarray, resolution: int) -> np.ndarray:
    h, w = image_u8.shape[:2]
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    cropped = image_u8[top : top + side, left : left + side]
    if side != resolution:
        pil = Image.fromarray(cropped).resize((resolution, resolution), Image.BILINEAR)
        cropped = np.asarray(pil)
    return cropped


def load_directory(
    path, resolution: int, split_ratio: float = 0.8, seed: int = 42
) -> tuple[ImageDataset, ImageDataset]:
    """Load every decodable PNG/PPM under a directory into train/val splits.

    Images are center-cropped square then resized. The split is a seeded
    permutation, disjoint and exhaustive. Undecodable files are skipped with a
    warning; an empty result is an error.
    """
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images, ids = [], []
    for f in files:
        try:
            raw = _decode_image(f)
        except Exception as exc:  # skip, keep loading
            log.warning("skipping undecodable image %s: %s", f, exc)
            continue
        images.append(_crop_resize(raw, resolution).astype(np.float32) / 255.0)
        ids.append(f.name)
    if not images:
        raise ValueError(f"no decodable images under {path}")
    stacked = np.stack(images)
    full = ImageDataset(stacked, ids, split="all", resolution=resolution)
    return split_dataset(full, split_ratio, seed)


def split_dataset(
    dataset: ImageDataset, split_ratio: float, seed: int
) -> tuple[ImageDataset, ImageDataset]:
    """Seeded disjoint exhaustive split into (train, val)."""
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * split_ratio))
    parts = []
    for name, idx in (("train", perm[:n_train]), ("val", perm[n_train:])):
        masks = None
        if dataset.masks is not None:
            masks = {k: v[idx] for k, v in dataset.masks.items()}
        parts.append(
            ImageDataset(
                dataset.images[idx],
                [dataset.ids[i] for i in idx],
                split=name,
                resolution=dataset.resolution,
                masks=masks,
            )
        )
    return parts[0], parts[1]


# ---------------------------------------------------------------------------
# Toy corpus


def _pixel_grid(resolution: int):
    c = np.arange(resolution, dtype=np.float64) + 0.5
    return np.meshgrid(c, c, indexing="xy")  # px[y, x], py[y, x]


def _fill_rectangle(img, px, py, rng):
    res = img.shape[0]
    cx, cy = rng.uniform(0.15, 0.85, 2) * res
    hx, hy = rng.uniform(0.08, 0.3, 2) * res
    theta = rng.uniform(0.0, np.pi) if rng.random() < 0.5 else 0.0
    color = rng.uniform(0.0, 1.0, 3)
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = px - cx, py - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= hx) & (np.abs(v) <= hy)
    img[inside] = color.astype(np.float32)


def _draw_stroke(img, mask, px, py, rng):
    res = img.shape[0]
    dark = rng.random() < 0.5
    color = rng.uniform(0.0, 0.25, 3) if dark else rng.uniform(0.75, 1.0, 3)
    point = rng.uniform(0.15, 0.85, 2) * res
    n_seg = rng.integers(2, 6)
    hit = np.zeros(img.shape[:2], dtype=bool)
    for _ in range(n_seg):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        length = rng.uniform(0.12, 0.35) * res
        end = point + length * np.array([np.cos(angle), np.sin(angle)])
        end = np.clip(end, 1.0, res - 1.0)
        # distance from each pixel center to the segment; 2 px width = radius 1
        seg = end - point
        seg_len2 = max(float(seg @ seg), 1e-9)
        t = ((px - point[0]) * seg[0] + (py - point[1]) * seg[1]) / seg_len2
        t = np.clip(t, 0.0, 1.0)
        qx = point[0] + t * seg[0]
        qy = point[1] + t * seg[1]
        dist2 = (px - qx) ** 2 + (py - qy) ** 2
        hit |= dist2 <= 1.0
        point = end
    img[hit] = color.astype(np.float32)
    mask |= hit


def _paste_texture(img, mask, rng):
    res = img.shape[0]
    side = int(rng.uniform(0.2, 0.4) * res)
    side = max(side, 2)
    x0 = int(rng.integers(0, res - side))
    y0 = int(rng.integers(0, res - side))
    period = int(rng.integers(1, 3))
    c0 = rng.uniform(0.0, 1.0, 3).astype(np.float32)
    c1 = rng.uniform(0.0, 1.0, 3).astype(np.float32)
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    checker = ((xx // period + yy // period) % 2).astype(np.float32)[..., None]
    noise = rng.uniform(-0.15, 0.15, (side, side, 3)).astype(np.float32)
    patch = c0 * (1 - checker) + c1 * checker + noise
    img[y0 : y0 + side, x0 : x0 + side] = np.clip(patch, 0.0, 1.0)
    mask[y0 : y0 + side, x0 : x0 + side] = True


def generate_toy_corpus(count: int, resolution: int, seed: int) -> ImageDataset:
    """Seeded corpus of structural test images with stroke/texture masks."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    px, py = _pixel_grid(resolution)
    images = np.zeros((count, resolution, resolution, 3), dtype=np.float32)
    stroke_masks = np.zeros((count, resolution, resolution), dtype=bool)
    texture_masks = np.zeros((count, resolution, resolution), dtype=bool)
    for i in range(count):
        img = images[i]
        img[:] = rng.uniform(0.05, 0.95, 3).astype(np.float32)
        for _ in range(int(rng.integers(1, 5))):
            _fill_rectangle(img, px, py, rng)
        for _ in range(int(rng.integers(1, 4))):
            _draw_stroke(img, stroke_masks[i], px, py, rng)
        _paste_texture(img, texture_masks[i], rng)
        np.clip(img, 0.0, 1.0, out=img)
    ids = [f"toy_{i:05d}" for i in range(count)]
    return ImageDataset(
        images, ids, split="all", resolution=resolution,
        masks={"stroke": stroke_masks, "texture": texture_masks},
    )


def export_corpus(dataset: ImageDataset, out_dir: Path) -> None:
    """Write a dataset as PPM files plus masks (PGM) and a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["image\tstroke_mask\ttexture_mask"]
    for i, image_id in enumerate(dataset.ids):
        u8 = np.clip(np.round(dataset.images[i] * 255.0), 0, 255).astype(np.uint8)
        img_name = f"{image_id}.ppm"
        write_ppm(out_dir / img_name, u8)
        names = [img_name]
        for kind in ("stroke", "texture"):
            if dataset.masks is not None and kind in dataset.masks:
                mask_name = f"{image_id}_{kind}.pgm"
                write_pgm(out_dir / mask_name, dataset.masks[kind][i])
                names.append(mask_name)
            else:
                names.append("-")
        lines.append("\t".join(names))
    (out_dir / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_manifest_directory(path, resolution: int) -> ImageDataset:
    """Load an exported corpus, including its masks, via the manifest."""
    path = Path(path)
    manifest = path / MANIFEST_NAME
    rows = manifest.read_text().strip().split("\n")[1:]
    images, ids, strokes, textures = [], [], [], []
    for row in rows:
        img_name, stroke_name, texture_name = row.split("\t")
        raw = _decode_image(path / img_name)
        images.append(_crop_resize(raw, resolution).astype(np.float32) / 255.0)
        ids.append(Path(img_name).stem)
        size = images[-1].shape[0]
        strokes.append(read_pgm(path / stroke_name) if stroke_name != "-"
                       else np.zeros((size, size), dtype=bool))
        textures.append(read_pgm(path / texture_name) if texture_name != "-"
                        else np.zeros((size, size), dtype=bool))
    if not images:
        raise ValueError(f"empty manifest under {path}")
    return ImageDataset(
        np.stack(images), ids, split="all", resolution=resolution,
        masks={"stroke": np.stack(strokes), "texture": np.stack(textures)},
    )
