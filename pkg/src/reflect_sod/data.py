"""Synthetic saliency scenes, on-disk dataset layout, loading and augmentation.

Layout::

    <root>/<split>/images/<stem>.png   RGB
    <root>/<split>/masks/<stem>.png    8-bit, 0 or 255
    <root>/manifest.json
"""
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

GENERATOR_VERSION = 1
SHAPES = ("ellipse", "rectangle", "triangle", "blob")


class DatasetError(Exception):
    pass


@dataclass
class SyntheticSceneSpec:
    size: Tuple[int, int] = (64, 64)
    min_objects: int = 1
    max_objects: int = 3
    shapes: Tuple[str, ...] = SHAPES
    contrast: Tuple[float, float] = (0.35, 0.8)
    noise: float = 0.04
    min_area: float = 0.05
    max_area: float = 0.60
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        self.shapes = tuple(self.shapes)
        self.contrast = tuple(float(c) for c in self.contrast)
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range must satisfy 1 <= min <= max")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ValueError(f"unknown shape families: {sorted(unknown)}")
        if not 0 < self.min_area < self.max_area <= 1:
            raise ValueError("area bounds must satisfy 0 < min < max <= 1")
        if min(self.size) < 8:
            raise ValueError("canvas must be at least 8 x 8")


@dataclass
class DatasetManifest:
    root: Path
    splits: Dict[str, List[str]]
    size: Tuple[int, int]
    seed: Optional[int] = None
    generator_version: int = GENERATOR_VERSION

    def image_path(self, split: str, stem: str) -> Path:
        return self.root / split / "images" / f"{stem}.png"

    def mask_path(self, split: str, stem: str) -> Path:
        return self.root / split / "masks" / f"{stem}.png"

    def save(self):
        data = {"splits": self.splits, "size": list(self.size), "seed": self.seed,
                "generator_version": self.generator_version}
        (self.root / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        """Read ``manifest.json``, or index the stem layout if there is none."""
        root = Path(root)
        if not root.is_dir():
            raise DatasetError(f"dataset root {root} does not exist")
        path = root / "manifest.json"
        if path.exists():
            data = json.loads(path.read_text())
            return cls(root, {k: list(v) for k, v in data["splits"].items()}, tuple(data["size"]),
                       data.get("seed"), data.get("generator_version", GENERATOR_VERSION))
        splits = {}
        for split_dir in sorted(p for p in root.iterdir() if (p / "images").is_dir()):
            images = {p.stem for p in (split_dir / "images").glob("*.png")}
            masks = {p.stem for p in (split_dir / "masks").glob("*.png")}
            if images != masks:
                raise DatasetError(f"{split_dir}: images without masks or vice versa: {sorted(images ^ masks)}")
            splits[split_dir.name] = sorted(images)
        if not splits:
            raise DatasetError(f"{root} holds no <split>/images directories")
        first_split, stems = next(iter(splits.items()))
        with Image.open(root / first_split / "images" / f"{stems[0]}.png") as im:
            size = (im.height, im.width)
        return cls(root, splits, size)


def _polygon_blob(rng, cx, cy, radius, n=12):
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = radius * rng.uniform(0.6, 1.0, n)
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)]


def _draw_object(draw_img, draw_mask, rng, shape, w, h, color):
    cx, cy = rng.uniform(0.2, 0.8) * w, rng.uniform(0.2, 0.8) * h
    rx, ry = rng.uniform(0.1, 0.3) * w, rng.uniform(0.1, 0.3) * h
    if shape == "ellipse":
        box = [cx - rx, cy - ry, cx + rx, cy + ry]
        draw_img.ellipse(box, fill=color)
        draw_mask.ellipse(box, fill=255)
        return
    if shape == "rectangle":
        box = [cx - rx, cy - ry, cx + rx, cy + ry]
        draw_img.rectangle(box, fill=color)
        draw_mask.rectangle(box, fill=255)
        return
    if shape == "triangle":
        angle = rng.uniform(0, 2 * math.pi)
        pts = [(cx + rx * math.cos(angle + k * 2 * math.pi / 3),
                cy + ry * math.sin(angle + k * 2 * math.pi / 3)) for k in range(3)]
    else:
        pts = _polygon_blob(rng, cx, cy, min(rx, ry) * 1.3)
    draw_img.polygon(pts, fill=color)
    draw_mask.polygon(pts, fill=255)


def render_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """One uint8 RGB image and its 0/255 mask; the mask is the union of object supports."""
    h, w = spec.size
    for _ in range(1000):
        bg = rng.uniform(0.0, 1.0, 3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction) + 1e-12
        fg = np.clip(bg + rng.uniform(*spec.contrast) * math.sqrt(3) * direction, 0.0, 1.0)
        img = Image.new("RGB", (w, h), tuple(int(round(255 * c)) for c in bg))
        mask = Image.new("L", (w, h), 0)
        draw_img, draw_mask = ImageDraw.Draw(img), ImageDraw.Draw(mask)
        for _ in range(rng.integers(spec.min_objects, spec.max_objects + 1)):
            shape = spec.shapes[rng.integers(len(spec.shapes))]
            shade = np.clip(fg + rng.normal(0, 0.05, 3), 0, 1)
            _draw_object(draw_img, draw_mask, rng, shape, w, h, tuple(int(round(255 * c)) for c in shade))
        mask_arr = np.asarray(mask)
        area = np.count_nonzero(mask_arr) / mask_arr.size
        img_arr = np.asarray(img, dtype=np.float64) / 255.0
        if not spec.min_area <= area <= spec.max_area or np.abs(fg - bg).max() < 0.15:
            continue
        noisy = img_arr + spec.noise * rng.standard_normal(img_arr.shape)
        return np.round(np.clip(noisy, 0, 1) * 255).astype(np.uint8), mask_arr
    raise RuntimeError("could not render a scene within the area bounds; widen min_area/max_area")


def generate_synthetic(spec: SyntheticSceneSpec, n: int, root, split: str = "train",
                       prefix: str = "img") -> DatasetManifest:
    """Write ``n`` image/mask PNG pairs under ``root/split`` and update the manifest."""
    if n < 1:
        raise ValueError("n must be >= 1")
    root = Path(root)
    images_dir, masks_dir = root / split / "images", root / split / "masks"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
        masks_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory under {root}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    stems = []
    for i in range(n):
        img, mask = render_scene(spec, rng)
        stem = f"{prefix}{i:05d}"
        Image.fromarray(img, "RGB").save(images_dir / f"{stem}.png")
        Image.fromarray(mask, "L").save(masks_dir / f"{stem}.png")
        stems.append(stem)
    splits = {}
    if (root / "manifest.json").exists():
        splits = DatasetManifest.load(root).splits
    splits[split] = stems
    manifest = DatasetManifest(root, splits, spec.size, spec.seed)
    manifest.save()
    return manifest


def load_pair(image_path, mask_path, size: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Image as float64 H x W x 3 in [0, 1] (bilinear resize), mask as bool (nearest).

    Mean subtraction is left to :func:`reflect_sod.reflection.reflect`.
    """
    try:
        with Image.open(image_path) as im:
            im = im.convert("RGB")
            if size is not None and (im.height, im.width) != tuple(size):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            image = np.asarray(im, dtype=np.float64) / 255.0
        with Image.open(mask_path) as m:
            m = m.convert("L")
            if size is not None and (m.height, m.width) != tuple(size):
                m = m.resize((size[1], size[0]), Image.NEAREST)
            mask = np.asarray(m) >= 128
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode {image_path} / {mask_path}: {exc}") from exc
    if image.size == 0 or mask.size == 0:
        raise DatasetError(f"{image_path}: zero-sized image")
    if image.shape[:2] != mask.shape:
        raise DatasetError(f"{image_path}: image {image.shape[:2]} and mask {mask.shape} differ in size")
    return image, mask


def mirror(image: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return image[:, ::-1].copy(), mask[:, ::-1].copy()


def _resize_bilinear(arr: np.ndarray, size) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
    t = t.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def augment(image: np.ndarray, mask: np.ndarray, seed, size: Optional[Tuple[int, int]] = None,
            crop_area: Tuple[float, float] = (0.8, 1.0)) -> Tuple[np.ndarray, np.ndarray]:
    """Random mirror (p=0.5) and random crop of 80-100% area, resized back.

    The same geometry is applied to image and mask; the mask is re-binarized at 0.5.
    """
    if image.shape[:2] != mask.shape:
        raise ValueError("image and mask differ in size")
    rng = np.random.default_rng(seed)
    h, w = mask.shape
    size = tuple(size) if size is not None else (h, w)
    if rng.random() < 0.5:
        image, mask = mirror(image, mask)
    side = math.sqrt(rng.uniform(*crop_area))
    ch, cw = max(1, int(round(h * side))), max(1, int(round(w * side)))
    top, left = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
    stacked = np.concatenate([image, mask[..., None].astype(np.float64)], axis=2)
    stacked = stacked[top:top + ch, left:left + cw]
    if (ch, cw) != size:
        stacked = _resize_bilinear(stacked, size)
    return stacked[..., :3], stacked[..., 3] >= 0.5


class SaliencyDataset:
    """In-memory split of a dataset laid out as described in the module docstring."""

    def __init__(self, root, split: str = "train", size: Optional[Tuple[int, int]] = None):
        self.manifest = DatasetManifest.load(root)
        if split not in self.manifest.splits:
            raise DatasetError(f"split {split!r} not found in {root}")
        self.split = split
        self.stems = list(self.manifest.splits[split])
        if not self.stems:
            raise DatasetError(f"split {split!r} is empty")
        self.size = tuple(size) if size is not None else tuple(self.manifest.size)
        self.images, self.masks = [], []
        for stem in self.stems:
            img, mask = load_pair(self.manifest.image_path(split, stem),
                                  self.manifest.mask_path(split, stem), self.size)
            self.images.append(img)
            self.masks.append(mask)

    def __len__(self):
        return len(self.stems)

    def __getitem__(self, idx):
        return self.images[idx], self.masks[idx]

    def batch(self, indices: Sequence[int], seeds: Optional[Sequence[int]] = None):
        """Stacked N x H x W x 3 images and N x H x W masks, augmented when ``seeds`` is given."""
        imgs, masks = [], []
        for j, i in enumerate(indices):
            img, mask = self.images[i], self.masks[i]
            if seeds is not None:
                img, mask = augment(img, mask, seeds[j], self.size)
            imgs.append(img)
            masks.append(mask)
        return np.stack(imgs), np.stack(masks)
