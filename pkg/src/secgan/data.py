"""Attribute datasets: CelebA-style ingestion, preprocessing, target sampling
and a procedural toy face generator with exact segmentation masks.

Dataset root layout::

    root/
      attributes.txt   # count line, names line, then "file v1 ... vk" with v in {-1, 1}
      images/          # image files named in attributes.txt
      masks/           # optional class-index PNGs with the same file names
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .domain import (
    SEGMENT_INDEX,
    ContractError,
    exclusive_groups,
    load_mask,
    reverse_attribute,
    save_mask,
)

SPLITS = ("train", "val", "test")

# CelebA's published train/val/test partition sizes.
CELEBA_SPLIT = (182000, 637, 19962)


class DatasetError(ValueError):
    pass


@dataclass
class AttributeDataset:
    names: list[str]
    labels: np.ndarray                      # [N, n_a] in {0, 1}
    files: list[str]
    resolution: int
    root: Path | None = None
    crop_size: int | None = None
    images: np.ndarray | None = None        # [N, H, W, 3] uint8 when held in memory
    masks: np.ndarray | None = None         # [N, H, W] uint8 class indices
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.files)

    @property
    def n_a(self) -> int:
        return len(self.names)

    @property
    def groups(self) -> list[list[int]]:
        return exclusive_groups(self.names)

    @property
    def has_masks(self) -> bool:
        return self.masks is not None or (self.root is not None and (self.root / "masks").is_dir())

    def indices(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self))
        if split not in self.splits:
            raise DatasetError(f"unknown split {split!r}")
        return self.splits[split]

    def image_tensor(self, split: str | None = None) -> torch.Tensor:
        return self.load_images(self.indices(split))

    def load_images(self, idx) -> torch.Tensor:
        """Preprocessed images ``[len(idx), 3, R, R]`` for record indices ``idx``."""
        idx = np.asarray(idx)
        if self.images is not None:
            return to_tensor(self.images[idx])
        out = torch.empty(len(idx), 3, self.resolution, self.resolution)
        for j, i in enumerate(idx):
            with Image.open(self.root / "images" / self.files[i]) as img:
                out[j] = preprocess(img, self.resolution, self.crop_size)
        return out

    def label_tensor(self, split: str | None = None) -> torch.Tensor:
        return torch.from_numpy(self.labels[self.indices(split)]).float()

    def mask_tensor(self, split: str | None = None) -> torch.Tensor:
        """Class-index masks ``[N, H, W]`` at the dataset resolution."""
        idx = self.indices(split)
        if self.masks is not None:
            return torch.from_numpy(self.masks[idx]).long()
        if not self.has_masks:
            raise DatasetError("dataset has no masks")
        out = torch.empty(len(idx), self.resolution, self.resolution, dtype=torch.long)
        for j, i in enumerate(idx):
            m = load_mask(self.root / "masks" / mask_name(self.files[i]))
            out[j] = resize_mask(m, self.resolution, self.crop_size)
        return out


def mask_name(image_file: str) -> str:
    return str(Path(image_file).with_suffix(".png"))


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 ``[N, H, W, 3]`` -> float ``[N, 3, H, W]`` in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return x / 127.5 - 1.0


def center_crop_box(width: int, height: int, crop_size: int | None):
    size = min(width, height) if crop_size is None else crop_size
    if size > width or size > height:
        raise ContractError(f"image {width}x{height} is smaller than crop {size}x{size}")
    left = (width - size) // 2
    top = (height - size) // 2
    return left, top, left + size, top + size


def preprocess(image, resolution: int, crop_size: int | None = None) -> torch.Tensor:
    """Centre-crop to a square, bilinear-resize to ``resolution`` and scale to [-1, 1].

    ``crop_size`` defaults to the shorter side (178 for CelebA's 178x218).
    """
    if isinstance(image, np.ndarray):
        image = Image.fromarray(image)
    image = image.convert("RGB")
    image = image.crop(center_crop_box(*image.size, crop_size))
    if image.size != (resolution, resolution):
        image = image.resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def resize_mask(mask: torch.Tensor, resolution: int, crop_size: int | None = None) -> torch.Tensor:
    h, w = mask.shape
    box = center_crop_box(w, h, crop_size)
    img = Image.fromarray(mask.numpy().astype(np.uint8)).crop(box)
    if img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.NEAREST)
    return torch.from_numpy(np.asarray(img, dtype=np.int64))


def split_indices(n: int, sizes: Sequence[float]) -> dict[str, np.ndarray]:
    """Contiguous train/val/test split in record order.

    Each size is a count, or a fraction of ``n`` when it is a float <= 1.
    A size of ``None`` or a negative number takes whatever remains.
    """
    counts = []
    for s in sizes:
        if s is None or s < 0:
            counts.append(None)
        elif isinstance(s, float) and s <= 1.0:
            counts.append(int(round(s * n)))
        else:
            counts.append(int(s))
    out, start = {}, 0
    for name, c in zip(SPLITS, counts):
        stop = n if c is None else min(n, start + c)
        out[name] = np.arange(start, stop)
        start = stop
    return out


def read_annotations(path: Path):
    lines = path.read_text().splitlines()
    if len(lines) < 2:
        raise DatasetError(f"{path}: annotation file needs a count line and a names line")
    try:
        int(lines[0].strip())
    except ValueError:
        raise DatasetError(f"{path}:1: expected a record count, got {lines[0]!r}") from None
    names = lines[1].split()
    if not names:
        raise DatasetError(f"{path}:2: empty attribute-name line")
    files, rows = [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != len(names) + 1:
            raise DatasetError(
                f"{path}:{lineno}: expected a file name and {len(names)} values, got {len(parts) - 1}"
            )
        try:
            values = [int(v) for v in parts[1:]]
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-integer attribute value") from None
        if any(v not in (-1, 1) for v in values):
            raise DatasetError(f"{path}:{lineno}: attribute values must be -1 or 1")
        files.append(parts[0])
        rows.append(values)
    if not files:
        raise DatasetError(f"{path}: no records")
    labels = (np.asarray(rows, dtype=np.int64) > 0).astype(np.int64)
    return names, files, labels


def write_annotations(path: Path, names: Sequence[str], files: Sequence[str], labels: np.ndarray) -> None:
    lines = [str(len(files)), " ".join(names)]
    for f, row in zip(files, labels):
        lines.append(" ".join([f, *("1" if v else "-1" for v in row)]))
    path.write_text("\n".join(lines) + "\n")


def load_attribute_dataset(root: str | Path, attributes: Sequence[str] | None = None,
                           split: Sequence[float] = (0.8, 0.0, None), resolution: int = 128,
                           crop_size: int | None = None, check_files: bool = True) -> AttributeDataset:
    """Read a dataset root, mapping {-1, 1} labels to {0, 1}.

    ``attributes`` selects and orders a subset of the annotated columns.
    """
    root = Path(root)
    ann = root / "attributes.txt"
    if not ann.is_file():
        raise DatasetError(f"missing annotation file {ann}")
    names, files, labels = read_annotations(ann)
    if attributes is not None:
        missing = [a for a in attributes if a not in names]
        if missing:
            raise DatasetError(f"attributes not in annotation file: {missing}")
        cols = [names.index(a) for a in attributes]
        labels = labels[:, cols]
        names = list(attributes)
    if check_files:
        for f in files:
            if not (root / "images" / f).is_file():
                raise DatasetError(f"missing image file {root / 'images' / f}")
    return AttributeDataset(
        names=names, labels=labels, files=files, resolution=resolution, root=root,
        crop_size=crop_size, splits=split_indices(len(files), split),
    )


def sample_target_labels(y_src: torch.Tensor, mode: str = "shuffle", generator: torch.Generator | None = None,
                         k: int | None = None, groups: Sequence[Sequence[int]] = ()) -> torch.Tensor:
    """Target labels for a batch.

    ``shuffle`` permutes the batch's own labels, ``reverse`` flips attribute
    ``k`` on every example, ``random-expression`` draws uniform one-hot labels.
    """
    if len(y_src) == 0:
        raise ContractError("empty label batch")
    if mode == "shuffle":
        return y_src[torch.randperm(len(y_src), generator=generator)].clone()
    if mode == "reverse":
        if k is None:
            raise ContractError("reverse mode needs an attribute index k")
        return reverse_attribute(y_src, k, groups)
    if mode == "random-expression":
        cls = torch.randint(y_src.shape[1], (len(y_src),), generator=generator)
        return torch.nn.functional.one_hot(cls, y_src.shape[1]).to(y_src.dtype)
    raise ContractError(f"unknown target sampling mode {mode!r}")


# --------------------------------------------------------------------------
# procedural toy faces

TOY_ATTRIBUTES = ("Black_Hair", "Blond_Hair", "Brown_Hair", "Eyeglasses", "Mouth_Slightly_Open")

_HAIR_RGB = {
    "Black_Hair": (0.10, 0.09, 0.08),
    "Blond_Hair": (0.95, 0.82, 0.35),
    "Brown_Hair": (0.50, 0.28, 0.10),
    None: (0.78, 0.30, 0.22),
}


@dataclass
class ToySpec:
    size: int = 32
    seed: int = 0
    hair_probs: tuple[float, float, float] = (0.3, 0.3, 0.3)   # black, blond, brown; rest is none
    p_eyeglasses: float = 0.4
    p_mouth_open: float = 0.5
    noise: float = 0.02

    @property
    def attributes(self) -> tuple[str, ...]:
        return TOY_ATTRIBUTES

    def marginals(self) -> np.ndarray:
        return np.array([*self.hair_probs, self.p_eyeglasses, self.p_mouth_open])


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def sample_face_geometry(rng: np.random.Generator, size: int) -> dict:
    s = size
    return dict(
        cx=s / 2 + rng.uniform(-0.06, 0.06) * s,
        cy=s / 2 + rng.uniform(-0.04, 0.06) * s,
        rx=rng.uniform(0.24, 0.30) * s,
        ry=rng.uniform(0.30, 0.36) * s,
        hair_t=rng.uniform(0.06, 0.12) * s,
        hairline=rng.uniform(0.35, 0.55),
        skin=np.clip(np.array([0.93, 0.76, 0.62]) + rng.uniform(-0.08, 0.06, 3), 0, 1),
        background=rng.uniform(0.2, 0.9, 3) * np.array([0.5, 0.7, 1.0]),
        hair_jitter=rng.uniform(-0.05, 0.05, 3),
    )


def render_face(geom: dict, label: Sequence[int], size: int, rng: np.random.Generator | None = None,
                noise: float = 0.0):
    """Rasterise one face. Returns ``(rgb uint8 [H, W, 3], mask uint8 [H, W])``."""
    names = TOY_ATTRIBUTES
    on = {n: bool(v) for n, v in zip(names, label)}
    hair_key = next((n for n in names[:3] if on[n]), None)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx, cy, rx, ry = geom["cx"], geom["cy"], geom["rx"], geom["ry"]

    mask = np.full((size, size), SEGMENT_INDEX["others"], dtype=np.uint8)
    rgb = np.broadcast_to(geom["background"], (size, size, 3)).copy()

    def paint(region, seg, colour):
        mask[region] = SEGMENT_INDEX[seg]
        rgb[region] = colour

    hairline_y = cy - geom["hairline"] * ry
    outer = _ellipse(yy, xx, cy, cx, ry + geom["hair_t"], rx + geom["hair_t"])
    paint(outer & (yy < cy - 0.1 * ry), "hair", np.clip(np.array(_HAIR_RGB[hair_key]) + geom["hair_jitter"], 0, 1))
    paint(_ellipse(yy, xx, cy, cx, ry, rx) & (yy >= hairline_y), "skin", geom["skin"])

    if on["Eyeglasses"]:
        ey = cy - 0.12 * ry
        half_w, half_h = 0.32 * rx, 0.14 * ry
        lens = np.zeros_like(outer)
        for side in (-1, 1):
            ex = cx + side * 0.42 * rx
            lens |= (np.abs(xx - ex) <= half_w) & (np.abs(yy - ey) <= half_h)
        bridge = (np.abs(xx - cx) <= 0.2 * rx) & (np.abs(yy - ey) <= 0.5)
        paint(lens | bridge, "eyeglasses", np.array([0.12, 0.12, 0.18]))

    my, mrx = cy + 0.5 * ry, 0.38 * rx
    if on["Mouth_Slightly_Open"]:
        mouth = _ellipse(yy, xx, my, cx, 0.2 * ry, mrx)
        colour = np.array([0.35, 0.05, 0.08])
    else:
        mouth = (np.abs(yy - my) <= 0.5) & (np.abs(xx - cx) <= mrx)
        colour = np.array([0.70, 0.25, 0.28])
    paint(mouth, "mouth", colour)

    if noise and rng is not None:
        rgb = rgb + rng.normal(0.0, noise, rgb.shape)
    return (np.clip(rgb, 0, 1) * 255 + 0.5).astype(np.uint8), mask


def sample_toy_labels(spec: ToySpec, rng: np.random.Generator, n: int) -> np.ndarray:
    p_hair = np.array([*spec.hair_probs, 1.0 - sum(spec.hair_probs)])
    hair = rng.choice(4, size=n, p=p_hair)
    labels = np.zeros((n, len(TOY_ATTRIBUTES)), dtype=np.int64)
    for c in range(3):
        labels[hair == c, c] = 1
    labels[:, 3] = rng.random(n) < spec.p_eyeglasses
    labels[:, 4] = rng.random(n) < spec.p_mouth_open
    return labels


def generate_toy_dataset(spec: ToySpec, n: int, split: Sequence[float] = (0.8, 0.0, None)) -> AttributeDataset:
    """Render ``n`` toy faces with labels and exact masks; deterministic in ``spec.seed``."""
    if n < 1:
        raise ContractError("toy dataset size must be at least 1")
    rng = np.random.default_rng(spec.seed)
    labels = sample_toy_labels(spec, rng, n)
    images = np.empty((n, spec.size, spec.size, 3), dtype=np.uint8)
    masks = np.empty((n, spec.size, spec.size), dtype=np.uint8)
    for i in range(n):
        geom = sample_face_geometry(rng, spec.size)
        images[i], masks[i] = render_face(geom, labels[i], spec.size, rng, spec.noise)
    files = [f"{i:06d}.png" for i in range(n)]
    return AttributeDataset(
        names=list(TOY_ATTRIBUTES), labels=labels, files=files, resolution=spec.size,
        images=images, masks=masks, splits=split_indices(n, split),
    )


def write_dataset(ds: AttributeDataset, out_dir: str | Path) -> Path:
    """Write an in-memory dataset in the standard root layout."""
    if ds.images is None:
        raise DatasetError("only in-memory datasets can be written")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if ds.masks is not None:
        (out / "masks").mkdir(exist_ok=True)
    for i, f in enumerate(ds.files):
        Image.fromarray(ds.images[i]).save(out / "images" / f)
        if ds.masks is not None:
            save_mask(torch.from_numpy(ds.masks[i]), out / "masks" / mask_name(f))
    write_annotations(out / "attributes.txt", ds.names, ds.files, ds.labels)
    return out

