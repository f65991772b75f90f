"""Core value types: segment taxonomy, label algebra and mask conversions.

Images are channel-first tensors in [-1, 1]. Masks are ``[B, 12, H, W]``
tensors: soft masks hold per-pixel probabilities, one-hot masks hold a
single 1 per pixel.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

SEGMENTS: tuple[str, ...] = (
    "skin",
    "eyebrows",
    "eyes",
    "eyeglasses",
    "ears",
    "earrings",
    "nose",
    "mouth",
    "lips",
    "neck",
    "hair",
    "others",
)
N_SEGMENTS = len(SEGMENTS)
SEGMENT_INDEX = {name: i for i, name in enumerate(SEGMENTS)}

# Mutually exclusive attribute groups, by CelebA column name.
HAIR_COLOURS: tuple[str, ...] = ("Black_Hair", "Blond_Hair", "Brown_Hair", "Gray_Hair")

# The 13 CelebA attributes used for editing, in evaluation order.
CELEBA_ATTRIBUTES: tuple[str, ...] = (
    "Bald",
    "Bangs",
    "Black_Hair",
    "Blond_Hair",
    "Brown_Hair",
    "Bushy_Eyebrows",
    "Eyeglasses",
    "Male",
    "Mouth_Slightly_Open",
    "Mustache",
    "No_Beard",
    "Pale_Skin",
    "Young",
)

RAFD_EXPRESSIONS: tuple[str, ...] = (
    "angry",
    "contemptuous",
    "disgusted",
    "fearful",
    "happy",
    "neutral",
    "sad",
    "surprised",
)


class ContractError(ValueError):
    """An input violated a documented precondition."""


def taxonomy_hash() -> str:
    return hashlib.sha256(",".join(SEGMENTS).encode()).hexdigest()[:16]


def exclusive_groups(attribute_names: Sequence[str]) -> list[list[int]]:
    """Index groups of attributes of which at most one may be set."""
    hair = [i for i, name in enumerate(attribute_names) if name in HAIR_COLOURS]
    return [hair] if len(hair) > 1 else []


def label_diff(y_src, y_trg):
    """Signed attribute difference ``y_trg - y_src`` with entries in {-1, 0, 1}.

    Works on single vectors or batches, for tensors and array-likes alike.
    """
    src = torch.as_tensor(y_src, dtype=torch.float32)
    trg = torch.as_tensor(y_trg, dtype=torch.float32)
    if src.shape != trg.shape:
        raise ContractError(f"label length mismatch: {tuple(src.shape)} vs {tuple(trg.shape)}")
    return trg - src


def reverse_attribute(y_src, k: int, groups: Sequence[Sequence[int]] = ()):
    """Flip attribute ``k``; switching on a member of an exclusive group clears the rest.

    Accepts a single label ``[n_a]`` or a batch ``[B, n_a]`` and returns a new tensor.
    """
    y = torch.as_tensor(y_src, dtype=torch.float32).clone()
    n_a = y.shape[-1]
    if not 0 <= k < n_a:
        raise IndexError(f"attribute index {k} out of range for {n_a} attributes")
    flipped = 1.0 - y[..., k]
    y[..., k] = flipped
    for group in groups:
        if k in group:
            on = flipped > 0.5
            for j in group:
                if j != k:
                    y[..., j] = torch.where(on, torch.zeros_like(flipped), y[..., j])
    return y


def set_expression(y_src, k: int):
    """Target label for expression datasets: the one-hot vector of class ``k``."""
    y = torch.zeros_like(torch.as_tensor(y_src, dtype=torch.float32))
    y[..., k] = 1.0
    return y


def to_one_hot(mask: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax indicator of a soft mask, detached from autograd.

    Ties go to the lowest channel index (``torch.argmax`` returns the first
    maximal index).
    """
    mask = mask.detach()
    index = mask.argmax(dim=1, keepdim=True)
    return torch.zeros_like(mask).scatter_(1, index, 1.0)


def indices_to_one_hot(index: torch.Tensor, n_classes: int = N_SEGMENTS) -> torch.Tensor:
    """``[B, H, W]`` integer class map to a ``[B, C, H, W]`` float one-hot mask."""
    return torch.nn.functional.one_hot(index.long(), n_classes).permute(0, 3, 1, 2).float()


def validate_image(x: torch.Tensor, resolution: int | None = None) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ContractError(f"expected image batch [B, 3, H, W], got {tuple(x.shape)}")
    if resolution is not None and tuple(x.shape[2:]) != (resolution, resolution):
        raise ContractError(f"expected resolution {resolution}, got {tuple(x.shape[2:])}")
    if x.numel() and (x.min() < -1.0 or x.max() > 1.0):
        raise ContractError("image values must lie in [-1, 1]")


def validate_soft_mask(m: torch.Tensor, atol: float = 1e-5) -> None:
    if m.ndim != 4 or m.shape[1] != N_SEGMENTS:
        raise ContractError(f"expected mask [B, {N_SEGMENTS}, H, W], got {tuple(m.shape)}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ContractError("mask probabilities must lie in [0, 1]")
    sums = m.sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=atol):
        raise ContractError("mask channels must sum to one at every pixel")


def is_one_hot(m: torch.Tensor) -> bool:
    binary = bool(((m == 0) | (m == 1)).all())
    return binary and bool((m.sum(dim=1) == 1).all())


def save_mask(mask: torch.Tensor | np.ndarray, path: str | Path) -> None:
    """Write one mask as a single-channel PNG of class indices 0..11."""
    mask = torch.as_tensor(mask)
    if mask.ndim == 3:
        mask = mask.argmax(dim=0)
    Image.fromarray(mask.to(torch.uint8).numpy()).save(path)


def load_mask(path: str | Path) -> torch.Tensor:
    """Read a class-index PNG into a ``[H, W]`` long tensor."""
    index = np.asarray(Image.open(path), dtype=np.int64)
    if index.ndim != 2:
        raise ContractError(f"{path}: mask must be single-channel")
    if index.size and index.max() >= N_SEGMENTS:
        raise ContractError(f"{path}: class index {index.max()} outside taxonomy")
    return torch.from_numpy(index)
