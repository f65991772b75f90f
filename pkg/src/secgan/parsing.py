"""Fixed face parser: RGB image -> soft mask over the 12 segments.

A small fully convolutional encoder/decoder stands in for a pretrained
segmentation network. Inside GAN training it is frozen: its parameters never
receive gradient updates, but gradients still flow through it to the input
image.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .domain import N_SEGMENTS, ContractError, taxonomy_hash

log = logging.getLogger(__name__)


def _block(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride, 1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class ParserNet(nn.Module):
    """Three stride-2 stages down, three transposed stages up, U-Net skips."""

    def __init__(self, resolution: int, widths: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        if resolution % 8:
            raise ContractError(f"parser resolution must be divisible by 8, got {resolution}")
        w0, w1, w2, w3 = widths
        self.resolution = resolution
        self.widths = tuple(widths)
        self.frozen = False
        self.stem = _block(3, w0)
        self.down1 = _block(w0, w1, 2)
        self.down2 = _block(w1, w2, 2)
        self.down3 = _block(w2, w3, 2)
        self.up3 = nn.ConvTranspose2d(w3, w2, 4, 2, 1)
        self.dec3 = _block(2 * w2, w2)
        self.up2 = nn.ConvTranspose2d(w2, w1, 4, 2, 1)
        self.dec2 = _block(2 * w1, w1)
        self.up1 = nn.ConvTranspose2d(w1, w0, 4, 2, 1)
        self.dec1 = _block(2 * w0, w0)
        self.head = nn.Conv2d(w0, N_SEGMENTS, 1)

    def logits(self, x):
        e0 = self.stem(x)
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        e3 = self.down3(e2)
        d2 = self.dec3(torch.cat([self.up3(e3), e2], 1))
        d1 = self.dec2(torch.cat([self.up2(d2), e1], 1))
        d0 = self.dec1(torch.cat([self.up1(d1), e0], 1))
        return self.head(d0)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)

    def freeze(self) -> "ParserNet":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def train(self, mode: bool = True):
        # a frozen parser stays in inference mode so BN statistics never move
        return super().train(mode and not self.frozen)


def parse(parser: ParserNet, x: torch.Tensor) -> torch.Tensor:
    """Soft mask ``P(x)``; differentiable in ``x``."""
    if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != (parser.resolution,) * 2:
        raise ContractError(
            f"parser expects [B, 3, {parser.resolution}, {parser.resolution}], got {tuple(x.shape)}"
        )
    return parser(x)


def train_parser(images: torch.Tensor, masks: torch.Tensor, epochs: int = 30, batch_size: int = 32,
                 lr: float = 2e-3, widths: Sequence[int] = (16, 32, 64, 128), seed: int = 0,
                 ) -> ParserNet:
    """Fit a parser by per-pixel cross-entropy on ``(image, mask)`` pairs.

    ``masks`` may be ``[N, 12, H, W]`` one-hot or ``[N, H, W]`` class indices.
    The returned parser is frozen.
    """
    if len(images) == 0:
        raise ContractError("cannot train a parser on an empty dataset")
    if masks.ndim == 4:
        masks = masks.argmax(dim=1)
    if len(masks) != len(images) or images.shape[2:] != masks.shape[1:]:
        raise ContractError(
            f"image/mask shape mismatch: {tuple(images.shape)} vs {tuple(masks.shape)}"
        )
    if images.shape[2] != images.shape[3]:
        raise ContractError("parser training images must be square")
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ParserNet(images.shape[2], widths)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = len(images)
    net.train()
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            loss = F.cross_entropy(net.logits(images[idx]), masks[idx].long())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        net.last_loss = total / n
        log.debug("parser epoch %d loss %.4f", epoch, net.last_loss)
    return net.freeze()


@torch.no_grad()
def pixel_accuracy(parser: ParserNet, images: torch.Tensor, masks: torch.Tensor, batch_size: int = 128) -> float:
    if masks.ndim == 4:
        masks = masks.argmax(dim=1)
    correct = 0
    for i in range(0, len(images), batch_size):
        pred = parse(parser, images[i:i + batch_size]).argmax(dim=1)
        correct += (pred == masks[i:i + batch_size]).sum().item()
    return correct / masks.numel()


def save_parser(parser: ParserNet, path: str | Path) -> None:
    torch.save(
        {
            "resolution": parser.resolution,
            "widths": list(parser.widths),
            "taxonomy": taxonomy_hash(),
            "state_dict": parser.state_dict(),
        },
        path,
    )


def load_parser(path: str | Path, resolution: int | None = None) -> ParserNet:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt["taxonomy"] != taxonomy_hash():
        raise ContractError(f"{path}: parser was trained with a different segment taxonomy")
    if resolution is not None and ckpt["resolution"] != resolution:
        raise ContractError(f"{path}: parser resolution {ckpt['resolution']} != {resolution}")
    net = ParserNet(ckpt["resolution"], ckpt["widths"])
    net.load_state_dict(ckpt["state_dict"])
    return net.freeze()
