"""Generators and discriminators for both branches and both backbones.

The StarGAN-style networks follow the residual translator with a PatchGAN
critic; the AttGAN-style networks are a five-level encoder/decoder with the
label injected at the bottleneck and one skip connection at 1/16 scale, and a
convolutional critic topped by two fully-connected heads.

The semantic-branch builds differ from the RGB builds only in the input
channel count, the generator's output channel count and its final activation
(per-pixel softmax instead of tanh).
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn

from .domain import N_SEGMENTS, ContractError

BACKBONES = ("stargan", "attgan")
MODALITIES = ("rgb", "seg")


class DiscriminatorOutput(NamedTuple):
    adv: torch.Tensor
    cls: torch.Tensor


def modality_channels(modality: str) -> int:
    if modality == "rgb":
        return 3
    if modality == "seg":
        return N_SEGMENTS
    raise ContractError(f"unknown modality {modality!r}")


def _broadcast_label(y: torch.Tensor, size) -> torch.Tensor:
    return y.view(y.size(0), y.size(1), 1, 1).expand(-1, -1, size[0], size[1])


class ResidualBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
        )

    def forward(self, x):
        return x + self.main(x)


class GeneratorBase(nn.Module):
    role = "generator"

    def __init__(self, modality: str, n_a: int, resolution: int, extra_in_channels: int = 0):
        super().__init__()
        self.modality = modality
        self.n_a = n_a
        self.resolution = resolution
        self.in_channels = modality_channels(modality) + extra_in_channels
        self.out_channels = modality_channels(modality)

    def activate(self, h: torch.Tensor) -> torch.Tensor:
        if self.modality == "rgb":
            return torch.tanh(h)
        return torch.softmax(h, dim=1)

    def check_input(self, x: torch.Tensor, y: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ContractError(
                f"{self.modality} generator expects {self.in_channels} input channels, got {tuple(x.shape)}"
            )
        if y.ndim != 2 or y.shape != (x.shape[0], self.n_a):
            raise ContractError(f"label must have shape [{x.shape[0]}, {self.n_a}], got {tuple(y.shape)}")


class StarGANGenerator(GeneratorBase):
    backbone = "stargan"

    def __init__(self, modality, n_a, resolution, conv_dim=64, n_res=6, extra_in_channels=0):
        super().__init__(modality, n_a, resolution, extra_in_channels)
        if resolution % 4:
            raise ContractError(f"StarGAN generator needs resolution divisible by 4, got {resolution}")
        layers = [
            nn.Conv2d(self.in_channels + n_a, conv_dim, 7, 1, 3, bias=False),
            nn.InstanceNorm2d(conv_dim, affine=True),
            nn.ReLU(inplace=True),
        ]
        dim = conv_dim
        for _ in range(2):
            layers += [
                nn.Conv2d(dim, dim * 2, 4, 2, 1, bias=False),
                nn.InstanceNorm2d(dim * 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            dim *= 2
        layers += [ResidualBlock(dim) for _ in range(n_res)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(dim, dim // 2, 4, 2, 1, bias=False),
                nn.InstanceNorm2d(dim // 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            dim //= 2
        layers.append(nn.Conv2d(dim, self.out_channels, 7, 1, 3, bias=False))
        self.main = nn.Sequential(*layers)

    def forward(self, x, y_diff):
        self.check_input(x, y_diff)
        h = torch.cat([x, _broadcast_label(y_diff, x.shape[2:])], dim=1)
        return self.activate(self.main(h))


class AttGANGenerator(GeneratorBase):
    backbone = "attgan"
    n_layers = 5

    def __init__(self, modality, n_a, resolution, conv_dim=64, max_dim=1024, extra_in_channels=0):
        super().__init__(modality, n_a, resolution, extra_in_channels)
        if resolution % 32:
            raise ContractError(f"AttGAN generator needs resolution divisible by 32, got {resolution}")
        dims = [min(conv_dim * 2**i, max_dim) for i in range(self.n_layers)]
        self.dims = dims
        self.encoder = nn.ModuleList()
        c = self.in_channels
        for d in dims:
            self.encoder.append(
                nn.Sequential(
                    nn.Conv2d(c, d, 4, 2, 1, bias=False),
                    nn.BatchNorm2d(d),
                    nn.LeakyReLU(0.2, inplace=True),
                )
            )
            c = d
        # decoder widths mirror the encoder: 1024, 512, 256, 128, out
        dec_out = [dims[4], dims[3], dims[2], dims[1]]
        dec_in = [dims[4] + n_a, dims[4] + dims[3] + n_a, dims[3], dims[2]]
        self.decoder = nn.ModuleList(
            nn.Sequential(
                nn.ConvTranspose2d(i, o, 4, 2, 1, bias=False),
                nn.BatchNorm2d(o),
                nn.ReLU(inplace=True),
            )
            for i, o in zip(dec_in, dec_out)
        )
        self.head = nn.ConvTranspose2d(dims[1], self.out_channels, 4, 2, 1, bias=False)

    def forward(self, x, y_diff):
        self.check_input(x, y_diff)
        feats = []
        h = x
        for layer in self.encoder:
            h = layer(h)
            feats.append(h)
        h = torch.cat([h, _broadcast_label(y_diff, h.shape[2:])], dim=1)
        h = self.decoder[0](h)
        skip = feats[3]
        h = torch.cat([h, skip, _broadcast_label(y_diff, h.shape[2:])], dim=1)
        for layer in self.decoder[1:]:
            h = layer(h)
        return self.activate(self.head(h))


class DiscriminatorBase(nn.Module):
    role = "discriminator"

    def __init__(self, modality: str, n_a: int, resolution: int, extra_in_channels: int = 0):
        super().__init__()
        self.modality = modality
        self.n_a = n_a
        self.resolution = resolution
        self.in_channels = modality_channels(modality) + extra_in_channels

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != (self.resolution,) * 2:
            raise ContractError(
                f"{self.modality} discriminator expects [B, {self.in_channels}, {self.resolution}, "
                f"{self.resolution}], got {tuple(x.shape)}"
            )


class StarGANDiscriminator(DiscriminatorBase):
    """PatchGAN critic; no normalisation layers so the gradient penalty stays per-example."""

    backbone = "stargan"

    def __init__(self, modality, n_a, resolution, conv_dim=64, n_layers=None, slope=0.01, extra_in_channels=0):
        super().__init__(modality, n_a, resolution, extra_in_channels)
        if n_layers is None:
            n_layers = min(6, int(math.log2(resolution)) if resolution > 0 else 0)
        if n_layers < 1 or resolution % 2**n_layers:
            raise ContractError(
                f"StarGAN discriminator with {n_layers} stride-2 layers needs resolution divisible "
                f"by {2 ** max(n_layers, 0)}, got {resolution}"
            )
        self.n_layers = n_layers
        layers = [nn.Conv2d(self.in_channels, conv_dim, 4, 2, 1), nn.LeakyReLU(slope)]
        dim = conv_dim
        for _ in range(1, n_layers):
            layers += [nn.Conv2d(dim, dim * 2, 4, 2, 1), nn.LeakyReLU(slope)]
            dim *= 2
        self.main = nn.Sequential(*layers)
        k = resolution // 2**n_layers
        self.adv_head = nn.Conv2d(dim, 1, 3, 1, 1, bias=False)
        self.cls_head = nn.Conv2d(dim, n_a, k, 1, 0, bias=False)

    def forward(self, x):
        self.check_input(x)
        h = self.main(x)
        cls = torch.sigmoid(self.cls_head(h).view(h.size(0), self.n_a))
        return DiscriminatorOutput(self.adv_head(h), cls)


class AttGANDiscriminator(DiscriminatorBase):
    backbone = "attgan"
    n_layers = 5

    def __init__(self, modality, n_a, resolution, conv_dim=64, max_dim=1024, fc_dim=1024, slope=0.01,
                 extra_in_channels=0):
        super().__init__(modality, n_a, resolution, extra_in_channels)
        if resolution % 32:
            raise ContractError(f"AttGAN discriminator needs resolution divisible by 32, got {resolution}")
        layers = []
        c = self.in_channels
        for i in range(self.n_layers):
            d = min(conv_dim * 2**i, max_dim)
            layers += [nn.Conv2d(c, d, 4, 2, 1), nn.LeakyReLU(slope)]
            c = d
        self.main = nn.Sequential(*layers)
        flat = c * (resolution // 32) ** 2
        self.adv_head = nn.Sequential(nn.Linear(flat, fc_dim), nn.ReLU(), nn.Linear(fc_dim, 1))
        self.cls_head = nn.Sequential(nn.Linear(flat, fc_dim), nn.ReLU(), nn.Linear(fc_dim, n_a))

    def forward(self, x):
        self.check_input(x)
        h = self.main(x).flatten(1)
        return DiscriminatorOutput(self.adv_head(h).view(-1, 1), torch.sigmoid(self.cls_head(h)))


def init_weights(net: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled normal weights, zero biases, unit/zero norm affine params."""
    gen = torch.Generator().manual_seed(seed)
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=0.0, mode="fan_in", nonlinearity="relu", generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return net


_GENERATORS = {"stargan": StarGANGenerator, "attgan": AttGANGenerator}
_DISCRIMINATORS = {"stargan": StarGANDiscriminator, "attgan": AttGANDiscriminator}


def _check_common(backbone, modality, n_a):
    if backbone not in BACKBONES:
        raise ContractError(f"unknown backbone {backbone!r}; expected one of {BACKBONES}")
    if modality not in MODALITIES:
        raise ContractError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    if n_a < 1:
        raise ContractError("n_a must be at least 1")


def build_generator(backbone: str, modality: str, n_a: int, resolution: int, seed: int = 0, **kwargs):
    """Build and initialise a generator.

    ``kwargs`` are passed to the backbone class (``conv_dim``, ``n_res`` for
    StarGAN, ``max_dim`` for AttGAN, ``extra_in_channels`` for either). The
    build arguments are stored on the module so a checkpoint can rebuild it.
    """
    _check_common(backbone, modality, n_a)
    net = _GENERATORS[backbone](modality, n_a, resolution, **kwargs)
    net.build_args = dict(role="generator", backbone=backbone, modality=modality, n_a=n_a,
                          resolution=resolution, seed=seed, kwargs=dict(kwargs))
    return init_weights(net, seed)


def build_discriminator(backbone: str, modality: str, n_a: int, resolution: int, seed: int = 0, **kwargs):
    _check_common(backbone, modality, n_a)
    net = _DISCRIMINATORS[backbone](modality, n_a, resolution, **kwargs)
    net.build_args = dict(role="discriminator", backbone=backbone, modality=modality, n_a=n_a,
                          resolution=resolution, seed=seed, kwargs=dict(kwargs))
    return init_weights(net, seed)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def save_network(net: nn.Module, path: str | Path) -> None:
    torch.save({"build_args": net.build_args, "state_dict": net.state_dict()}, path)


def load_network(path: str | Path) -> nn.Module:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    args = dict(ckpt["build_args"])
    builder = build_generator if args.pop("role") == "generator" else build_discriminator
    kwargs = args.pop("kwargs")
    net = builder(**args, **kwargs)
    net.load_state_dict(ckpt["state_dict"])
    return net


def set_requires_grad(net: nn.Module, flag: bool) -> None:
    for p in net.parameters():
        p.requires_grad_(flag)
