"""Convolutional building blocks: ConvGRU cell, image encoders/decoders,
and the patch discriminator."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConvGRUCell(nn.Module):
    """GRU cell whose dense maps are replaced by convolutions.

    Gate equations follow the classic formulation
        r = sigmoid(Wxr*x + Whr*h),  z = sigmoid(Wxz*x + Whz*h),
        n = tanh(Wxn*x + r . (Whn*h)),  h' = (1-z) . n + z . h
    so that with 1x1 kernels on a 1x1 grid the cell reduces to a dense GRU.
    Output stays in (-1, 1) whenever the incoming hidden state does.
    """

    def __init__(self, input_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        padding = kernel_size // 2
        self.input_channels = input_channels
        self.hidden_channels = hidden_channels
        self.x_gates = nn.Conv2d(input_channels, 3 * hidden_channels, kernel_size, padding=padding)
        self.h_gates = nn.Conv2d(hidden_channels, 3 * hidden_channels, kernel_size, padding=padding)

    def forward(self, hidden: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        if hidden.shape[-2:] != inputs.shape[-2:]:
            raise ValueError(f"spatial mismatch: hidden {tuple(hidden.shape)} vs inputs {tuple(inputs.shape)}")
        xr, xz, xn = torch.chunk(self.x_gates(inputs), 3, dim=1)
        hr, hz, hn = torch.chunk(self.h_gates(hidden), 3, dim=1)
        reset = torch.sigmoid(xr + hr)
        update = torch.sigmoid(xz + hz)
        cand = torch.tanh(xn + reset * hn)
        return (1.0 - update) * cand + update * hidden


def _channel_schedule(base: int, steps: int, cap_factor: int = 8) -> list[int]:
    return [min(base * 2 ** i, base * cap_factor) for i in range(steps)]


class ImageEncoder(nn.Module):
    """Strided conv stack from (3, S, S) down to a (feat, h, w) grid.

    Per-sample instance normalization after each strided conv keeps the
    sparse foreground signal at unit scale; without it the near-constant
    background drowns the few informative pixels.
    """

    def __init__(self, image_size: int, latent_hw: int, feat_channels: int,
                 base_channels: int = 32, in_channels: int = 3):
        super().__init__()
        downs = int(math.log2(image_size // latent_hw))
        if image_size // (2 ** downs) != latent_hw:
            raise ValueError(f"latent size {latent_hw} must be image size {image_size} / 2^k")
        chans = _channel_schedule(base_channels, downs)
        layers: list[nn.Module] = []
        prev = in_channels
        size = image_size
        for c in chans:
            size //= 2
            layers.append(nn.Conv2d(prev, c, 4, stride=2, padding=1))
            if size >= 2:  # a 1x1 map has no spatial statistics to normalize
                layers.append(nn.InstanceNorm2d(c))
            layers.append(nn.ELU())
            prev = c
        layers.append(nn.Conv2d(prev, feat_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)
        self.image_size = image_size

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        if obs.shape[-1] != self.image_size or obs.shape[-2] != self.image_size:
            raise ValueError(f"expected {self.image_size}x{self.image_size} input, got {tuple(obs.shape)}")
        return self.net(obs)


class ImageDecoder(nn.Module):
    """Transposed-conv stack from the latent grid back to a [0,1] image."""

    def __init__(self, image_size: int, latent_hw: int, in_channels: int,
                 base_channels: int = 32, out_channels: int = 3):
        super().__init__()
        ups = int(math.log2(image_size // latent_hw))
        chans = list(reversed(_channel_schedule(base_channels, ups)))
        layers: list[nn.Module] = [nn.Conv2d(in_channels, chans[0], 3, padding=1), nn.ELU()]
        for i, c in enumerate(chans):
            nxt = chans[i + 1] if i + 1 < len(chans) else base_channels
            layers += [nn.ConvTranspose2d(c, nxt, 4, stride=2, padding=1),
                       nn.InstanceNorm2d(nxt), nn.ELU()]
        layers += [nn.Conv2d(base_channels, out_channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(latent))


class PatchDiscriminator(nn.Module):
    """Three strided conv blocks plus a valid conv: one score per patch.

    For 64x64 inputs the score map is 6x6.
    """

    def __init__(self, base_channels: int = 64, in_channels: int = 3):
        super().__init__()
        c = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * c), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 1, 3),
        )

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.net(obs).squeeze(1)  # [B, n, n]


class DenseHead(nn.Module):
    """Small MLP over pooled latent features, ending in one scalar."""

    def __init__(self, in_dim: int, hidden: int = 128, layers: int = 2):
        super().__init__()
        mods: list[nn.Module] = []
        prev = in_dim
        for _ in range(layers):
            mods += [nn.Linear(prev, hidden), nn.ELU()]
            prev = hidden
        mods.append(nn.Linear(prev, 1))
        self.net = nn.Sequential(*mods)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)
