"""Comparison methods: random-convolution augmentation and the
single-modality world model (no domain adaptation at all).

Both baselines reuse the whole training stack; the only deltas are the
loss weights (adversarial and cycle terms off), a single shared network
per role, and, for RC, randomized encoder inputs.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn.functional as F

KERNEL_SIZES = (1, 3, 5, 7)
IDENTITY_PROB = 0.5


def random_conv_augment(obs: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Convolve each image with a freshly sampled random kernel.

    Kernel size is uniform over {1,3,5,7}; weights are zero-mean Gaussians
    scaled for approximate variance preservation. Each image independently
    passes through unchanged with probability 0.5; convolved images are
    min-max renormalized back into [0,1]. Shape-preserving and label-free.
    """
    if obs.dim() != 4:
        raise ValueError(f"expected [B, C, H, W], got {tuple(obs.shape)}")
    b, c = obs.shape[:2]
    keep = torch.rand(b, generator=generator, device=obs.device) < IDENTITY_PROB
    ks = torch.randint(0, len(KERNEL_SIZES), (b,), generator=generator, device=obs.device)
    out = obs.clone()
    for i in range(b):
        if keep[i]:
            continue
        k = KERNEL_SIZES[int(ks[i])]
        sigma = 1.0 / (c * k * k) ** 0.5
        weight = torch.randn((c, c, k, k), generator=generator,
                             dtype=obs.dtype, device=obs.device) * sigma
        img = F.conv2d(obs[i:i + 1], weight, padding=k // 2)
        lo = img.amin()
        hi = img.amax()
        out[i] = (img[0] - lo) / (hi - lo).clamp(min=1e-8)
    return out


def train_single_modality(config, buffer_a, steps: int, out_dir: Path | None = None):
    """World model fit on domain A only; the no-adaptation baseline."""
    from .training import Trainer

    if config.method not in ("single", "rc"):
        raise ValueError("single-modality training expects method 'single' or 'rc'")
    trainer = Trainer(config, out_dir=out_dir)
    trainer.fit_offline(buffer_a, None, steps)
    if out_dir is not None:
        return trainer, trainer.save_checkpoint(Path(out_dir) / "checkpoint_final.ckpt")
    return trainer, None
