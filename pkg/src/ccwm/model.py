"""The learned world model: per-domain encoders/decoders over one shared
recurrent latent, a shared reward head, and per-domain patch discriminators.

Parameter layout contract: everything inside WorldModel belongs to the
generator parameter set, everything inside Discriminators to the adversary
set; the two never overlap. Prior, posterior and reward head carry no
domain-indexed parameters, encoders/decoders/discriminators share none.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import DOMAINS
from .nets import ConvGRUCell, DenseHead, ImageDecoder, ImageEncoder, PatchDiscriminator

MIN_STD = 1e-4
_STD_BIAS = -1.05  # softplus(-1.05) ~= 0.3: start with the sample noise well
                   # below the feature scale, or the latent drowns at init


@dataclass
class ModelConfig:
    image_size: int = 64
    image_channels: int = 3
    latent_hw: int = 8          # spatial size of the latent grid
    deter_channels: int = 32    # ConvGRU hidden
    stoch_channels: int = 16    # sampled latent
    feat_channels: int = 64     # encoder output
    base_channels: int = 32     # conv stack width
    disc_channels: int = 64     # discriminator width
    head_channels: int = 32     # hidden width of the distribution heads
    action_dim: int = 2
    kernel_size: int = 3
    single_domain: bool = False  # baselines: route both modalities through domain A nets

    @property
    def state_channels(self) -> int:
        return self.deter_channels + self.stoch_channels


@dataclass
class GaussianGrid:
    """Diagonal Gaussian over a (C, h, w) latent grid."""
    mean: torch.Tensor  # [B, C, h, w]
    std: torch.Tensor   # [B, C, h, w], > 0

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator,
                          dtype=self.mean.dtype, device=self.mean.device)
        return self.mean + self.std * eps

    def mode(self) -> torch.Tensor:
        return self.mean

    def map(self, fn) -> "GaussianGrid":
        return GaussianGrid(mean=fn(self.mean), std=fn(self.std))


@dataclass
class LatentState:
    """Shared latent code: deterministic recurrent grid plus stochastic sample."""
    deter: torch.Tensor  # [B, Cd, h, w], entries in (-1, 1)
    stoch: torch.Tensor  # [B, Cs, h, w]

    def feature(self) -> torch.Tensor:
        return torch.cat([self.deter, self.stoch], dim=1)

    def detach(self) -> "LatentState":
        return LatentState(self.deter.detach(), self.stoch.detach())

    def map(self, fn) -> "LatentState":
        return LatentState(fn(self.deter), fn(self.stoch))

    @property
    def batch_size(self) -> int:
        return self.deter.shape[0]


def _to_dist(raw: torch.Tensor) -> GaussianGrid:
    mean, std_raw = torch.chunk(raw, 2, dim=1)
    std = F.softplus(std_raw + _STD_BIAS) + MIN_STD
    return GaussianGrid(mean=mean, std=std)


def spatial_moments(grid: torch.Tensor) -> torch.Tensor:
    """Pool a (B, C, h, w) grid into zeroth and first spatial moments.

    Plain mean-pooling is translation-invariant and cannot express *where*
    features sit on the grid; the coordinate-weighted means keep positions
    linearly recoverable. Degenerates to mean-pooling on a 1x1 grid.
    """
    b, c, h, w = grid.shape
    kw = dict(dtype=grid.dtype, device=grid.device)
    xs = torch.linspace(-1.0, 1.0, w, **kw) if w > 1 else torch.zeros(1, **kw)
    ys = torch.linspace(-1.0, 1.0, h, **kw) if h > 1 else torch.zeros(1, **kw)
    mean = grid.mean(dim=(-2, -1))
    mx = (grid * xs.view(1, 1, 1, w)).mean(dim=(-2, -1))
    my = (grid * ys.view(1, 1, h, 1)).mean(dim=(-2, -1))
    return torch.cat([mean, mx, my], dim=1)


class RSSM(nn.Module):
    """Recurrent state-space model on a spatial grid (ConvGRU core).

    The deterministic update is shared between prior and posterior: both
    see the previous state and action; only the distribution heads differ
    (the posterior additionally sees the current frame's features).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        k, p = cfg.kernel_size, cfg.kernel_size // 2
        self.cell = ConvGRUCell(cfg.stoch_channels + cfg.action_dim,
                                cfg.deter_channels, cfg.kernel_size)
        self.prior_head = nn.Sequential(
            nn.Conv2d(cfg.deter_channels, cfg.head_channels, k, padding=p), nn.ELU(),
            nn.Conv2d(cfg.head_channels, 2 * cfg.stoch_channels, k, padding=p))
        self.posterior_head = nn.Sequential(
            nn.Conv2d(cfg.deter_channels + cfg.feat_channels, cfg.head_channels, k, padding=p), nn.ELU(),
            nn.Conv2d(cfg.head_channels, 2 * cfg.stoch_channels, k, padding=p))

    def initial_state(self, batch: int, device=None, dtype=None) -> LatentState:
        hw = self.cfg.latent_hw
        kw = dict(device=device, dtype=dtype)
        return LatentState(
            deter=torch.zeros(batch, self.cfg.deter_channels, hw, hw, **kw),
            stoch=torch.zeros(batch, self.cfg.stoch_channels, hw, hw, **kw))

    def initial_action(self, batch: int, device=None, dtype=None) -> torch.Tensor:
        return torch.zeros(batch, self.cfg.action_dim, device=device, dtype=dtype)

    def _deter_step(self, prev: LatentState, action: torch.Tensor) -> torch.Tensor:
        if not torch.all(torch.isfinite(action)):
            raise ValueError("non-finite action")
        b, _, h, w = prev.stoch.shape
        planes = action.view(b, -1, 1, 1).expand(b, action.shape[-1], h, w)
        return self.cell(prev.deter, torch.cat([prev.stoch, planes], dim=1))

    def prior_dist(self, deter: torch.Tensor) -> GaussianGrid:
        return _to_dist(self.prior_head(deter))

    def posterior_dist(self, deter: torch.Tensor, feat: torch.Tensor) -> GaussianGrid:
        return _to_dist(self.posterior_head(torch.cat([deter, feat], dim=1)))

    def prior_step(self, prev: LatentState, action: torch.Tensor,
                   generator: torch.Generator | None = None) -> tuple[GaussianGrid, LatentState]:
        deter = self._deter_step(prev, action)
        dist = self.prior_dist(deter)
        return dist, LatentState(deter=deter, stoch=dist.sample(generator))

    def posterior_step(self, prev: LatentState, action: torch.Tensor, feat: torch.Tensor,
                       generator: torch.Generator | None = None) -> tuple[GaussianGrid, LatentState]:
        deter = self._deter_step(prev, action)
        dist = self.posterior_dist(deter, feat)
        return dist, LatentState(deter=deter, stoch=dist.sample(generator))

    def observe_step(self, prev: LatentState, action: torch.Tensor, feat: torch.Tensor,
                     generator: torch.Generator | None = None
                     ) -> tuple[GaussianGrid, GaussianGrid, LatentState]:
        """One filtering step returning (posterior, prior, new state)."""
        deter = self._deter_step(prev, action)
        post = self.posterior_dist(deter, feat)
        prior = self.prior_dist(deter)
        return post, prior, LatentState(deter=deter, stoch=post.sample(generator))


@dataclass
class Rollout:
    """Stacked posterior filtering pass over a sequence."""
    deter: torch.Tensor        # [B, T, Cd, h, w]
    stoch: torch.Tensor        # [B, T, Cs, h, w]
    post: GaussianGrid         # grids shaped [B, T, Cs, h, w]
    prior: GaussianGrid

    @property
    def seq_length(self) -> int:
        return self.deter.shape[1]

    def states_flat(self) -> LatentState:
        return LatentState(deter=self.deter.flatten(0, 1), stoch=self.stoch.flatten(0, 1))

    def state_at(self, t: int) -> LatentState:
        return LatentState(deter=self.deter[:, t], stoch=self.stoch[:, t])

    def last_state(self) -> LatentState:
        return self.state_at(self.seq_length - 1)


class WorldModel(nn.Module):
    """Generator-side parameters: encoders, decoders, shared RSSM, reward head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        domains = ("A",) if cfg.single_domain else DOMAINS
        self.encoders = nn.ModuleDict({
            d: ImageEncoder(cfg.image_size, cfg.latent_hw, cfg.feat_channels,
                            cfg.base_channels, cfg.image_channels)
            for d in domains})
        self.decoders = nn.ModuleDict({
            d: ImageDecoder(cfg.image_size, cfg.latent_hw, cfg.state_channels,
                            cfg.base_channels, cfg.image_channels)
            for d in domains})
        self.rssm = RSSM(cfg)
        self.reward_head = DenseHead(3 * cfg.state_channels)

    def _key(self, domain: str) -> str:
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}")
        return "A" if self.cfg.single_domain else domain

    def encode(self, obs: torch.Tensor, domain: str) -> torch.Tensor:
        return self.encoders[self._key(domain)](obs)

    def decode(self, state: LatentState, domain: str) -> torch.Tensor:
        return self.decoders[self._key(domain)](state.feature())

    def reward(self, state: LatentState) -> torch.Tensor:
        return self.reward_head(spatial_moments(state.feature()))  # [B]

    def initial_state(self, batch: int) -> LatentState:
        p = next(self.parameters())
        return self.rssm.initial_state(batch, device=p.device, dtype=p.dtype)

    def rollout_posterior(self, obs: torch.Tensor, actions: torch.Tensor, domain: str,
                          generator: torch.Generator | None = None,
                          feat: torch.Tensor | None = None) -> Rollout:
        """Filter a [B, T, ...] sequence from the zero initial state.

        actions[:, t] is the action that preceded obs[:, t] (zeros at the
        episode head).
        """
        b, t = obs.shape[:2]
        if feat is None:
            feat = self.encode(obs.flatten(0, 1), domain).unflatten(0, (b, t))
        state = self.initial_state(b)
        deters, stochs, pm, ps, qm, qs = [], [], [], [], [], []
        for i in range(t):
            post, prior, state = self.rssm.observe_step(state, actions[:, i], feat[:, i], generator)
            deters.append(state.deter)
            stochs.append(state.stoch)
            qm.append(post.mean); qs.append(post.std)
            pm.append(prior.mean); ps.append(prior.std)
        stack = lambda xs: torch.stack(xs, dim=1)
        return Rollout(
            deter=stack(deters), stoch=stack(stochs),
            post=GaussianGrid(stack(qm), stack(qs)),
            prior=GaussianGrid(stack(pm), stack(ps)))

    def decode_rollout(self, rollout: Rollout, domain: str) -> torch.Tensor:
        b, t = rollout.deter.shape[:2]
        frames = self.decode(rollout.states_flat(), domain)
        return frames.unflatten(0, (b, t))

    def translate_sequence(self, obs: torch.Tensor, actions: torch.Tensor, source: str,
                           generator: torch.Generator | None = None) -> torch.Tensor:
        """Encode in `source`, decode every state with the opposite decoder."""
        target = "B" if source == "A" else "A"
        rollout = self.rollout_posterior(obs, actions, source, generator)
        return self.decode_rollout(rollout, target)


class Discriminators(nn.Module):
    """Per-domain patch discriminators; the adversary parameter set."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.nets = nn.ModuleDict({d: PatchDiscriminator(cfg.disc_channels, cfg.image_channels)
                                   for d in DOMAINS})

    def discriminate(self, obs: torch.Tensor, domain: str) -> torch.Tensor:
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}")
        return self.nets[domain](obs)

    forward = discriminate
