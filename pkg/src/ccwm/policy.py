"""Actor-critic trained purely on latent rollouts of the shared prior.

The actor only ever sees latent states, never observations, which is what
makes the learned policy domain-independent: filtering an observation from
either modality lands in the same latent space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .env import ACTION_MAX
from .model import LatentState, ModelConfig, WorldModel, spatial_moments

_ACTOR_STD_BIAS = -1.0  # softplus(-1) ~= 0.31: moderate initial exploration
MIN_STD = 1e-4


def _pool(state: LatentState) -> torch.Tensor:
    return spatial_moments(state.feature())  # [B, 3*(Cd+Cs)]


class Actor(nn.Module):
    """Tanh-squashed Gaussian over actions, scaled to the [-0.2, 0.2] box."""

    def __init__(self, cfg: ModelConfig, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(3 * cfg.state_channels, hidden), nn.ELU(),
            nn.Linear(hidden, hidden), nn.ELU(),
            nn.Linear(hidden, 2 * cfg.action_dim))
        self.action_dim = cfg.action_dim

    def _params(self, state: LatentState) -> tuple[torch.Tensor, torch.Tensor]:
        mu, std_raw = torch.chunk(self.net(_pool(state)), 2, dim=-1)
        return mu, F.softplus(std_raw + _ACTOR_STD_BIAS) + MIN_STD

    def sample(self, state: LatentState, generator: torch.Generator | None = None) -> torch.Tensor:
        mu, std = self._params(state)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        return ACTION_MAX * torch.tanh(mu + std * eps)

    def mean_action(self, state: LatentState) -> torch.Tensor:
        mu, _ = self._params(state)
        return ACTION_MAX * torch.tanh(mu)


class Critic(nn.Module):
    """State-value head over pooled latent features."""

    def __init__(self, cfg: ModelConfig, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(3 * cfg.state_channels, hidden), nn.ELU(),
            nn.Linear(hidden, hidden), nn.ELU(),
            nn.Linear(hidden, 1))

    def forward(self, state: LatentState) -> torch.Tensor:
        return self.net(_pool(state)).squeeze(-1)


@dataclass
class ImaginedTrajectory:
    """Latent rollout produced by prior dynamics and the actor alone."""
    deter: torch.Tensor    # [H+1, N, Cd, h, w]
    stoch: torch.Tensor    # [H+1, N, Cs, h, w]
    actions: torch.Tensor  # [H, N, action_dim]
    rewards: torch.Tensor  # [H, N], reward head at states 1..H
    values: torch.Tensor   # [H+1, N]

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    def state_at(self, t: int) -> LatentState:
        return LatentState(deter=self.deter[t], stoch=self.stoch[t])

    def states_flat(self) -> LatentState:
        return LatentState(deter=self.deter.flatten(0, 1), stoch=self.stoch.flatten(0, 1))


def imagine(model: WorldModel, actor: Actor, critic: Critic, start: LatentState,
            horizon: int, generator: torch.Generator | None = None) -> ImaginedTrajectory:
    """Roll the prior forward `horizon` steps, acting with the actor."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    state = start
    deters, stochs = [state.deter], [state.stoch]
    actions, rewards = [], []
    for _ in range(horizon):
        action = actor.sample(state, generator)
        _, state = model.rssm.prior_step(state, action, generator)
        if not torch.all(torch.isfinite(state.deter)):
            raise FloatingPointError("imagination produced non-finite state")
        deters.append(state.deter)
        stochs.append(state.stoch)
        actions.append(action)
        rewards.append(model.reward(state))
    deter = torch.stack(deters)
    stoch = torch.stack(stochs)
    flat = LatentState(deter=deter.flatten(0, 1), stoch=stoch.flatten(0, 1))
    values = critic(flat).view(horizon + 1, -1)
    return ImaginedTrajectory(deter=deter, stoch=stoch, actions=torch.stack(actions),
                              rewards=torch.stack(rewards), values=values)


def lambda_returns(rewards: torch.Tensor, values: torch.Tensor,
                   gamma: float, lam: float) -> torch.Tensor:
    """TD(lambda) targets: rewards [H, ...], values [H+1, ...] -> [H, ...]."""
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lam must lie in [0, 1]")
    if values.shape[0] != rewards.shape[0] + 1:
        raise ValueError("values must have one more step than rewards")
    horizon = rewards.shape[0]
    out = [None] * horizon
    nxt = values[-1]
    for t in reversed(range(horizon)):
        nxt = rewards[t] + gamma * ((1.0 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    return torch.stack(out)


def policy_update(model: WorldModel, actor: Actor, critic: Critic,
                  opt_actor: torch.optim.Optimizer, opt_critic: torch.optim.Optimizer,
                  start: LatentState, horizon: int, gamma: float, lam: float,
                  generator: torch.Generator | None = None,
                  grad_clip: float = 100.0) -> dict:
    """One actor step through the frozen dynamics, one critic regression step."""
    frozen = [p for p in model.parameters() if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    try:
        traj = imagine(model, actor, critic, start.detach(), horizon, generator)
        targets = lambda_returns(traj.rewards, traj.values, gamma, lam)
        actor_loss = -targets.mean()
        opt_actor.zero_grad(set_to_none=True)
        actor_loss.backward()
        nn.utils.clip_grad_norm_(actor.parameters(), grad_clip)
        opt_actor.step()

        pred_states = LatentState(traj.deter[:horizon].flatten(0, 1).detach(),
                                  traj.stoch[:horizon].flatten(0, 1).detach())
        critic_loss = F.mse_loss(critic(pred_states), targets.detach().flatten())
        opt_critic.zero_grad(set_to_none=True)
        critic_loss.backward()
        nn.utils.clip_grad_norm_(critic.parameters(), grad_clip)
        opt_critic.step()
    finally:
        for p in frozen:
            p.requires_grad_(True)
    return {"actor_loss": float(actor_loss.detach()),
            "critic_loss": float(critic_loss.detach()),
            "imag_return": float(targets.mean().detach())}


def act(model: WorldModel, actor: Actor, obs: np.ndarray, domain: str,
        prev_state: LatentState, prev_action: torch.Tensor, explore: bool,
        generator: torch.Generator | None = None, noise_std: float = 0.3,
        ) -> tuple[np.ndarray, LatentState]:
    """Filter one observation and act; the actor never sees the domain."""
    p = next(model.parameters())
    obs_t = torch.as_tensor(obs, dtype=p.dtype, device=p.device).unsqueeze(0)
    with torch.no_grad():
        feat = model.encode(obs_t, domain)
        _, state = model.rssm.posterior_step(prev_state, prev_action, feat, generator)
        if explore:
            action = actor.sample(state, generator)
            noise = torch.randn(action.shape, generator=generator,
                                dtype=action.dtype, device=action.device) * noise_std
            action = action + noise
        else:
            action = actor.mean_action(state)
    action = action.clamp(-ACTION_MAX, ACTION_MAX)
    return action.squeeze(0).cpu().numpy().astype(np.float64), state
