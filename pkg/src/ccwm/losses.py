"""Training objectives: reconstruction, KL regularization, least-squares
adversarial terms, latent cycle-consistency, reward regression, and the
two-direction generator objective that combines them.

Reduction conventions, used consistently below:
  * image losses sum over channels/pixels and average over batch and time;
  * KL terms sum over latent cells, average over batch, then pass through a
    free-bits floor and a clip per time step before averaging over time;
  * score/reward losses are plain means.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import Discriminators, GaussianGrid, Rollout, WorldModel

FREE_BITS = 1.0   # nats per step below which KL terms stop contributing gradient
KL_CLIP = 100.0   # nats per step above which KL terms stop contributing gradient


@dataclass
class LossWeights:
    w_recon: float = 1.0
    w_reg: float = 1.0
    w_adv: float = 0.1
    w_cyc: float = 1.0
    w_reward: float = 10.0


@dataclass
class SeqBatch:
    """A sampled sequence batch as torch tensors."""
    observations: torch.Tensor          # [B, T, 3, H, W]
    actions: torch.Tensor               # [B, T, 2]
    rewards: torch.Tensor | None        # [B, T]
    reward_mask: torch.Tensor | None    # [B, T]
    domain: str

    @property
    def seq_length(self) -> int:
        return self.observations.shape[1]


def _check_grids(q: GaussianGrid, p: GaussianGrid) -> None:
    if q.mean.shape != p.mean.shape or q.std.shape != p.std.shape:
        raise ValueError(f"shape mismatch: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}")
    if not (torch.all(q.std > 0) and torch.all(p.std > 0)):
        raise ValueError("non-positive stddev in Gaussian grid")


def _kl_cells(q: GaussianGrid, p: GaussianGrid) -> torch.Tensor:
    """Summed diagonal-Gaussian KL over the trailing (C, h, w) dims."""
    _check_grids(q, p)
    var_ratio = (q.std / p.std) ** 2
    kl = 0.5 * (var_ratio + ((q.mean - p.mean) / p.std) ** 2 - 1.0) - torch.log(q.std / p.std)
    return kl.sum(dim=(-3, -2, -1))


def kl_grid(q: GaussianGrid, p: GaussianGrid) -> torch.Tensor:
    """KL(q || p), summed over latent cells, averaged over leading dims."""
    return _kl_cells(q, p).mean()


def reconstruction_loss(x: torch.Tensor, x_recon: torch.Tensor) -> torch.Tensor:
    """Squared error summed over pixels, averaged over batch (and time)."""
    if x.shape != x_recon.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_recon.shape)}")
    return ((x - x_recon) ** 2).sum(dim=(-3, -2, -1)).mean()


def adversarial_generator_loss(scores: torch.Tensor) -> torch.Tensor:
    """Least-squares generator objective: drive patch scores toward 1."""
    return ((scores - 1.0) ** 2).mean()


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares: real toward 1, fake toward 0. Callers detach the fakes."""
    return ((real_scores - 1.0) ** 2).mean() + (fake_scores ** 2).mean()


def cycle_loss(q_direct: GaussianGrid, q_cyc: GaussianGrid) -> torch.Tensor:
    """KL between direct and cycled posteriors; gradients flow the full path."""
    return kl_grid(q_direct, q_cyc)


def reward_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).mean()


def _regularized_kl(q: GaussianGrid, p: GaussianGrid, free_bits: float, kl_clip: float
                    ) -> tuple[torch.Tensor, float]:
    """Stabilized per-step KL plus its raw value for logging.

    Below the free-bits floor a step contributes a constant (no gradient);
    above the clip its value saturates at kl_clip while the gradient is
    rescaled by kl_clip/KL instead of zeroed, so a runaway KL keeps a
    restoring force and cannot freeze training.
    """
    per_step = _kl_cells(q, p).mean(dim=0)  # [T]
    floored = per_step.clamp(min=free_bits)
    scale = (kl_clip / floored.detach()).clamp(max=1.0)
    return (floored * scale).mean(), float(per_step.mean().detach())


def _masked_reward_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    total = mask.sum().clamp(min=1.0)
    return (mask * (pred - target) ** 2).sum() / total


METRIC_KEYS = ("l_recon_a", "l_recon_b", "l_reg_a", "l_reg_b", "l_adv_a", "l_adv_b",
               "l_cyc_a", "l_cyc_b", "l_rew", "l_dis")


def generator_objective(model: WorldModel, discs: Discriminators | None,
                        batch_a: SeqBatch | None, batch_b: SeqBatch | None,
                        weights: LossWeights,
                        free_bits: float = FREE_BITS, kl_clip: float = KL_CLIP,
                        generator: torch.Generator | None = None,
                        ) -> tuple[torch.Tensor, dict, dict[str, Rollout]]:
    """Both directions of the generator loss.

    Each present batch contributes reconstruction + KL regularization in its
    own domain plus, when weighted, the adversarial score of its translation
    into the other domain and the latent cycle term from re-encoding that
    translation. Reward regression applies only to batches that carry
    rewards. Returns (total loss, metrics, posterior rollouts per domain).
    """
    batches = [b for b in (batch_a, batch_b) if b is not None]
    if not batches:
        raise ValueError("at least one batch required")
    if len(batches) == 2 and batches[0].seq_length != batches[1].seq_length:
        raise ValueError(f"sequence lengths differ: {batches[0].seq_length} vs {batches[1].seq_length}")

    metrics = {k: 0.0 for k in METRIC_KEYS}
    total = None
    rollouts: dict[str, Rollout] = {}
    reward_terms = []
    for batch in batches:
        src = batch.domain
        dst = "B" if src == "A" else "A"
        tag = src.lower()
        b, t = batch.observations.shape[:2]

        rollout = model.rollout_posterior(batch.observations, batch.actions, src, generator)
        rollouts[src] = rollout

        recon = model.decode_rollout(rollout, src)
        l_recon = reconstruction_loss(batch.observations, recon)
        l_reg, raw_reg = _regularized_kl(rollout.post, rollout.prior, free_bits, kl_clip)
        direction = weights.w_recon * l_recon + weights.w_reg * l_reg
        metrics[f"l_recon_{tag}"] = float(l_recon.detach())
        metrics[f"l_reg_{tag}"] = raw_reg

        if weights.w_adv > 0 or weights.w_cyc > 0:
            translated = model.decode_rollout(rollout, dst)
            if weights.w_adv > 0:
                if discs is None:
                    raise ValueError("adversarial weight set but no discriminators given")
                scores = discs.discriminate(translated.flatten(0, 1), dst)
                l_adv = adversarial_generator_loss(scores)
                direction = direction + weights.w_adv * l_adv
                metrics[f"l_adv_{tag}"] = float(l_adv.detach())
            if weights.w_cyc > 0:
                cyc_rollout = model.rollout_posterior(translated, batch.actions, dst, generator)
                l_cyc, raw_cyc = _regularized_kl(rollout.post, cyc_rollout.post, free_bits, kl_clip)
                direction = direction + weights.w_cyc * l_cyc
                metrics[f"l_cyc_{tag}"] = raw_cyc

        if batch.rewards is not None:
            preds = model.reward(rollout.states_flat()).view(b, t)
            mask = batch.reward_mask if batch.reward_mask is not None else torch.ones_like(preds)
            l_rew = _masked_reward_loss(preds, batch.rewards, mask)
            direction = direction + weights.w_reward * l_rew
            reward_terms.append(float(l_rew.detach()))

        total = direction if total is None else total + direction

    metrics["l_rew"] = sum(reward_terms) / len(reward_terms) if reward_terms else 0.0
    metrics["loss"] = float(total.detach())
    return total, metrics, rollouts


def discriminator_objective(model: WorldModel, discs: Discriminators,
                            batch_a: SeqBatch, batch_b: SeqBatch,
                            generator: torch.Generator | None = None) -> tuple[torch.Tensor, dict]:
    """Both directions of the discriminator loss on re-computed translations.

    Translations are produced without tracking generator gradients, so only
    the discriminators receive an update from this objective.
    """
    total = None
    for batch, other in ((batch_a, batch_b), (batch_b, batch_a)):
        src, dst = batch.domain, other.domain
        with torch.no_grad():
            fake = model.translate_sequence(batch.observations, batch.actions, src, generator)
        real_scores = discs.discriminate(other.observations.flatten(0, 1), dst)
        fake_scores = discs.discriminate(fake.flatten(0, 1), dst)
        term = discriminator_loss(real_scores, fake_scores)
        total = term if total is None else total + term
    return total, {"l_dis": float(total.detach())}
