"""Alternating optimization of the generator and discriminator parameter
sets, plus the online interaction loop for the reward-bearing modality.

One training step draws a sequence batch per domain, applies one gradient
step to the generator side, recomputes translations, and applies one step
to the discriminators. Non-finite losses abort the step and roll all
parameters back to the pre-step snapshot.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    generator_state_array,
    load_arrays,
    load_module,
    load_optimizer,
    module_arrays,
    optimizer_arrays,
    save_arrays,
    set_generator_state,
)
from .data import Batch, Episode, ReplayBuffer, load_buffer, load_episode, save_episode
from .env import ArtificialEnv
from .losses import (
    FREE_BITS,
    KL_CLIP,
    LossWeights,
    METRIC_KEYS,
    SeqBatch,
    discriminator_objective,
    generator_objective,
)
from .model import Discriminators, LatentState, ModelConfig, WorldModel
from .policy import Actor, Critic, act, policy_update

METHODS = ("ccwm", "single", "rc")


@dataclass
class TrainConfig:
    method: str = "ccwm"
    seq_length: int = 20          # T
    batch_size: int = 16
    model_lr: float = 3e-4
    dis_lr: float = 1e-4
    actor_lr: float = 8e-5
    critic_lr: float = 8e-5
    total_env_steps: int = 30_000
    train_every: int = 5          # env steps between training updates
    explore_noise: float = 0.3
    horizon: int = 15
    gamma: float = 0.99
    lam: float = 0.95
    weights: LossWeights = field(default_factory=LossWeights)
    free_bits: float = FREE_BITS
    kl_clip: float = KL_CLIP
    grad_clip: float = 100.0
    dis_grad_clip: float = 100.0
    latent_hw: int = 8
    deter_channels: int = 32
    stoch_channels: int = 16
    feat_channels: int = 64
    base_channels: int = 32
    disc_channels: int = 64
    head_channels: int = 32
    buffer_capacity: int = 100_000
    seed: int = 0
    precision: str = "float32"    # float64 turns on fully deterministic mode
    checkpoint_every: int = 5000  # env steps
    log_every: int = 100          # train steps between progress prints
    eval_every: int = 500         # train steps between held-out cycle evals
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.seq_length < 2:
            raise ValueError("seq_length must be >= 2")
        for name in ("model_lr", "dis_lr", "actor_lr", "critic_lr", "batch_size", "train_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.method in ("single", "rc"):
            self.weights = LossWeights(w_recon=self.weights.w_recon, w_reg=self.weights.w_reg,
                                       w_adv=0.0, w_cyc=0.0, w_reward=self.weights.w_reward)

    @property
    def deterministic(self) -> bool:
        return self.precision == "float64"

    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    def model_config(self) -> ModelConfig:
        return ModelConfig(latent_hw=self.latent_hw, deter_channels=self.deter_channels,
                           stoch_channels=self.stoch_channels, feat_channels=self.feat_channels,
                           base_channels=self.base_channels, disc_channels=self.disc_channels,
                           head_channels=self.head_channels,
                           single_domain=self.method in ("single", "rc"))

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return cls(**raw)


class MetricsLogger:
    """One JSON object per line; append-only."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as f:
            f.write(json.dumps(record) + "\n")


def read_metrics(path: Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


class Trainer:
    """Owns all parameters, optimizers and RNG streams for one run."""

    def __init__(self, config: TrainConfig, out_dir: Path | None = None):
        self.config = config
        if config.deterministic:
            torch.set_num_threads(1)
        torch.manual_seed(config.seed)
        dtype = config.torch_dtype()
        mcfg = config.model_config()
        self.model = WorldModel(mcfg).to(dtype)
        self.discs = Discriminators(mcfg).to(dtype)
        self.actor = Actor(mcfg).to(dtype)
        self.critic = Critic(mcfg).to(dtype)
        self.opt_model = torch.optim.Adam(self.model.parameters(), lr=config.model_lr)
        self.opt_disc = torch.optim.Adam(self.discs.parameters(), lr=config.dis_lr)
        self.opt_actor = torch.optim.Adam(self.actor.parameters(), lr=config.actor_lr)
        self.opt_critic = torch.optim.Adam(self.critic.parameters(), lr=config.critic_lr)
        self.gen = torch.Generator()
        self.gen.manual_seed(config.seed + 1)
        self.rng = np.random.default_rng(config.seed + 2)
        self.train_steps = 0
        self.env_steps = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.logger = MetricsLogger(self.out_dir / "metrics.jsonl" if self.out_dir else None)
        self.collected_episodes: list[str] = []
        self.dtype = dtype
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.json").write_text(json.dumps(config.as_dict(), indent=1))

    # -- batches ------------------------------------------------------------

    def _seq_batch(self, batch: Batch) -> SeqBatch:
        obs = torch.from_numpy(batch.observations).to(self.dtype)
        if self.config.method == "rc":
            from .baselines import random_conv_augment
            flat = obs.flatten(0, 1)
            obs = random_conv_augment(flat, self.gen).unflatten(0, obs.shape[:2])
        to = lambda a: torch.from_numpy(a).to(self.dtype) if a is not None else None
        return SeqBatch(observations=obs, actions=to(batch.actions),
                        rewards=to(batch.rewards), reward_mask=to(batch.reward_mask),
                        domain=batch.domain)

    # -- snapshots for non-finite rollback -----------------------------------

    def _snapshot(self) -> dict:
        return {
            "model": copy.deepcopy(self.model.state_dict()),
            "discs": copy.deepcopy(self.discs.state_dict()),
            "opt_model": copy.deepcopy(self.opt_model.state_dict()),
            "opt_disc": copy.deepcopy(self.opt_disc.state_dict()),
        }

    def _restore(self, snap: dict) -> None:
        self.model.load_state_dict(snap["model"])
        self.discs.load_state_dict(snap["discs"])
        self.opt_model.load_state_dict(snap["opt_model"])
        self.opt_disc.load_state_dict(snap["opt_disc"])

    # -- one alternating step -------------------------------------------------

    def _generator_phase(self, batch_a: SeqBatch, batch_b: SeqBatch | None,
                         metrics: dict) -> LatentState | None:
        """One gradient step on the generator parameter set."""
        cfg = self.config
        loss, gen_metrics, rollouts = generator_objective(
            self.model, self.discs if cfg.method == "ccwm" else None,
            batch_a, batch_b, cfg.weights, cfg.free_bits, cfg.kl_clip, self.gen)
        metrics.update(gen_metrics)
        if not torch.isfinite(loss):
            return None
        self.opt_model.zero_grad(set_to_none=True)
        loss.backward()
        metrics["grad_norm_model"] = float(torch.nn.utils.clip_grad_norm_(
            self.model.parameters(), cfg.grad_clip))
        self.opt_model.step()
        starts = [r.states_flat().detach() for r in rollouts.values()]
        return LatentState(deter=torch.cat([s.deter for s in starts]),
                           stoch=torch.cat([s.stoch for s in starts]))

    def _discriminator_phase(self, batch_a: SeqBatch, batch_b: SeqBatch, metrics: dict) -> bool:
        """One gradient step on the discriminators, on re-computed translations."""
        cfg = self.config
        dis_loss, dis_metrics = discriminator_objective(
            self.model, self.discs, batch_a, batch_b, self.gen)
        if not torch.isfinite(dis_loss):
            return False
        self.opt_disc.zero_grad(set_to_none=True)
        self.opt_model.zero_grad(set_to_none=True)  # scratch grads from the generator pass
        dis_loss.backward()
        metrics["grad_norm_disc"] = float(torch.nn.utils.clip_grad_norm_(
            self.discs.parameters(), cfg.dis_grad_clip))
        self.opt_disc.step()
        metrics.update(dis_metrics)
        return True

    def train_step(self, buffer_a: ReplayBuffer, buffer_b: ReplayBuffer | None,
                   ) -> tuple[dict, LatentState | None]:
        cfg = self.config
        snap = self._snapshot()
        batch_a = self._seq_batch(buffer_a.sample_sequences(cfg.batch_size, cfg.seq_length, self.rng))
        batch_b = None
        if cfg.method == "ccwm":
            if buffer_b is None:
                raise ValueError("ccwm training needs a domain-B buffer")
            batch_b = self._seq_batch(buffer_b.sample_sequences(cfg.batch_size, cfg.seq_length, self.rng))

        metrics = {k: 0.0 for k in METRIC_KEYS}
        metrics["step"] = self.train_steps
        starts = self._generator_phase(batch_a, batch_b, metrics)
        ok = starts is not None
        if ok and cfg.method == "ccwm":
            ok = self._discriminator_phase(batch_a, batch_b, metrics)
        if not ok:
            self._restore(snap)
            metrics["aborted"] = 1.0
            print(f"step {self.train_steps}: non-finite loss, step rolled back")
            starts = None
        self.train_steps += 1
        return metrics, starts

    def policy_step(self, starts: LatentState) -> dict:
        cfg = self.config
        return policy_update(self.model, self.actor, self.critic,
                             self.opt_actor, self.opt_critic, starts,
                             cfg.horizon, cfg.gamma, cfg.lam, self.gen, cfg.grad_clip)

    # -- offline fitting (both domains from fixed datasets) -------------------

    def fit_offline(self, buffer_a: ReplayBuffer, buffer_b: ReplayBuffer | None,
                    steps: int, train_policy: bool = False,
                    eval_buffer: ReplayBuffer | None = None) -> None:
        for _ in range(steps):
            metrics, starts = self.train_step(buffer_a, buffer_b)
            if train_policy and starts is not None:
                metrics.update(self.policy_step(starts))
            if eval_buffer is not None and self.config.eval_every > 0 \
                    and self.train_steps % self.config.eval_every == 0:
                metrics.update(self.eval_cycle(eval_buffer))
            self.logger.write(metrics)
            if self.train_steps % self.config.log_every == 0:
                self._print_progress(metrics)

    def eval_cycle(self, buffer: ReplayBuffer) -> dict:
        """Cycle loss on held-out data, without touching any parameters."""
        cfg = self.config
        rng = np.random.default_rng(cfg.seed + 777)  # fixed eval stream
        batch = self._seq_batch(buffer.sample_sequences(
            min(cfg.batch_size, 8), cfg.seq_length, rng))
        g = torch.Generator()
        g.manual_seed(cfg.seed + 778)
        with torch.no_grad():
            _, metrics, _ = generator_objective(
                self.model, self.discs if cfg.method == "ccwm" else None,
                batch if batch.domain == "A" else None,
                batch if batch.domain == "B" else None,
                cfg.weights, cfg.free_bits, cfg.kl_clip, g)
        tag = batch.domain.lower()
        return {"eval_l_cyc": metrics[f"l_cyc_{tag}"], "eval_l_recon": metrics[f"l_recon_{tag}"]}

    def _print_progress(self, metrics: dict) -> None:
        keys = ("l_recon_a", "l_recon_b", "l_reg_a", "l_cyc_a", "l_rew", "l_dis")
        parts = " ".join(f"{k}={metrics.get(k, 0.0):.3f}" for k in keys)
        print(f"step {self.train_steps:6d} env {self.env_steps:6d} {parts}", flush=True)

    # -- online loop -----------------------------------------------------------

    def train_online(self, env: ArtificialEnv, offline_b: Path | None) -> Path:
        """Collect modality-A experience online against a fixed offline
        modality-B dataset; returns the final checkpoint path."""
        cfg = self.config
        buffer_b = None
        eval_b = None
        if cfg.method == "ccwm":
            if offline_b is None:
                raise ValueError("ccwm training needs an offline domain-B dataset")
            buffer_b, eval_b = self._load_offline_split(offline_b)
            if buffer_b.num_episodes == 0:
                raise ValueError(f"offline dataset {offline_b} contains no episodes")
        self._offline_b = str(offline_b) if offline_b else None

        buffer_a = ReplayBuffer(cfg.buffer_capacity, domain="A")
        data_dir = self.out_dir / "data" if self.out_dir else None
        for name in self.collected_episodes:  # resume: reload previous experience
            buffer_a.add(load_episode(data_dir / name))

        next_checkpoint = (self.env_steps // cfg.checkpoint_every + 1) * cfg.checkpoint_every
        while self.env_steps < cfg.total_env_steps:
            episode_return, episode_len = self._collect_episode(env, buffer_a, buffer_b, eval_b)
            self.logger.write({"env_step": self.env_steps, "episode_return": episode_return,
                               "episode_length": episode_len})
            if data_dir is not None and self._last_episode is not None:
                name = f"ep_{len(self.collected_episodes):05d}"
                save_episode(self._last_episode, data_dir / name)
                self.collected_episodes.append(name)
            if self.env_steps >= next_checkpoint and self.out_dir is not None:
                self.save_checkpoint(self.out_dir / f"checkpoint_{self.env_steps:06d}.ckpt")
                next_checkpoint = (self.env_steps // cfg.checkpoint_every + 1) * cfg.checkpoint_every
        final = (self.out_dir / "checkpoint_final.ckpt") if self.out_dir else Path("checkpoint_final.ckpt")
        self.save_checkpoint(final)
        return final

    def _collect_episode(self, env: ArtificialEnv, buffer_a: ReplayBuffer,
                         buffer_b: ReplayBuffer | None,
                         eval_b: ReplayBuffer | None) -> tuple[float, int]:
        cfg = self.config
        seed = int(self.rng.integers(0, 2 ** 31 - 1))
        state, obs = env.reset(seed)
        initial = state
        latent = self.model.initial_state(1)
        prev_action = self.model.rssm.initial_action(1, dtype=self.dtype)
        observations = [obs]
        actions, rewards, dones = [], [], []
        done = False
        episode_return = 0.0
        while not done and self.env_steps < cfg.total_env_steps:
            action, latent = act(self.model, self.actor, obs, "A", latent, prev_action,
                                 explore=True, generator=self.gen, noise_std=cfg.explore_noise)
            result = env.step(state, action)
            observations.append(result.observation)
            actions.append(np.clip(action, -0.2, 0.2))
            rewards.append(result.reward)
            dones.append(result.done)
            episode_return += result.reward
            obs, state, done = result.observation, result.state, result.done
            prev_action = torch.as_tensor(action, dtype=self.dtype).unsqueeze(0)
            self.env_steps += 1

            if self.env_steps % cfg.train_every == 0 and self._sampleable(buffer_a):
                metrics, starts = self.train_step(buffer_a, buffer_b)
                if starts is not None:
                    metrics.update(self.policy_step(starts))
                if eval_b is not None and cfg.eval_every > 0 \
                        and self.train_steps % cfg.eval_every == 0:
                    metrics.update(self.eval_cycle(eval_b))
                metrics["env_step"] = self.env_steps
                self.logger.write(metrics)
                if self.train_steps % cfg.log_every == 0:
                    self._print_progress(metrics)

        if len(actions) == 0:
            self._last_episode = None
            return 0.0, 0
        episode = Episode(
            observations=np.stack(observations).astype(np.float32),
            actions=np.stack(actions).astype(np.float32),
            rewards=np.asarray(rewards, dtype=np.float32),
            dones=np.asarray(dones, dtype=bool),
            domain="A", seed=seed,
            init_state={"red": initial.red_pos.tolist(), "blue": initial.blue_pos.tolist()})
        buffer_a.add(episode)
        self._last_episode = episode
        return episode_return, len(actions)

    def _sampleable(self, buffer: ReplayBuffer) -> bool:
        return any(ep.length >= self.config.seq_length for ep in buffer.episodes)

    def _load_offline_split(self, path: Path) -> tuple[ReplayBuffer, ReplayBuffer | None]:
        full = load_buffer(path, capacity=self.config.buffer_capacity)
        n_hold = int(len(full.episodes) * self.config.holdout_fraction)
        if n_hold == 0:
            return full, None
        train = ReplayBuffer(self.config.buffer_capacity, domain=full.domain)
        hold = ReplayBuffer(self.config.buffer_capacity, domain=full.domain)
        for i, ep in enumerate(full.episodes):
            (hold if i >= len(full.episodes) - n_hold else train).add(ep)
        return train, hold

    # -- checkpointing -----------------------------------------------------------

    def save_checkpoint(self, path: Path) -> Path:
        arrays = {}
        arrays.update(module_arrays(self.model, "model"))
        arrays.update(module_arrays(self.discs, "discs"))
        arrays.update(module_arrays(self.actor, "actor"))
        arrays.update(module_arrays(self.critic, "critic"))
        opt_meta = {}
        for name, opt in self._optimizers().items():
            arrs, meta = optimizer_arrays(opt, name)
            arrays.update(arrs)
            opt_meta[name] = meta
        arrays["rng/torch"] = generator_state_array(self.gen)
        meta = {
            "train_steps": self.train_steps,
            "env_steps": self.env_steps,
            "config": self.config.as_dict(),
            "numpy_rng": self.rng.bit_generator.state,
            "optimizers": opt_meta,
            "episodes": self.collected_episodes,
            "offline_b": getattr(self, "_offline_b", None),
        }
        save_arrays(path, arrays, meta)
        return Path(path)

    def _optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"opt_model": self.opt_model, "opt_disc": self.opt_disc,
                "opt_actor": self.opt_actor, "opt_critic": self.opt_critic}

    @classmethod
    def resume(cls, path: Path, out_dir: Path | None = None) -> "Trainer":
        arrays, meta = load_arrays(path)
        config = TrainConfig.from_dict(meta["config"])
        trainer = cls(config, out_dir=out_dir)
        load_module(trainer.model, arrays, "model")
        load_module(trainer.discs, arrays, "discs")
        load_module(trainer.actor, arrays, "actor")
        load_module(trainer.critic, arrays, "critic")
        for name, opt in trainer._optimizers().items():
            load_optimizer(opt, arrays, meta["optimizers"][name], name)
        set_generator_state(trainer.gen, arrays["rng/torch"])
        trainer.rng.bit_generator.state = meta["numpy_rng"]
        trainer.train_steps = meta["train_steps"]
        trainer.env_steps = meta["env_steps"]
        trainer.collected_episodes = list(meta["episodes"])
        trainer._offline_b = meta.get("offline_b")
        return trainer


def load_model_for_eval(path: Path) -> tuple[WorldModel, Actor, Critic, TrainConfig]:
    """Inference-side loading of a checkpoint (file or run directory)."""
    path = Path(path)
    if path.is_dir():
        final = path / "checkpoint_final.ckpt"
        if final.exists():
            path = final
        else:
            candidates = sorted(path.glob("checkpoint_*.ckpt"))
            if not candidates:
                raise FileNotFoundError(f"no checkpoint under {path}")
            path = candidates[-1]
    arrays, meta = load_arrays(path)
    config = TrainConfig.from_dict(meta["config"])
    torch.manual_seed(config.seed)
    mcfg = config.model_config()
    dtype = config.torch_dtype()
    model = WorldModel(mcfg).to(dtype)
    actor = Actor(mcfg).to(dtype)
    critic = Critic(mcfg).to(dtype)
    load_module(model, arrays, "model")
    load_module(actor, arrays, "actor")
    load_module(critic, arrays, "critic")
    model.eval()
    return model, actor, critic, config
