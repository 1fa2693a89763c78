"""Quantitative metrics (PSNR, reward RSE in and across modalities) and
qualitative open-loop prediction grids.

Evaluation is read-only over checkpoints: a model is warmed up on context
frames of one modality, rolled forward on prior dynamics with the recorded
actions, and decoded into both modalities against aligned ground truth.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import AlignedEpisode, ReplayBuffer
from .env import ArtificialEnv
from .model import LatentState, WorldModel
from .policy import Actor, act

PSNR_CAP_DB = 100.0


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred.astype(np.float64) - target.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def reward_rse(preds: np.ndarray, targets: np.ndarray) -> float:
    """Squared error relative to the constant mean predictor (1.0 = no better)."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {targets.shape}")
    denom = float(np.sum((targets.mean() - targets) ** 2))
    if denom < 1e-12:
        raise ValueError("reward RSE undefined: targets are constant")
    return float(np.sum((preds - targets) ** 2) / denom)


@dataclass
class EvalReport:
    reward_rse: float | None
    reward_rse_cross: float | None
    psnr: float
    psnr_breakdown: dict = field(default_factory=dict)
    per_sequence: list = field(default_factory=list)
    context: int = 20
    horizon: int = 15
    n_episodes: int = 0
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.as_dict(), indent=1))


def _obs_tensor(model: WorldModel, frames: np.ndarray) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(frames, dtype=dtype)


def open_loop_eval(model: WorldModel, episode: AlignedEpisode, source: str,
                   context: int = 20, horizon: int = 15,
                   generator: torch.Generator | None = None) -> tuple[dict, dict]:
    """Warm up on `context` source frames, roll the prior for `horizon` steps.

    Returns (frames, row): decoded frames for both modalities over
    context+horizon steps, and one evaluation-row dict with PSNR values and
    the reward predictions aligned to ground-truth rewards.
    """
    if episode.length < context + horizon:
        raise ValueError(f"episode too short: {episode.length} < {context + horizon}")
    obs_all = episode.observations_a if source == "A" else episode.observations_b
    total = context + horizon

    obs = _obs_tensor(model, obs_all[:context]).unsqueeze(0)
    actions = np.zeros((context, 2), dtype=np.float32)
    actions[1:] = episode.actions[:context - 1]
    actions_t = _obs_tensor(model, actions).unsqueeze(0)

    with torch.no_grad():
        rollout = model.rollout_posterior(obs, actions_t, source, generator)
        states = [rollout.state_at(t) for t in range(context)]
        state = rollout.last_state()
        for k in range(horizon):
            action = _obs_tensor(model, episode.actions[context - 1 + k]).unsqueeze(0)
            _, state = model.rssm.prior_step(state, action, generator)
            states.append(state)
        stacked = LatentState(deter=torch.cat([s.deter for s in states]),
                              stoch=torch.cat([s.stoch for s in states]))
        pred_a = model.decode(stacked, "A").cpu().numpy()
        pred_b = model.decode(stacked, "B").cpu().numpy()
        reward_preds = model.reward(stacked).cpu().numpy()

    frames = {
        "pred_a": pred_a, "pred_b": pred_b,
        "gt_a": episode.observations_a[:total], "gt_b": episode.observations_b[:total],
        "context": context, "source": source,
    }
    sl = slice(context, total) if horizon > 0 else slice(0, context)
    row = {
        "source": source,
        "psnr_a": psnr(pred_a[sl], episode.observations_a[sl]),
        "psnr_b": psnr(pred_b[sl], episode.observations_b[sl]),
        # reward arriving at frame t is rewards[t-1]; frame 0 has none
        "reward_preds": reward_preds[1:total].tolist(),
        "reward_targets": episode.rewards[:total - 1].tolist(),
    }
    return frames, row


def evaluate_model(model: WorldModel, episodes: list[AlignedEpisode],
                   context: int = 20, horizon: int = 15, seed: int = 0,
                   config: dict | None = None) -> EvalReport:
    """Aggregate open-loop metrics over a held-out aligned dataset.

    The in-modality reward RSE feeds the reward-bearing modality (A); the
    cross-modality RSE feeds modality B, which never carried rewards during
    training.
    """
    if not episodes:
        raise ValueError("no evaluation episodes")
    param_hash = _parameter_hash(model)
    rows = []
    preds = {"A": [], "B": []}
    targets = {"A": [], "B": []}
    psnr_acc: dict[str, list] = {}
    for i, ep in enumerate(episodes):
        for source in ("A", "B"):
            g = torch.Generator()
            g.manual_seed(seed + 1000 * i + (0 if source == "A" else 1))
            _, row = open_loop_eval(model, ep, source, context, horizon, g)
            rows.append(row)
            preds[source].extend(row["reward_preds"])
            targets[source].extend(row["reward_targets"])
            psnr_acc.setdefault(f"psnr_{source.lower()}_to_a", []).append(row["psnr_a"])
            psnr_acc.setdefault(f"psnr_{source.lower()}_to_b", []).append(row["psnr_b"])

    def safe_rse(p, t):
        try:
            return reward_rse(np.asarray(p), np.asarray(t))
        except ValueError:
            return None

    breakdown = {k: float(np.mean(v)) for k, v in psnr_acc.items()}
    per_sequence = []
    for row in rows:
        per_sequence.append({
            "source": row["source"], "psnr_a": row["psnr_a"], "psnr_b": row["psnr_b"],
            "reward_rse": safe_rse(row["reward_preds"], row["reward_targets"]),
        })
    report = EvalReport(
        reward_rse=safe_rse(preds["A"], targets["A"]),
        reward_rse_cross=safe_rse(preds["B"], targets["B"]),
        psnr=float(np.mean(list(breakdown.values()))),
        psnr_breakdown=breakdown,
        per_sequence=per_sequence,
        context=context, horizon=horizon, n_episodes=len(episodes),
        config=config or {},
    )
    if _parameter_hash(model) != param_hash:
        raise RuntimeError("evaluation mutated model parameters")
    return report


def _parameter_hash(model: torch.nn.Module) -> int:
    acc = 0
    for _, v in sorted(model.state_dict().items()):
        acc ^= hash(v.detach().cpu().numpy().tobytes())
    return acc


def translation_inversion_error(model: WorldModel, episodes: list[AlignedEpisode],
                                seq_length: int = 20, seed: int = 0) -> float:
    """Mean |translate(A->B) - (1 - reconstruct(A))| over evaluation episodes.

    In the toy pair modality B is exactly the channel inverse of A, so a
    faithful shared latent makes this gap vanish.
    """
    errors = []
    for i, ep in enumerate(episodes):
        t = min(seq_length, ep.length)
        obs = _obs_tensor(model, ep.observations_a[:t]).unsqueeze(0)
        actions = np.zeros((t, 2), dtype=np.float32)
        actions[1:] = ep.actions[:t - 1]
        g = torch.Generator()
        g.manual_seed(seed + i)
        with torch.no_grad():
            rollout = model.rollout_posterior(obs, _obs_tensor(model, actions).unsqueeze(0), "A", g)
            recon_a = model.decode_rollout(rollout, "A")
            trans_b = model.decode_rollout(rollout, "B")
        errors.append(float((trans_b - (1.0 - recon_a)).abs().mean()))
    return float(np.mean(errors))


def evaluate_policy(env: ArtificialEnv, model: WorldModel, actor: Actor,
                    n_episodes: int, modality: str, seed: int = 0,
                    ) -> tuple[float, float, list[float]]:
    """Mean episodic return with evaluation-mode (noise-free) actions."""
    returns = []
    dtype = next(model.parameters()).dtype
    for i in range(n_episodes):
        g = torch.Generator()
        g.manual_seed(seed + i)
        state, obs = env.reset(seed + i, modality)
        latent = model.initial_state(1)
        prev_action = model.rssm.initial_action(1, dtype=dtype)
        total = 0.0
        done = False
        while not done:
            action, latent = act(model, actor, obs, modality, latent, prev_action,
                                 explore=False, generator=g)
            result = env.step(state, action)
            total += result.reward
            obs, state, done = result.observation, result.state, result.done
            prev_action = torch.as_tensor(action, dtype=dtype).unsqueeze(0)
        returns.append(total)
    mean = float(np.mean(returns))
    stderr = float(np.std(returns) / np.sqrt(len(returns)))
    return mean, stderr, returns


def expert_policy_benchmark(n_episodes: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Average return of the scripted expert over fresh episodes."""
    env = ArtificialEnv("A")
    returns = []
    for i in range(n_episodes):
        state, _ = env.reset(seed + i)
        total = 0.0
        done = False
        while not done:
            result = env.step(state, env.expert_action(state))
            total += result.reward
            state, done = result.state, result.done
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns) / np.sqrt(len(returns)))


def random_policy_benchmark(n_episodes: int = 200, seed: int = 0) -> float:
    env = ArtificialEnv("A")
    rng = np.random.default_rng(seed)
    returns = []
    for i in range(n_episodes):
        state, _ = env.reset(seed + i)
        total = 0.0
        done = False
        while not done:
            result = env.step(state, rng.uniform(-0.2, 0.2, size=2))
            total += result.reward
            state, done = result.state, result.done
        returns.append(total)
    return float(np.mean(returns))


def ablate_latent_sizes(sizes: list[int], config, buffer_a: ReplayBuffer,
                        buffer_b: ReplayBuffer | None, steps: int,
                        episodes: list[AlignedEpisode], context: int = 20,
                        horizon: int = 15, out_csv: Path | None = None) -> list[dict]:
    """Train one model per latent spatial size under the same step budget."""
    from .training import Trainer

    rows = []
    for size in sizes:
        cfg = dataclasses.replace(config, latent_hw=size)
        trainer = Trainer(cfg)
        trainer.fit_offline(buffer_a, buffer_b, steps)
        report = evaluate_model(trainer.model, episodes, context, horizon, seed=cfg.seed)
        rows.append({"latent_hw": size,
                     "reward_rse": report.reward_rse,
                     "reward_rse_cross": report.reward_rse_cross,
                     "psnr": report.psnr})
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        header = "latent_hw,reward_rse,reward_rse_cross,psnr"
        lines = [header] + [
            f"{r['latent_hw']},{r['reward_rse']},{r['reward_rse_cross']},{r['psnr']}"
            for r in rows]
        out_csv.write_text("\n".join(lines) + "\n")
    return rows


# ---------------------------------------------------------------------------
# Qualitative grids
# ---------------------------------------------------------------------------

def _to_uint8(frame: np.ndarray) -> np.ndarray:
    return (np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_rollout_grid(frames: dict, path: Path, pad: int = 2) -> None:
    """PNG grid: ground truth (source), ground truth (other), prediction A,
    prediction B; context frames marked by a leading strip of columns."""
    source = frames["source"]
    gt_src = frames["gt_a"] if source == "A" else frames["gt_b"]
    gt_other = frames["gt_b"] if source == "A" else frames["gt_a"]
    rows = [gt_src, gt_other, frames["pred_a"], frames["pred_b"]]
    n = min(len(r) for r in rows)
    h, w = rows[0].shape[-2:]
    canvas = np.full((4 * h + 3 * pad, n * w + (n - 1) * pad, 3), 255, dtype=np.uint8)
    for r, row in enumerate(rows):
        for i in range(n):
            y = r * (h + pad)
            x = i * (w + pad)
            canvas[y:y + h, x:x + w] = _to_uint8(row[i])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path)
