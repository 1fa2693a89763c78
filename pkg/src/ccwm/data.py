"""Episode recording, on-disk persistence and sequence replay buffers.

Episodes are stored one directory each: raw little-endian float32 arrays
plus a JSON sidecar with shapes, so the format stays readable from any
language. The alignment convention is fixed as "action[t] caused
observation[t+1]": an episode with N observations carries N-1 actions,
rewards and done flags.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import DOMAINS
from .env import ArtificialEnv, random_action, run_episode

EPISODE_META = "episode.json"
MANIFEST = "manifest.json"
DEFAULT_CAPACITY = 100_000


@dataclass
class Episode:
    observations: np.ndarray        # (N, 3, H, W) float32 in [0,1]
    actions: np.ndarray             # (N-1, 2) float32
    rewards: np.ndarray | None      # (N-1,) float32, None for reward-free data
    dones: np.ndarray               # (N-1,) bool
    domain: str
    seed: int | None = None
    init_state: dict | None = None  # {"red": [...], "blue": [...]} for re-simulation

    def __post_init__(self):
        n = len(self.observations)
        if len(self.actions) != n - 1:
            raise ValueError(f"expected {n - 1} actions for {n} observations, got {len(self.actions)}")
        if self.rewards is not None and len(self.rewards) != n - 1:
            raise ValueError("rewards length must match actions")
        if len(self.dones) != n - 1:
            raise ValueError("dones length must match actions")

    @property
    def length(self) -> int:
        """Number of observations."""
        return len(self.observations)

    @property
    def steps(self) -> int:
        return len(self.actions)


@dataclass
class Batch:
    """Contiguous subsequences; actions[i] is the action that preceded obs[i]."""
    observations: np.ndarray        # (B, L, 3, H, W) float32
    actions: np.ndarray             # (B, L, 2) float32, zeros before episode start
    rewards: np.ndarray | None      # (B, L) float32, reward received on arriving at obs[i]
    reward_mask: np.ndarray | None  # (B, L) float32, 0 where no reward is defined
    domain: str
    episode_indices: np.ndarray     # (B,)
    offsets: np.ndarray             # (B,)

    @property
    def batch_size(self) -> int:
        return self.observations.shape[0]

    @property
    def seq_length(self) -> int:
        return self.observations.shape[1]


def _write_raw(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_raw(path: Path, shape) -> np.ndarray:
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(shape)
    return arr.copy()


def save_episode(episode: Episode, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {
        "observations": episode.observations,
        "actions": episode.actions,
        "dones": episode.dones.astype(np.float32),
    }
    if episode.rewards is not None:
        arrays["rewards"] = episode.rewards
    meta = {
        "format": "ccwm-episode",
        "version": 1,
        "domain": episode.domain,
        "seed": episode.seed,
        "frames": episode.length,
        "dtype": "<f4",
        "reward_present": episode.rewards is not None,
        "init_state": episode.init_state,
        "arrays": {},
    }
    for name, arr in arrays.items():
        fname = f"{name}.f32"
        try:
            _write_raw(directory / fname, arr)
        except OSError as exc:
            raise OSError(f"failed writing {directory / fname}: {exc}") from exc
        meta["arrays"][name] = {"file": fname, "shape": list(np.shape(arr))}
    (directory / EPISODE_META).write_text(json.dumps(meta, indent=1))


def load_episode(directory: Path) -> Episode:
    directory = Path(directory)
    meta = json.loads((directory / EPISODE_META).read_text())
    arrays = {}
    for name, info in meta["arrays"].items():
        arrays[name] = _read_raw(directory / info["file"], tuple(info["shape"]))
    return Episode(
        observations=arrays["observations"],
        actions=arrays["actions"],
        rewards=arrays.get("rewards"),
        dones=arrays["dones"].astype(bool),
        domain=meta["domain"],
        seed=meta["seed"],
        init_state=meta.get("init_state"),
    )


class ReplayBuffer:
    """FIFO episode store; sampling never crosses episode boundaries."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, domain: str | None = None):
        self.capacity = capacity
        self.domain = domain
        self.episodes: list[Episode] = []
        self._steps = 0

    @property
    def num_steps(self) -> int:
        return self._steps

    @property
    def num_episodes(self) -> int:
        return len(self.episodes)

    def add(self, episode: Episode) -> None:
        if self.domain is None:
            self.domain = episode.domain
        self.episodes.append(episode)
        self._steps += episode.steps
        while self._steps > self.capacity and len(self.episodes) > 1:
            evicted = self.episodes.pop(0)
            self._steps -= evicted.steps

    def sample_sequences(self, batch: int, length: int, rng: np.random.Generator) -> Batch:
        valid = [(i, ep.length - length + 1) for i, ep in enumerate(self.episodes)
                 if ep.length >= length]
        if not valid:
            longest = max((ep.length for ep in self.episodes), default=0)
            raise ValueError(
                f"no episode with >= {length} observations in buffer "
                f"({self.num_episodes} episodes, longest has {longest})")
        counts = np.array([n for _, n in valid])
        cum = np.cumsum(counts)
        flat = rng.integers(0, cum[-1], size=batch)
        obs, acts, rews, masks, ep_idx, offs = [], [], [], [], [], []
        reward_present = all(self.episodes[i].rewards is not None for i, _ in valid)
        for f in flat:
            k = int(np.searchsorted(cum, f, side="right"))
            ep_i = valid[k][0]
            offset = int(f - (cum[k - 1] if k > 0 else 0))
            ep = self.episodes[ep_i]
            obs.append(ep.observations[offset:offset + length])
            a = np.zeros((length, 2), dtype=np.float32)
            r = np.zeros(length, dtype=np.float32)
            m = np.zeros(length, dtype=np.float32)
            for i in range(length):
                j = offset + i - 1
                if j >= 0:
                    a[i] = ep.actions[j]
                    if ep.rewards is not None:
                        r[i] = ep.rewards[j]
                        m[i] = 1.0
            acts.append(a)
            rews.append(r)
            masks.append(m)
            ep_idx.append(ep_i)
            offs.append(offset)
        return Batch(
            observations=np.stack(obs),
            actions=np.stack(acts),
            rewards=np.stack(rews) if reward_present else None,
            reward_mask=np.stack(masks) if reward_present else None,
            domain=self.domain or "A",
            episode_indices=np.asarray(ep_idx),
            offsets=np.asarray(offs),
        )


@dataclass
class DatasetManifest:
    path: Path
    frames: int
    domain: str
    reward_present: bool
    seed: int
    shape: list[int]
    episodes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"frames": self.frames, "domain": self.domain,
                "reward_present": self.reward_present, "seed": self.seed,
                "shape": self.shape, "episodes": self.episodes}


def write_manifest(manifest: DatasetManifest) -> None:
    (Path(manifest.path) / MANIFEST).write_text(json.dumps(manifest.as_dict(), indent=1))


def read_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads((path / MANIFEST).read_text())
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest under {path}: {exc}") from exc
    return DatasetManifest(path=path, frames=raw["frames"], domain=raw["domain"],
                           reward_present=raw["reward_present"], seed=raw["seed"],
                           shape=raw["shape"], episodes=raw.get("episodes", []))


def generate_offline_dataset(env: ArtificialEnv, policy, n_observations: int,
                             with_rewards: bool, modality: str, out_dir: Path,
                             seed: int = 0) -> DatasetManifest:
    """Roll episodes until at least n_observations frames are on disk."""
    if n_observations <= 0:
        raise ValueError("n_observations must be positive")
    if modality not in DOMAINS:
        raise ValueError(f"unknown modality {modality!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = 0
    names: list[str] = []
    ep_seed = seed
    while frames < n_observations:
        episode = record_episode(env, policy, ep_seed, modality, with_rewards)
        name = f"ep_{len(names):05d}"
        save_episode(episode, out_dir / name)
        names.append(name)
        frames += episode.length
        ep_seed += 1
    manifest = DatasetManifest(path=out_dir, frames=frames, domain=modality,
                               reward_present=with_rewards, seed=seed,
                               shape=list(env.render(env.reset(0)[0]).shape),
                               episodes=names)
    write_manifest(manifest)
    return manifest


def record_episode(env: ArtificialEnv, policy, seed: int, modality: str,
                   with_rewards: bool = True) -> Episode:
    if env.modality != modality:
        env = ArtificialEnv(modality, episode_cap=env.episode_cap,
                            image_size=env.image_size, dot_radius=env.dot_radius)
    obs, actions, rewards, dones, initial = run_episode(env, policy, seed)
    return Episode(
        observations=np.stack(obs).astype(np.float32),
        actions=np.stack(actions).astype(np.float32),
        rewards=np.asarray(rewards, dtype=np.float32) if with_rewards else None,
        dones=np.asarray(dones, dtype=bool),
        domain=modality,
        seed=seed,
        init_state={"red": initial.red_pos.tolist(), "blue": initial.blue_pos.tolist()},
    )


def load_dataset(path: Path) -> tuple[list[Episode], DatasetManifest]:
    manifest = read_manifest(path)
    episodes = [load_episode(Path(path) / name) for name in manifest.episodes]
    return episodes, manifest


def load_buffer(path: Path, capacity: int = DEFAULT_CAPACITY) -> ReplayBuffer:
    episodes, manifest = load_dataset(path)
    buffer = ReplayBuffer(capacity=capacity, domain=manifest.domain)
    for ep in episodes:
        buffer.add(ep)
    return buffer


# ---------------------------------------------------------------------------
# Aligned two-modality episodes (evaluation only; alignment is free in the
# toy environment because both modalities render the same state trajectory).
# ---------------------------------------------------------------------------

@dataclass
class AlignedEpisode:
    observations_a: np.ndarray  # (N, 3, H, W)
    observations_b: np.ndarray  # (N, 3, H, W)
    actions: np.ndarray         # (N-1, 2)
    rewards: np.ndarray         # (N-1,)

    @property
    def length(self) -> int:
        return len(self.observations_a)


def generate_aligned_dataset(n_episodes: int, min_length: int, out_dir: Path,
                             seed: int = 0, policy: str = "random") -> DatasetManifest:
    """Render both modalities of the same trajectories, for held-out evaluation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    env = ArtificialEnv("A")
    names: list[str] = []
    frames = 0
    ep_seed = seed
    while len(names) < n_episodes:
        if policy == "random":
            pol = lambda state, rng: random_action(rng)
        elif policy == "noisy-expert":
            pol = lambda state, rng: env.expert_action(state) + rng.normal(0.0, 0.3, size=2)
        else:
            raise ValueError(f"unknown aligned-data policy {policy!r}")
        obs_a, actions, rewards, dones, initial = run_episode(env, pol, ep_seed)
        ep_seed += 1
        if len(obs_a) < min_length:
            continue
        state = initial
        obs_b = [env.render(state, "B")]
        for action in actions:
            state = env.step(state, action).state
            obs_b.append(env.render(state, "B"))
        name = f"ep_{len(names):05d}"
        directory = out_dir / name
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {
            "observations_a": np.stack(obs_a).astype(np.float32),
            "observations_b": np.stack(obs_b).astype(np.float32),
            "actions": np.stack(actions).astype(np.float32),
            "rewards": np.asarray(rewards, dtype=np.float32),
        }
        meta = {"format": "ccwm-aligned-episode", "version": 1, "seed": ep_seed - 1,
                "frames": len(obs_a), "dtype": "<f4", "arrays": {}}
        for a_name, arr in arrays.items():
            fname = f"{a_name}.f32"
            _write_raw(directory / fname, arr)
            meta["arrays"][a_name] = {"file": fname, "shape": list(arr.shape)}
        (directory / EPISODE_META).write_text(json.dumps(meta, indent=1))
        names.append(name)
        frames += len(obs_a)
    manifest = DatasetManifest(path=out_dir, frames=frames, domain="AB",
                               reward_present=True, seed=seed,
                               shape=[3, env.image_size, env.image_size], episodes=names)
    write_manifest(manifest)
    return manifest


def load_aligned_dataset(path: Path) -> list[AlignedEpisode]:
    manifest = read_manifest(path)
    episodes = []
    for name in manifest.episodes:
        directory = Path(path) / name
        meta = json.loads((directory / EPISODE_META).read_text())
        arrays = {n: _read_raw(directory / info["file"], tuple(info["shape"]))
                  for n, info in meta["arrays"].items()}
        episodes.append(AlignedEpisode(
            observations_a=arrays["observations_a"],
            observations_b=arrays["observations_b"],
            actions=arrays["actions"],
            rewards=arrays["rewards"],
        ))
    return episodes
