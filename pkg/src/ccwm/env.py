"""ArtificialV0: two dots in a box, observed as images in two modalities.

Modality A renders a red and a blue dot on a white background, modality B
is the channel-inverse of A. The agent moves the red dot; reward is the
negative Euclidean distance to the (static) blue dot and an episode ends
once that distance drops below 0.1 or the step cap is hit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import DOMAINS

ACTION_MAX = 0.2
TERMINATION_DISTANCE = 0.1
MIN_START_DISTANCE = 0.3
EPISODE_CAP = 100
IMAGE_SIZE = 64
DOT_RADIUS = 0.08  # state units; box [-1,1] spans IMAGE_SIZE pixels


@dataclass(frozen=True)
class EnvState:
    red_pos: np.ndarray   # (2,) in [-1,1]^2
    blue_pos: np.ndarray  # (2,) in [-1,1]^2
    step_count: int = 0

    def distance(self) -> float:
        return float(np.linalg.norm(self.red_pos - self.blue_pos))


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray  # (3, H, W) float32 in [0,1]
    reward: float
    done: bool
    state: EnvState


def _pixel_centers(image_size: int) -> np.ndarray:
    # pixel i covers [i, i+1) on a [0, image_size) grid mapped onto [-1, 1)
    return (np.arange(image_size) + 0.5) / image_size * 2.0 - 1.0


class ArtificialEnv:
    """One modality of the dot-chasing environment.

    `step` is a pure function of (state, action); the instance only carries
    rendering parameters and the modality used for observations.
    """

    def __init__(self, modality: str = "A", episode_cap: int = EPISODE_CAP,
                 image_size: int = IMAGE_SIZE, dot_radius: float = DOT_RADIUS):
        if modality not in DOMAINS:
            raise ValueError(f"unknown modality {modality!r}, expected one of {DOMAINS}")
        self.modality = modality
        self.episode_cap = episode_cap
        self.image_size = image_size
        self.dot_radius = dot_radius
        self.action_dim = 2

    def reset(self, seed: int, modality: str | None = None) -> tuple[EnvState, np.ndarray]:
        """Sample a start state; positions re-drawn until they are >= 0.3 apart."""
        rng = np.random.default_rng(seed)
        while True:
            red = rng.uniform(-1.0, 1.0, size=2)
            blue = rng.uniform(-1.0, 1.0, size=2)
            if np.linalg.norm(red - blue) >= MIN_START_DISTANCE:
                break
        state = EnvState(red_pos=red, blue_pos=blue, step_count=0)
        return state, self.render(state, modality or self.modality)

    def step(self, state: EnvState, action: np.ndarray) -> StepResult:
        action = np.asarray(action, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(action)):
            raise ValueError(f"non-finite action components: {action}")
        delta = np.clip(action, -ACTION_MAX, ACTION_MAX)
        red = np.clip(state.red_pos + delta, -1.0, 1.0)
        new_state = EnvState(red_pos=red, blue_pos=state.blue_pos.copy(),
                             step_count=state.step_count + 1)
        dist = new_state.distance()
        done = dist < TERMINATION_DISTANCE or new_state.step_count >= self.episode_cap
        return StepResult(observation=self.render(new_state, self.modality),
                          reward=-dist, done=done, state=new_state)

    def render(self, state: EnvState, modality: str | None = None) -> np.ndarray:
        """Rasterize the state as a (3, H, W) float32 image in [0,1]."""
        modality = modality or self.modality
        if modality not in DOMAINS:
            raise ValueError(f"unknown modality {modality!r}")
        n = self.image_size
        centers = _pixel_centers(n)
        xs = centers[None, :]  # columns -> x
        ys = centers[:, None]  # rows -> y
        img = np.ones((3, n, n), dtype=np.float32)
        r2 = self.dot_radius ** 2
        for pos, color in ((state.red_pos, (1.0, 0.0, 0.0)),
                           (state.blue_pos, (0.0, 0.0, 1.0))):
            mask = (xs - pos[0]) ** 2 + (ys - pos[1]) ** 2 <= r2
            for c in range(3):
                img[c][mask] = color[c]
        if modality == "B":
            img = 1.0 - img
        return img

    def expert_action(self, state: EnvState) -> np.ndarray:
        """Step of length <= 0.2 straight along the line toward the blue dot."""
        delta = state.blue_pos - state.red_pos
        norm = float(np.linalg.norm(delta))
        if norm > ACTION_MAX:
            delta = delta * (ACTION_MAX / norm)
        return delta.astype(np.float64)


def random_action(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-ACTION_MAX, ACTION_MAX, size=2)


def run_episode(env: ArtificialEnv, policy, seed: int):
    """Roll one episode with `policy(state, rng) -> action`.

    Returns (observations, actions, rewards, dones, initial_state) with
    len(observations) == len(actions) + 1.
    """
    rng = np.random.default_rng(seed)
    state, obs = env.reset(seed)
    initial = state
    observations = [obs]
    actions, rewards, dones = [], [], []
    done = False
    while not done:
        action = policy(state, rng)
        result = env.step(state, action)
        actions.append(np.clip(np.asarray(action, dtype=np.float64),
                               -ACTION_MAX, ACTION_MAX))
        rewards.append(result.reward)
        dones.append(result.done)
        observations.append(result.observation)
        state = result.state
        done = result.done
    return observations, actions, rewards, dones, initial
