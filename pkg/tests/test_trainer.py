import numpy as np
import pytest
import torch

import ccwm.training as training
from ccwm.data import Episode, ReplayBuffer
from ccwm.losses import LossWeights
from ccwm.training import TrainConfig, Trainer


def tiny_config(**overrides):
    cfg = dict(seq_length=4, batch_size=2, latent_hw=8, deter_channels=8,
               stoch_channels=4, feat_channels=8, base_channels=8, disc_channels=8,
               head_channels=8, horizon=3, seed=1, log_every=10_000, eval_every=0)
    cfg.update(overrides)
    return TrainConfig(**cfg)


def synthetic_buffer(domain, n_episodes=2, n_obs=8, seed=0, rewards=True):
    buf = ReplayBuffer(domain=domain)
    rng = np.random.default_rng(seed)
    for i in range(n_episodes):
        buf.add(Episode(
            observations=rng.uniform(size=(n_obs, 3, 64, 64)).astype(np.float32),
            actions=rng.uniform(-0.2, 0.2, size=(n_obs - 1, 2)).astype(np.float32),
            rewards=rng.uniform(-2, 0, size=n_obs - 1).astype(np.float32) if rewards else None,
            dones=np.array([False] * (n_obs - 2) + [True]),
            domain=domain, seed=seed * 100 + i))
    return buf


def state_hash(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def assert_equal_state(module, snap, equal=True):
    same = all(torch.equal(v, snap[k]) for k, v in module.state_dict().items())
    assert same == equal


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="unknown")
    with pytest.raises(ValueError):
        TrainConfig(seq_length=1)
    with pytest.raises(ValueError):
        TrainConfig(model_lr=-1)
    cfg = TrainConfig(method="single")
    assert cfg.weights.w_adv == 0.0 and cfg.weights.w_cyc == 0.0


def test_config_roundtrip():
    cfg = tiny_config(weights=LossWeights(w_adv=0.2))
    again = TrainConfig.from_dict(cfg.as_dict())
    assert again == cfg


def test_theta_update_leaves_phi_untouched_and_vice_versa():
    trainer = Trainer(tiny_config())
    buf_a = synthetic_buffer("A")
    buf_b = synthetic_buffer("B", seed=5, rewards=False)
    batch_a = trainer._seq_batch(buf_a.sample_sequences(2, 4, trainer.rng))
    batch_b = trainer._seq_batch(buf_b.sample_sequences(2, 4, trainer.rng))

    disc_snap = state_hash(trainer.discs)
    model_snap = state_hash(trainer.model)
    metrics = {}
    starts = trainer._generator_phase(batch_a, batch_b, metrics)
    assert starts is not None
    assert_equal_state(trainer.discs, disc_snap, equal=True)    # phi untouched by theta phase
    assert_equal_state(trainer.model, model_snap, equal=False)  # theta did move

    model_snap2 = state_hash(trainer.model)
    ok = trainer._discriminator_phase(batch_a, batch_b, metrics)
    assert ok
    assert_equal_state(trainer.model, model_snap2, equal=True)  # theta untouched by phi phase
    assert_equal_state(trainer.discs, disc_snap, equal=False)   # phi did move


def test_train_step_metric_keys_and_counter():
    trainer = Trainer(tiny_config())
    buf_a = synthetic_buffer("A")
    buf_b = synthetic_buffer("B", seed=5, rewards=False)
    metrics, starts = trainer.train_step(buf_a, buf_b)
    for key in ("step", "l_recon_a", "l_recon_b", "l_reg_a", "l_reg_b", "l_adv_a",
                "l_adv_b", "l_cyc_a", "l_cyc_b", "l_rew", "l_dis"):
        assert key in metrics
    assert trainer.train_steps == 1
    assert starts is not None and starts.deter.shape[0] == 2 * 2 * 4  # both domains, B*T


def test_identical_seeds_give_identical_metric_streams():
    streams = []
    for _ in range(2):
        trainer = Trainer(tiny_config())
        buf_a = synthetic_buffer("A")
        buf_b = synthetic_buffer("B", seed=5, rewards=False)
        stream = []
        for _ in range(3):
            metrics, starts = trainer.train_step(buf_a, buf_b)
            metrics.update(trainer.policy_step(starts))
            stream.append(metrics)
        streams.append(stream)
    for m1, m2 in zip(*streams):
        assert m1 == m2


def test_non_finite_loss_rolls_back_parameters(monkeypatch):
    trainer = Trainer(tiny_config())
    buf_a = synthetic_buffer("A")
    buf_b = synthetic_buffer("B", seed=5, rewards=False)
    model_snap = state_hash(trainer.model)
    disc_snap = state_hash(trainer.discs)

    def poisoned(*args, **kwargs):
        return torch.tensor(float("inf")), {"loss": float("inf")}, {}

    monkeypatch.setattr(training, "generator_objective", poisoned)
    metrics, starts = trainer.train_step(buf_a, buf_b)
    assert metrics["aborted"] == 1.0
    assert starts is None
    assert_equal_state(trainer.model, model_snap, equal=True)
    assert_equal_state(trainer.discs, disc_snap, equal=True)
    assert trainer.train_steps == 1


def test_gradient_norms_clipped():
    trainer = Trainer(tiny_config(method="single", grad_clip=1e-3))
    buf_a = synthetic_buffer("A")
    metrics, _ = trainer.train_step(buf_a, None)
    post = torch.sqrt(sum((p.grad ** 2).sum() for p in trainer.model.parameters()
                          if p.grad is not None))
    assert float(post) <= 1e-3 * 1.001
    trainer2 = Trainer(tiny_config(dis_grad_clip=1e-3))
    buf_b = synthetic_buffer("B", seed=5, rewards=False)
    trainer2.train_step(buf_a, buf_b)
    post_disc = torch.sqrt(sum((p.grad ** 2).sum() for p in trainer2.discs.parameters()
                               if p.grad is not None))
    assert float(post_disc) <= 1e-3 * 1.001


def test_single_method_needs_no_b_buffer_and_skips_disc():
    trainer = Trainer(tiny_config(method="single"))
    buf_a = synthetic_buffer("A")
    disc_snap = state_hash(trainer.discs)
    metrics, starts = trainer.train_step(buf_a, None)
    assert metrics["l_dis"] == 0.0 and metrics["l_adv_a"] == 0.0
    assert_equal_state(trainer.discs, disc_snap, equal=True)
    assert starts is not None


def test_ccwm_requires_b_buffer():
    trainer = Trainer(tiny_config())
    with pytest.raises(ValueError, match="domain-B"):
        trainer.train_step(synthetic_buffer("A"), None)


def test_checkpoint_resume_bit_identical_for_ten_steps(tmp_path):
    cfg = tiny_config(precision="float64")
    buffers = lambda: (synthetic_buffer("A"), synthetic_buffer("B", seed=5, rewards=False))

    trainer = Trainer(cfg)
    buf_a, buf_b = buffers()
    for _ in range(3):
        _, starts = trainer.train_step(buf_a, buf_b)
        trainer.policy_step(starts)
    ckpt = trainer.save_checkpoint(tmp_path / "mid.ckpt")

    continued = []
    for _ in range(10):
        m, starts = trainer.train_step(buf_a, buf_b)
        m.update(trainer.policy_step(starts))
        continued.append(m)

    resumed_trainer = Trainer.resume(ckpt)
    buf_a2, buf_b2 = buffers()
    resumed = []
    for _ in range(10):
        m, starts = resumed_trainer.train_step(buf_a2, buf_b2)
        m.update(resumed_trainer.policy_step(starts))
        resumed.append(m)

    for m1, m2 in zip(continued, resumed):
        assert m1 == m2  # exact float equality: bit-identical continuation
    for (k1, v1), (k2, v2) in zip(trainer.model.state_dict().items(),
                                  resumed_trainer.model.state_dict().items()):
        assert k1 == k2 and torch.equal(v1, v2)
    for (k1, v1), (k2, v2) in zip(trainer.critic.state_dict().items(),
                                  resumed_trainer.critic.state_dict().items()):
        assert k1 == k2 and torch.equal(v1, v2)


def test_online_smoke_run_writes_artifacts(tmp_path):
    from ccwm.data import generate_offline_dataset
    from ccwm.env import ArtificialEnv, random_action

    offline = generate_offline_dataset(
        ArtificialEnv("B"), lambda s, rng: random_action(rng), n_observations=60,
        with_rewards=False, modality="B", out_dir=tmp_path / "b", seed=0)
    cfg = tiny_config(total_env_steps=30, train_every=5, checkpoint_every=20,
                      buffer_capacity=1000, holdout_fraction=0.0)
    trainer = Trainer(cfg, out_dir=tmp_path / "run")
    env = ArtificialEnv("A")
    final = trainer.train_online(env, tmp_path / "b")
    assert final.exists()
    assert (tmp_path / "run" / "config.json").exists()
    assert (tmp_path / "run" / "metrics.jsonl").exists()
    assert trainer.env_steps == 30
    assert len(trainer.collected_episodes) >= 0
    lines = training.read_metrics(tmp_path / "run" / "metrics.jsonl")
    assert any("episode_return" in line for line in lines)


def test_online_requires_offline_b(tmp_path):
    from ccwm.env import ArtificialEnv

    cfg = tiny_config(total_env_steps=10)
    trainer = Trainer(cfg, out_dir=tmp_path / "run")
    with pytest.raises(ValueError, match="offline"):
        trainer.train_online(ArtificialEnv("A"), None)


def test_online_zero_steps_returns_initial_checkpoint(tmp_path):
    from ccwm.data import generate_offline_dataset
    from ccwm.env import ArtificialEnv, random_action

    generate_offline_dataset(ArtificialEnv("B"), lambda s, rng: random_action(rng),
                             n_observations=30, with_rewards=False, modality="B",
                             out_dir=tmp_path / "b", seed=0)
    cfg = tiny_config(total_env_steps=0, holdout_fraction=0.0)
    trainer = Trainer(cfg, out_dir=tmp_path / "run")
    final = trainer.train_online(ArtificialEnv("A"), tmp_path / "b")
    assert final.exists()
    assert trainer.train_steps == 0
