"""Shared fixtures for the training-gated test modules.

The expensive fixtures (datasets, one trained model) are session-scoped so
the opt-in training tests share a single fit.
"""

import os

import pytest

from ccwm.training import TrainConfig, Trainer

TRAIN_ACCEPT = bool(os.environ.get("CCWM_TRAIN_ACCEPT") or os.environ.get("CCWM_FULL_ACCEPT"))
FULL_ACCEPT = bool(os.environ.get("CCWM_FULL_ACCEPT"))
ACCEPT_STEPS = int(os.environ.get("CCWM_ACCEPT_STEPS", "2000"))

needs_training = pytest.mark.skipif(
    not TRAIN_ACCEPT, reason="training test; set CCWM_TRAIN_ACCEPT=1 to run")
needs_full = pytest.mark.skipif(
    not FULL_ACCEPT, reason="full 30k-step run; set CCWM_FULL_ACCEPT=1 to run")

# CPU-budget network width for training tests; protocol numbers (env steps,
# dataset sizes, thresholds, orderings) stay at their stated values.
ACCEPT_SCALE = dict(seq_length=10, batch_size=8, base_channels=16, feat_channels=32,
                    deter_channels=16, stoch_channels=8, disc_channels=32,
                    head_channels=16, horizon=10, log_every=200, eval_every=100)


def accept_config(**overrides) -> TrainConfig:
    merged = dict(ACCEPT_SCALE)
    merged.update(overrides)
    return TrainConfig(**merged)


@pytest.fixture(scope="session")
def accept_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def offline_datasets(accept_dir):
    """Offline domain-A (rewards) and domain-B (reward-free, 5000 frames)
    datasets plus an aligned held-out evaluation set."""
    from ccwm.cli import main

    a, b, ev = accept_dir / "a", accept_dir / "b", accept_dir / "eval"
    assert main(["generate-data", "--modality", "A", "--frames", "3000", "--rewards",
                 "--out", str(a), "--policy", "mixed", "--seed", "0"]) == 0
    assert main(["generate-data", "--modality", "B", "--frames", "5000", "--no-rewards",
                 "--out", str(b), "--policy", "mixed", "--seed", "100"]) == 0
    assert main(["generate-data", "--aligned", "--episodes", "6", "--min-length", "36",
                 "--out", str(ev), "--seed", "200"]) == 0
    return a, b, ev


@pytest.fixture(scope="session")
def trained_ccwm(offline_datasets, accept_dir):
    """One CCWM world model fit offline; shared by the training tests."""
    from ccwm.data import load_buffer

    a, b, _ = offline_datasets
    trainer = Trainer(accept_config(method="ccwm", seed=1), out_dir=accept_dir / "ccwm")
    buf_a = load_buffer(a)
    buf_b, eval_b = trainer._load_offline_split(b)
    trainer.fit_offline(buf_a, buf_b, ACCEPT_STEPS, eval_buffer=eval_b)
    trainer.save_checkpoint(accept_dir / "ccwm" / "checkpoint_final.ckpt")
    return trainer
