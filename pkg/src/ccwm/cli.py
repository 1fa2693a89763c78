"""Command-line entry point: data generation, training, evaluation,
rollout rendering, the latent-size ablation, and metric plots.

Configuration precedence is defaults < config file < command-line flags;
the full effective configuration is frozen as JSON into every run
directory. Relative dataset paths resolve against $CCWM_DATA_DIR when set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    generate_aligned_dataset,
    generate_offline_dataset,
    load_aligned_dataset,
    load_buffer,
)
from .env import ArtificialEnv, random_action
from .evaluation import (
    ablate_latent_sizes,
    evaluate_model,
    evaluate_policy,
    open_loop_eval,
    save_rollout_grid,
)
from .training import TrainConfig, Trainer, load_model_for_eval, read_metrics

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

WEIGHT_KEYS = ("w_recon", "w_reg", "w_adv", "w_cyc", "w_reward")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def data_path(value: str) -> Path:
    path = Path(value)
    root = os.environ.get("CCWM_DATA_DIR")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def parse_config_file(path: Path) -> dict:
    """Flat `key = value` text, or a JSON object (the echoed run config)."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def build_train_config(args) -> TrainConfig:
    merged = dataclasses.asdict(TrainConfig())
    weights = merged.pop("weights")
    if args.config:
        file_cfg = parse_config_file(args.config)
        file_weights = file_cfg.pop("weights", None)
        if isinstance(file_weights, dict):
            weights.update(file_weights)
        for key in WEIGHT_KEYS:
            if key in file_cfg:
                weights[key] = file_cfg.pop(key)
        unknown = set(file_cfg) - set(merged)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in list(merged):
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    for key in WEIGHT_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            weights[key] = flag
    merged["weights"] = weights
    return TrainConfig.from_dict(merged)


def make_policy(name: str, env: ArtificialEnv):
    if name == "random":
        return lambda state, rng: random_action(rng)
    if name == "noisy-expert":
        return lambda state, rng: env.expert_action(state) + rng.normal(0.0, 0.3, size=2)
    if name == "mixed":
        def mixed(state, rng):
            if rng.uniform() < 0.5:
                return random_action(rng)
            return env.expert_action(state) + rng.normal(0.0, 0.3, size=2)
        return mixed
    raise UsageError(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    out = data_path(args.out)
    if args.aligned:
        manifest = generate_aligned_dataset(args.episodes, args.min_length, out,
                                            seed=args.seed, policy="random")
    else:
        env = ArtificialEnv(args.modality)
        manifest = generate_offline_dataset(env, make_policy(args.policy, env),
                                            n_observations=args.frames,
                                            with_rewards=args.rewards,
                                            modality=args.modality, out_dir=out,
                                            seed=args.seed)
    print(f"wrote {manifest.frames} frames in {len(manifest.episodes)} episodes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    if args.resume:
        trainer = Trainer.resume(args.resume, out_dir=out_dir)
    else:
        trainer = Trainer(build_train_config(args), out_dir=out_dir)
    if args.offline_a:
        buffer_a = load_buffer(data_path(args.offline_a))
        buffer_b, eval_b = (None, None)
        if trainer.config.method == "ccwm":
            if not args.offline_b:
                raise UsageError("--offline-b is required for method ccwm")
            buffer_b, eval_b = trainer._load_offline_split(data_path(args.offline_b))
        if args.steps is None:
            raise UsageError("--steps is required with --offline-a")
        trainer.fit_offline(buffer_a, buffer_b, args.steps,
                            train_policy=args.train_policy, eval_buffer=eval_b)
        ckpt = trainer.save_checkpoint(out_dir / "checkpoint_final.ckpt")
    else:
        offline_b = data_path(args.offline_b) if args.offline_b else None
        if offline_b is None and getattr(trainer, "_offline_b", None):
            offline_b = Path(trainer._offline_b)
        ckpt = trainer.train_online(ArtificialEnv("A"), offline_b)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, actor, _, config = load_model_for_eval(args.checkpoint)
    episodes = load_aligned_dataset(data_path(args.aligned))
    if args.episodes:
        episodes = episodes[:args.episodes]
    report = evaluate_model(model, episodes, context=args.context, horizon=args.horizon,
                            seed=args.seed, config=config.as_dict())
    payload = report.as_dict()
    if args.policy_episodes:
        policy = {}
        for modality in ("A", "B"):
            mean, stderr, _ = evaluate_policy(ArtificialEnv(modality), model, actor,
                                              args.policy_episodes, modality, seed=args.seed)
            policy[modality] = {"mean_return": mean, "stderr": stderr}
        payload["policy"] = policy
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=1))
    print(json.dumps({k: payload[k] for k in ("reward_rse", "reward_rse_cross", "psnr")}))
    return EXIT_OK


def cmd_rollout(args) -> int:
    model, _, _, _ = load_model_for_eval(args.checkpoint)
    episodes = load_aligned_dataset(data_path(args.aligned))
    if args.index >= len(episodes):
        raise UsageError(f"--index {args.index} out of range ({len(episodes)} episodes)")
    import torch
    g = torch.Generator()
    g.manual_seed(args.seed)
    frames, row = open_loop_eval(model, episodes[args.index], args.source,
                                 context=args.context, horizon=args.horizon, generator=g)
    save_rollout_grid(frames, Path(args.out))
    print(f"grid written to {args.out} (psnr_a={row['psnr_a']:.2f} psnr_b={row['psnr_b']:.2f})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = build_train_config(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    buffer_a = load_buffer(data_path(args.offline_a))
    buffer_b = load_buffer(data_path(args.offline_b)) if args.offline_b else None
    episodes = load_aligned_dataset(data_path(args.aligned))
    out_dir = Path(args.out)
    rows = ablate_latent_sizes(sizes, config, buffer_a, buffer_b, args.steps, episodes,
                               context=args.eval_context, horizon=args.eval_horizon,
                               out_csv=out_dir / "ablation.csv")
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=1))
    for row in rows:
        print(row)
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = read_metrics(args.metrics)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    loss_keys = ("l_recon_a", "l_recon_b", "l_reg_a", "l_reg_b", "l_adv_a", "l_adv_b",
                 "l_cyc_a", "l_cyc_b", "l_rew", "l_dis")
    train_rows = [r for r in records if "l_recon_a" in r]
    if train_rows:
        fig, ax = plt.subplots(figsize=(10, 6))
        steps = [r["step"] for r in train_rows]
        for key in loss_keys:
            values = [r.get(key, 0.0) for r in train_rows]
            if any(v != 0.0 for v in values):
                ax.plot(steps, values, label=key, linewidth=0.8)
        ax.set_xlabel("train step")
        ax.set_yscale("symlog")
        ax.legend(ncol=2, fontsize=8)
        fig.savefig(out_dir / "loss_curves.png", dpi=120)
        plt.close(fig)

    returns = [(r["env_step"], r["episode_return"]) for r in records if "episode_return" in r]
    if returns:
        fig, ax = plt.subplots(figsize=(8, 5))
        xs, ys = zip(*returns)
        ax.plot(xs, ys, alpha=0.3, label="episode return")
        if len(ys) >= 10:
            k = max(1, len(ys) // 20)
            smooth = np.convolve(ys, np.ones(k) / k, mode="valid")
            ax.plot(xs[k - 1:], smooth, label=f"smoothed (k={k})")
        ax.set_xlabel("env step")
        ax.set_ylabel("return")
        ax.legend()
        fig.savefig(out_dir / "returns.png", dpi=120)
        plt.close(fig)
    print(f"plots written to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_config_flags(p: Parser) -> None:
    p.add_argument("--config", type=Path, help="key = value file or echoed config.json")
    for name, kind in (("method", str), ("seq-length", int), ("batch-size", int),
                       ("model-lr", float), ("dis-lr", float), ("actor-lr", float),
                       ("critic-lr", float), ("total-env-steps", int), ("train-every", int),
                       ("explore-noise", float), ("horizon", int), ("gamma", float),
                       ("lam", float), ("free-bits", float), ("kl-clip", float),
                       ("grad-clip", float), ("latent-hw", int), ("deter-channels", int),
                       ("stoch-channels", int), ("feat-channels", int), ("base-channels", int),
                       ("disc-channels", int), ("head-channels", int), ("buffer-capacity", int),
                       ("seed", int), ("precision", str), ("checkpoint-every", int),
                       ("log-every", int), ("eval-every", int)):
        p.add_argument(f"--{name}", type=kind, default=None)
    for key in WEIGHT_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", type=float, default=None)


def build_parser() -> Parser:
    parser = Parser(prog="ccwm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="record offline or aligned datasets")
    p.add_argument("--modality", choices=("A", "B"), default="B")
    p.add_argument("--frames", type=int, default=5000)
    rewards = p.add_mutually_exclusive_group()
    rewards.add_argument("--rewards", dest="rewards", action="store_true")
    rewards.add_argument("--no-rewards", dest="rewards", action="store_false")
    p.set_defaults(rewards=True)
    p.add_argument("--policy", default="mixed", choices=("random", "noisy-expert", "mixed"))
    p.add_argument("--aligned", action="store_true", help="write an aligned two-modality eval set")
    p.add_argument("--episodes", type=int, default=20, help="aligned mode: episode count")
    p.add_argument("--min-length", type=int, default=36, help="aligned mode: minimum episode length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train online (env A + offline B) or fully offline")
    p.add_argument("--out", required=True)
    p.add_argument("--offline-b", default=None, help="reward-free domain-B dataset")
    p.add_argument("--offline-a", default=None, help="train offline from this domain-A dataset")
    p.add_argument("--steps", type=int, default=None, help="offline mode: training steps")
    p.add_argument("--train-policy", action="store_true", help="offline mode: also train the policy")
    p.add_argument("--env-steps", dest="total_env_steps_alias", type=int, default=None,
                   help="alias for --total-env-steps")
    p.add_argument("--resume", type=Path, default=None, help="continue from a checkpoint")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="open-loop metrics on an aligned dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--aligned", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--context", type=int, default=20)
    p.add_argument("--horizon", type=int, default=15)
    p.add_argument("--policy-episodes", type=int, default=0,
                   help="also evaluate the policy for this many episodes per modality")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rollout", help="render an open-loop prediction grid")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--aligned", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--source", choices=("A", "B"), default="B")
    p.add_argument("--context", type=int, default=20)
    p.add_argument("--horizon", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("ablate", help="latent-size ablation under equal budgets")
    p.add_argument("--sizes", default="1,2,4,8")
    p.add_argument("--offline-a", required=True)
    p.add_argument("--offline-b", default=None)
    p.add_argument("--aligned", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--eval-context", type=int, default=20)
    p.add_argument("--eval-horizon", type=int, default=15)
    p.add_argument("--out", required=True)
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="loss and return curves from metrics JSON-lines")
    p.add_argument("--metrics", type=Path, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "total_env_steps_alias", None) is not None:
            args.total_env_steps = args.total_env_steps_alias
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
