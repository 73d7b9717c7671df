from dataclasses import fields

from .common import (ConvergenceStop, ReplayBuffer, RewardScaler, TrainLog, convergence_time,
                     evaluate_policy, gae, normalize_advantages, td_lambda_targets)
from .droq import DroQConfig, train_droq
from .ppo import PPOConfig, ppo_update, train_ppo
from .shac import SHACConfig, train_shac

ALGOS = {"ppo": (PPOConfig, train_ppo), "shac": (SHACConfig, train_shac), "droq": (DroQConfig, train_droq)}


def trainer_config(algo: str, overrides: dict | None = None):
    """Trainer config for ``algo`` with the given field overrides."""
    if algo not in ALGOS:
        raise ValueError(f"unknown algorithm {algo!r}; choose from {sorted(ALGOS)}")
    cls = ALGOS[algo][0]
    names = {f.name for f in fields(cls)}
    extra = set(overrides or {}) - names
    if extra:
        raise ValueError(f"{algo} has no settings {sorted(extra)}")
    return cls(**(overrides or {}))


def train(algo: str, overrides: dict | None, env_cfg, on_episode=None):
    """Run one trainer; returns ``(policy, TrainLog)``."""
    cfg = trainer_config(algo, overrides)
    out = ALGOS[algo][1](cfg, env_cfg, on_episode)
    policy = out[0].policy if algo == "droq" else out[0]
    return policy, out[-1]
