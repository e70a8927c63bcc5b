"""In-memory experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

from . import synth
from .metrics import EvalResult
from .nnkit.net import VelocityNet
from .nnkit.train import Example, Trainer, TrainerConfig, evaluate, examples_from_samples, predict

ABLATION_LR = 2e-3


def steps_sweep(net: VelocityNet, examples: Sequence[Example], config: TrainerConfig, steps: Sequence[int],
                depth_clip: tuple[float, float] | None = None) -> list[tuple[int, EvalResult]]:
    """Evaluate the same net and start noise at each Euler step count."""
    out = []
    for n in steps:
        z_hat = predict(net, examples, n, config.z0_seed, config.schedule)
        out.append((n, evaluate(z_hat, examples, config.task, depth_clip)))
    return out


@dataclass
class DepthRun:
    config: TrainerConfig
    trainer: Trainer
    val: list[Example]
    metrics: dict[str, float]
    seconds: float
    depth_range: tuple[float, float] = (0.1, 80.0)
    extra: dict = field(default_factory=dict)


def depth_run(mapping: str = "sqrt", use_cons: bool = True, seed: int = 0, n_train: int = 500,
              n_val: int = 100, resolution: int = 64, depth_range: tuple[float, float] = (0.1, 80.0),
              eval_steps: int = 1, **overrides) -> DepthRun:
    """Generate scenes for ``seed``, train a depth model on them and score the val split.

    The scene seed and the trainer seed are the same, so configurations that
    share a seed see identical data, initial weights, batches and timesteps.
    """
    params = synth.SplitParams(resolution=resolution, depth_range=depth_range)
    overrides.setdefault("lr", ABLATION_LR)
    config = TrainerConfig(task="depth", mapping=mapping, use_cons=use_cons, seed=seed, **overrides)
    train = examples_from_samples([synth.sample_for_index(seed, i, params) for i in range(n_train)], config)
    val = examples_from_samples([synth.sample_for_index(seed, i, params, val=True) for i in range(n_val)], config)
    start = time.perf_counter()
    trainer = Trainer(config, train)
    trainer.run()
    seconds = time.perf_counter() - start
    z_hat = predict(trainer.net, val, eval_steps, config.z0_seed, config.schedule)
    result = evaluate(z_hat, val, "depth", depth_range)
    return DepthRun(config, trainer, val, result.metrics, seconds, depth_range)
