"""Toy trainer: flow matching plus curriculum-weighted pixel consistency."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .. import encoding, losses, metrics
from ..flow import NoiseSchedule, PyramidNoise, euler_sample, interpolate, multires_noise, one_step_estimate, velocity_target
from ..quant import Mapping, bf16_round
from ..synth import Sample
from ..tensorio import SeededRng
from .net import NetConfig, VelocityNet
from .optim import Adam

TASKS = ("depth", "normal", "matting")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainerConfig:
    task: str = "depth"
    mapping: str = "sqrt"
    use_cons: bool = True
    lr: float = 3e-4
    batch: int = 8
    epochs: int = 3
    seed: int = 0
    z0_seed: int = 2024
    widths: tuple[int, int] = (16, 32)
    noise_levels: int = 4
    noise_persistence: float = 0.7
    bf16_codec: bool = True
    fit_grad: str = "full"
    lambda_cap: float | None = None
    cons_max_t: float | None = None     # apply L_cons only where t <= this; None = every t
    trimap_radius: int = 3
    weight_decay: float = 0.0
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")
        self.widths = tuple(self.widths)
        Mapping.parse(self.mapping)

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.noise_levels, self.noise_persistence)

    def net_config(self) -> NetConfig:
        cond = 4 if self.task == "matting" else 3
        return NetConfig(cond_channels=cond, widths=self.widths)

    def to_json(self) -> str:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return json.dumps(d, sort_keys=True, indent=1)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()[:8]


@dataclass
class Example:
    """One training/eval pair in model space, plus what the consistency loss needs."""

    cond: np.ndarray                  # (H, W, Cc) in [-1, 1]
    target: np.ndarray                # (H, W, 3) encoded z1
    gt: np.ndarray                    # depth (H,W,1) m | normal (H,W,3) | alpha (H,W,1)
    valid: np.ndarray                 # (H, W) bool
    enc: encoding.DepthEncoding | None = None
    unknown: np.ndarray | None = None  # matting trimap band


def prepare_example(rgb, gt, task: str, mapping: Mapping | str = "sqrt", prompt_mask=None,
                    bf16_codec: bool = True, trimap_radius: int = 3) -> Example:
    """Encode a raw (rgb in [0,1], ground truth) pair for ``task``.

    With ``bf16_codec`` the identity codec rounds both conditioning and
    target to bfloat16, standing in for a bf16 VAE latent.
    """
    if isinstance(mapping, str):
        mapping = Mapping.parse(mapping)
    cond = encoding.rgb_normalize(rgb, (0.0, 1.0))
    gt = np.asarray(gt, np.float64)
    enc = unknown = None
    if task == "depth":
        valid = encoding.depth_validity(gt)
        target, enc = encoding.depth_encode(gt, valid, mapping)
    elif task == "normal":
        valid = np.linalg.norm(gt, axis=-1) > 0
        target = encoding.normal_encode(gt, valid)
    elif task == "matting":
        valid = np.ones(gt.shape[:2], bool)
        target = encoding.matting_encode(gt)
        unknown = losses.trimap_from_alpha(gt[..., 0], trimap_radius)
        if prompt_mask is None:
            raise ValueError("matting examples need a prompt mask")
        cond = np.concatenate([cond, np.asarray(prompt_mask, np.float64).reshape(*gt.shape[:2], 1)], axis=-1)
    else:
        raise ValueError(f"unknown task {task!r}")
    if bf16_codec:
        cond = bf16_round(cond)
        target = bf16_round(target)
    return Example(cond, target, gt, valid, enc, unknown)


def examples_from_samples(samples: Sequence[Sample], config: TrainerConfig) -> list[Example]:
    out = []
    for s in samples:
        gt = {"depth": s.depth, "normal": s.normal, "matting": s.alpha}[config.task]
        prompt = None
        if config.task == "matting":
            h, w = s.alpha.shape[:2]
            prompt = (encoding.point_prompt_mask(s.prompt, h, w) if s.prompt is not None
                      else -np.ones((h, w, 1)))
        out.append(prepare_example(s.rgb, gt, config.task, config.mapping, prompt,
                                   config.bf16_codec, config.trimap_radius))
    return out


# ---------------------------------------------------------------- decode + consistency


def decode_prediction(z_hat: np.ndarray, ex: Example, task: str) -> np.ndarray:
    if task == "depth":
        return encoding.depth_decode(z_hat, ex.enc)
    if task == "normal":
        return z_hat
    return encoding.matting_decode(z_hat, clip=False)


def consistency_loss(z_hat: np.ndarray, ex: Example, task: str, fit_grad: str = "full"):
    """Pixel-space loss of the decoded endpoint and its gradient w.r.t. ``z_hat``."""
    if task == "depth":
        y_hat = encoding.depth_decode(z_hat, ex.enc)
        value, g = losses.ssi_l1_depth(y_hat, ex.gt, ex.valid[..., None], fit_grad=fit_grad)
        return value, encoding.depth_decode_vjp(z_hat, ex.enc, g), None
    if task == "normal":
        value, g = losses.angular_loss(z_hat, ex.gt, ex.valid)
        return value, g, None
    a_hat = encoding.matting_decode(z_hat, clip=False)
    value, g, breakdown = losses.matting_region_l1(a_hat, ex.gt, ex.unknown)
    # a = (mean_c m + 1) / 2
    return value, np.repeat(g / (2.0 * z_hat.shape[-1]), z_hat.shape[-1], axis=-1), breakdown


# ---------------------------------------------------------------- trainer


class Trainer:
    def __init__(self, config: TrainerConfig, train: Sequence[Example], net: VelocityNet | None = None):
        if not train:
            raise ValueError("empty training set")
        self.config = config
        self.train = list(train)
        self.net = net or VelocityNet(config.net_config(), seed=config.seed)
        self.opt = Adam(config.lr, weight_decay=config.weight_decay)
        self.n_step = math.ceil(len(self.train) / config.batch)
        self.step = 0
        self.history: list[losses.LossReport] = []
        self._pyramids: dict[tuple, PyramidNoise] = {}

    def z0(self, shape, t: float) -> np.ndarray:
        """Fixed-seed annealed pyramid noise; identical for every sample at a given t."""
        key = tuple(shape)
        if key not in self._pyramids:
            self._pyramids[key] = PyramidNoise(SeededRng(self.config.z0_seed), shape, self.config.schedule)
        return self._pyramids[key](t)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return SeededRng(self.config.seed, stream=1000 + epoch).permutation(len(self.train))

    def train_step(self, batch: Sequence[Example], step_index: int) -> losses.LossReport:
        """One optimisation step; ``step_index`` is the 1-based global step."""
        if not batch:
            raise ValueError("empty batch")
        cfg = self.config
        n = len(batch)
        t = SeededRng(cfg.seed, stream=(1 << 32) + step_index).uniform(n)
        shape = batch[0].target.shape
        z0 = np.stack([self.z0(shape, float(ti)) for ti in t])
        z1 = np.stack([ex.target for ex in batch])
        tt = t[:, None, None, None]
        z_t = interpolate(z0, z1, tt)
        v = velocity_target(z0, z1)
        cond = [np.stack([ex.cond for ex in batch])]

        out, tape, p = self.net.forward(z_t, cond, t)
        v_pred = out.value.astype(np.float64)
        l_fm, grad = losses.fm_loss(v_pred, v)

        l_cons, lam, breakdown = 0.0, 0.0, None
        if cfg.use_cons:
            z_hat = one_step_estimate(z_t, v_pred, tt)
            cons_vals, cons_grads = [], []
            for i, ex in enumerate(batch):
                if cfg.cons_max_t is not None and t[i] > cfg.cons_max_t:
                    cons_grads.append(np.zeros_like(z_hat[i]))
                    continue
                val, g, breakdown = consistency_loss(z_hat[i], ex, cfg.task, cfg.fit_grad)
                cons_vals.append(val)
                cons_grads.append(g)
            if cons_vals:
                l_cons = float(np.mean(cons_vals))
                lam = losses.adaptive_lambda(l_fm, l_cons, step_index, self.n_step, cap=cfg.lambda_cap)
                if lam > 0:
                    g_cons = np.stack(cons_grads) / len(cons_vals)
                    grad = grad + lam * (1.0 - tt) * g_cons

        total = l_fm + lam * l_cons
        if not math.isfinite(total) or total > cfg.divergence_limit:
            raise DivergenceError(f"total loss {total} at step {step_index}")
        tape.backward(out, seed=grad.astype(out.value.dtype))
        grads = {k: (node.grad if node.grad is not None else np.zeros_like(node.value)) for k, node in p.items()}
        self.opt.step(self.net.params, grads)
        report = losses.LossReport(step_index, l_fm, l_cons, lam, total, cfg.task, breakdown)
        self.history.append(report)
        return report

    def run(self, epochs: int | None = None, on_step: Callable[[losses.LossReport], None] | None = None):
        epochs = self.config.epochs if epochs is None else epochs
        bs = self.config.batch
        for _ in range(epochs):
            epoch = self.step // self.n_step
            order = self.epoch_order(epoch)
            for k in range(self.n_step):
                idx = order[k * bs:(k + 1) * bs]
                self.step += 1
                report = self.train_step([self.train[i] for i in idx], self.step)
                if on_step:
                    on_step(report)
        return self.history


# ---------------------------------------------------------------- inference / evaluation


def predict(net: VelocityNet, examples: Sequence[Example], steps: int = 1, z0_seed: int = 2024,
            schedule: NoiseSchedule = NoiseSchedule(), batch: int = 16) -> np.ndarray:
    """Endpoint latents for every example, integrating from the fixed-seed noise."""
    shape = examples[0].target.shape
    z0 = multires_noise(SeededRng(z0_seed), shape, schedule, 0.0)
    outs = []
    for i in range(0, len(examples), batch):
        chunk = examples[i:i + batch]
        cond = [np.stack([ex.cond for ex in chunk])]
        zb = np.broadcast_to(z0, (len(chunk),) + shape)
        outs.append(euler_sample(net, zb, cond, steps))
    return np.concatenate(outs, axis=0)


def evaluate(z_hat: np.ndarray, examples: Sequence[Example], task: str,
             depth_clip: tuple[float, float] | None = None) -> metrics.EvalResult:
    rows = []
    for zh, ex in zip(z_hat, examples):
        if task == "depth":
            y_hat = encoding.depth_decode(zh, ex.enc)
            rows.append(metrics.depth_metrics(y_hat, ex.gt, ex.valid[..., None], depth_clip))
        elif task == "normal":
            mean_deg, pct = metrics.normal_metrics(zh, ex.gt, ex.valid)
            rows.append({"mean_angle_deg": mean_deg, "pct_11_25": pct})
        else:
            a_hat = encoding.matting_decode(zh, clip=True)
            rows.append(metrics.matting_metrics(a_hat, ex.gt))
    return metrics.aggregate(task, rows)
