"""Small convolutional velocity network (two-level U-Net) on the autodiff tape."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..tensorio import SeededRng
from . import autodiff as ad


@dataclass(frozen=True)
class NetConfig:
    cond_channels: int = 3          # c_x (+ prompt mask for matting)
    out_channels: int = 3
    widths: tuple[int, int] = (16, 32)
    time_channels: int = 4
    head_hidden: int = 32           # per-pixel MLP head width (0 disables)
    dtype: str = "float32"

    @property
    def in_channels(self) -> int:
        # z_t, conditioning, timestep embedding, constant prompt channel
        return self.out_channels + self.cond_channels + self.time_channels + 1

    def to_json(self) -> str:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetConfig":
        d = json.loads(text)
        d["widths"] = tuple(d["widths"])
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()[:8]


def timestep_embedding(t, channels: int) -> np.ndarray:
    """(N, channels) sin/cos features of t at octave frequencies pi * 2**k."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    feats = []
    for k in range(channels // 2):
        f = math.pi * 2 ** k
        feats += [np.sin(f * t), np.cos(f * t)]
    if channels % 2:
        feats.append(t)
    return np.stack(feats, axis=-1)


class VelocityNet:
    """v_theta(concat(z_t, cond, temb, const), t) with output shape equal to z_t."""

    LAYERS = ("enc1", "enc2", "mid", "dec2", "dec1", "out")

    def __init__(self, config: NetConfig = NetConfig(), seed: int = 0, zero_final: bool = True):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        w1, w2 = config.widths
        shapes = {
            "enc1": (config.in_channels, w1),
            "enc2": (w1, w2),
            "mid": (w2, w2),
            "dec2": (2 * w2, w2),
            "dec1": (w2 + w1, w1),
            "out": (w1, config.out_channels),
        }
        rng = SeededRng(seed, stream=0x4E4554)
        self.params: dict[str, np.ndarray] = {}
        for i, (name, (cin, cout)) in enumerate(shapes.items()):
            bound = 1.0 / math.sqrt(9 * cin)
            if name == "out" and zero_final:
                w = np.zeros((3, 3, cin, cout))
            else:
                w = rng.child(i).uniform((3, 3, cin, cout), -bound, bound)
            self.params[f"{name}.w"] = w.astype(self.dtype)
            self.params[f"{name}.b"] = np.zeros(cout, dtype=self.dtype)
        # linear input-to-output skip, zero at init like the final conv
        self.params["skip.w"] = np.zeros((config.in_channels, config.out_channels), dtype=self.dtype)
        # per-pixel nonlinear head: 1x1 hidden layer, zero-initialised readout
        if config.head_hidden:
            bound = 1.0 / math.sqrt(config.in_channels)
            w = rng.child(len(shapes)).uniform((config.in_channels, config.head_hidden), -bound, bound)
            self.params["head.w"] = w.astype(self.dtype)
            self.params["head.b"] = np.zeros(config.head_hidden, dtype=self.dtype)
            self.params["head.out"] = np.zeros((config.head_hidden, config.out_channels), dtype=self.dtype)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def assemble_input(self, z_t, cond, t) -> np.ndarray:
        z_t = np.asarray(z_t)
        squeeze = z_t.ndim == 3
        if squeeze:
            z_t = z_t[None]
            cond = [np.asarray(c)[None] for c in cond]
        n, h, w, _ = z_t.shape
        parts = [z_t] + [np.asarray(c) for c in cond]
        temb = timestep_embedding(np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)), self.config.time_channels)
        parts.append(np.broadcast_to(temb[:, None, None, :], (n, h, w, temb.shape[-1])))
        parts.append(np.ones((n, h, w, 1)))
        x = np.concatenate([p.astype(self.dtype) for p in parts], axis=-1)
        if x.shape[-1] != self.config.in_channels:
            raise ValueError(f"net expects {self.config.in_channels} input channels, got {x.shape[-1]}")
        if h % 4 or w % 4:
            raise ValueError(f"spatial size {h}x{w} must be divisible by 4")
        return x

    def forward(self, z_t, cond, t, tape: ad.Tape | None = None):
        """Return (v_pred node, tape, param nodes)."""
        tape = tape or ad.Tape()
        x = tape.leaf(self.assemble_input(z_t, cond, t), name="input")
        p = {k: tape.leaf(v, requires_grad=True, name=k) for k, v in self.params.items()}

        def conv(name, h):
            return ad.conv3x3(tape, h, p[f"{name}.w"], p[f"{name}.b"])

        e1 = ad.silu(tape, conv("enc1", x))
        e2 = ad.silu(tape, conv("enc2", ad.avgpool2(tape, e1)))
        m = ad.silu(tape, conv("mid", ad.avgpool2(tape, e2)))
        d2 = ad.silu(tape, conv("dec2", ad.concat(tape, [ad.upsample2(tape, m), e2])))
        d1 = ad.silu(tape, conv("dec1", ad.concat(tape, [ad.upsample2(tape, d2), e1])))
        out = ad.add(tape, conv("out", d1), ad.linear(tape, x, p["skip.w"]))
        if self.config.head_hidden:
            hid = ad.silu(tape, ad.linear(tape, x, p["head.w"], p["head.b"]))
            out = ad.add(tape, out, ad.linear(tape, hid, p["head.out"]))
        return out, tape, p

    def __call__(self, z_t, cond, t) -> np.ndarray:
        z_t = np.asarray(z_t)
        out, _, _ = self.forward(z_t, cond, t)
        v = out.value.astype(np.float64)
        return v[0] if z_t.ndim == 3 else v

    def gradients(self, z_t, cond, t, seed) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Forward, then backpropagate ``seed`` = dL/dv_pred. Returns (v_pred, grads)."""
        out, tape, p = self.forward(z_t, cond, t)
        tape.backward(out, seed=np.asarray(seed).reshape(out.value.shape))
        grads = {k: (node.grad if node.grad is not None else np.zeros_like(node.value)) for k, node in p.items()}
        return out.value.astype(np.float64), grads
