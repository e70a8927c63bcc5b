"""Procedural top-down scenes with exact depth, normals and alpha.

Orthographic camera looking along +depth. Pixel (r, c) sits at metric
position ((c + 0.5) * pitch, (r + 0.5) * pitch). Normals point toward the
camera: n = normalize(dd/dx, dd/dy, 1) for a depth surface d(x, y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .encoding import PointPrompt, point_prompt_mask, sample_point_prompt
from .tensorio import DenseMap, SeededRng, Task, UNIT, read_dtf, write_dtf

SPLIT_DIRS = ("rgb", "depth", "normal", "alpha", "prompt")


@dataclass(frozen=True)
class Sphere:
    row: float          # centre, pixels
    col: float
    top: float          # depth of the nearest point, meters
    radius: float       # meters
    albedo: tuple[float, float, float] = (0.8, 0.8, 0.8)


@dataclass(frozen=True)
class Box:
    row0: int
    row1: int
    col0: int
    col1: int
    top: float          # depth of the camera-facing face, meters
    albedo: tuple[float, float, float] = (0.8, 0.8, 0.8)


@dataclass(frozen=True)
class Scene:
    primitives: tuple = ()
    ground_depth: float = 5.0       # far edge of the ground, meters
    ground_near: float | None = None  # near edge; None = flat ground at ground_depth
    ground_azimuth: float = 0.0     # image-plane direction (radians) along which the ground recedes
    ground_albedo: tuple[float, float, float] = (0.5, 0.5, 0.5)
    light: tuple[float, float, float] = (0.0, 0.0, 1.0)
    depth_range: tuple[float, float] = (0.1, 80.0)
    pitch: float = 1.0              # meters per pixel
    haze: float = 0.0               # aerial-perspective strength in [0, 1]; 0 = pure Lambert
    haze_color: tuple[float, float, float] = (0.7, 0.75, 0.8)


@dataclass
class Sample:
    rgb: np.ndarray        # (H, W, 3) in [0, 1]
    depth: np.ndarray      # (H, W, 1) meters
    normal: np.ndarray     # (H, W, 3) unit
    alpha: np.ndarray      # (H, W, 1) in [0, 1]
    prompt: PointPrompt | None
    scene: Scene = field(repr=False, default=None)

    def as_tuple(self):
        return self.rgb, self.depth, self.normal, self.alpha, self.prompt


def feathered_alpha(foreground: np.ndarray, feather: float = 2.0) -> np.ndarray:
    """Soft silhouette whose 0-to-1 ramp spans ``feather`` pixels across the edge."""
    if not foreground.any():
        return np.zeros(foreground.shape)
    if foreground.all():
        return np.ones(foreground.shape)
    inside = ndimage.distance_transform_edt(foreground)
    outside = ndimage.distance_transform_edt(~foreground)
    signed = np.where(foreground, inside - 0.5, -(outside - 0.5))
    return np.clip(0.5 + signed / feather, 0.0, 1.0)


def ground_depth(scene: Scene, h: int, w: int) -> np.ndarray:
    """Ground depth that varies log-linearly from ``ground_near`` to ``ground_depth``."""
    if scene.ground_near is None:
        return np.full((h, w), float(scene.ground_depth))
    rows = np.arange(h)[:, None] + 0.5
    cols = np.arange(w)[None, :] + 0.5
    proj = math.cos(scene.ground_azimuth) * cols + math.sin(scene.ground_azimuth) * rows
    frac = (proj - proj.min()) / (proj.max() - proj.min())
    lo, hi = math.log(scene.ground_near), math.log(scene.ground_depth)
    lo_d, hi_d = sorted((scene.ground_near, scene.ground_depth))
    return np.clip(np.exp(lo + (hi - lo) * frac), lo_d, hi_d)


def render(scene: Scene, resolution: int | tuple[int, int]) -> Sample:
    h, w = (resolution, resolution) if isinstance(resolution, int) else resolution
    y_min, y_max = scene.depth_range
    depth = ground_depth(scene, h, w)
    gy, gx = np.gradient(depth, scene.pitch)
    normal = np.stack([gx, gy, np.ones_like(depth)], axis=-1)
    albedo = np.broadcast_to(np.asarray(scene.ground_albedo, float), (h, w, 3)).copy()
    fg = np.zeros((h, w), bool)
    rows = (np.arange(h) + 0.5)[:, None]
    cols = (np.arange(w) + 0.5)[None, :]

    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            rho2 = ((rows - prim.row - 0.5) ** 2 + (cols - prim.col - 0.5) ** 2) * scene.pitch ** 2
            inside = rho2 < prim.radius ** 2
            cap = np.sqrt(np.maximum(prim.radius ** 2 - rho2, 0.0))
            d = prim.top + prim.radius - cap
            hit = inside & (d < depth)
            depth[hit] = d[hit]
            dx = np.broadcast_to((cols - prim.col - 0.5) * scene.pitch, (h, w))
            dy = np.broadcast_to((rows - prim.row - 0.5) * scene.pitch, (h, w))
            nvec = np.stack([dx, dy, cap], axis=-1) / prim.radius
            normal[hit] = nvec[hit]
        elif isinstance(prim, Box):
            region = np.zeros((h, w), bool)
            region[max(prim.row0, 0):prim.row1, max(prim.col0, 0):prim.col1] = True
            hit = region & (prim.top < depth)
            depth[hit] = prim.top
            normal[hit] = (0.0, 0.0, 1.0)
        else:
            raise TypeError(f"unknown primitive {prim!r}")
        albedo[hit] = prim.albedo
        fg |= hit

    if depth.min() < y_min - 1e-9 or depth.max() > y_max + 1e-9:
        raise ValueError(f"rendered depth [{depth.min()}, {depth.max()}] escapes range {scene.depth_range}")
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    light = np.asarray(scene.light, float)
    light = light / np.linalg.norm(light)
    shade = np.maximum(0.0, normal @ light)[..., None]
    rgb = albedo * shade
    if scene.haze > 0:
        # transmittance falls with log-depth across the declared range
        frac = np.log(depth / y_min) / math.log(y_max / y_min)
        tau = (1.0 - scene.haze * frac)[..., None]
        rgb = rgb * tau + np.asarray(scene.haze_color) * (1.0 - tau)
    alpha = feathered_alpha(fg)
    return Sample(np.clip(rgb, 0.0, 1.0), depth[..., None], normal, alpha[..., None], None, scene)


def random_scene(rng: SeededRng, resolution: int = 64, n_objects: int = 4,
                 depth_range: tuple[float, float] = (0.1, 80.0), haze: float = 0.9) -> Scene:
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    if not 1 <= n_objects <= 8:
        raise ValueError("n_objects must lie in [1, 8]")
    y_min, y_max = depth_range
    pitch = y_max / resolution
    prims = []
    log_lo, log_hi = math.log(y_min), math.log(0.6 * y_max)
    for _ in range(n_objects):
        top = math.exp(rng.uniform(low=log_lo, high=log_hi))
        color = tuple(float(v) for v in rng.uniform(3, 0.3, 1.0))
        if rng.uniform() < 0.5:
            r_px = rng.uniform(low=4.0, high=0.2 * resolution)
            prims.append(Sphere(rng.uniform(low=0, high=resolution - 1), rng.uniform(low=0, high=resolution - 1),
                                top, r_px * pitch, color))
        else:
            hh = rng.integers(4, resolution // 3)
            ww = rng.integers(4, resolution // 3)
            r0 = rng.integers(0, resolution - hh)
            c0 = rng.integers(0, resolution - ww)
            prims.append(Box(r0, r0 + hh, c0, c0 + ww, top, color))
    az = rng.uniform(low=0.0, high=2 * math.pi)
    el = rng.uniform(low=math.radians(35), high=math.radians(75))
    light = (math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el))
    ground = tuple(float(v) for v in rng.uniform(3, 0.3, 0.6))
    near = math.exp(rng.uniform(low=math.log(y_min), high=math.log(0.1 * y_max)))
    heading = rng.uniform(low=0.0, high=2 * math.pi)
    return Scene(tuple(prims), y_max, near, heading, ground, light, depth_range, pitch, haze)


def generate(rng: SeededRng, resolution: int = 64, n_objects: int = 4,
             depth_range: tuple[float, float] = (0.1, 80.0), haze: float = 0.9,
             prompt_sigma: float = 8.0) -> Sample:
    """Random scene rendered to (rgb, depth, normal, alpha, prompt)."""
    scene = random_scene(rng, resolution, n_objects, depth_range, haze)
    sample = render(scene, resolution)
    sample.prompt = sample_point_prompt(rng.child(1), sample.alpha, sigma=prompt_sigma)
    return sample


@dataclass(frozen=True)
class SplitParams:
    resolution: int = 64
    n_objects: tuple[int, int] = (2, 6)
    depth_range: tuple[float, float] = (0.1, 80.0)
    haze: float = 0.9
    prompt_sigma: float = 8.0


VAL_STREAM_OFFSET = 1 << 40


def sample_for_index(master_seed: int, index: int, params: SplitParams = SplitParams(), val: bool = False) -> Sample:
    """Scene ``index`` of the train (or val) split; train and val streams never overlap."""
    stream = index + (VAL_STREAM_OFFSET if val else 0)
    rng = SeededRng(master_seed, stream)
    n_obj = rng.integers(params.n_objects[0], params.n_objects[1] + 1)
    return generate(rng, params.resolution, n_obj, params.depth_range, params.haze, params.prompt_sigma)


def write_sample(root: Path, index: int, sample: Sample) -> str:
    name = f"{index:05d}.dtf"
    lo, hi = sample.scene.depth_range
    write_dtf(DenseMap(sample.rgb.astype(np.float32), Task.RGB, (0.0, 1.0)), root / "rgb" / name)
    write_dtf(DenseMap(sample.depth.astype(np.float32), Task.DEPTH, (lo, hi)), root / "depth" / name)
    write_dtf(DenseMap(sample.normal.astype(np.float32), Task.NORMAL, UNIT), root / "normal" / name)
    write_dtf(DenseMap(sample.alpha.astype(np.float32), Task.MATTING, (0.0, 1.0)), root / "alpha" / name)
    h, w = sample.depth.shape[:2]
    if sample.prompt is not None:
        mask = point_prompt_mask(sample.prompt, h, w)
        write_dtf(DenseMap(mask.astype(np.float32), Task.MATTING, (-1.0, 1.0)), root / "prompt" / name,
                  sample.prompt.to_meta())
    else:
        write_dtf(DenseMap(-np.ones((h, w, 1), np.float32), Task.MATTING, (-1.0, 1.0)), root / "prompt" / name,
                  {"points": "", "sigma": "0"})
    return " ".join(f"{d}/{name}" for d in SPLIT_DIRS)


def make_split(master_seed: int, n_train: int, n_val: int, root, params: SplitParams = SplitParams()) -> Path:
    """Write ``root/train`` and ``root/val`` DTF trees with a manifest per split."""
    if n_train < 1 or n_val < 1:
        raise ValueError("split sizes must be >= 1")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        raise FileExistsError(f"{root} exists and is not empty")
    for split, count in (("train", n_train), ("val", n_val)):
        base = root / split
        for d in SPLIT_DIRS:
            (base / d).mkdir(parents=True, exist_ok=True)
        lines = [write_sample(base, i, sample_for_index(master_seed, i, params, split == "val")) for i in range(count)]
        (base / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def read_split(split_dir) -> list[Sample]:
    """Load every sample listed in ``split_dir/manifest.txt``."""
    base = Path(split_dir)
    manifest = base / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        paths = dict(zip(SPLIT_DIRS, line.split()))
        rgb, depth, normal, alpha, prompt = (read_dtf(base / paths[d]) for d in SPLIT_DIRS)
        points = prompt.meta.get("points", "")
        pp = PointPrompt.from_meta(prompt.meta) if points else None
        out.append(Sample(rgb.data.astype(np.float64), depth.data.astype(np.float64),
                          normal.data.astype(np.float64), alpha.data.astype(np.float64), pp))
    return out
