"""Synthetic moving-shapes video clips with dense labels."""

from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List

import numpy as np

from .. import formats

SHAPES = ("disk", "square", "triangle", "cross", "ring")
# base hue per shape class; each instance jitters around it
CLASS_HUES = (0.0, 0.2, 0.4, 0.6, 0.8)


@dataclass(frozen=True)
class SyntheticVideoConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 6
    shapes_per_clip: int = 4
    motion_px_per_frame: float = 4.0
    clip_length: int = 4
    seed: int = 0
    min_radius: int = 7
    max_radius: int = 12
    hue_jitter: float = 0.04
    noise_std: float = 0.1
    # per-frame, per-object hue wobble: single frames are ambiguous, history helps
    frame_hue_jitter: float = 0.06

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes - 1 > len(SHAPES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPES) + 1}], got {self.num_classes}")
        if self.clip_length < 1:
            raise ValueError("clip_length must be >= 1")
        if self.min_radius < 2 or self.max_radius < self.min_radius:
            raise ValueError("invalid shape radius range")
        if 2 * self.max_radius >= min(self.height, self.width):
            raise ValueError(f"shapes of radius {self.max_radius} do not fit a "
                             f"{self.height}x{self.width} frame")


@dataclass
class VideoClip:
    frames: List[np.ndarray]              # each [3,H,W] in [0,1]
    labels: List[np.ndarray]              # each [H,W] int
    config: SyntheticVideoConfig
    trajectories: np.ndarray = field(default=None)   # [clip_length, shapes, 2] (y, x) centres
    shape_classes: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.frames)

    def subsample(self, gap: int) -> "VideoClip":
        return VideoClip(self.frames[::gap], self.labels[::gap], self.config,
                         None if self.trajectories is None else self.trajectories[::gap],
                         self.shape_classes)


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        s = r * 0.85
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if kind == "triangle":
        # apex up, base at cy + r/2
        return (dy <= r * 0.6) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.62)
    if kind == "cross":
        a = r * 0.35
        return ((np.abs(dy) <= a) & (np.abs(dx) <= r)) | ((np.abs(dx) <= a) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(kind)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((3, h, w), 0.45)
    for _ in range(3):
        fy, fx = rng.uniform(0.03, 0.25, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.12, size=3)
        wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        img += amp[:, None, None] * wave[None]
    return img


def _trajectory(rng: np.random.Generator, cfg: SyntheticVideoConfig, r: int) -> np.ndarray:
    """Centres over the clip. Straight lines when they fit, reflecting off the borders otherwise."""
    lo_y, hi_y = r, cfg.height - 1 - r
    lo_x, hi_x = r, cfg.width - 1 - r
    speed = cfg.motion_px_per_frame
    span = speed * (cfg.clip_length - 1)
    angle = rng.uniform(0, 2 * np.pi)
    vy, vx = speed * np.sin(angle), speed * np.cos(angle)
    fits_y = abs(vy) * (cfg.clip_length - 1) <= hi_y - lo_y
    fits_x = abs(vx) * (cfg.clip_length - 1) <= hi_x - lo_x
    if span == 0 or (fits_y and fits_x):
        ey, ex = vy * (cfg.clip_length - 1), vx * (cfg.clip_length - 1)
        y0 = rng.uniform(max(lo_y, lo_y - ey), min(hi_y, hi_y - ey))
        x0 = rng.uniform(max(lo_x, lo_x - ex), min(hi_x, hi_x - ex))
        t = np.arange(cfg.clip_length)
        return np.stack([y0 + vy * t, x0 + vx * t], axis=1)
    y, x = rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x)
    pts = []
    for _ in range(cfg.clip_length):
        pts.append((y, x))
        y, vy = _reflect(y + vy, vy, lo_y, hi_y)
        x, vx = _reflect(x + vx, vx, lo_x, hi_x)
    return np.asarray(pts)


def _reflect(p: float, v: float, lo: float, hi: float):
    """Fold ``p`` back into ``[lo, hi]``; the velocity flips on an odd number of bounces."""
    width = hi - lo
    if width <= 0:
        return lo, v
    segment = int(np.floor((p - lo) / width))
    q = (p - lo) - segment * width
    if segment % 2:
        return hi - q, -v
    return lo + q, v


def generate_clip(config: SyntheticVideoConfig) -> VideoClip:
    """Render a clip of coloured shapes translating over a textured background.

    Each class has its own outline and hue family. Labels give the class of
    the topmost shape per pixel (0 is background).
    """
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    bg = _background(rng, h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    n_cls = config.num_classes - 1
    classes = rng.integers(0, n_cls, size=config.shapes_per_clip)
    radii = rng.integers(config.min_radius, config.max_radius + 1, size=config.shapes_per_clip)
    hues = [(CLASS_HUES[c] + rng.uniform(-config.hue_jitter, config.hue_jitter)) % 1.0 for c in classes]
    sv = rng.uniform([0.6, 0.65], [0.9, 0.95], size=(config.shapes_per_clip, 2))
    trajs = np.stack([_trajectory(rng, config, int(r)) for r in radii], axis=1)
    frames, labels = [], []
    for t in range(config.clip_length):
        img = bg.copy()
        lab = np.zeros((h, w), dtype=np.int64)
        # per-frame appearance change of each object: only resolvable across frames
        jitter = rng.normal(0.0, config.frame_hue_jitter, size=config.shapes_per_clip)
        for s in range(config.shapes_per_clip):
            cy, cx = trajs[t, s]
            mask = _shape_mask(SHAPES[classes[s]], yy, xx, cy, cx, float(radii[s]))
            rgb = colorsys.hsv_to_rgb((hues[s] + jitter[s]) % 1.0, sv[s, 0], sv[s, 1])
            img[:, mask] = np.asarray(rgb)[:, None]
            lab[mask] = classes[s] + 1
        if config.noise_std:
            img = img + rng.normal(0.0, config.noise_std, size=img.shape)
        frames.append(np.clip(img, 0.0, 1.0))
        labels.append(lab)
    return VideoClip(frames, labels, config, trajs, classes + 1)


def clip_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def save_clip(clip: VideoClip, directory) -> Path:
    """Write frames as raw tensors, labels as PGM, plus an ``index.txt`` manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (frame, lab) in enumerate(zip(clip.frames, clip.labels)):
        fname, lname = f"frame_{i:04d}.tsr", f"label_{i:04d}.pgm"
        formats.write_tsr(d / fname, np.asarray(frame, dtype=np.float64))
        formats.write_pgm(d / lname, lab)
        lines.append(f"{i} {fname} {lname}\n")
    cfg = " ".join(f"{k}={v}" for k, v in asdict(clip.config).items())
    with open(d / "index.txt", "w") as fh:
        fh.write(f"# {cfg}\n")
        fh.writelines(lines)
    return d


def load_clip(directory) -> VideoClip:
    d = Path(directory)
    frames, labels = [], []
    cfg = SyntheticVideoConfig()
    with open(d / "index.txt") as fh:
        for line in fh:
            if line.startswith("#"):
                kv = dict(tok.split("=", 1) for tok in line[1:].split())
                fields = {k: type(getattr(cfg, k))(v) for k, v in kv.items() if hasattr(cfg, k)}
                cfg = replace(cfg, **fields)
                continue
            if not line.strip():
                continue
            _, fname, lname = line.split()
            frames.append(formats.read_tsr(d / fname))
            labels.append(formats.read_pgm(d / lname))
    return VideoClip(frames, labels, cfg)
