"""Training loops for the distributed student and the single-frame teacher."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from ..distill import TeacherModel, grouped_kd_loss, split_reduction_layer, teacher_group_logits
from ..optim import OptimizerConfig, sgd_step
from ..tensor import NonFiniteError, cross_entropy, upsample_nearest, zero_grads
from .data import SyntheticVideoConfig, VideoClip, clip_seed, generate_clip
from .model import TDNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 2000
    seed: int = 0
    crop: int = 48
    flip: bool = True
    alpha: float = 0.0
    beta: float = 0.0
    ignore_index: int = 255


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, iteration: int, clip_seed: int):
        super().__init__(f"{message} (iteration {iteration}, clip seed {clip_seed})")
        self.iteration = iteration
        self.clip_seed = clip_seed


@dataclass
class TrainResult:
    history: List[dict] = field(default_factory=list)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iter", "lr", "ce", "kd_overall", "kd_grouped", "total"])
        for h in self.history:
            writer.writerow([h["iter"], f"{h['lr']:.10g}", f"{h['ce']:.10g}", f"{h['kd_overall']:.10g}",
                             f"{h['kd_grouped']:.10g}", f"{h['total']:.10g}"])
        return buf.getvalue()

    def ce_curve(self) -> np.ndarray:
        return np.array([h["ce"] for h in self.history])


def augment(frames, labels, rng: np.random.Generator, crop: int, flip: bool):
    """Same random crop and horizontal flip for every frame of the window."""
    h, w = labels[0].shape
    crop = min(crop, h, w)
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    do_flip = flip and bool(rng.integers(0, 2))
    out_f, out_l = [], []
    for f, lab in zip(frames, labels):
        f = f[:, y0:y0 + crop, x0:x0 + crop]
        lab = lab[y0:y0 + crop, x0:x0 + crop]
        if do_flip:
            f, lab = f[:, :, ::-1], lab[:, ::-1]
        out_f.append(np.ascontiguousarray(f))
        out_l.append(np.ascontiguousarray(lab))
    return out_f, out_l


def sample_window(dataset: SyntheticVideoConfig, length: int, seed: int, it: int, crop: int, flip: bool,
                  gap: int = 1):
    cs = clip_seed(seed, it)
    clip = generate_clip(replace(dataset, clip_length=(length - 1) * gap + 1, seed=cs))
    rng = np.random.default_rng([cs, 1])
    frames, labels = augment(clip.frames[::gap], clip.labels[::gap], rng, crop, flip)
    return frames, labels, rng, cs


def train(model: TDNet, dataset: SyntheticVideoConfig, train_cfg: TrainConfig,
          opt_cfg: Optional[OptimizerConfig] = None, teacher: Optional[TeacherModel] = None,
          callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train on freshly generated ``m``-frame windows, supervising the last frame.

    Each window starts at a random circular phase so every path takes turns
    being the supervised one.
    """
    cfg = model.config
    opt_cfg = opt_cfg or OptimizerConfig(max_iter=max(train_cfg.iters, 1))
    if (train_cfg.alpha or train_cfg.beta) and teacher is None:
        raise ValueError("grouped KD requires teacher" if train_cfg.beta else "overall KD requires teacher")
    split = split_reduction_layer(teacher, cfg.m) if teacher is not None else None
    params = model.parameters()
    result = TrainResult()
    factor = cfg.downsample_factor
    for it in range(train_cfg.iters):
        frames, labels, rng, cs = sample_window(dataset, cfg.m, train_cfg.seed, it, train_cfg.crop,
                                                train_cfg.flip)
        start = int(rng.integers(0, cfg.m))
        paths = [(start + j) % cfg.m for j in range(cfg.m)]
        try:
            logits, path_logits, cur = model.window_forward(frames, paths)
            t_full = t_group = None
            if split is not None and (train_cfg.alpha or train_cfg.beta):
                groups, t_full = teacher_group_logits(teacher, split, frames[-1])
                t_group = groups[cur]
            terms = grouped_kd_loss(logits, path_logits, t_full, t_group, labels[-1],
                                    train_cfg.alpha, train_cfg.beta, train_cfg.ignore_index,
                                    student_full_ce=upsample_nearest(logits, factor))
            zero_grads(params)
            terms.total.backward()
        except NonFiniteError as exc:
            raise TrainingDiverged(str(exc), it, cs) from exc
        lr = sgd_step(params, opt_cfg, it)
        rec = {"iter": it, "lr": lr, **terms.values()}
        result.history.append(rec)
        if callback is not None:
            callback(rec)
    zero_grads(params)
    return result


def train_teacher(teacher: TeacherModel, dataset: SyntheticVideoConfig, train_cfg: TrainConfig,
                  opt_cfg: Optional[OptimizerConfig] = None) -> TrainResult:
    """Single-frame supervised training of the teacher."""
    opt_cfg = opt_cfg or OptimizerConfig(max_iter=max(train_cfg.iters, 1))
    params = teacher.parameters()
    result = TrainResult()
    factor = teacher.config.downsample_factor
    for it in range(train_cfg.iters):
        frames, labels, _, cs = sample_window(dataset, 1, train_cfg.seed + 7919, it, train_cfg.crop,
                                              train_cfg.flip)
        try:
            logits = teacher(frames[0])
            loss = cross_entropy(upsample_nearest(logits, factor), labels[0], train_cfg.ignore_index)
            zero_grads(params)
            loss.backward()
        except NonFiniteError as exc:
            raise TrainingDiverged(str(exc), it, cs) from exc
        lr = sgd_step(params, opt_cfg, it)
        v = float(loss.data)
        result.history.append({"iter": it, "lr": lr, "ce": v, "kd_overall": 0.0, "kd_grouped": 0.0, "total": v})
    zero_grads(params)
    return result


def eval_clips(dataset: SyntheticVideoConfig, count: int, length: int, seed: int = 10_000) -> List[VideoClip]:
    return [generate_clip(replace(dataset, clip_length=length, seed=clip_seed(seed, i))) for i in range(count)]
