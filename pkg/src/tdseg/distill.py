"""Teacher model, channel-group split of its reduction layer, and the three-term KD loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .subnet import Conv, build_trunk, run_trunk, trunk_macs
from .tensor import Parameter, ShapeError, Tensor, conv2d, cross_entropy, kl_divergence, mac_site, no_grad


@dataclass(frozen=True)
class TeacherConfig:
    in_channels: int = 3
    trunk_channels: int = 64
    depth: int = 8
    downsample_factor: int = 4
    feature_channels: int = 16
    num_classes: int = 6
    groups: int = 4

    def __post_init__(self):
        if self.groups < 1:
            raise ValueError(f"groups must be >= 1, got {self.groups}")
        if self.trunk_channels % self.groups:
            raise ValueError(f"teacher trunk channels C_T={self.trunk_channels} not divisible by m={self.groups}")
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError(f"downsample_factor must be a power of 2, got {f}")
        if self.stride_stages > self.depth:
            raise ValueError("teacher depth too small for its downsample factor")

    @property
    def stride_stages(self) -> int:
        return int(np.log2(self.downsample_factor))


class TeacherModel:
    """Deep single-frame segmenter: conv trunk, 1x1 reduction C_T->C, 1x1 head C->K."""

    def __init__(self, config: TeacherConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.trunk = build_trunk("teacher.trunk", config.in_channels, config.trunk_channels,
                                 config.depth, config.stride_stages, rng)
        self.reduction = Conv("teacher.reduction", config.trunk_channels, config.feature_channels, 1, rng)
        self.head = Conv("teacher.head", config.feature_channels, config.num_classes, 1, rng)

    def layers(self) -> List[Conv]:
        return [*self.trunk, self.reduction, self.head]

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def features(self, frame) -> Tensor:
        x = frame if isinstance(frame, Tensor) else Tensor(frame)
        return run_trunk(self.trunk, x)

    def forward(self, frame) -> Tensor:
        with mac_site("teacher"):
            return self.head(self.reduction(self.features(frame)))

    __call__ = forward

    def macs(self, h: int, w: int) -> int:
        f = self.config.downsample_factor
        ho, wo = h // f, w // f
        return (trunk_macs(self.trunk, h, w) + self.reduction.macs(ho, wo) + self.head.macs(ho, wo))


@dataclass
class GroupSplit:
    """``m`` bias-free sub-convolutions over consecutive input-channel slices, plus the shared bias."""

    weights: List[np.ndarray]      # each [C, C_T/m, 1, 1]
    bias: np.ndarray               # [C]
    group_size: int

    @property
    def m(self) -> int:
        return len(self.weights)

    def group_outputs(self, features) -> List[Tensor]:
        """``f_i = group_i(x_i)`` for each channel slice ``x_i`` of ``features`` (bias excluded)."""
        x = features.data if isinstance(features, Tensor) else np.asarray(features)
        if x.shape[0] != self.group_size * self.m:
            raise ShapeError(f"features have {x.shape[0]} channels, split expects {self.group_size * self.m}")
        g = self.group_size
        with no_grad():
            return [conv2d(Tensor(x[i * g:(i + 1) * g]), Tensor(w)) for i, w in enumerate(self.weights)]

    def recompose(self, features) -> np.ndarray:
        total = sum(f.data for f in self.group_outputs(features))
        return total + self.bias[:, None, None]


def split_reduction_layer(teacher: TeacherModel, m: int) -> GroupSplit:
    """Split the reduction conv into ``m`` channel groups whose outputs sum (plus bias) to the original."""
    c_t = teacher.reduction.c_in
    if m < 1 or c_t % m:
        raise ValueError(f"teacher trunk channels C_T={c_t} not divisible by m={m}")
    g = c_t // m
    w = teacher.reduction.weight.data
    return GroupSplit([w[:, i * g:(i + 1) * g].copy() for i in range(m)],
                      teacher.reduction.bias.data.copy(), g)


def teacher_group_logits(teacher: TeacherModel, split: GroupSplit, frame) -> Tuple[List[np.ndarray], np.ndarray]:
    """Detached teacher logits per feature group, ``pi_T(f_i + b/m)``, and the full ``pi_T(sum f + b)``."""
    with no_grad():
        feats = teacher.features(frame)
        groups = split.group_outputs(feats)
        share = split.bias[:, None, None] / split.m
        group_logits = [teacher.head(Tensor(f.data + share)).data for f in groups]
        full = teacher.head(Tensor(sum(f.data for f in groups) + split.bias[:, None, None])).data
    return group_logits, full


@dataclass
class LossTerms:
    ce: Tensor
    kd_overall: Tensor
    kd_grouped: Tensor
    alpha: float
    beta: float
    total: Tensor

    def values(self) -> dict:
        return {"ce": float(self.ce.data), "kd_overall": float(self.kd_overall.data),
                "kd_grouped": float(self.kd_grouped.data), "total": float(self.total.data)}


def _zero_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=t.dtype))


def grouped_kd_loss(student_full: Tensor, student_path: Optional[Tensor],
                    teacher_full: Optional[np.ndarray], teacher_group: Optional[np.ndarray],
                    gt: np.ndarray, alpha: float = 0.5, beta: float = 0.5,
                    ignore_index: int = 255, student_full_ce: Optional[Tensor] = None) -> LossTerms:
    """``CE(student_full, gt) + alpha*KL(teacher_full || student_full) + beta*KL(teacher_group || student_path)``.

    ``student_full_ce`` optionally supplies the logits used for CE at a
    different resolution (e.g. upsampled to the label map); the KD terms
    always use ``student_full``. Terms with zero weight are not evaluated.
    """
    ce = cross_entropy(student_full_ce if student_full_ce is not None else student_full, gt, ignore_index)
    if alpha:
        if teacher_full is None:
            raise ValueError("overall KD (alpha > 0) requires teacher logits")
        kd_o = kl_divergence(student_full, teacher_full)
    else:
        kd_o = _zero_like(ce)
    if beta:
        if teacher_group is None or student_path is None:
            raise ValueError("grouped KD requires teacher")
        kd_g = kl_divergence(student_path, teacher_group)
    else:
        kd_g = _zero_like(ce)
    total = ce
    if alpha:
        total = total + kd_o * alpha
    if beta:
        total = total + kd_g * beta
    return LossTerms(ce, kd_o, kd_g, alpha, beta, total)
