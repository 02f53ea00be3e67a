"""Shallow feature paths with query/key/value encoders and prediction heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import formats
from .tensor import Parameter, ShapeError, Tensor, conv2d, conv_output_size, mac_site, relu


@dataclass(frozen=True)
class SubNetConfig:
    in_channels: int = 3
    feature_channels: int = 16
    depth: int = 2
    downsample_factor: int = 4
    num_classes: int = 6

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError(f"downsample_factor must be a power of 2, got {f}")
        if self.stride_stages > self.depth:
            raise ValueError(f"downsample_factor {f} needs {self.stride_stages} stride-2 blocks "
                             f"but depth is {self.depth}")
        if self.feature_channels < 1 or self.num_classes < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def d_k(self) -> int:
        return max(1, math.ceil(self.feature_channels / 8))

    @property
    def stride_stages(self) -> int:
        return int(math.log2(self.downsample_factor))


def he_normal(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv:
    """A convolution's weight/bias pair plus its geometry."""

    def __init__(self, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, zero: bool = False):
        w = np.zeros((c_out, c_in, k, k)) if zero else he_normal(rng, (c_out, c_in, k, k))
        self.weight = Parameter(w, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), name=f"{name}.bias")
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def macs(self, h: int, w: int) -> int:
        ho = conv_output_size(h, self.k, self.stride, self.padding)
        wo = conv_output_size(w, self.k, self.stride, self.padding)
        return self.c_out * self.c_in * self.k * self.k * ho * wo


def build_trunk(prefix: str, in_channels: int, channels: int, depth: int, stride_stages: int,
                rng: np.random.Generator) -> List[Conv]:
    layers = []
    c_in = in_channels
    for i in range(depth):
        layers.append(Conv(f"{prefix}.{i}", c_in, channels, 3, rng, stride=2 if i < stride_stages else 1))
        c_in = channels
    return layers


def run_trunk(layers: Sequence[Conv], x: Tensor) -> Tensor:
    with mac_site("trunk"):
        for layer in layers:
            x = relu(layer(x))
    return x


def trunk_macs(layers: Sequence[Conv], h: int, w: int) -> int:
    total = 0
    for layer in layers:
        total += layer.macs(h, w)
        h = conv_output_size(h, layer.k, layer.stride, layer.padding)
        w = conv_output_size(w, layer.k, layer.stride, layer.padding)
    return total


@dataclass
class QKVMaps:
    q: Tensor
    k: Tensor
    v: Tensor
    frame_index: int = 0

    def __post_init__(self):
        if not (self.q.shape[1:] == self.k.shape[1:] == self.v.shape[1:]):
            raise ShapeError(f"q/k/v spatial extents differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        if self.q.shape[0] != self.k.shape[0]:
            raise ShapeError(f"q has d_k={self.q.shape[0]} but k has d_k={self.k.shape[0]}")


class SubNet:
    """One feature path: conv trunk, 1x1 Q/K/V encoders and a 1x1 class head."""

    def __init__(self, config: SubNetConfig, seed: int = 0, name: str = "subnet"):
        self.config = config
        self.name = name
        rng = np.random.default_rng(seed)
        c = config.feature_channels
        self.trunk = build_trunk(f"{name}.trunk", config.in_channels, c, config.depth,
                                 config.stride_stages, rng)
        self.encode_q = Conv(f"{name}.encode_q", c, config.d_k, 1, rng)
        self.encode_k = Conv(f"{name}.encode_k", c, config.d_k, 1, rng)
        self.encode_v = Conv(f"{name}.encode_v", c, c, 1, rng)
        self.head = Conv(f"{name}.head", c, config.num_classes, 1, rng)

    def layers(self) -> List[Conv]:
        return [*self.trunk, self.encode_q, self.encode_k, self.encode_v, self.head]

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def forward_features(self, frame) -> Tensor:
        return forward_features(self, frame)

    def encode_qkv(self, features: Tensor, frame_index: int = 0) -> QKVMaps:
        return encode_qkv(self, features, frame_index)

    def predict(self, merged_value: Tensor) -> Tensor:
        return predict(self, merged_value)

    def encode_macs(self, h: int, w: int) -> int:
        return sum(c.macs(h, w) for c in (self.encode_q, self.encode_k, self.encode_v))


def forward_features(net: SubNet, frame) -> Tensor:
    x = frame if isinstance(frame, Tensor) else Tensor(frame)
    f = net.config.downsample_factor
    if x.ndim != 3 or x.shape[0] != net.config.in_channels:
        raise ShapeError(f"frame must be [{net.config.in_channels},H,W], got shape {x.shape}")
    if x.shape[1] % f or x.shape[2] % f:
        raise ShapeError(f"frame extent {x.shape[1]}x{x.shape[2]} not divisible by downsample factor {f}")
    return run_trunk(net.trunk, x)


def encode_qkv(net: SubNet, features: Tensor, frame_index: int = 0) -> QKVMaps:
    c = net.config.feature_channels
    if features.ndim != 3 or features.shape[0] != c:
        raise ShapeError(f"features must have C={c} channels, got shape {features.shape}")
    with mac_site("encode"):
        return QKVMaps(net.encode_q(features), net.encode_k(features), net.encode_v(features), frame_index)


def predict(net: SubNet, merged_value: Tensor) -> Tensor:
    c = net.config.feature_channels
    if merged_value.ndim != 3 or merged_value.shape[0] != c:
        raise ShapeError(f"merged value must have C={c} channels, got shape {merged_value.shape}")
    with mac_site("head"):
        return net.head(merged_value)


def build_subnets(config: SubNetConfig, m: int, seed: int = 0, shared: bool = False) -> List[SubNet]:
    """``m`` feature paths from independent seeds, or one path aliased ``m`` times."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if shared:
        net = SubNet(config, seed=seed * 1000 + 1, name="path0")
        return [net] * m
    return [SubNet(config, seed=seed * 1000 + 1 + i, name=f"path{i}") for i in range(m)]


def unique_parameters(nets: Iterable) -> List[Parameter]:
    seen, out = set(), []
    for net in nets:
        for p in net.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


def parameter_count(nets: Iterable) -> int:
    return sum(p.size for p in unique_parameters(nets))


def save_parameters(path, params: Iterable[Parameter], extra: Optional[Dict[str, np.ndarray]] = None) -> None:
    named = {p.name: p.data for p in params}
    if extra:
        named.update(extra)
    formats.write_checkpoint(path, named)


def load_parameters(params: Iterable[Parameter], stored: Dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in stored:
            raise KeyError(f"checkpoint lacks parameter {p.name!r}")
        arr = stored[p.name]
        if arr.shape != p.shape:
            raise ShapeError(f"checkpoint shape {arr.shape} for {p.name!r} != model shape {p.shape}")
        p.data[...] = arr
