"""The distributed student model: m feature paths plus aggregation layers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .. import formats
from ..apm import METHODS, PhiLayer, aggregate, build_phis
from ..scheduler import ScheduleState, encode_frame, step_stream
from ..subnet import SubNet, SubNetConfig, build_subnets, load_parameters, predict, unique_parameters
from ..tensor import Parameter


@dataclass(frozen=True)
class TDNetConfig:
    m: int = 4
    feature_channels: int = 16
    depth: int = 2
    downsample_factor: int = 4
    num_classes: int = 6
    n: int = 4
    method: str = "apm"
    shared: bool = False
    phi_shared: bool = False
    pool: str = "max"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.pool not in ("max", "avg"):
            raise ValueError(f"pool must be 'max' or 'avg', got {self.pool!r}")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")

    @property
    def subnet(self) -> SubNetConfig:
        return SubNetConfig(3, self.feature_channels, self.depth, self.downsample_factor, self.num_classes)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "TDNetConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise KeyError(f"unknown model key {key!r}")
            kw[key] = _coerce(types[key], val)
        return cls(**kw)


def _coerce(type_name, val: str):
    t = type_name if isinstance(type_name, str) else type_name.__name__
    if t == "bool":
        if val.lower() in ("1", "true", "yes", "on"):
            return True
        if val.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {val!r}")
    if t == "int":
        return int(val)
    if t == "float":
        return float(val)
    return val


class TDNet:
    def __init__(self, config: TDNetConfig):
        self.config = config
        self.subnets: List[SubNet] = build_subnets(config.subnet, config.m, seed=config.seed,
                                                   shared=config.shared)
        sites = config.m - 1 if config.method in ("apm", "sta") else 0
        self.phis: List[PhiLayer] = build_phis(config.feature_channels, sites, shared=config.phi_shared)

    def parameters(self) -> List[Parameter]:
        params = unique_parameters(self.subnets)
        seen = {id(p) for p in params}
        for phi in self.phis:
            for p in phi.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        return params

    def window_forward(self, frames: Sequence, paths: Sequence[int], history_limit: Optional[int] = None):
        """Forward a window (oldest first) ending at the supervised frame.

        Returns ``(logits_full, logits_path, path_index)`` where ``logits_full``
        uses the aggregated value and ``logits_path`` the current path's own value.
        """
        cfg = self.config
        caches, maps = [], None
        for j, (frame, p) in enumerate(zip(frames, paths)):
            maps, cache = encode_frame(self.subnets[p], frame, j, cfg.n, cfg.method, cfg.pool)
            caches.append(cache)
        history = caches[:-1]
        if history_limit is not None:
            history = history[len(history) - history_limit:] if history_limit > 0 else []
        net = self.subnets[paths[-1]]
        merged = aggregate(cfg.method, maps, history, self.phis)
        return predict(net, merged), predict(net, maps.v), paths[-1]

    def new_stream(self, order=None) -> ScheduleState:
        return ScheduleState(self.config.m, order=order)

    def step(self, state: ScheduleState, frame, history_limit: Optional[int] = None,
             upsample: bool = True) -> np.ndarray:
        return step_stream(state, self.subnets, self.phis, frame, self.config.n, self.config.method,
                           self.config.pool, history_limit=history_limit, upsample=upsample)

    def segment_clip(self, frames: Sequence, order=None, history_limit: Optional[int] = None) -> List[np.ndarray]:
        state = self.new_stream(order)
        return [self.step(state, f, history_limit).argmax(axis=0) for f in frames]

    # -- persistence ---------------------------------------------------------
    def save(self, path) -> Path:
        path = Path(path)
        formats.write_checkpoint(path, {p.name: p.data for p in self.parameters()})
        path.with_suffix(".cfg").write_text(self.config.to_text())
        return path

    @classmethod
    def load(cls, path) -> "TDNet":
        path = Path(path)
        cfg_path = path.with_suffix(".cfg")
        if not cfg_path.exists():
            raise FileNotFoundError(f"model config sidecar {cfg_path} not found")
        model = cls(TDNetConfig.from_text(cfg_path.read_text()))
        load_parameters(model.parameters(), formats.read_checkpoint(path))
        return model

    def state_arrays(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}
