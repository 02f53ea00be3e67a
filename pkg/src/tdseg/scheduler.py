"""Streaming engine: circular path assignment, history ring buffer and MAC accounting."""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .apm import FrameCache, PhiLayer, aggregate, downsample_cache
from .subnet import SubNet, encode_qkv, forward_features, predict
from .tensor import mac_ledger, mac_site, no_grad, upsample_nearest


@dataclass
class LatencyRecord:
    label: str
    mac_counts: List[int] = field(default_factory=list)

    def to_csv(self) -> str:
        return latency_csv([self])


def latency_csv(records: Sequence[LatencyRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame_index", "mac_count", "schedule_label"])
    for rec in records:
        for i, c in enumerate(rec.mac_counts):
            writer.writerow([i, c, rec.label])
    return buf.getvalue()


class ScheduleState:
    """Per-stream state: which path runs next and the last ``m - 1`` frame caches.

    ``order`` maps window slot ``t mod m`` to a path index; the default is the
    identity so frame ``t`` runs path ``t mod m``. Rotating it gives the other
    circular phases.
    """

    def __init__(self, m: int, order: Optional[Sequence[int]] = None, label: str = "tdnet"):
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        self.m = m
        self.order = tuple(range(m)) if order is None else tuple(order)
        if sorted(self.order) != list(range(m)):
            raise ValueError(f"order {self.order} is not a permutation of range({m})")
        self.ring: deque = deque(maxlen=m - 1)
        self.frame_counter = 0
        self.record = LatencyRecord(label)
        self.last_ledger: dict = {}

    @property
    def next_index(self) -> int:
        return assign_subnet(self, self.frame_counter)

    def history(self, limit: Optional[int] = None) -> List[FrameCache]:
        items = list(self.ring)
        if limit is not None:
            items = items[len(items) - limit:] if limit > 0 else []
        return items


def assign_subnet(state: ScheduleState, t: int) -> int:
    if t < 0:
        raise ValueError(f"frame index must be >= 0, got {t}")
    return state.order[t % state.m]


def phase_orders(m: int) -> List[tuple]:
    """The ``m`` circular rotations of the identity order."""
    base = list(range(m))
    return [tuple(base[s:] + base[:s]) for s in range(m)]


def encode_frame(net: SubNet, frame, frame_index: int, n: int, method: str,
                 pool_mode: str = "max") -> tuple:
    """Trunk + Q/K/V encoders for one frame; returns ``(maps, cache)``."""
    feats = forward_features(net, frame)
    maps = encode_qkv(net, feats, frame_index)
    cache = downsample_cache(maps, n if method == "apm" else 1, pool_mode, keep_full=method != "apm")
    return maps, cache


def step_stream(state: ScheduleState, subnets: Sequence[SubNet], phis: Sequence[PhiLayer], frame,
                n: int, method: str = "apm", pool_mode: str = "max",
                history_limit: Optional[int] = None, upsample: bool = True) -> np.ndarray:
    """Segment the next frame of a stream; returns logits ``[K,H0,W0]`` (or feature resolution).

    Exactly one path's trunk runs. History is whatever the ring holds, so the
    first ``m - 1`` frames aggregate over a partial window.
    """
    t = state.frame_counter
    idx = assign_subnet(state, t)
    net = subnets[idx]
    with no_grad(), mac_ledger() as ledger:
        maps, cache = encode_frame(net, frame, t, n, method, pool_mode)
        history = state.history(history_limit)
        with mac_site("agg"):
            merged = aggregate(method, maps, history, phis)
        logits = predict(net, merged).data
    state.ring.append(cache)
    state.frame_counter += 1
    state.last_ledger = dict(ledger)
    state.record.mac_counts.append(sum(ledger.values()))
    if upsample:
        return upsample_nearest(logits, net.config.downsample_factor)
    return logits


def keyframe_schedule_sim(cost_deep: int, cost_light: int, period: int, frames: int,
                          label: str = "keyframe") -> LatencyRecord:
    """Synthetic per-frame costs of a keyframe regime: deep model every ``period`` frames."""
    if period < 1:
        raise ValueError(f"period must be >= 1, got {period}")
    return LatencyRecord(label, [cost_deep if i % period == 0 else cost_light for i in range(frames)])


def latency_stats(record: LatencyRecord) -> dict:
    costs = np.asarray(record.mac_counts, dtype=np.float64)
    if costs.size == 0:
        raise ValueError("latency record is empty")
    mean = float(costs.mean())
    mx = float(costs.max())
    return {"mean": mean, "max": mx, "max_over_mean": mx / mean if mean else math.nan,
            "stddev": float(costs.std())}
