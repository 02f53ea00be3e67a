"""Cross-frame feature aggregation.

Three ways of merging the current frame's value map with cached history:

* ``apm``: attention propagation. History maps are pooled by stride ``n``;
  attention is computed between neighbouring frames only and the aggregated
  value is carried forward frame by frame, ending in a full-resolution merge
  at the current frame.
* ``sta``: full-resolution attention from the current frame to every history
  frame (the expensive reference).
* ``add``: plain summation, no motion compensation.

MAC sites are labelled ``final``, ``prop<d>`` and ``sta<d>`` where ``d`` is the
distance in frames from the current frame, each split into ``qk`` (affinity
product), ``av`` (value aggregation) and ``phi`` (1x1 output conv).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .subnet import Conv, QKVMaps
from .tensor import (ShapeError, Tensor, avgpool2d, mac_site, matmul,
                     maxpool2d, mul, reshape, softmax_rows, transpose)

METHODS = ("apm", "sta", "add")


class PhiLayer(Conv):
    """1x1 conv C->C applied to an attention output; zero-initialised."""

    def __init__(self, name: str, channels: int, rng: Optional[np.random.Generator] = None,
                 zero: bool = True):
        super().__init__(name, channels, channels, 1, rng or np.random.default_rng(0), zero=zero)


def build_phis(channels: int, count: int, shared: bool = False, prefix: str = "phi",
               seed: int = 0, zero: bool = True) -> List[PhiLayer]:
    """``count`` merge-site layers; index 0 is the final merge, index d the site d frames back."""
    rng = np.random.default_rng(seed)
    if count <= 0:
        return []
    if shared:
        layer = PhiLayer(f"{prefix}.shared", channels, rng, zero=zero)
        return [layer] * count
    return [PhiLayer(f"{prefix}.{d}", channels, rng, zero=zero) for d in range(count)]


@dataclass
class AffinityMatrix:
    weights: Tensor
    scale: float

    @property
    def shape(self) -> tuple:
        return self.weights.shape


@dataclass
class FrameCache:
    """Pooled query/key/value maps of one past frame, plus full maps for the baselines."""

    q_ds: Tensor
    k_ds: Tensor
    v_ds: Tensor
    frame_index: int
    stride: int
    full: Optional[QKVMaps] = field(default=None, repr=False)


def _flat(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return x
    return reshape(x, (x.shape[0], x.shape[1] * x.shape[2]))


def affinity(q: Tensor, k: Tensor) -> AffinityMatrix:
    """Row-softmax of ``q^T k / sqrt(d_k)``; maps may be ``[d_k,A]`` or ``[d_k,H,W]``."""
    if q.shape[0] != k.shape[0]:
        raise ShapeError(f"affinity d_k mismatch: query has {q.shape[0]}, key has {k.shape[0]}")
    d_k = q.shape[0]
    scale = 1.0 / math.sqrt(d_k)
    with mac_site("qk"):
        logits = matmul(transpose(_flat(q)), _flat(k))
    return AffinityMatrix(softmax_rows(mul(logits, scale)), scale)


def attend(aff: AffinityMatrix, v: Tensor, out_hw: tuple) -> Tensor:
    """Aggregate ``v`` ([C,h,w]) with affinity rows; returns ``[C, *out_hw]``."""
    vf = _flat(v)
    if vf.shape[1] != aff.shape[1]:
        raise ShapeError(f"value has {vf.shape[1]} positions but affinity has {aff.shape[1]} key columns")
    with mac_site("av"):
        out = matmul(vf, transpose(aff.weights))
    return reshape(out, (v.shape[0], *out_hw))


def _apply_phi(phi: PhiLayer, x: Tensor) -> Tensor:
    with mac_site("phi"):
        return phi(x)


def sta_merge(current: QKVMaps, previous: Sequence[QKVMaps], phis: Sequence[PhiLayer]) -> Tensor:
    """Full-resolution merge: ``V_t + sum_p phi_p(Aff_p V_p)``; ``previous`` is oldest first."""
    out = current.v
    hw = current.v.shape[1:]
    if len(phis) < len(previous):
        raise ValueError(f"need {len(previous)} phi layers, got {len(phis)}")
    for d in range(1, len(previous) + 1):
        prev = previous[-d]
        if prev.k.shape[1:] != current.q.shape[1:] or prev.v.shape[1:] != hw:
            raise ShapeError(f"sta_merge extent mismatch: current {current.q.shape[1:]}, "
                             f"history frame {prev.frame_index} {prev.k.shape[1:]}")
        with mac_site(f"sta{d}"):
            aff = affinity(current.q, prev.k)
            out = out + _apply_phi(phis[d - 1], attend(aff, prev.v, hw))
    return out


def pool(x: Tensor, n: int, mode: str = "max") -> Tensor:
    if mode == "max":
        return maxpool2d(x, n)
    if mode == "avg":
        return avgpool2d(x, n)
    raise ValueError(f"unknown pooling mode {mode!r}")


def downsample_cache(maps: QKVMaps, n: int, mode: str = "max", keep_full: bool = False) -> FrameCache:
    if n < 1:
        raise ShapeError(f"stride n must be >= 1, got {n}")
    h, w = maps.v.shape[1:]
    if n > h or n > w:
        raise ShapeError(f"stride n={n} exceeds spatial extent {h}x{w}")
    return FrameCache(pool(maps.q, n, mode), pool(maps.k, n, mode), pool(maps.v, n, mode),
                      maps.frame_index, n, maps if keep_full else None)


def propagate_step(cache_p: FrameCache, k_prev: Tensor, v_prev: Tensor, phi: PhiLayer) -> Tensor:
    """``v'_p = phi(Softmax(q_p k_{p-1}^T / sqrt(d_k)) v'_{p-1}) + v_p`` on pooled maps."""
    hw = cache_p.v_ds.shape[1:]
    if v_prev.shape[1:] != k_prev.shape[1:]:
        raise ShapeError(f"propagated value extent {v_prev.shape[1:]} != key extent {k_prev.shape[1:]}")
    if v_prev.shape[0] != cache_p.v_ds.shape[0]:
        raise ShapeError(f"propagated value has C={v_prev.shape[0]}, cache has C={cache_p.v_ds.shape[0]}")
    aff = affinity(cache_p.q_ds, k_prev)
    return _apply_phi(phi, attend(aff, v_prev, hw)) + cache_p.v_ds


def final_merge(current: QKVMaps, v_chain: Tensor, k_last: Tensor, phi: PhiLayer) -> Tensor:
    """``V'_t = phi(Softmax(Q_t k_{t-1}^T / sqrt(d_k)) v'_{t-1}) + V_t``: full-res queries, pooled keys."""
    if v_chain.shape[1:] != k_last.shape[1:]:
        raise ShapeError(f"value chain extent {v_chain.shape[1:]} != key extent {k_last.shape[1:]}")
    hw = current.v.shape[1:]
    aff = affinity(current.q, k_last)
    return _apply_phi(phi, attend(aff, v_chain, hw)) + current.v


def apm_merge(current: QKVMaps, history: Sequence[FrameCache], phis: Sequence[PhiLayer]) -> Tensor:
    """Run the propagation chain over ``history`` (oldest first) and merge into the current frame.

    The oldest cached frame seeds the chain with its pooled value alone.
    """
    if not history:
        return current.v
    if len(phis) < len(history):
        raise ValueError(f"need {len(history)} phi layers, got {len(phis)}")
    r = len(history)
    v_chain = history[0].v_ds
    for i in range(1, r):
        d = r - i
        with mac_site(f"prop{d}"):
            v_chain = propagate_step(history[i], history[i - 1].k_ds, v_chain, phis[d])
    with mac_site("final"):
        return final_merge(current, v_chain, history[-1].k_ds, phis[0])


def _resize_like(v: Tensor, hw: tuple) -> Tensor:
    if v.shape[1:] == hw:
        return v
    n = v.shape[1] // hw[0]
    if n < 1 or v.shape[1] // n != hw[0] or v.shape[2] // n != hw[1]:
        raise ShapeError(f"cannot resize value map {v.shape[1:]} to {hw}")
    return maxpool2d(v, n)


def add_merge(current: QKVMaps, previous: Sequence) -> Tensor:
    """Sum of current and history value maps, with no alignment."""
    out = current.v
    hw = current.v.shape[1:]
    for prev in previous:
        v = prev.v if isinstance(prev, QKVMaps) else (prev.full.v if prev.full is not None else prev.v_ds)
        out = out + _resize_like(v, hw)
    return out


def aggregate(method: str, current: QKVMaps, history: Sequence[FrameCache],
              phis: Sequence[PhiLayer]) -> Tensor:
    if method == "apm":
        return apm_merge(current, history, phis)
    if method == "sta":
        return sta_merge(current, [_full(c) for c in history], phis)
    if method == "add":
        return add_merge(current, history)
    raise ValueError(f"unknown aggregation method {method!r}; expected one of {METHODS}")


def _full(cache: FrameCache) -> QKVMaps:
    if cache.full is None:
        raise ValueError(f"frame {cache.frame_index} was cached without full-resolution maps")
    return cache.full


def count_macs(m: int, n: int, H: int, W: int, d_k: int, C: int, method: str = "apm",
               history: Optional[int] = None) -> Dict[str, int]:
    """Exact MAC ledger of one aggregation, keyed like the instrumented :func:`mac_site` labels.

    ``history`` defaults to the steady-state ``m - 1`` cached frames.
    """
    for name, val in (("m", m), ("n", n), ("H", H), ("W", W), ("d_k", d_k), ("C", C)):
        if val < 1:
            raise ValueError(f"{name} must be positive, got {val}")
    r = m - 1 if history is None else history
    HW = H * W
    hw = (H // n) * (W // n)
    ledger: Dict[str, int] = {}
    if method == "apm":
        if r >= 1:
            for d in range(r - 1, 0, -1):
                ledger[f"prop{d}/qk"] = hw * d_k * hw
                ledger[f"prop{d}/av"] = C * hw * hw
                ledger[f"prop{d}/phi"] = C * C * hw
            ledger["final/qk"] = HW * d_k * hw
            ledger["final/av"] = C * hw * HW
            ledger["final/phi"] = C * C * HW
    elif method == "sta":
        for d in range(1, r + 1):
            ledger[f"sta{d}/qk"] = HW * d_k * HW
            ledger[f"sta{d}/av"] = C * HW * HW
            ledger[f"sta{d}/phi"] = C * C * HW
    elif method != "add":
        raise ValueError(f"unknown aggregation method {method!r}")
    return ledger


def query_key_macs(ledger: Dict[str, int]) -> int:
    return sum(v for k, v in ledger.items() if k.endswith("/qk"))


def effective_attention(current: QKVMaps, history: Sequence[FrameCache]) -> List[np.ndarray]:
    """Attention weights from each current-frame pixel to each history frame's pooled pixels.

    Deeper frames are reached through the product of the chain's affinity
    matrices, so every returned ``[HW, hw]`` matrix is row-stochastic. The list
    is ordered by distance: element 0 is frame t-1.
    """
    if not history:
        return []
    out = []
    rows = affinity(current.q, history[-1].k_ds).weights.data
    out.append(rows)
    for i in range(len(history) - 1, 0, -1):
        step = affinity(history[i].q_ds, history[i - 1].k_ds).weights.data
        rows = rows @ step
        out.append(rows)
    return out


def affinity_rows_csv(current: QKVMaps, history: Sequence[FrameCache], query_y: int, query_x: int) -> str:
    """CSV dump ``query_y,query_x,key_frame,key_y,key_x,weight`` for one query pixel."""
    H, W = current.q.shape[1:]
    if not (0 <= query_y < H and 0 <= query_x < W):
        raise IndexError(f"query pixel ({query_y},{query_x}) outside feature map {H}x{W}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["query_y", "query_x", "key_frame", "key_y", "key_x", "weight"])
    qi = query_y * W + query_x
    for d, mat in enumerate(effective_attention(current, history), start=1):
        cache = history[-d]
        h, w = cache.k_ds.shape[1:]
        row = mat[qi]
        for j, wt in enumerate(row):
            writer.writerow([query_y, query_x, cache.frame_index, j // w, j % w, f"{wt:.12g}"])
    return buf.getvalue()
