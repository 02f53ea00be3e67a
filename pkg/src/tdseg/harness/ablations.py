"""Ablation sweeps and profiling, each emitting a deterministic CSV.

Every sweep trains one model per (setting, seed) with identical budgets and
evaluates on a fixed set of held-out clips. Rows are settings; per-seed mIoU
columns are followed by their median, which is what directional claims use.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import formats
from ..apm import count_macs, query_key_macs
from ..config import RunConfig
from ..distill import TeacherModel
from ..scheduler import LatencyRecord, keyframe_schedule_sim, latency_stats
from ..subnet import parameter_count
from .evaluate import evaluate_miou
from .model import TDNet
from .train import eval_clips, train, train_teacher

EvalSpec = Tuple[str, Optional[int], int]  # (column key, history_limit, gap)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def rows_to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


# -- single runs ---------------------------------------------------------------

def load_teacher(path, cfg: RunConfig) -> TeacherModel:
    teacher = TeacherModel(cfg.teacher())
    arrays = formats.read_checkpoint(path)
    for p in teacher.parameters():
        if p.name not in arrays:
            raise KeyError(f"teacher checkpoint {path} lacks {p.name!r}")
        p.data[...] = arrays[p.name]
    return teacher


def fit_teacher(cfg: RunConfig, seed: int) -> TeacherModel:
    teacher = TeacherModel(cfg.teacher(), seed=seed)
    tc = replace(cfg.train(seed), iters=cfg.teacher_section().iters)
    train_teacher(teacher, cfg.data(seed), tc, cfg.teacher_optim())
    return teacher


def save_teacher(teacher: TeacherModel, path) -> Path:
    formats.write_checkpoint(path, {p.name: p.data for p in teacher.parameters()})
    return Path(path)


def fit_model(cfg: RunConfig, seed: int, teacher: Optional[TeacherModel] = None) -> TDNet:
    model = TDNet(cfg.model(seed))
    tc = cfg.train(seed)
    if (tc.alpha or tc.beta) and teacher is None:
        path = cfg.teacher_section().checkpoint
        if not path:
            raise ValueError("grouped KD requires teacher" if tc.beta else "overall KD requires teacher")
        teacher = load_teacher(path, cfg)
    train(model, cfg.data(seed), tc, cfg.optim(), teacher=teacher)
    return model


def held_out_clips(cfg: RunConfig, length: Optional[int] = None):
    ev = cfg.eval()
    data = replace(cfg.data(), clip_length=max(ev.length, cfg.model().m))
    return eval_clips(data, ev.clips, length or data.clip_length, seed=ev.seed)


def _job(args) -> Dict[str, float]:
    values, seed, specs, clip_length, teacher_path = args
    cfg = RunConfig(values)
    teacher = load_teacher(teacher_path, cfg) if teacher_path else None
    model = fit_model(cfg, seed, teacher)
    clips = held_out_clips(cfg, clip_length)
    return {key: evaluate_miou(model, clips, history_limit=limit, gap=gap).miou for key, limit, gap in specs}


def run_jobs(jobs: Sequence[tuple], workers: int = 1) -> List[Dict[str, float]]:
    """Run ``_job`` argument tuples, in parallel when ``workers > 1``; order is preserved."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_job, jobs))
    return [_job(j) for j in jobs]


def _seed_columns(seeds: Sequence[int]) -> List[str]:
    return [f"miou_s{s}" for s in seeds] + ["miou_median"]


def _seed_values(values: Sequence[float]) -> list:
    return list(values) + [float(np.median(values))]


def _attention_macs(cfg: RunConfig, method: Optional[str] = None, n: Optional[int] = None) -> Dict[str, int]:
    m = cfg.model()
    d = cfg.data()
    f = m.downsample_factor
    return count_macs(m.m, n or m.n, d.height // f, d.width // f, m.subnet.d_k, m.feature_channels,
                      method or m.method)


# -- sweeps --------------------------------------------------------------------

def ablate_aggregation(cfg: RunConfig, workers: int = 1) -> str:
    seeds = cfg.seeds
    methods = ("add", "sta", "apm")
    jobs = [(cfg.with_values(model__method=mt).values, s, [("miou", None, 1)], None, None)
            for mt in methods for s in seeds]
    res = run_jobs(jobs, workers)
    rows = []
    for i, mt in enumerate(methods):
        ledger = _attention_macs(cfg, mt)
        vals = [r["miou"] for r in res[i * len(seeds):(i + 1) * len(seeds)]]
        rows.append([mt, sum(ledger.values()), query_key_macs(ledger)] + _seed_values(vals))
    return rows_to_csv(["method", "attention_macs", "query_key_macs"] + _seed_columns(seeds), rows)


def sweep_stride(cfg: RunConfig, strides: Sequence[int], workers: int = 1) -> str:
    seeds = cfg.seeds
    jobs = [(cfg.with_values(model__n=n, model__method="apm").values, s, [("miou", None, 1)], None, None)
            for n in strides for s in seeds]
    res = run_jobs(jobs, workers)
    rows = []
    for i, n in enumerate(strides):
        ledger = _attention_macs(cfg, "apm", n)
        vals = [r["miou"] for r in res[i * len(seeds):(i + 1) * len(seeds)]]
        rows.append([n, sum(ledger.values()), ledger.get("final/qk", 0)] + _seed_values(vals))
    return rows_to_csv(["n", "attention_macs", "final_qk_macs"] + _seed_columns(seeds), rows)


def sweep_motion_gap(cfg: RunConfig, gaps: Sequence[int], methods: Sequence[str] = ("apm", "add"),
                     workers: int = 1) -> str:
    """Train once per (method, seed), then stream clips subsampled at each gap."""
    seeds = cfg.seeds
    m = cfg.model().m
    length = max(cfg.eval().length, m * max(gaps))
    specs = [(f"gap{g}", None, g) for g in gaps]
    jobs = [(cfg.with_values(model__method=mt).values, s, specs, length, None) for mt in methods for s in seeds]
    res = run_jobs(jobs, workers)
    rows = []
    for g in gaps:
        row = [g]
        for i, _ in enumerate(methods):
            row.append(float(np.median([r[f"gap{g}"] for r in res[i * len(seeds):(i + 1) * len(seeds)]])))
        rows.append(row)
    header = ["gap"] + [f"miou_{mt}" for mt in methods]
    # per-seed detail keeps the CSV self-contained for median checks
    for i, mt in enumerate(methods):
        for j, s in enumerate(seeds):
            header_key = f"{mt}_s{s}"
            header.append(header_key)
            for row, g in zip(rows, gaps):
                row.append(res[i * len(seeds) + j][f"gap{g}"])
    return rows_to_csv(header, rows)


def ablate_paths(cfg: RunConfig, workers: int = 1) -> str:
    """Drop the oldest history paths one at a time: ``m`` paths, then ``m-1``, ... down to 1."""
    seeds = cfg.seeds
    m = cfg.model().m
    specs = [(f"keep{k}", k - 1, 1) for k in range(m, 0, -1)]
    res = run_jobs([(cfg.values, s, specs, None, None) for s in seeds], workers)
    rows = [[k] + _seed_values([r[f"keep{k}"] for r in res]) for k in range(m, 0, -1)]
    return rows_to_csv(["paths_kept"] + _seed_columns(seeds), rows)


def ablate_kd(cfg: RunConfig, out_dir, workers: int = 1, alpha: float = 0.5, beta: float = 0.5) -> str:
    """CE only, CE + overall KD, CE + overall + grouped KD, with one teacher per seed."""
    seeds = cfg.seeds
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shared_path = cfg.teacher_section().checkpoint
    teacher_paths = {}
    for s in seeds:
        if shared_path:
            teacher_paths[s] = shared_path
        else:
            teacher_paths[s] = str(save_teacher(fit_teacher(cfg, s), out_dir / f"teacher_s{s}.ckpt"))
    variants = [("ce", 0.0, 0.0), ("ce+overall", alpha, 0.0), ("ce+overall+grouped", alpha, beta)]
    jobs = [(cfg.with_values(train__alpha=a, train__beta=b).values, s, [("miou", None, 1)], None,
             teacher_paths[s] if (a or b) else None) for _, a, b in variants for s in seeds]
    res = run_jobs(jobs, workers)
    rows = []
    for i, (name, a, b) in enumerate(variants):
        vals = [r["miou"] for r in res[i * len(seeds):(i + 1) * len(seeds)]]
        rows.append([name, a, b] + _seed_values(vals))
    return rows_to_csv(["loss", "alpha", "beta"] + _seed_columns(seeds), rows)


def ablate_shared(cfg: RunConfig, workers: int = 1, include_single: bool = False) -> str:
    """Shared vs independent paths (optionally the one-path baseline too)."""
    seeds = cfg.seeds
    variants = [("shared", {"model__shared": True}), ("independent", {"model__shared": False})]
    if include_single:
        variants.append(("single", {"model__m": 1, "model__shared": False}))
    jobs = [(cfg.with_values(**kw).values, s, [("miou", None, 1)], None, None) for _, kw in variants for s in seeds]
    res = run_jobs(jobs, workers)
    rows = []
    for i, (name, kw) in enumerate(variants):
        model = TDNet(RunConfig(cfg.with_values(**kw).values).model(0))
        trunk = sum(p.data.size for p in {id(p): p for n in model.subnets for c in n.trunk
                                          for p in c.parameters()}.values())
        vals = [r["miou"] for r in res[i * len(seeds):(i + 1) * len(seeds)]]
        rows.append([name, trunk, parameter_count(model.subnets)] + _seed_values(vals))
    return rows_to_csv(["variant", "trunk_params", "subnet_params"] + _seed_columns(seeds), rows)


# -- profiling -------------------------------------------------------------------

def profile(cfg: RunConfig, frames: int = 12, cost_deep: int = 575, cost_light: int = 156,
            period: int = 5, keyframe_frames: int = 10) -> Tuple[str, str]:
    """Per-frame MACs of an untrained TDNet stream and of a keyframe regime.

    Returns ``(per_frame_csv, summary_csv)``. The summary reports steady-state
    statistics for the TDNet stream (frames after the warm-up) and the
    attention-site breakdown from the closed-form ledger.
    """
    model = TDNet(cfg.model(cfg.seeds[0]))
    data = replace(cfg.data(cfg.seeds[0]), clip_length=frames)
    clip = eval_clips(data, 1, frames, seed=cfg.eval().seed)[0]
    state = model.new_stream()
    for f in clip.frames:
        model.step(state, f)
    warm = model.config.m - 1
    tdnet = LatencyRecord("tdnet", state.record.mac_counts)
    steady = LatencyRecord("tdnet_steady", state.record.mac_counts[warm:])
    key = keyframe_schedule_sim(cost_deep, cost_light, period, keyframe_frames)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame_index", "mac_count", "schedule_label"])
    for rec in (tdnet, key):
        for i, c in enumerate(rec.mac_counts):
            writer.writerow([i, c, rec.label])
    summary = []
    for rec in (steady, key):
        st = latency_stats(rec)
        summary.append([rec.label, st["mean"], st["max"], st["max_over_mean"], st["stddev"]])
    text = rows_to_csv(["schedule_label", "mean", "max", "max_over_mean", "stddev"], summary)
    sites = _attention_macs(cfg)
    text += "\n" + rows_to_csv(["site", "macs"], sorted(sites.items()))
    return buf.getvalue(), text
