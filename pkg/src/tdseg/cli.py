"""Command-line front end: train, eval, profile, ablate, dump-attention, generate.

Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import formats
from .apm import affinity_rows_csv
from .config import ConfigError, RunConfig
from .harness import ablations
from .harness.data import load_clip, save_clip
from .harness.evaluate import evaluate_miou
from .harness.model import TDNet
from .harness.train import TrainingDiverged, eval_clips, train
from .scheduler import encode_frame
from .tensor import NonFiniteError, no_grad

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def _int_list(text: str) -> List[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _pixel(text: str):
    vals = _int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected Y,X, got {text!r}")
    return tuple(vals)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable; wins over --config)")
        p.add_argument("--out", help="output directory (default: $TDSEG_OUT, then run.out_dir)")

    p = sub.add_parser("train", help="train one model per seed")
    common(p)
    p.add_argument("--teacher-only", action="store_true", help="train and save only the teacher model")

    p = sub.add_parser("eval", help="streaming mIoU of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--order-sweep", action="store_true", help="score every circular phase order")
    p.add_argument("--exhaustive", action="store_true", help="with --order-sweep, score all m! orders (m <= 4)")
    p.add_argument("--dataset-seed", type=int, help="held-out clip seed (default eval.seed)")

    p = sub.add_parser("profile", help="per-frame MAC ledger vs a keyframe schedule")
    common(p)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--cost-deep", type=int, default=575)
    p.add_argument("--cost-light", type=int, default=156)
    p.add_argument("--period", type=int, default=5)

    p = sub.add_parser("ablate", help="run an ablation sweep")
    p.add_argument("which", choices=["aggregation", "stride", "motion", "paths", "kd", "shared"])
    common(p)
    p.add_argument("--strides", type=_int_list, default=[1, 2, 4, 12])
    p.add_argument("--gaps", type=_int_list, default=[1, 2, 4, 6])
    p.add_argument("--jobs", type=int, default=1, help="worker processes; each run stays single-threaded")
    p.add_argument("--with-single", action="store_true", help="shared: add the one-path baseline row")

    p = sub.add_parser("dump-attention", help="affinity rows of one query pixel")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", help="clip directory (default: first held-out clip)")
    p.add_argument("--frame", type=int, help="frame to query (default: m-1)")
    p.add_argument("--query", type=_pixel, required=True, metavar="Y,X",
                   help="query pixel on the feature grid of the current frame")

    p = sub.add_parser("generate", help="write held-out clips to disk")
    common(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--length", type=int, default=8)
    return parser


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or os.environ.get("TDSEG_OUT") or cfg.run().out_dir
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    print(path)


def _persist_config(out: Path, cfg: RunConfig) -> None:
    resolved = cfg.with_values(run__out_dir=str(out))
    _write(out / "resolved.cfg", resolved.to_text())


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    if args.teacher_only:
        for s in cfg.seeds:
            teacher = ablations.fit_teacher(cfg, s)
            ablations.save_teacher(teacher, out / f"teacher_s{s}.ckpt")
            print(out / f"teacher_s{s}.ckpt")
        return EXIT_OK
    tc = cfg.train()
    teacher = None
    if tc.alpha or tc.beta:
        path = cfg.teacher_section().checkpoint
        if not path:
            raise UsageError("grouped KD requires teacher" if tc.beta else "overall KD requires teacher")
        teacher = ablations.load_teacher(path, cfg)
    for s in cfg.seeds:
        model = TDNet(cfg.model(s))
        result = train(model, cfg.data(s), cfg.train(s), cfg.optim(), teacher=teacher)
        model.save(out / f"model_s{s}.ckpt")
        print(out / f"model_s{s}.ckpt")
        _write(out / f"loss_s{s}.csv", result.loss_csv())
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    model = TDNet.load(args.checkpoint)
    ev = cfg.eval()
    data = replace(cfg.data(), num_classes=model.config.num_classes)
    clips = eval_clips(data, ev.clips, max(ev.length, model.config.m),
                       seed=ev.seed if args.dataset_seed is None else args.dataset_seed)
    report = evaluate_miou(model, clips, order_sweep=args.order_sweep, exhaustive=args.exhaustive, gap=ev.gap)
    rows = report.rows()
    header = list(rows[0])
    _write(out / "eval.csv", ablations.rows_to_csv(header, [[r[h] for h in header] for r in rows]))
    print(f"miou {report.miou:.6f} order_stddev {report.order_std:.6f}")
    return EXIT_OK


def cmd_profile(args, cfg: RunConfig, out: Path) -> int:
    per_frame, summary = ablations.profile(cfg, args.frames, args.cost_deep, args.cost_light, args.period)
    _write(out / "profile.csv", per_frame)
    _write(out / "profile_summary.csv", summary)
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, out: Path) -> int:
    jobs = max(1, args.jobs)
    if args.which == "aggregation":
        text = ablations.ablate_aggregation(cfg, jobs)
    elif args.which == "stride":
        text = ablations.sweep_stride(cfg, args.strides, jobs)
    elif args.which == "motion":
        text = ablations.sweep_motion_gap(cfg, args.gaps, workers=jobs)
    elif args.which == "paths":
        text = ablations.ablate_paths(cfg, jobs)
    elif args.which == "kd":
        text = ablations.ablate_kd(cfg, out, jobs)
    else:
        text = ablations.ablate_shared(cfg, jobs, include_single=args.with_single)
    _write(out / f"ablate_{args.which}.csv", text)
    return EXIT_OK


def cmd_dump_attention(args, cfg: RunConfig, out: Path) -> int:
    model = TDNet.load(args.checkpoint)
    if model.config.method != "apm":
        raise UsageError(f"dump-attention needs an apm model, checkpoint uses {model.config.method!r}")
    m = model.config.m
    if args.clip:
        clip = load_clip(args.clip)
    else:
        ev = cfg.eval()
        data = replace(cfg.data(), num_classes=model.config.num_classes)
        clip = eval_clips(data, 1, max(ev.length, m), seed=ev.seed)[0]
    t = m - 1 if args.frame is None else args.frame
    if not 0 <= t < len(clip.frames):
        raise UsageError(f"frame {t} outside clip of {len(clip.frames)} frames")
    state = model.new_stream()
    for frame in clip.frames[:t]:
        model.step(state, frame)
    net = model.subnets[state.next_index]
    with no_grad():
        maps, _ = encode_frame(net, clip.frames[t], t, model.config.n, "apm", model.config.pool)
    try:
        text = affinity_rows_csv(maps, state.history(), *args.query)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    _write(out / "attention.csv", text)
    return EXIT_OK


def cmd_generate(args, cfg: RunConfig, out: Path) -> int:
    ev = cfg.eval()
    for i, clip in enumerate(eval_clips(cfg.data(), args.count, args.length, seed=ev.seed)):
        print(save_clip(clip, out / f"clip_{i:03d}"))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "profile": cmd_profile, "ablate": cmd_ablate,
            "dump-attention": cmd_dump_attention, "generate": cmd_generate}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.set)
        out = _out_dir(args, cfg)
        _persist_config(out, cfg)
        return COMMANDS[args.command](args, cfg, out)
    except (ConfigError, UsageError) as exc:
        print(f"tdseg: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"tdseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, formats.FormatError) as exc:
        print(f"tdseg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"tdseg: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
