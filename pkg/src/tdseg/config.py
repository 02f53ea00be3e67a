"""Run configuration: flat ``section.key = value`` files with command-line overrides.

Precedence is ``--set`` > config file > built-in defaults. Unknown keys and
unparsable values are errors that name the offending line.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .distill import TeacherConfig
from .harness.data import SyntheticVideoConfig
from .harness.model import TDNetConfig
from .harness.train import TrainConfig
from .optim import OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimSection:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9


@dataclass(frozen=True)
class TeacherSection:
    trunk_channels: int = 64
    depth: int = 8
    iters: int = 2000
    checkpoint: str = ""


@dataclass(frozen=True)
class EvalSection:
    clips: int = 10
    length: int = 8
    seed: int = 10_000
    gap: int = 1


@dataclass(frozen=True)
class RunSection:
    seeds: str = "0"
    out_dir: str = "runs"
    checkpoint: str = ""


SECTIONS = {
    "model": TDNetConfig,
    "data": SyntheticVideoConfig,
    "train": TrainConfig,
    "optim": OptimSection,
    "teacher": TeacherSection,
    "eval": EvalSection,
    "run": RunSection,
}
# the model owns these; the dataset and train seeds come from the run seed list
_DERIVED = {"data.num_classes", "data.seed", "data.clip_length", "model.seed", "train.seed"}


def _coerce(kind: str, raw: str):
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _field_types(cls) -> Dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(cls)}


def known_keys() -> List[str]:
    return sorted(f"{s}.{k}" for s, cls in SECTIONS.items() for k in _field_types(cls)
                  if f"{s}.{k}" not in _DERIVED)


def parse_assignments(lines: Sequence[Tuple[str, int, str]]) -> Dict[str, object]:
    """Parse ``(source, line_number, text)`` triples into typed ``{dotted_key: value}``."""
    out: Dict[str, object] = {}
    for source, lineno, text in lines:
        body = text.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{lineno}"
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'key = value', got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or key in _DERIVED or name not in _field_types(SECTIONS[section]):
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            out[key] = _coerce(_field_types(SECTIONS[section])[name], raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    return out


@dataclass
class RunConfig:
    values: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Sequence[str] = ()) -> "RunConfig":
        lines: List[Tuple[str, int, str]] = []
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                lines = [(str(path), i, t) for i, t in enumerate(fh.read().splitlines(), 1)]
        merged = parse_assignments(lines)
        merged.update(parse_assignments([("--set", i, t) for i, t in enumerate(overrides, 1)]))
        cfg = cls(merged)
        cfg.validate()
        return cfg

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def with_values(self, **dotted) -> "RunConfig":
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in dotted.items()})
        return RunConfig(vals)

    @property
    def seeds(self) -> List[int]:
        raw = str(self.section("run").get("seeds", RunSection.seeds))
        try:
            seeds = [int(s) for s in raw.replace(" ", "").split(",") if s]
        except ValueError:
            raise ConfigError(f"run.seeds must be a comma-separated list of integers, got {raw!r}") from None
        if not seeds:
            raise ConfigError("run.seeds is empty")
        return seeds

    def run(self) -> RunSection:
        return RunSection(**self.section("run"))

    def model(self, seed: int = 0) -> TDNetConfig:
        return TDNetConfig(**{**self.section("model"), "seed": seed})

    def data(self, seed: int = 0) -> SyntheticVideoConfig:
        m = self.model()
        return SyntheticVideoConfig(**{**self.section("data"), "num_classes": m.num_classes,
                                       "clip_length": max(m.m, 1), "seed": seed})

    def train(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(**{**self.section("train"), "seed": seed})

    def optim(self) -> OptimizerConfig:
        iters = self.train().iters
        return OptimizerConfig(**self.section("optim"), max_iter=max(iters, 1))

    def teacher_section(self) -> TeacherSection:
        return TeacherSection(**self.section("teacher"))

    def teacher(self) -> TeacherConfig:
        t, m = self.teacher_section(), self.model()
        return TeacherConfig(3, t.trunk_channels, t.depth, m.downsample_factor, m.feature_channels,
                             m.num_classes, m.m)

    def teacher_optim(self) -> OptimizerConfig:
        return replace(self.optim(), max_iter=max(self.teacher_section().iters, 1))

    def eval(self) -> EvalSection:
        return EvalSection(**self.section("eval"))

    def validate(self) -> None:
        try:
            self.seeds
            self.model()
            self.data()
            self.train()
            self.optim()
            self.eval()
            self.run()
            tr = self.train()
            if tr.alpha or tr.beta:
                self.teacher()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def resolved(self) -> Dict[str, object]:
        """Every known key with its effective value (defaults filled in)."""
        out: Dict[str, object] = {}
        for key in known_keys():
            section, name = key.split(".", 1)
            default = next(f.default for f in fields(SECTIONS[section]) if f.name == name)
            out[key] = self.values.get(key, default)
        return out

    def to_text(self) -> str:
        def fmt(v):
            return str(v).lower() if isinstance(v, bool) else str(v)
        return "".join(f"{k} = {fmt(v)}\n" for k, v in self.resolved().items())
