"""Experiment configuration: YAML in, validated dataclasses out.

Unknown keys and type errors are reported with the YAML line they came from.
Everything missing is filled from the defaults, which form the ``toy`` preset.
"""
from __future__ import annotations

import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .distill import OptimConfig, PkdSchedule, Strategy
from .moddata import GenSpec, Modality
from .wise import ExitChain

PRESETS = ("toy", "full")


class ConfigError(ValueError):
    pass


@dataclass
class ArchConfig:
    widths: dict[str, list[int]] = field(default_factory=lambda: {
        "mv": [64, 64, 32, 32], "r": [64, 64, 32, 32], "iframe": [128, 96, 64, 64]})
    # None: half the tapped block's width
    ic_hidden: dict[str, list[int]] | None = None


@dataclass
class TrainConfig:
    lr: dict[str, float] = field(default_factory=lambda: {"mv": 0.01, "r": 0.005, "iframe": 0.003})
    weight_decay: float = 1e-4
    eps: float = 1e-3
    batch_size: int = 32
    gamma: float = 0.1
    backbone_epochs: int = 100
    backbone_milestones: list[int] = field(default_factory=lambda: [30, 54, 78])
    ic_epochs: int = 90
    ic_milestones: list[int] = field(default_factory=lambda: [30, 60, 90])
    # fresh frame picks from the training videos every epoch
    frame_resampling: bool = True


@dataclass
class IcConfig:
    strategy: str = "pkd"
    # phase boundaries; None means equal thirds of ic_epochs
    k: int | None = None
    t: int | None = None
    temperature: float = 1.0
    reset_on_phase: bool = True


@dataclass
class PolicyConfig:
    chain: list[str] = field(default_factory=lambda: ["r", "mv", "iframe"])
    tau_grid: str = "0:1.01:0.01"
    fit_split: str = "train"
    # operating point of the no-lateral policy that the others are matched to
    iso_tau: float = 0.9
    iso_tolerance: float = 0.02


@dataclass
class ProbeConfig:
    radius: float = 1.0
    n: int = 21
    split: str = "train"
    normalization: str = "filter"


@dataclass
class AblationConfig:
    counts: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    tau: float = 0.9999


@dataclass
class ExperimentConfig:
    data: GenSpec = field(default_factory=GenSpec)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ic: IcConfig = field(default_factory=IcConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    splits: list[int] = field(default_factory=lambda: [1, 2, 3])
    output_dir: str = "runs"

    # -- derived views -----------------------------------------------------

    def schedule(self) -> PkdSchedule:
        m = self.train.ic_epochs
        if self.ic.k is None and self.ic.t is None:
            return PkdSchedule.equal_phases(m)
        if self.ic.k is None or self.ic.t is None:
            raise ConfigError("ic.k and ic.t must be given together")
        return PkdSchedule(m, self.ic.k, self.ic.t)

    def optim(self, modality: Modality, stage: str) -> OptimConfig:
        t = self.train
        milestones = t.backbone_milestones if stage == "backbone" else t.ic_milestones
        return OptimConfig(t.lr[modality.value], t.weight_decay, t.eps, tuple(milestones), t.gamma, t.batch_size)

    def widths(self, modality: Modality) -> tuple[int, ...]:
        return tuple(self.arch.widths[modality.value])

    def ic_hidden(self, modality: Modality) -> tuple[int, ...] | None:
        return None if self.arch.ic_hidden is None else tuple(self.arch.ic_hidden[modality.value])

    def chain(self) -> ExitChain:
        return ExitChain.from_order(self.policy.chain)

    def spec_for_seed(self, seed: int) -> GenSpec:
        return GenSpec.from_dict({**self.data.to_dict(), "seed": seed})

    # -- validation and serialization -------------------------------------

    def validate(self) -> None:
        try:
            self.data.validate()
        except ValueError as exc:
            raise ConfigError(f"data: {exc}") from None
        mods = {m.value for m in Modality}
        for name, table in (("arch.widths", self.arch.widths), ("train.lr", self.train.lr),
                            ("arch.ic_hidden", self.arch.ic_hidden)):
            if table is not None and set(table) != mods:
                raise ConfigError(f"{name} needs exactly the keys {sorted(mods)}, got {sorted(table)}")
        for m, w in self.arch.widths.items():
            if len(w) != 4 or any(v < 1 for v in w):
                raise ConfigError(f"arch.widths.{m} must list 4 positive widths, got {w}")
        for m, lr in self.train.lr.items():
            if not lr >= 0:
                raise ConfigError(f"train.lr.{m} must be >= 0")
        for name in ("backbone_milestones", "ic_milestones"):
            ms = getattr(self.train, name)
            if list(ms) != sorted(ms):
                raise ConfigError(f"train.{name} must be sorted ascending, got {ms}")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        try:
            Strategy.parse(self.ic.strategy)
            if self.train.ic_epochs >= 3 or self.ic.k is not None:
                self.schedule()
            ExitChain.from_order(self.policy.chain)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.ic.temperature > 0:
            raise ConfigError("ic.temperature must be > 0")
        if self.policy.fit_split not in ("train", "test"):
            raise ConfigError("policy.fit_split must be 'train' or 'test'")
        if self.probe.split not in ("train", "test"):
            raise ConfigError("probe.split must be 'train' or 'test'")
        if self.probe.n < 1 or self.probe.n % 2 == 0:
            raise ConfigError("probe.n must be odd")
        if not 0 < self.policy.iso_tolerance <= 0.05:
            raise ConfigError("policy.iso_tolerance must lie in (0, 0.05]")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not self.splits or any(s not in (1, 2, 3) for s in self.splits):
            raise ConfigError("splits must be a non-empty subset of [1, 2, 3]")
        if any(c < 1 for c in self.ablation.counts) or list(self.ablation.counts) != sorted(set(self.ablation.counts)):
            raise ConfigError("ablation.counts must be strictly increasing positive integers")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _line(node) -> int:
    return node.start_mark.line + 1


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value: Any, tp, node, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], node, where)
    if is_dataclass(tp):
        return _build(tp, value, node, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list (line {_line(node)})")
        sub = node.value if isinstance(node, yaml.SequenceNode) else [node] * len(value)
        return [_coerce(v, args[0], n, f"{where}[{i}]") for i, (v, n) in enumerate(zip(value, sub))]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping (line {_line(node)})")
        sub = {k.value: v for k, v in node.value} if isinstance(node, yaml.MappingNode) else {}
        return {str(k): _coerce(v, args[1], sub.get(k, node), f"{where}.{k}") for k, v in value.items()}
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp is bool and isinstance(value, bool):
        return value
    if tp is str and isinstance(value, str):
        return value
    raise ConfigError(f"{where}: expected {_type_name(tp)}, got {value!r} (line {_line(node)})")


def _build(cls, value: Any, node, where: str):
    if value is None:
        return cls()
    if not isinstance(value, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping (line {_line(node)})")
    key_nodes = {k.value: (k, v) for k, v in node.value}
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in value.items():
        knode, vnode = key_nodes[key]
        path = f"{where}.{key}" if where else str(key)
        if key not in known:
            raise ConfigError(f"unknown key '{path}' at line {_line(knode)}")
        kwargs[key] = _coerce(raw, hints[key], vnode, path)
    return cls(**kwargs)


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from None
    if node is None:
        cfg = ExperimentConfig()
    else:
        try:
            cfg = _build(ExperimentConfig, value, node, "")
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None
    cfg.validate()
    return cfg


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), str(path))


def load_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    text = resources.files("cascade_kd").joinpath("presets", f"{name}.yaml").read_text()
    return parse_config_text(text, f"preset {name}")


def resolve_config(ref: str | None) -> ExperimentConfig:
    """A preset name, a YAML path, or None for the defaults."""
    if ref is None:
        return ExperimentConfig()
    if ref in PRESETS and not Path(ref).exists():
        return load_preset(ref)
    return parse_config(ref)


def config_from_dict(d: dict) -> ExperimentConfig:
    return parse_config_text(yaml.safe_dump(d, sort_keys=False))

