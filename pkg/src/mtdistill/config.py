"""Run configuration: nested dataclasses loaded strictly from JSON."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field

from .errors import ValidationError

MODES = ("bonnc", "gcn-baseline", "mean-fusion", "coattention-off-ablation",
         "no-label-improve-ablation", "single-teacher")


@dataclass
class DatasetConfig:
    kind: str = "sbm"
    n: int = 600
    c: int = 3
    p_intra: float = 0.05
    p_inter: float = 0.005
    d: int = 16
    feature_noise: float = 1.0
    edges: str | None = None
    features: str | None = None
    labels: str | None = None
    num_classes: int | None = None


@dataclass
class NoiseConfig:
    kind: str = "uniform"
    rate: float = 0.4
    pair_map: list | None = None


@dataclass
class TeacherConfig:
    dim: int = 16
    epochs: int = 300
    lr: float = 0.05
    encoder_epochs: int = 150
    encoder_lr: float = 0.01
    single_teacher_index: int = 0


@dataclass
class StudentConfig:
    h: int = 16
    dropout: float = 0.5


@dataclass
class BilevelConfig:
    window_length: int = 5
    windows: int = 60
    eta_mu: float = 0.5
    eta_lr_upper: float = 0.5
    w_init: float = 1.0
    warm_start: bool = True


@dataclass
class CleanSelectConfig:
    beta1: int = 5
    beta2: int = 20
    alpha_percent: float = 50.0


@dataclass
class LabelImproveConfig:
    r: float = 0.4
    rho: int = 10


@dataclass
class BaselineConfig:
    epochs: int = 300
    lr: float = 0.01
    weight_decay: float = 5e-4
    patience: int = 30


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    splits: list = field(default_factory=lambda: [0.05, 0.10, 0.60])
    teachers: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    bilevel: BilevelConfig = field(default_factory=BilevelConfig)
    cleanselect: CleanSelectConfig = field(default_factory=CleanSelectConfig)
    labelimprove: LabelImproveConfig = field(default_factory=LabelImproveConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    rounds: int = 3
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    mode: str = "bonnc"

    def validate(self) -> "RunConfig":
        ds = self.dataset
        checks = [
            (ds.kind in ("sbm", "files"), f"dataset.kind {ds.kind!r} not in ('sbm', 'files')"),
            (ds.kind != "files" or all((ds.edges, ds.features, ds.labels)),
             "files dataset needs edges, features and labels paths"),
            (ds.n >= ds.c >= 2, "dataset needs n >= c >= 2"),
            (0 <= ds.p_inter < ds.p_intra <= 1, "need 0 <= p_inter < p_intra <= 1"),
            (ds.d >= ds.c, "dataset.d must be >= c"),
            (ds.feature_noise >= 0, "dataset.feature_noise must be >= 0"),
            (self.noise.kind in ("uniform", "pair"), f"noise.kind {self.noise.kind!r}"),
            (0 <= self.noise.rate <= 1, "noise.rate outside [0,1]"),
            (len(self.splits) == 3 and all(0 < f <= 1 for f in self.splits)
             and sum(self.splits) <= 1 + 1e-12, "splits must be three fractions in (0,1] summing to <= 1"),
            (self.teachers.dim >= 1 and self.teachers.epochs >= 0 and self.teachers.lr > 0,
             "teacher dim/epochs/lr out of range"),
            (self.teachers.encoder_epochs >= 0 and self.teachers.encoder_lr > 0,
             "encoder epochs/lr out of range"),
            (0 <= self.teachers.single_teacher_index < 3, "single_teacher_index must be 0, 1 or 2"),
            (self.student.h >= 1 and 0 <= self.student.dropout < 1, "student h/dropout out of range"),
            (self.bilevel.window_length >= 1 and self.bilevel.windows >= 0, "bilevel window sizes"),
            (self.bilevel.eta_mu >= 0 and self.bilevel.eta_lr_upper >= 0, "bilevel learning rates"),
            (self.cleanselect.beta1 >= 1 and self.cleanselect.beta2 >= 0, "beta1 >= 1, beta2 >= 0"),
            (0 <= self.cleanselect.alpha_percent <= 100, "alpha_percent outside [0,100]"),
            (0 <= self.labelimprove.r < 1, "labelimprove.r outside [0,1)"),
            (self.labelimprove.rho >= 0, "labelimprove.rho must be >= 0"),
            (self.baseline.epochs >= 0 and self.baseline.lr > 0 and self.baseline.patience >= 1
             and self.baseline.weight_decay >= 0, "baseline settings out of range"),
            (self.rounds >= 1, "rounds must be >= 1"),
            (len(self.seeds) >= 1 and all(isinstance(s, int) for s in self.seeds), "seeds must be integers"),
            (self.mode in MODES, f"mode {self.mode!r} not in {MODES}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(tp, value, path):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ValidationError(f"{path}: expected an object")
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        return _coerce(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ValidationError(f"{path}: expected a string")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ValidationError(f"{path}: expected a list")
        return list(value)
    return value


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: top level must be an object")
    return config_from_dict(data)


SWEEP_PARAMS = {
    "r": "labelimprove.r",
    "rho": "labelimprove.rho",
    "beta1": "cleanselect.beta1",
    "beta2": "cleanselect.beta2",
    "alpha": "cleanselect.alpha_percent",
    "t": "bilevel.window_length",
    "windows": "bilevel.windows",
    "eta_mu": "bilevel.eta_mu",
    "eta_lr_upper": "bilevel.eta_lr_upper",
    "rounds": "rounds",
    "noise_rate": "noise.rate",
}


def with_param(config: RunConfig, name: str, value) -> RunConfig:
    """Copy of ``config`` with one sweepable parameter replaced (short name or dotted path)."""
    path = SWEEP_PARAMS.get(name, name)
    if path not in SWEEP_PARAMS.values():
        raise ValidationError(f"unknown sweep parameter {name!r}; choose from {sorted(SWEEP_PARAMS)}")
    data = config.to_dict()
    node = data
    *parents, leaf = path.split(".")
    for key in parents:
        node = node[key]
    node[leaf] = value
    return config_from_dict(data)


def parse_grid(config: RunConfig, name: str, text: str) -> list:
    path = SWEEP_PARAMS.get(name, name)
    if path not in SWEEP_PARAMS.values():
        raise ValidationError(f"unknown sweep parameter {name!r}; choose from {sorted(SWEEP_PARAMS)}")
    current = config.to_dict()
    for key in path.split("."):
        current = current[key]
    cast = int if isinstance(current, int) and not isinstance(current, bool) else float
    try:
        return [cast(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ValidationError(f"grid {text!r} is not a list of {cast.__name__} values") from None
