"""Run configuration: an INI file of ``key = value`` lines in flat sections.

Every key has a default, unknown sections or keys are rejected, and the
effective (defaults-merged) configuration can be written back out so that a
run is reproducible from its output directory alone.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: str = ""  # JSON-lines interactions; empty means the generated corpus in the output dir


@dataclass
class SyntheticSection:
    num_users: int = 2000
    num_items: int = 500
    num_clusters: int = 4
    interactions_per_user: int = 20
    vocab_per_cluster: int = 30
    in_cluster_rate: float = 0.9
    favourite_rate: float = 0.5


@dataclass
class IdModelSection:
    embedding_dim: int = 64
    num_epochs: int = 5
    batch_size: int = 256
    negatives_per_positive: int = 1
    learning_rate: float = 5e-3
    weight_decay: float = 0.0
    interest_count: int = 1
    heldout_fraction: float = 0.05


@dataclass
class EncoderSection:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 8192
    max_sequence_length: int = 128
    output_init_scale: float = 0.1
    warmup_steps: int = 0
    warmup_lr: float = 1e-2


@dataclass
class AlignmentSection:
    variant: str = "full"
    tau: float = 0.5
    lam: float = 0.1
    lam_theta: float = 1e-6
    prefix_len: int = 2
    steps: int = 500
    batch_size: int = 64
    max_history: int = 10
    mode: str = "efficient"
    set_fraction: float = 0.1  # n as a fraction of the (history, next item) pool
    user_buckets: int = 4
    item_buckets: int = 4
    holdout_size: int = 128


@dataclass
class OptimizerSection:
    lr: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class EvalSection:
    ks: str = "10,50,100"
    exclude_seen: bool = True
    length_edges: str = "0,10,20,30,50,70"
    export_samples: int = 200

    def k_values(self) -> tuple[int, ...]:
        return _int_list(self.ks, "eval.ks")

    def edges(self) -> tuple[int, ...]:
        return _int_list(self.length_edges, "eval.length_edges")


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    name: str = ""  # artifact suffix; defaults to "<variant>-<mode>"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    id_model: IdModelSection = field(default_factory=IdModelSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    alignment: AlignmentSection = field(default_factory=AlignmentSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    @property
    def run_name(self) -> str:
        return self.run.name or f"{self.alignment.variant}-{self.alignment.mode}"

    def validate(self) -> RunConfig:
        s = self.synthetic
        if s.num_users < 1 or s.num_items < 2:
            raise ConfigError("synthetic.num_users and synthetic.num_items must be positive")
        if self.alignment.mode not in ("efficient", "random", "all"):
            raise ConfigError(f"alignment.mode must be efficient, random or all, not {self.alignment.mode!r}")
        if not 0 < self.alignment.set_fraction <= 1:
            raise ConfigError("alignment.set_fraction must be in (0, 1]")
        if not 0 <= self.run.seed < 2**64:
            raise ConfigError("run.seed must be an unsigned 64-bit integer")
        self.eval.k_values()
        self.eval.edges()
        return self

    def to_ini(self) -> str:
        lines = []
        for sec in dataclasses.fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini())


def _int_list(text: str, what: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise ConfigError(f"{what} is empty")
    return vals


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def parse(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc.message.splitlines()[0]}") from None
    cfg = RunConfig()
    sections = {f.name for f in dataclasses.fields(cfg)}
    for name in cp.sections():
        if name not in sections:
            raise ConfigError(f"{source}: unknown section [{name}]")
        obj = getattr(cfg, name)
        known = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
        for key, raw in cp.items(name):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {name}.{key}")
            setattr(obj, key, _coerce(raw, known[key], f"{name}.{key}"))
    return cfg.validate()


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(text, str(path))


STAGES = {"generate": 1, "pretrain": 2, "encoder": 3, "align_set": 4, "align_init": 5,
          "align_train": 6, "export": 7}


def stage_seed(global_seed: int, stage: str) -> int:
    """Seed for one pipeline stage: the first word of SeedSequence([global, stage code]).

    Stages can therefore be rerun in isolation and still see the same stream.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    return int(np.random.SeedSequence([int(global_seed), STAGES[stage]]).generate_state(1)[0])
