"""Experiment configuration: INI files, schema validation, profiles.

The file format is plain configparser INI with a fixed schema.  Unknown
sections or keys are rejected so a typo fails loudly instead of silently
falling back to a default.  Two profiles ship with the package: "desk"
scales updates and dataset sizes down to commodity-CPU budgets and is the
default everywhere, "paper" encodes the full-scale recipe (hundreds of
thousands of updates, 512-episode evaluations) for users with the compute.

Environment variable overrides are limited to GRIDPLAN_OUT_DIR and
GRIDPLAN_WORKERS by design; everything else must come from flags or the
config file so a run is reproducible from its command line alone.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from typing import Optional

from .diffusion import DiffusionConfig
from .env import EnvKind


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class RunSection:
    out_dir: str = "runs"
    workers: int = 1
    seeds: tuple = (0, 1)
    profile: str = "desk"


@dataclasses.dataclass(frozen=True)
class EnvSection:
    kind: str = "gotoobj"
    visual: bool = False


@dataclasses.dataclass(frozen=True)
class DataSection:
    n_small: int = 200
    # the large single-agent dataset matches the pooled mixture size
    mixture_factor: int = 6
    granularity: int = 1


@dataclasses.dataclass(frozen=True)
class PlannerSection:
    updates: int = 20000
    finetune_updates: int = 2000
    batch_size: int = 64
    lr: float = 2e-4
    width: int = 48
    depth: int = 3
    log_every: int = 250


@dataclasses.dataclass(frozen=True)
class IvdSection:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    width: int = 64
    depth: int = 3


@dataclasses.dataclass(frozen=True)
class IlSection:
    epochs_small: int = 40
    epochs_large: int = 10
    epochs_union: int = 40
    epochs_heads: int = 10
    finetune_epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    width: int = 32
    depth: int = 2
    hidden: int = 64
    goal_horizon: int = 2


@dataclasses.dataclass(frozen=True)
class EvalSection:
    episodes: int = 64
    replan_every: int = 3
    goal_budget: int = 4


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = RunSection()
    env: EnvSection = EnvSection()
    data: DataSection = DataSection()
    diffusion: DiffusionConfig = DiffusionConfig()
    planner: PlannerSection = PlannerSection()
    ivd: IvdSection = IvdSection()
    il: IlSection = IlSection()
    eval: EvalSection = EvalSection()

    def __post_init__(self):
        if self.env.kind not in tuple(k.value for k in EnvKind):
            raise ConfigError(f"unknown env kind {self.env.kind!r}")
        if self.run.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.run.seeds:
            raise ConfigError("need at least one seed")
        if self.eval.replan_every not in (1, 2, 3):
            raise ConfigError("replan_every must be in {1, 2, 3}")
        if self.data.granularity < 1:
            raise ConfigError("granularity must be >= 1")


_SECTION_TYPES = {
    "run": RunSection,
    "env": EnvSection,
    "data": DataSection,
    "diffusion": DiffusionConfig,
    "planner": PlannerSection,
    "ivd": IvdSection,
    "il": IlSection,
    "eval": EvalSection,
}


def _parse_value(raw: str, field: dataclasses.Field):
    name = field.name
    typ = field.type
    raw = raw.strip()
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        if typ in ("bool", bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ConfigError(f"{name}: not a boolean: {raw!r}")
        if typ in ("str", str):
            return raw
        if typ == "tuple" or name == "seeds":
            return tuple(int(tok) for tok in raw.replace(",", " ").split())
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    raise ConfigError(f"{name}: unsupported field type {typ!r}")


def from_ini(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    sections = {}
    for section in parser.sections():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTION_TYPES[section]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _parse_value(raw, fields[key])
        sections[section] = cls(**values)
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return from_ini(f.read())


def to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, value in (
        ("run", cfg.run),
        ("env", cfg.env),
        ("data", cfg.data),
        ("diffusion", cfg.diffusion),
        ("planner", cfg.planner),
        ("ivd", cfg.ivd),
        ("il", cfg.il),
        ("eval", cfg.eval),
    ):
        parser[section] = {}
        for field in dataclasses.fields(value):
            v = getattr(value, field.name)
            if isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            parser[section][field.name] = repr(v) if isinstance(v, float) else str(v)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as f:
        f.write(to_ini(cfg))


def apply_env_overrides(cfg: ExperimentConfig, environ=None) -> ExperimentConfig:
    """Apply the two supported environment overrides (output dir, workers)."""
    env = os.environ if environ is None else environ
    run = cfg.run
    out_dir = env.get("GRIDPLAN_OUT_DIR")
    if out_dir:
        run = dataclasses.replace(run, out_dir=out_dir)
    workers = env.get("GRIDPLAN_WORKERS")
    if workers:
        try:
            run = dataclasses.replace(run, workers=int(workers))
        except ValueError:
            raise ConfigError(f"GRIDPLAN_WORKERS not an integer: {workers!r}") from None
    return dataclasses.replace(cfg, run=run)


# Full-scale training constants, keyed by env kind:
#   single-agent dataset size, then planner updates / lr / batch,
#   IVD epochs / batch, IL epochs per variant (small, large, union, heads).
_PAPER_DATA = {"gotoobj": 1494, "gotodistractor": 90000, "gotodistractorlarge": 25000}
_PAPER_PLANNER = {
    "gotoobj": (500_000, 2e-5, 64),
    "gotodistractor": (1_000_000, 2e-5, 128),
    "gotodistractorlarge": (500_000, 5e-5, 512),
}
_PAPER_IVD = {
    "gotoobj": (500, 64),
    "gotodistractor": (10, 64),
    "gotodistractorlarge": (100, 256),
}
_PAPER_IL = {
    "gotoobj": ((100, 25, 100, 25), 64),
    "gotodistractor": ((50, 20, 30, 20), 128),
    "gotodistractorlarge": ((50, 20, 30, 20), 128),
}


def paper_profile(kind: str = "gotoobj") -> ExperimentConfig:
    """The full-scale recipe.  Not desk-reproducible; budget accordingly."""
    if kind not in _PAPER_DATA:
        raise ConfigError(f"unknown env kind {kind!r}")
    updates, p_lr, p_batch = _PAPER_PLANNER[kind]
    ivd_epochs, ivd_batch = _PAPER_IVD[kind]
    il_epochs, il_batch = _PAPER_IL[kind]
    return ExperimentConfig(
        run=RunSection(seeds=(0, 1, 2, 3), profile="paper"),
        env=EnvSection(kind=kind),
        data=DataSection(n_small=_PAPER_DATA[kind], mixture_factor=6),
        diffusion=DiffusionConfig(),
        planner=PlannerSection(
            updates=updates, finetune_updates=50000, batch_size=p_batch, lr=p_lr,
            width=96, depth=4, log_every=1000,
        ),
        ivd=IvdSection(epochs=ivd_epochs, batch_size=ivd_batch, lr=1e-4,
                       width=64, depth=3),
        il=IlSection(
            epochs_small=il_epochs[0], epochs_large=il_epochs[1],
            epochs_union=il_epochs[2], epochs_heads=il_epochs[3],
            finetune_epochs=10, batch_size=il_batch, lr=1e-4,
            width=48, depth=3, hidden=128,
        ),
        eval=EvalSection(episodes=512, replan_every=3, goal_budget=4),
    )


def desk_profile(kind: str = "gotoobj") -> ExperimentConfig:
    """Reduced-scale defaults that finish on a CPU in minutes to hours."""
    if kind not in _PAPER_DATA:
        raise ConfigError(f"unknown env kind {kind!r}")
    n_small = {"gotoobj": 200, "gotodistractor": 400, "gotodistractorlarge": 100}[kind]
    return ExperimentConfig(
        run=RunSection(seeds=(0, 1), profile="desk"),
        env=EnvSection(kind=kind),
        data=DataSection(n_small=n_small, mixture_factor=6),
        diffusion=DiffusionConfig(),
        planner=PlannerSection(updates=20000, finetune_updates=2000, batch_size=64,
                               lr=2e-4, width=48, depth=3, log_every=250),
        ivd=IvdSection(epochs=30, batch_size=128, lr=1e-3, width=64, depth=3),
        il=IlSection(),
        eval=EvalSection(episodes=64, replan_every=3, goal_budget=4),
    )


def get_profile(name: str, kind: str = "gotoobj") -> ExperimentConfig:
    if name == "desk":
        return desk_profile(kind)
    if name == "paper":
        return paper_profile(kind)
    raise ConfigError(f"unknown profile {name!r} (expected 'desk' or 'paper')")
