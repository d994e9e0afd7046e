"""Run configuration: INI file with sections, ``--set`` overrides, seed derivation."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .baselines import GmmConfig, IsoForestConfig, VanLstmConfig
from .evaluation import ThresholdStrategy
from .gan import GanConfig
from .inversion import InversionConfig

OUT_DIR_ENV = "TSGAN_OUT_DIR"
MODELS = ("lstm_gan", "isoforest", "gmm", "vanlstm")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    series: list = field(default_factory=list)
    labels: str = ""
    root: str = ""
    s_w: int = 60


@dataclass
class RunSection:
    out: str = "runs/latest"
    seed: int = 0
    threshold: str = "bestf1"
    models: list = field(default_factory=lambda: list(MODELS))


# Sections whose seed is derived from the run seed rather than set directly.
SEEDED = {"gan": GanConfig, "inversion": InversionConfig, "isoforest": IsoForestConfig,
          "gmm": GmmConfig, "vanlstm": VanLstmConfig}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)
    gan: dict = field(default_factory=dict)
    inversion: dict = field(default_factory=dict)
    isoforest: dict = field(default_factory=dict)
    gmm: dict = field(default_factory=dict)
    vanlstm: dict = field(default_factory=dict)

    def threshold(self) -> ThresholdStrategy:
        return ThresholdStrategy.parse(self.run.threshold)

    def stage_config(self, stage: str, dataset: str = ""):
        """Concrete config object for ``stage`` with its derived seed."""
        cls = SEEDED[stage]
        kwargs = dict(getattr(self, stage))
        kwargs["seed"] = derive_seed(self.run.seed, stage, dataset)
        if stage == "gan":
            kwargs["s_w"] = self.data.s_w
        return cls(**kwargs)

    def dataset_key(self, path) -> str:
        """Label-document key for a series file: its path relative to ``root``."""
        path = Path(path)
        if self.data.root:
            try:
                return path.resolve().relative_to(Path(self.data.root).resolve()).as_posix()
            except ValueError:
                pass
        return path.name

    def to_dict(self) -> dict:
        return {
            "data": dataclasses.asdict(self.data),
            "run": dataclasses.asdict(self.run),
            **{s: dict(getattr(self, s)) for s in SEEDED},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        for section, values in doc.items():
            for key, value in values.items():
                _assign(cfg, section, key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.threshold()
            for stage in SEEDED:
                self.stage_config(stage)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None
        unknown = set(self.run.models) - set(MODELS)
        if unknown:
            raise ConfigError(f"unknown models {sorted(unknown)}; choose from {MODELS}")
        if self.data.s_w < 1:
            raise ConfigError("data.s_w must be positive")


def derive_seed(seed: int, stage: str, dataset: str = "") -> int:
    """Per-stage seed: the first 8 bytes of sha256("seed/stage/dataset")."""
    digest = hashlib.sha256(f"{int(seed)}/{stage}/{dataset}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _field_types(section: str) -> dict:
    if section == "data":
        return {f.name: f for f in dataclasses.fields(DataSection)}
    if section == "run":
        return {f.name: f for f in dataclasses.fields(RunSection)}
    if section in SEEDED:
        return {f.name: f for f in dataclasses.fields(SEEDED[section]) if f.name not in ("seed", "s_w")}
    raise ConfigError(f"unknown config section [{section}]; expected one of "
                      f"{['data', 'run', *SEEDED]}")


def _coerce(section: str, key: str, raw, default):
    """Convert ``raw`` to the type of ``default``; strings come from the INI file."""
    if not isinstance(raw, str):
        return list(raw) if isinstance(default, (list, tuple)) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, (list, tuple)):
            items = [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]
            if default and isinstance(default[0], int):
                return [int(t) for t in items]
            return items
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid "
                          f"{type(default).__name__}") from None
    return text


def _default_of(section: str, f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _assign(cfg: RunConfig, section: str, key: str, raw) -> None:
    fields = _field_types(section)
    if key not in fields:
        raise ConfigError(f"unknown key {key!r} in [{section}]; known keys: {sorted(fields)}")
    value = _coerce(section, key, raw, _default_of(section, fields[key]))
    target = getattr(cfg, section)
    if isinstance(target, dict):
        target[key] = value
    else:
        setattr(target, key, value)


def load_config(path: Optional[str] = None, overrides=()) -> RunConfig:
    """Read an INI file (or a run manifest) and apply ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        if path.suffix == ".json":
            cfg = RunConfig.from_dict(json.loads(path.read_text())["config"])
        else:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                parser.read(path, encoding="utf-8")
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from None
            for section in parser.sections():
                for key, value in parser.items(section):
                    _assign(cfg, section, key, value)
            if cfg.data.series and cfg.data.series[0]:
                base = path.parent
                cfg.data.series = [str(_relative_to(base, s)) for s in cfg.data.series]
                if cfg.data.labels:
                    cfg.data.labels = str(_relative_to(base, cfg.data.labels))
                if cfg.data.root:
                    cfg.data.root = str(_relative_to(base, cfg.data.root))
    for item in overrides:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        _assign(cfg, section, key, value)
    cfg.validate()
    return cfg


def _relative_to(base: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def resolve_out_dir(cfg: RunConfig, cli_out: Optional[str] = None) -> Path:
    """``--out`` beats the environment override, which beats the config file."""
    if cli_out:
        return Path(cli_out)
    env = os.environ.get(OUT_DIR_ENV)
    return Path(env) if env else Path(cfg.run.out)
