"""Run configuration: INI files in, fully resolved JSON manifests out.

A config file has one section per concern::

    [run]
    seed = 7

    [simulate]
    Z = 10
    mu_range = 0, 0.01

    [model]
    epsilon = 0.01

Every missing key takes its default, and the resolved values are written to
each command's manifest. A manifest can be passed back as ``--config``.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .hawkes import SyntheticConfig
from .model import AttentionConfig, LossConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (1, 3, 5)
    normalize: bool = True
    edge_floor: float = 0.0
    null_permutations: int = 100


@dataclass(frozen=True)
class BaselineConfig:
    poisson: bool = True
    self_correcting: bool = True
    markov: bool = True
    ctmc: bool = True
    hawkes: bool = True
    logistic: bool = True
    markov_max_order: int = 3
    hawkes_w: float | None = None
    hawkes_l1: float = 0.0
    hawkes_rollouts: int = 100
    logistic_window: int = 3


@dataclass(frozen=True)
class PathsConfig:
    data: str = ""
    checkpoint: str = ""
    resume: str = ""


@dataclass(frozen=True)
class RunConfig:
    seed: int
    threads: int = 1
    simulate: SyntheticConfig = SyntheticConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    baselines: BaselineConfig = BaselineConfig()
    paths: PathsConfig = PathsConfig()

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, simulate=replace(self.simulate, seed=seed),
                       train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        tr = asdict(self.train)
        model = {k: tr.pop(k) for k in MODEL_KEYS}
        model.update(tr.pop("attention"))
        model.update(tr.pop("loss"))
        tr.pop("seed")
        sim = asdict(self.simulate)
        sim.pop("seed")
        return {"run": {"seed": self.seed, "threads": self.threads}, "simulate": sim,
                "model": model, "train": tr, "eval": asdict(self.eval),
                "baselines": asdict(self.baselines), "paths": asdict(self.paths)}


MODEL_KEYS = ("E", "H_event", "H_series", "H_syn", "use_series")


def _coerce(raw, default, name):
    """Convert an INI string (or JSON value) to the type of ``default``."""
    if not isinstance(raw, str):
        if isinstance(default, tuple) and isinstance(raw, list):
            return tuple(raw)
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in text.replace("(", "").replace(")", "").split(",") if x.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if default is None:
            if text.lower() in ("", "none", "all"):
                return None
            return float(text) if any(c in text for c in ".eE") else int(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc


def _build(cls, values: dict, section: str, defaults=None):
    defaults = defaults or cls()
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(v, getattr(defaults, k), f"[{section}] {k}") for k, v in values.items()}
    try:
        return replace(defaults, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def from_sections(sections: dict, seed_override: int | None = None,
                  threads_override: int | None = None) -> RunConfig:
    allowed = {"run", "simulate", "model", "train", "eval", "baselines", "paths"}
    extra = set(sections) - allowed - {"DEFAULT"}
    if extra:
        raise ConfigError(f"unknown sections: {', '.join(sorted(extra))}")
    run = dict(sections.get("run", {}))
    seed = seed_override if seed_override is not None else run.pop("seed", None)
    run.pop("seed", None)
    if seed is None:
        raise ConfigError("a seed is mandatory: set [run] seed or pass --seed")
    seed = _coerce(seed, 0, "[run] seed")
    threads = _coerce(run.pop("threads", 1), 1, "[run] threads")
    if threads_override is not None:
        threads = threads_override
    if run:
        raise ConfigError(f"[run] unknown keys: {', '.join(sorted(run))}")

    sim = _build(SyntheticConfig, dict(sections.get("simulate", {})), "simulate", SyntheticConfig(seed=seed))
    model = dict(sections.get("model", {}))
    att_keys = {f.name for f in fields(AttentionConfig)}
    loss_keys = {f.name for f in fields(LossConfig)}
    att = _build(AttentionConfig, {k: model.pop(k) for k in list(model) if k in att_keys}, "model")
    loss = _build(LossConfig, {k: model.pop(k) for k in list(model) if k in loss_keys}, "model")
    tr_values = dict(sections.get("train", {}))
    bad = set(model) - set(MODEL_KEYS)
    if bad:
        raise ConfigError(f"[model] unknown keys: {', '.join(sorted(bad))}")
    if "seed" in tr_values:
        raise ConfigError("[train] seed is set through [run] seed")
    tr_values.update(model)
    train = _build(TrainConfig, tr_values, "train", TrainConfig(seed=seed, attention=att, loss=loss))
    return RunConfig(
        seed=seed, threads=threads, simulate=sim, train=train,
        eval=_build(EvalConfig, dict(sections.get("eval", {})), "eval"),
        baselines=_build(BaselineConfig, dict(sections.get("baselines", {})), "baselines"),
        paths=_build(PathsConfig, dict(sections.get("paths", {})), "paths"),
    )


def load_config(path=None, seed: int | None = None, threads: int | None = None) -> RunConfig:
    """Read an INI config or a manifest JSON written by an earlier run."""
    if path is None:
        return from_sections({}, seed, threads)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        obj = json.loads(path.read_text())
        sections = obj.get("config", obj)
    else:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case (Z, H_event)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        sections = {s: dict(parser[s]) for s in parser.sections()}
    return from_sections(sections, seed, threads)
