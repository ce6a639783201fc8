"""Run configuration: JSON document in, strict parse, flags layered on top.

Unknown keys anywhere in the document are fatal. CLI flags override file
values, which override defaults. `resolved_json` emits the complete effective
config; every subcommand writes that next to its outputs, and the emitted text
re-parses to an equal RunConfig.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .stage1 import Stage1Config
from .stage2 import Stage2Config

OUT_DIR_ENV = "FAARKIT_OUT_DIR"


class ConfigError(ValueError):
    """Configuration document or flag combination is invalid."""


@dataclass
class Stage1Params:
    steps: int = 500
    learning_rate: float = 5e-4
    lambda_round: float = 0.01
    beta_start: float = 4.0
    beta_end: float = 40.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class Stage2Params:
    steps: int = 2500
    learning_rate: float = 1e-4
    lambda_kl: float = 1.0
    lambda_round: float = 0.01
    tau: float = 1.0
    beta_start: float = 40.0
    beta_end: float = 40.0
    beta_restart: bool = False
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class RunConfig:
    block_size: int = 16
    seed: int = 0
    out_dir: str | None = None
    stage1: Stage1Params = field(default_factory=Stage1Params)
    stage2: Stage2Params = field(default_factory=Stage2Params)
    study_samples: int = 100
    oracle_max_n: int = 20

    def stage1_config(self) -> Stage1Config:
        from .rounding import BetaSchedule

        p = self.stage1
        return Stage1Config(
            steps=p.steps, learning_rate=p.learning_rate, lambda_round=p.lambda_round,
            beta=BetaSchedule(p.beta_start, p.beta_end, max(p.steps, 1)),
            adam_beta1=p.adam_beta1, adam_beta2=p.adam_beta2, adam_eps=p.adam_eps,
            seed=self.seed, block_size=self.block_size,
        )

    def stage2_config(self) -> Stage2Config:
        p = self.stage2
        return Stage2Config(
            steps=p.steps, learning_rate=p.learning_rate, lambda_kl=p.lambda_kl,
            lambda_round=p.lambda_round, tau=p.tau, beta_start=p.beta_start,
            beta_end=p.beta_end, beta_restart=p.beta_restart, batch_size=p.batch_size,
            adam_beta1=p.adam_beta1, adam_beta2=p.adam_beta2, adam_eps=p.adam_eps,
            seed=self.seed, block_size=self.block_size,
        )


_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _build(cls, doc: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key{'s' if len(unknown) > 1 else ''} "
                          f"at {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, val in doc.items():
        f = fields[key]
        if f.type in ("Stage1Params", "Stage2Params"):
            sub = {"stage1": Stage1Params, "stage2": Stage2Params}[key]
            if not isinstance(val, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            kwargs[key] = _build(sub, val, f"{where}.{key}")
            continue
        if key == "out_dir":
            if val is not None and not isinstance(val, str):
                raise ConfigError(f"{where}.out_dir must be a string or null")
            kwargs[key] = val
            continue
        want = {"int": int, "float": float, "bool": bool, "str": str}.get(str(f.type))
        if want is None:
            raise ConfigError(f"internal: unhandled config field {key}")
        if isinstance(val, bool) and want is not bool:
            raise ConfigError(f"{where}.{key} must be {want.__name__}, got a boolean")
        if not isinstance(val, _SCALARS[want]):
            raise ConfigError(f"{where}.{key} must be {want.__name__}, got {type(val).__name__}")
        kwargs[key] = want(val)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return _build(RunConfig, doc, "config")


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    return config_from_dict(doc)


def resolved_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def resolved_json(cfg: RunConfig) -> str:
    return json.dumps(resolved_dict(cfg), indent=2, sort_keys=True) + "\n"
