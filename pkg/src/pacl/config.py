"""Run configuration: a TOML document with [model], [train], [data], [infer].

Every key maps onto a dataclass field; unknown keys are rejected so typos
fail loudly instead of silently falling back to defaults.
"""
from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .data import SceneSpec
from .encoders import VisionEncoderConfig
from .model import ModelConfig
from .text import PROMPTS
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    n: int = 4000
    augment_prompts: bool = True


@dataclass
class PhaseConfig:
    """Optimiser settings shared by both phases, with per-phase epoch counts."""

    base: TrainConfig = field(default_factory=TrainConfig)
    # full scale is 10 epochs over ~30M pairs; defaults here give >= 2000 steps per phase on 4000 scenes
    pretrain_epochs: int = 13
    pacl_epochs: int = 30

    def for_phase(self, phase: str) -> TrainConfig:
        epochs = self.pretrain_epochs if phase == "clip_pretrain" else self.pacl_epochs
        return dataclasses.replace(self.base, phase=phase, epochs=epochs)


@dataclass
class InferConfig:
    stride: int = 4
    background_entropy: float | None = None
    softmax_first: bool = False
    prompts: tuple[str, ...] = PROMPTS


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: PhaseConfig = field(default_factory=PhaseConfig)
    data: DataConfig = field(default_factory=DataConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    # -- (de)serialisation ----------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _check_keys(doc, {"model", "train", "data", "infer"}, "top level")
        model = dict(doc.get("model", {}))
        vision = model.pop("vision", {})
        _check_keys(vision, _fields(VisionEncoderConfig), "[model.vision]")
        _check_keys(model, _fields(ModelConfig) - {"vision"}, "[model]")
        train = dict(doc.get("train", {}))
        phase_keys = {"pretrain_epochs", "pacl_epochs"}
        _check_keys(train, (_fields(TrainConfig) - {"phase", "epochs"}) | phase_keys, "[train]")
        data = dict(doc.get("data", {}))
        _check_keys(data, (_fields(SceneSpec) | {"n", "augment_prompts"}), "[data]")
        infer = dict(doc.get("infer", {}))
        _check_keys(infer, _fields(InferConfig), "[infer]")
        try:
            return cls(
                model=ModelConfig(vision=VisionEncoderConfig(**vision), **model),
                train=PhaseConfig(
                    base=TrainConfig(**{k: v for k, v in train.items() if k not in phase_keys}),
                    **{k: v for k, v in train.items() if k in phase_keys},
                ),
                data=DataConfig(
                    scene=SceneSpec(**{k: v for k, v in data.items() if k not in ("n", "augment_prompts")}),
                    **{k: v for k, v in data.items() if k in ("n", "augment_prompts")},
                ),
                infer=InferConfig(**{**infer, **({"prompts": tuple(infer["prompts"])} if "prompts" in infer else {})}),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path=None, env: bool = True) -> "RunConfig":
        cfg = cls() if path is None else cls.from_dict(read_toml(path))
        return seed_from_env(cfg) if env else cfg

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            model=dataclasses.replace(self.model, seed=seed),
            train=dataclasses.replace(self.train, base=dataclasses.replace(self.train.base, seed=seed)),
            data=dataclasses.replace(self.data, scene=dataclasses.replace(self.data.scene, seed=seed)),
            infer=self.infer,
        )

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        train = self.train.base.to_dict()
        train.pop("phase")
        train.pop("epochs")
        train.update(pretrain_epochs=self.train.pretrain_epochs, pacl_epochs=self.train.pacl_epochs)
        data = {**self.data.scene.to_dict(), "n": self.data.n, "augment_prompts": self.data.augment_prompts}
        infer = dataclasses.asdict(self.infer)
        return _drop_none({"model": model, "train": train, "data": data, "infer": infer})

    def dumps(self) -> str:
        return tomli_w.dumps(_tomlable(self.to_dict()))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def read_toml(path) -> dict:
    try:
        return tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def seed_from_env(cfg: RunConfig) -> RunConfig:
    """Apply the PACL_SEED environment override, if set."""
    seed = os.environ.get("PACL_SEED")
    if not seed:
        return cfg
    try:
        return cfg.with_seed(int(seed))
    except ValueError:
        raise ConfigError(f"PACL_SEED must be an integer, got {seed!r}") from None


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    return d


def _tomlable(d):
    if isinstance(d, dict):
        return {k: _tomlable(v) for k, v in d.items()}
    if isinstance(d, tuple):
        return [_tomlable(v) for v in d]
    return d
