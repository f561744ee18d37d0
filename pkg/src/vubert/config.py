"""Run configuration as flat ``section.key = value`` text.

Example file::

    # desk-scale synthetic run
    model.hidden = 64
    train.lr = 0.001
    data.source = synthetic
    ablation.max_turns = 3

Values resolve in order: dataclass defaults, then the file, then command-line
overrides. Every field is validated before any compute, and the resolved
configuration hashes to a short hex digest recorded in all outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from vubert.model import ModelConfig


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    max_steps: int = 0  # 0 means no cap beyond epochs
    batch: int = 8
    alpha: float = 1.0
    beta: float = 1.0
    mlm_rate: float = 0.15
    answer_mask_rate: float = 0.5  # masking rate inside the answer region; -1 means mlm_rate
    negatives: int = 15
    random_replace: bool = False
    seed: int = 0
    eval_every: int = 1  # epochs between evaluations, 0 disables


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a VisDial directory / JSON path
    train_split: str = "train"
    eval_split: str = "val"
    n_train: int = 500
    n_eval: int = 100
    turns: int = 10
    n_candidates: int = 20
    image_size: int = 32
    image_fraction: float = 0.5
    shapes: int = 2  # shapes per synthetic image
    synth_seed: int = 0


@dataclass
class AblationConfig:
    max_turns: int = -1  # -1 keeps the full history
    use_image: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    # ------------------------------------------------------------ (de)serialization

    def flat(self) -> dict[str, object]:
        out = {}
        for section in ("model", "train", "data", "ablation"):
            for f in fields(getattr(self, section)):
                out[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.flat().items())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        cfg = cls()
        return cfg.with_overrides({f"{s}.{k}": v for s, sec in d.items() for k, v in sec.items()})

    def with_overrides(self, overrides: dict[str, object]) -> RunConfig:
        cfg = dataclasses.replace(self, model=dataclasses.replace(self.model),
                                  train=dataclasses.replace(self.train), data=dataclasses.replace(self.data),
                                  ablation=dataclasses.replace(self.ablation))
        for key, raw in overrides.items():
            section, _, name = key.partition(".")
            target = getattr(cfg, section, None)
            if target is None or section not in ("model", "train", "data", "ablation") or not name:
                raise ConfigError(f"unknown config key {key!r}")
            types = {f.name: f.type for f in fields(target)}
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(target, name, _coerce(key, raw, getattr(target, name)))
        return cfg

    @classmethod
    def from_file(cls, path: str | os.PathLike, base: RunConfig | None = None) -> RunConfig:
        return (base or cls()).with_overrides(parse_text(Path(path).read_text(encoding="utf-8")))

    # ------------------------------------------------------------ identity

    def hash(self) -> str:
        return _digest(self.flat())

    def model_hash(self) -> str:
        return _digest({k: v for k, v in self.flat().items() if k.startswith("model.")})

    def validate(self) -> RunConfig:
        m, t, d, a = self.model, self.train, self.data, self.ablation
        checks = [
            (m.layers >= 0, "model.layers must be >= 0"),
            (m.heads >= 1 and m.hidden >= 1 and m.hidden % m.heads == 0, "model.hidden must be a positive multiple of model.heads"),
            (m.ffn >= 1, "model.ffn must be >= 1"),
            (0.0 <= m.dropout < 1.0, "model.dropout must lie in [0, 1)"),
            (m.max_len >= 3, "model.max_len must be >= 3"),
            (m.patch >= 1 and m.channels >= 1, "model.patch and model.channels must be >= 1"),
            (m.init_std > 0, "model.init_std must be positive"),
            (t.lr >= 0, "train.lr must be >= 0"),
            (t.epochs >= 0 and t.max_steps >= 0, "train.epochs and train.max_steps must be >= 0"),
            (t.batch >= 1, "train.batch must be >= 1"),
            (t.alpha >= 0 and t.beta >= 0 and (t.alpha > 0 or t.beta > 0), "train.alpha/beta must be >= 0, not both 0"),
            (0.0 <= t.mlm_rate < 1.0, "train.mlm_rate must lie in [0, 1)"),
            (t.answer_mask_rate == -1.0 or 0.0 <= t.answer_mask_rate < 1.0,
             "train.answer_mask_rate must be -1 (use train.mlm_rate) or lie in [0, 1)"),
            (t.negatives >= 1, "train.negatives must be >= 1"),
            (t.eval_every >= 0, "train.eval_every must be >= 0"),
            (d.n_train >= 0 and d.n_eval >= 0, "data.n_train/n_eval must be >= 0"),
            (d.turns >= 1, "data.turns must be >= 1"),
            (d.n_candidates >= 2, "data.n_candidates must be >= 2"),
            (d.source != "synthetic" or (d.image_size % m.patch == 0 and d.image_size % 2 == 0),
             "data.image_size must be even and divisible by model.patch"),
            (0.0 <= d.image_fraction <= 1.0, "data.image_fraction must lie in [0, 1]"),
            (1 <= d.shapes <= 3, "data.shapes must lie in [1, 3]"),
            (a.max_turns >= -1, "ablation.max_turns must be >= -1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


PRESETS = {
    "desk": RunConfig(),
    "paper-base": RunConfig(
        model=ModelConfig(layers=12, heads=12, hidden=768, ffn=3072, dropout=0.1, max_len=512, patch=32, channels=3,
                          init_std=0.02),
        train=TrainConfig(lr=3e-4, epochs=20, batch=32, answer_mask_rate=-1.0),
        data=DataConfig(image_size=224, n_candidates=100),
    ),
}


class ConfigError(ValueError):
    """Configuration text or values are invalid."""


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw, current):
    if not isinstance(raw, str):
        return type(current)(raw) if not isinstance(current, bool) else bool(raw)
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
