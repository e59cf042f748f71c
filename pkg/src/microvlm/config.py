"""INI-style run configuration: ``key = value`` lines grouped in bracketed sections."""
from __future__ import annotations

import configparser
import dataclasses
import json
import logging
from dataclasses import dataclass, field

from .errors import ConfigError
from .fusion import FusionConfig
from .trainer import TrainConfig
from .vision import VisionConfig

log = logging.getLogger(__name__)


@dataclass
class TeacherConfig:
    endpoint: str | None = None
    model: str = "teacher"
    api_key_env: str = "TEACHER_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    parallel: int = 4
    answer_styles: str = "long"

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class RankConfig:
    r_min: int = 4
    r_max: int = 16
    weights: list | None = None
    rank_norm: bool = False
    per_layer_rank: bool = False
    eval_rank: int | None = None

    def to_dict(self):
        return dataclasses.asdict(self)


SECTIONS = {
    "train": TrainConfig,
    "vision": VisionConfig,
    "fusion": FusionConfig,
    "rank": RankConfig,
    "teacher": TeacherConfig,
}
# rank settings live in their own section; fusion/train keep only what is theirs
_EXCLUDED = {
    "train": {"r_min", "r_max", "rank_weights", "rank_norm", "per_layer_rank", "eval_rank"},
    "fusion": {"r_min", "r_max", "vocab_size"},
}


def _fields(section):
    return {f.name: f for f in dataclasses.fields(SECTIONS[section]) if f.name not in _EXCLUDED.get(section, ())}


def _coerce(section, key, raw: str, default):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if text.lower() in ("none", ""):
            return None
        if key in ("weights", "rank_weights"):
            return [float(x) for x in text.replace(",", " ").split()]
        if key == "eval_rank":
            return int(text)
        if key == "alpha":
            return text if text == "one_over_rank" else float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


@dataclass
class RunConfig:
    train: dict = field(default_factory=dict)
    vision: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)
    rank: dict = field(default_factory=dict)
    teacher: dict = field(default_factory=dict)

    def set(self, section: str, key: str, value) -> None:
        """Set one value, validating the key; used for CLI overrides."""
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        fields = _fields(section)
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        if isinstance(value, str):
            value = _coerce(section, key, value, _default(fields[key]))
        getattr(self, section)[key] = value

    def rank_config(self) -> RankConfig:
        return _build(RankConfig, self.rank, "rank")

    def train_config(self) -> TrainConfig:
        r = self.rank_config()
        return _build(TrainConfig, {**self.train, "r_min": r.r_min, "r_max": r.r_max, "rank_weights": r.weights,
                                    "rank_norm": r.rank_norm, "per_layer_rank": r.per_layer_rank,
                                    "eval_rank": r.eval_rank}, "train")

    def vision_config(self) -> VisionConfig:
        return _build(VisionConfig, self.vision, "vision")

    def fusion_config(self, vocab_size: int) -> FusionConfig:
        r = self.rank_config()
        v = self.vision_config()
        values = {"vision_dim": v.dim, **self.fusion, "r_min": r.r_min, "r_max": r.r_max, "vocab_size": vocab_size}
        return _build(FusionConfig, values, "fusion")

    def teacher_config(self) -> TeacherConfig:
        return _build(TeacherConfig, self.teacher, "teacher")

    def effective(self, vocab_size: int | None = None) -> dict:
        out = {
            "train": self.train_config().to_dict(),
            "vision": self.vision_config().to_dict(),
            "rank": self.rank_config().to_dict(),
            "teacher": self.teacher_config().to_dict(),
        }
        if vocab_size is not None:
            out["fusion"] = self.fusion_config(vocab_size).to_dict()
        return out

    def echo(self, vocab_size: int | None = None) -> None:
        log.info("effective config: %s", json.dumps(self.effective(vocab_size), sort_keys=True))


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return None


def _build(cls, values, section):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=(";",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".replace("\n", " ")) from exc
    if parser.defaults():
        raise ConfigError("keys must sit inside a [section]")
    cfg = RunConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg.set(section, key, value)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
