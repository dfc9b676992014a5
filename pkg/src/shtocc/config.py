"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment. Keys, by group:

Training (see :class:`~shtocc.trainer.TrainConfig`)
    phase1_epochs, phase2_epochs, lr1, lr2, head_fraction, layers, growth,
    epsilon, tail_threshold, head_selection, tail_selection, tail_loss,
    decouple, tvl_weight, phase2_sampling, smooth_classes, d_model,
    num_queries, num_heads, ffn_hidden

Scenes (see :class:`~shtocc.synth.SceneConfig`)
    dims (``h,w,d``), num_classes, frequencies (comma list, classes 1..C-1),
    empty_fraction, blob_size (``min,max``), head_style, blob_threshold,
    feature_channels, noise, embed_seed

Run
    seed        seeds scene generation and parameter init
    eval_count  trailing scenes held out for evaluation in ``ablate`` (0: evaluate on the training scenes)
    class_names optional comma list of C names

The ``SHTOCC_SEED`` environment variable overrides ``seed`` from the file;
a ``--seed`` flag overrides both.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .synth import SceneConfig
from .trainer import TrainConfig
from .voxel_core import GridDims

SEED_ENV = "SHTOCC_SEED"

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
_SCENE_KEYS = {f.name for f in fields(SceneConfig)} - {"seed"}
_RUN_KEYS = {"seed", "eval_count", "class_names"}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    seed: int = 0
    eval_count: int = 0
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.eval_count < 0:
            raise ConfigError(f"eval_count={self.eval_count}: must be >= 0")
        if self.class_names is not None and len(self.class_names) != self.scene.num_classes:
            raise ConfigError(f"class_names: need {self.scene.num_classes} names, got {len(self.class_names)}")
        if self.train.seed != self.seed or self.scene.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))
            object.__setattr__(self, "scene", replace(self.scene, seed=self.seed))

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "eval_count": self.eval_count,
               "class_names": list(self.class_names) if self.class_names else None}
        for k in sorted(_TRAIN_KEYS):
            out[k] = getattr(self.train, k)
        for k in sorted(_SCENE_KEYS):
            v = getattr(self.scene, k)
            out[k] = list(v.as_tuple()) if isinstance(v, GridDims) else list(v) if isinstance(v, tuple) else v
        return out

    def to_text(self) -> str:
        """Render as a config file that parses back to an equal config."""
        lines = []
        for k, v in self.to_dict().items():
            if v is None:
                continue
            if isinstance(v, list):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def _bool(key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}={raw!r}: must be a boolean (true/false)")


def _convert(key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            return _bool(key, raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, GridDims):
            h, w, d = (int(x) for x in raw.split(","))
            return GridDims(h, w, d)
        if isinstance(like, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(type(like[0])(x) for x in items) if like else tuple(items)
        return raw.strip()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}={raw!r}: cannot parse as {type(like).__name__}") from exc


def parse_config(text: str) -> dict[str, str]:
    """Raw key/value pairs; duplicate or unknown keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    raw = dict(cp["run"])
    unknown = sorted(set(raw) - _TRAIN_KEYS - _SCENE_KEYS - _RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def build_config(raw: dict[str, str]) -> RunConfig:
    base_t, base_s = TrainConfig(), SceneConfig()
    tkw = {k: _convert(k, v, getattr(base_t, k)) for k, v in raw.items() if k in _TRAIN_KEYS}
    skw = {k: _convert(k, v, getattr(base_s, k)) for k, v in raw.items() if k in _SCENE_KEYS}
    seed = _convert("seed", raw["seed"], 0) if "seed" in raw else 0
    eval_count = _convert("eval_count", raw["eval_count"], 0) if "eval_count" in raw else 0
    names = _convert("class_names", raw["class_names"], ()) if "class_names" in raw else None
    try:
        return RunConfig(TrainConfig(**tkw), SceneConfig(**skw), seed, eval_count, names)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None = None, seed_flag: int | None = None,
                env: dict | None = None) -> RunConfig:
    """File values, then ``SHTOCC_SEED``, then the ``--seed`` flag."""
    env = os.environ if env is None else env
    raw = parse_config(Path(path).read_text()) if path is not None else {}
    cfg = build_config(raw)
    if env.get(SEED_ENV, "").strip():
        cfg = cfg.with_seed(_convert(SEED_ENV, env[SEED_ENV], 0))
    if seed_flag is not None:
        cfg = cfg.with_seed(seed_flag)
    return cfg


def config_fields() -> dict[str, str]:
    """Documented key -> group mapping, for help text."""
    out = {k: "train" for k in _TRAIN_KEYS}
    out.update({k: "scene" for k in _SCENE_KEYS})
    out.update({k: "run" for k in _RUN_KEYS})
    return dict(sorted(out.items()))

