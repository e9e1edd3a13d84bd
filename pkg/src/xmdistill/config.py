"""Experiment configuration: a flat TOML-style file with CLI overrides.

The merged configuration (file values overridden by flags) is what gets
hashed; every report and checkpoint embeds that hash plus the seed so any
output can be traced to an exact run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .models import ModelConfig
from .scenegen import SceneSpec
from .training import DistillConfig

_SECTIONS = ("scene", "model", "train", "run")


def parse_toml_like(text: str) -> dict:
    """Parse the supported TOML subset: [sections], key = value pairs.

    Values: strings ("..."), booleans, ints, floats, and flat arrays.
    Comments start with '#'. Nested tables are not supported.
    """
    doc = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError("line %d: malformed section header" % lineno)
            section = line[1:-1].strip()
            doc.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected key = value" % lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        target = doc if section is None else doc[section]
        target[key] = _parse_value(value.strip(), lineno)
    return doc


def _parse_value(token: str, lineno: int):
    if token.startswith("[") and token.endswith("]"):
        inner = token[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(t.strip(), lineno) for t in inner.split(",")]
    if token.startswith('"') and token.endswith('"') and len(token) >= 2:
        return token[1:-1]
    if token == "true":
        return True
    if token == "false":
        return False
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        raise ConfigError("line %d: cannot parse value %r" % (lineno, token))


def format_toml_like(doc: dict) -> str:
    lines = []
    for section in sorted(doc):
        lines.append("[%s]" % section)
        for key in sorted(doc[section]):
            lines.append("%s = %s" % (key, _format_value(doc[section][key])))
        lines.append("")
    return "\n".join(lines)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"%s"' % v
    if isinstance(v, (list, tuple)):
        return "[%s]" % ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentConfig:
    """Everything a run needs: scene spec, model sizes, training knobs, paths."""

    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: DistillConfig = field(default_factory=DistillConfig)
    num_train_scenes: int = 64
    num_val_scenes: int = 16
    udakd_scenes: int = 16
    scene_seed0: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        run = {"num_train_scenes": self.num_train_scenes,
               "num_val_scenes": self.num_val_scenes,
               "udakd_scenes": self.udakd_scenes,
               "scene_seed0": self.scene_seed0,
               "data_dir": self.data_dir,
               "out_dir": self.out_dir}
        scene = self.scene.to_dict()
        scene["counts"] = {k: list(v) for k, v in self.scene.counts.items()}
        model = self.model.__dict__.copy()
        model["feature_cols"] = list(model["feature_cols"])
        return {"scene": scene,
                "model": model,
                "train": self.train.to_dict(),
                "run": run}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        for key in doc:
            if key not in _SECTIONS:
                raise ConfigError("unknown config section %r" % key)
        scene_doc = dict(doc.get("scene", {}))
        counts = scene_doc.pop("counts", None)
        known_scene = set(SceneSpec().to_dict())
        for k in scene_doc:
            if k not in known_scene:
                raise ConfigError("unknown scene option %r" % k)
        if "elevation_range_deg" in scene_doc:
            scene_doc["elevation_range_deg"] = tuple(scene_doc["elevation_range_deg"])
        spec = SceneSpec(**scene_doc)
        if counts:
            spec.counts.update({k: tuple(v) for k, v in counts.items()})
        model_doc = dict(doc.get("model", {}))
        for k in model_doc:
            if k not in ModelConfig().__dict__:
                raise ConfigError("unknown model option %r" % k)
        if "feature_cols" in model_doc:
            model_doc["feature_cols"] = tuple(model_doc["feature_cols"])
        train_doc = dict(doc.get("train", {}))
        for k in train_doc:
            if k not in DistillConfig().to_dict():
                raise ConfigError("unknown train option %r" % k)
        run = dict(doc.get("run", {}))
        cfg = cls(scene=spec, model=ModelConfig(**model_doc),
                  train=DistillConfig(**train_doc))
        for k, v in run.items():
            if not hasattr(cfg, k):
                raise ConfigError("unknown run option %r" % k)
            setattr(cfg, k, v)
        return cfg

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(_strip_counts(parse_toml_like(fh.read())))

    def save(self, path: str) -> None:
        doc = self.to_dict()
        # counts is the one nested table; flatten it into scene keys
        counts = doc["scene"].pop("counts")
        for k, v in counts.items():
            doc["scene"]["count_" + k] = v
        with open(path, "w") as fh:
            fh.write(format_toml_like(doc))

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _strip_counts(doc: dict) -> dict:
    scene = doc.get("scene")
    if scene:
        counts = {}
        for key in list(scene):
            if key.startswith("count_"):
                counts[key[len("count_"):]] = scene.pop(key)
        if counts:
            scene["counts"] = counts
    return doc


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Dotted-path overrides, e.g. {"train.seed": 3, "run.out_dir": "x"}."""
    doc = cfg.to_dict()
    for path, value in overrides.items():
        section, _, key = path.partition(".")
        if not key or section not in doc:
            raise ConfigError("override %r is not section.key" % path)
        if section == "scene" and key.startswith("count_"):
            doc["scene"]["counts"][key[len("count_"):]] = value
            continue
        if key not in doc[section]:
            raise ConfigError("unknown config key %r" % path)
        current = doc[section][key]
        if isinstance(current, bool):
            value = value in (True, "true", "1", 1)
        elif isinstance(current, int) and not isinstance(current, bool):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        doc[section][key] = value
    return ExperimentConfig.from_dict(doc)
