"""Pipeline configuration: JSON documents validated against a shipped schema.

Unknown keys are rejected (typo safety) and the seed is mandatory. Defaults:
beta=400 and tau=1.0 for the distillation gate, b_min=2 and restarts=8 for the
bit search, momentum=0.937 / weight_decay=0.0005 / lr=0.01 for SGD.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import jsonschema

from .train import TrainConfig

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Configuration document is invalid."""


def _load_schema() -> dict:
    ref = resources.files("mixbit") / "schemas" / "config.schema.json"
    return json.loads(ref.read_text(encoding="utf-8"))


_SCHEMA = _load_schema()

_DEFAULTS = {name: prop["default"] for name, prop in _SCHEMA["properties"].items()
             if "default" in prop}


@dataclass
class Config:
    seed: int
    epochs: int
    student_epochs: int
    batch_size: int
    lr: float
    student_lr: float
    momentum: float
    student_momentum: float
    weight_decay: float
    threshold: float
    b_min: int
    restarts: int
    beta: float
    tau: float
    d_embed: int
    off_logit: float
    exempt_first_layer: bool
    n_scenes: int
    classes: int
    image_size: int
    max_objects: int
    conf_threshold: float
    nms_iou: float
    iou_threshold: float

    def train_config(self, student: bool = False) -> TrainConfig:
        return TrainConfig(
            seed=self.seed,
            epochs=self.student_epochs if student else self.epochs,
            batch_size=self.batch_size,
            lr=self.student_lr if student else self.lr,
            momentum=self.student_momentum if student else self.momentum,
            weight_decay=self.weight_decay, threshold=self.threshold,
            b_min=self.b_min, restarts=self.restarts, beta=self.beta,
            tau=self.tau, d_embed=self.d_embed, off_logit=self.off_logit,
            exempt_first_layer=self.exempt_first_layer)

    def resolved(self) -> dict:
        """Full effective configuration, defaults applied, for run logs."""
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        doc["schema_version"] = CONFIG_SCHEMA_VERSION
        return doc


def parse_config(doc: dict) -> Config:
    try:
        jsonschema.validate(doc, _SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"invalid config: {e.message}") from e
    merged = dict(_DEFAULTS)
    merged.update(doc)
    merged.pop("schema_version", None)
    merged.setdefault("student_epochs", merged["epochs"])
    merged.setdefault("student_lr", merged["lr"])
    merged.setdefault("student_momentum", merged["momentum"])
    return Config(**merged)


def load_config(path) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return parse_config(doc)
