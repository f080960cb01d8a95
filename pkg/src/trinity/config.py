"""Run configuration: one flat ``key = value`` namespace, overridable from flags.

Keys are prefixed by the component they configure (``gen.``, ``model.``,
``train.``, ``eval.``). Unknown keys are rejected rather than ignored.
"""
from __future__ import annotations

from dataclasses import fields

from .dataset_io import format_kv, read_kv
from .datagen import DEFAULT_OBJECTS, GenConfig, ObjectType
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

_GEN_KEYS = {
    "gen.height": int, "gen.width": int, "gen.texture_pool": int,
    "gen.min_terrains": int, "gen.max_terrains": int, "gen.slots": int,
    "gen.scale_min": float, "gen.scale_max": float, "gen.sky_min": float, "gen.sky_max": float,
    "gen.seed": int, "gen.pool_seed": int, "gen.objects": str,
}
_MODEL_KEYS = {f"model.{f.name}": int for f in fields(ModelConfig)}
_TRAIN_KEYS = {
    "train.lr": float, "train.steps": int, "train.batch_size": int, "train.aux_weight": float,
    "train.seed": int, "train.checkpoint_every": int, "train.match_cost": str, "train.class_weights": str,
}
_OTHER_KEYS = {"taxonomy": str, "eval.threshold": float}
KNOWN = {**_GEN_KEYS, **_MODEL_KEYS, **_TRAIN_KEYS, **_OTHER_KEYS}


class RunConfig:
    def __init__(self, values: dict[str, str] | None = None):
        self.values: dict[str, str] = {}
        for k, v in (values or {}).items():
            self.set(k, v)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls(read_kv(path))

    def set(self, key: str, value) -> None:
        if key not in KNOWN:
            raise ConfigError(f"unknown config key {key!r}")
        text = str(value)
        try:
            KNOWN[key](text)
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {KNOWN[key].__name__}") from None
        self.values[key] = text

    def get(self, key: str, default=None):
        if key not in KNOWN:
            raise ConfigError(f"unknown config key {key!r}")
        return KNOWN[key](self.values[key]) if key in self.values else default

    def to_text(self) -> str:
        return format_kv(sorted(self.values.items()))

    # -- typed views ------------------------------------------------------------
    def gen_config(self) -> GenConfig:
        d = GenConfig()
        objects = d.objects
        if "gen.objects" in self.values:
            objects = parse_objects(self.values["gen.objects"])
        cfg = GenConfig(
            height=self.get("gen.height", d.height),
            width=self.get("gen.width", d.width),
            texture_pool=self.get("gen.texture_pool", d.texture_pool),
            min_terrains=self.get("gen.min_terrains", d.min_terrains),
            max_terrains=self.get("gen.max_terrains", d.max_terrains),
            max_slots=self.get("gen.slots", d.max_slots),
            objects=objects,
            scale_range=(self.get("gen.scale_min", d.scale_range[0]), self.get("gen.scale_max", d.scale_range[1])),
            sky_fraction=(self.get("gen.sky_min", d.sky_fraction[0]), self.get("gen.sky_max", d.sky_fraction[1])),
            seed=self.get("gen.seed", d.seed),
            pool_seed=self.get("gen.pool_seed", d.pool_seed),
        )
        cfg.validate()
        return cfg

    def model_config(self, num_cs: int, num_slots: int) -> ModelConfig:
        """Model hyperparameters; class and slot counts must agree with the taxonomy."""
        for key, want in (("model.num_cs", num_cs), ("model.num_slots", num_slots)):
            got = self.get(key)
            if got is not None and got != want:
                raise ConfigError(f"{key} = {got} contradicts the taxonomy ({want})")
        kwargs = {f.name: self.get(f"model.{f.name}") for f in fields(ModelConfig)}
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        kwargs.update(num_cs=num_cs, num_slots=num_slots)
        return ModelConfig(**kwargs)

    def train_config(self) -> TrainConfig:
        d = TrainConfig()
        weights = None
        if "train.class_weights" in self.values:
            try:
                weights = tuple(float(v) for v in self.values["train.class_weights"].split(","))
            except ValueError:
                raise ConfigError("train.class_weights must be comma-separated numbers") from None
        return TrainConfig(
            lr=self.get("train.lr", d.lr),
            steps=self.get("train.steps", d.steps),
            batch_size=self.get("train.batch_size", d.batch_size),
            aux_weight=self.get("train.aux_weight", d.aux_weight),
            seed=self.get("train.seed", d.seed),
            checkpoint_every=self.get("train.checkpoint_every", d.checkpoint_every),
            match_cost=self.get("train.match_cost", d.match_cost),
            class_weights=weights,
        )


def parse_objects(text: str) -> tuple[ObjectType, ...]:
    """``name:shape:probability`` entries separated by commas; colours come from the defaults."""
    palette = {o.name: o.color for o in DEFAULT_OBJECTS}
    fallback = {"circle": (0.55, 0.52, 0.50), "rectangle": (0.75, 0.30, 0.25), "triangle": (0.10, 0.45, 0.12)}
    out = []
    for entry in filter(None, (e.strip() for e in text.split(","))):
        parts = entry.split(":")
        if len(parts) != 3:
            raise ConfigError(f"gen.objects entry {entry!r} must be name:shape:probability")
        name, shape, prob = parts
        if shape not in fallback:
            raise ConfigError(f"gen.objects: unknown shape {shape!r}")
        try:
            p = float(prob)
        except ValueError:
            raise ConfigError(f"gen.objects: bad probability {prob!r}") from None
        out.append(ObjectType(name, shape, palette.get(name, fallback[shape]), p))
    return tuple(out)
