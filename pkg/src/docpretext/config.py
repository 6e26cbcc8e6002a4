"""Run configuration: one ``key = value`` file with dotted namespaces.

    # comments and blank lines are ignored
    train.learning_rate = 0.001
    encoder.pool = 4

Command-line overrides win over file values, which win over defaults.
Every key must be in :data:`SCHEMA`; values are checked against its type.
"""

from __future__ import annotations

import difflib
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model_training import EncoderSpec, TrainConfig
from .pretext_geometry import GridSpec
from .seeding import root_seed_from_env

# key -> (type, default); "ints" is a comma-separated list, "float?" / "int?" accept "none"
SCHEMA: dict[str, tuple[str, object]] = {
    "seed.root": ("int", None),
    "data.image_size": ("int", 384),
    "train.steps": ("int", 1000),
    "train.batch_size": ("int", 16),
    "train.learning_rate": ("float", 0.01),
    "train.momentum": ("float", 0.9),
    "train.weight_decay": ("float", 0.0),
    "train.optimizer": ("str", "sgd"),
    "encoder.arch": ("str", "conv"),
    "encoder.channels": ("ints", (32, 64, 128, 256)),
    "encoder.kernel": ("int", 3),
    "encoder.stride": ("int", 2),
    "encoder.pool": ("int", 1),
    "encoder.min_input": ("int", 96),
    "grid.cells_per_side": ("int", 3),
    "grid.patch": ("int", 118),
    "grid.jitter": ("int", 10),
    "permset.cells": ("int", 9),
    "permset.count": ("int", 100),
    "lda.topics": ("int", 64),
    "lda.alpha": ("float?", None),
    "lda.beta": ("float", 0.01),
    "lda.iters": ("int", 200),
    "lda.infer_iters": ("int", 50),
    "lda.burn_in": ("int", 10),
    "lda.min_df": ("int", 5),
    "lda.max_size": ("int", 10000),
    "nat.dim": ("int?", None),
    "eval.mode": ("str", "finetune"),
    "eval.sample_sizes": ("ints", (10, 20, 50, 100)),
    "eval.repeats": ("int", 10),
    "eval.probe_c": ("float", 1.0),
    "viz.steps": ("int", 50),
    "viz.step_size": ("float", 0.01),
}


def _parse(key: str, raw, kind: str):
    if not isinstance(raw, str):
        raw = ",".join(map(str, raw)) if isinstance(raw, (list, tuple)) else str(raw)
    text = raw.strip()
    try:
        if kind.endswith("?"):
            if text.lower() in ("none", ""):
                return None
            kind = kind[:-1]
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "ints":
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None


def _check_key(key: str) -> None:
    if key in SCHEMA:
        return
    close = difflib.get_close_matches(key, SCHEMA, n=1, cutoff=0.6)
    if not close:
        # match on the last segment so "learnin_rate" finds "train.learning_rate"
        tails = {k.rsplit(".", 1)[-1]: k for k in SCHEMA}
        hit = difflib.get_close_matches(key.rsplit(".", 1)[-1], tails, n=1, cutoff=0.6)
        close = [tails[hit[0]]] if hit else []
    hint = f"; did you mean {close[0]!r}?" if close else ""
    raise ConfigError(f"unknown config key {key!r}{hint}")


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        _check_key(key)
        return self.values[key]

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    @property
    def seed(self) -> int:
        return self.values["seed.root"]

    def encoder_spec(self) -> EncoderSpec:
        if self["encoder.arch"] == "inception_v3":
            return EncoderSpec.inception_v3()
        k, s = self["encoder.kernel"], self["encoder.stride"]
        return EncoderSpec(stages=tuple((c, k, s) for c in self["encoder.channels"]),
                           min_input=self["encoder.min_input"], pool=self["encoder.pool"])

    def grid_spec(self) -> GridSpec:
        return GridSpec(image_size=self["data.image_size"], grid=self["grid.cells_per_side"],
                        patch=self["grid.patch"], jitter=self["grid.jitter"])

    def train_config(self, **paths) -> TrainConfig:
        return TrainConfig(steps=self["train.steps"], batch_size=self["train.batch_size"],
                           lr=self["train.learning_rate"], momentum=self["train.momentum"],
                           weight_decay=self["train.weight_decay"], optimizer=self["train.optimizer"],
                           seed=self.seed, image_size=self["data.image_size"],
                           encoder=self.encoder_spec(), grid=self.grid_spec(),
                           nat_dim=self["nat.dim"], **paths)


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``.

    ``overrides`` is a mapping or an iterable of ``"key=value"`` strings.
    An unset ``seed.root`` falls back to ``$DOCPRETEXT_SEED`` and then 0.
    """
    raw: dict = {}
    if path is not None:
        p = Path(path)
        try:
            raw.update(parse_lines(p.read_text(encoding="utf-8"), str(p)))
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
    if overrides:
        if isinstance(overrides, dict):
            raw.update(overrides)
        else:
            for item in overrides:
                if "=" not in item:
                    raise ConfigError(f"override {item!r} is not key=value")
                key, value = item.split("=", 1)
                raw[key.strip()] = value
    values = {}
    for key in raw:
        _check_key(key)
    for key, (kind, default) in SCHEMA.items():
        values[key] = _parse(key, raw[key], kind) if key in raw and raw[key] is not None else default
    if values["seed.root"] is None:
        try:
            values["seed.root"] = root_seed_from_env()
        except ValueError:
            raise ConfigError("DOCPRETEXT_SEED must be an integer") from None
    return RunConfig(values)
