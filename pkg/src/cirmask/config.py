"""Config schema, resolution, and provenance tracking.

Configuration is a flat tree of dotted keys.  Values resolve in three
layers: built-in defaults, then the config file, then command-line
overrides, and every key remembers which layer set it.  Unknown keys
and type mismatches are rejected up front.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


def _in_unit_interval(v):
    return 0.0 <= v <= 1.0


@dataclass(frozen=True)
class KeySpec:
    type: type
    default: object
    choices: tuple | None = None
    check: object = None  # optional value validator
    help: str = ""


SCHEMA: dict[str, KeySpec] = {
    "seed": KeySpec(int, 0, help="global random seed"),
    "backbone.name": KeySpec(str, "stub", choices=("stub", "vit-l-14", "vit-b-32")),
    "backbone.weights_path": KeySpec(str, "", help="local weight directory for CLIP backbones"),
    "data.manifest": KeySpec(str, "", help="caption<TAB>image_path training manifest"),
    "data.limit": KeySpec(int, 0, check=lambda v: v >= 0, help="0 means no limit"),
    "data.benchmark_root": KeySpec(str, ""),
    "train.batch_size": KeySpec(int, 128, check=lambda v: v >= 1),
    "train.epochs": KeySpec(int, 10, check=lambda v: v >= 1),
    "train.learning_rate": KeySpec(float, 1e-4, check=lambda v: v > 0),
    "train.weight_decay": KeySpec(float, 0.01, check=lambda v: v >= 0),
    "train.alpha": KeySpec(float, 0.5, check=lambda v: v >= 0,
                           help="weight of the query-target loss"),
    "train.grad_clip": KeySpec(float, 0.0, check=lambda v: v >= 0, help="0 disables clipping"),
    "mask.tau": KeySpec(float, 0.3, check=_in_unit_interval,
                        help="relevance threshold splitting kept and replaced patches"),
    "mask.relevance_provider": KeySpec(str, "stub", choices=("stub", "gradient-attention")),
    "mask.pos_tagger": KeySpec(str, "builtin", choices=("builtin",)),
    "inversion.hidden_dim": KeySpec(int, 3072, check=lambda v: v >= 0,
                                    help="0 scales with the backbone (4x embedding width)"),
    "inversion.dropout": KeySpec(float, 0.0, check=_in_unit_interval),
    "loss.temperature": KeySpec(float, 0.0, check=lambda v: v >= 0,
                                help="0 uses the backbone's own logit scale"),
    "output.dir": KeySpec(str, "runs"),
}


@dataclass
class ResolvedConfig:
    values: dict[str, object]
    provenance: dict[str, str] = field(default_factory=dict)

    def get(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key '{key}'")
        return self.values[key]

    def hash(self) -> str:
        canonical = json.dumps(self.values, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:8]

    def echo(self, path: str | Path) -> Path:
        """Write the resolved tree as a loadable config file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.values, fh, sort_keys=True)
        return path

    def echo_provenance(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.provenance, fh, sort_keys=True)
        return path


def _flatten(tree: dict, prefix: str = "") -> dict[str, object]:
    flat: dict[str, object] = {}
    for key, value in tree.items():
        full = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, dict):
            flat.update(_flatten(value, full))
        else:
            flat[full] = value
    return flat


def _coerce(key: str, value, spec: KeySpec):
    try:
        if spec.type is int:
            if isinstance(value, bool) or (isinstance(value, float)
                                           and value != int(value)):
                raise ValueError
            coerced = int(value)
        elif spec.type is float:
            coerced = float(value)
        else:
            coerced = str(value)
    except (TypeError, ValueError):
        raise ConfigError(
            f"config key '{key}' expects {spec.type.__name__}, got {value!r}"
        ) from None
    if spec.choices and coerced not in spec.choices:
        raise ConfigError(f"config key '{key}' must be one of {list(spec.choices)}, "
                          f"got {coerced!r}")
    if spec.check and not spec.check(coerced):
        raise ConfigError(f"config key '{key}' rejected value {coerced!r}"
                          + (f" ({spec.help})" if spec.help else ""))
    return coerced


def resolve_config(file: str | Path | None = None,
                   overrides: dict[str, object] | None = None) -> ResolvedConfig:
    """Merge defaults, config file, and overrides, with provenance per key."""
    values = {key: spec.default for key, spec in SCHEMA.items()}
    provenance = {key: "default" for key in SCHEMA}
    if file:
        path = Path(file)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                tree = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"config file {path} must hold a key-value tree")
        for key, value in _flatten(tree).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key '{key}' in {path}")
            values[key] = _coerce(key, value, SCHEMA[key])
            provenance[key] = "file"
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, value, SCHEMA[key])
        provenance[key] = "cli"
    return ResolvedConfig(values=values, provenance=provenance)


def train_config_from(resolved: ResolvedConfig, checkpoint_dir: str,
                      log_path: str | None = None):
    """Bridge the resolved tree into the training module's typed config."""
    from .training import TrainConfig

    manifest = resolved.get("data.manifest")
    if not manifest:
        raise ConfigError("data.manifest is required for training")
    return TrainConfig(
        manifest=manifest,
        checkpoint_dir=checkpoint_dir,
        batch_size=resolved.get("train.batch_size"),
        epochs=resolved.get("train.epochs"),
        learning_rate=resolved.get("train.learning_rate"),
        weight_decay=resolved.get("train.weight_decay"),
        alpha=resolved.get("train.alpha"),
        tau=resolved.get("mask.tau"),
        seed=resolved.get("seed"),
        backbone=resolved.get("backbone.name"),
        weights_path=resolved.get("backbone.weights_path") or None,
        relevance_provider=resolved.get("mask.relevance_provider"),
        pos_tagger=resolved.get("mask.pos_tagger"),
        limit=resolved.get("data.limit") or None,
        temperature=resolved.get("loss.temperature") or None,
        hidden_dim=resolved.get("inversion.hidden_dim") or None,
        dropout=resolved.get("inversion.dropout"),
        grad_clip=resolved.get("train.grad_clip"),
        log_path=log_path,
        config_hash=resolved.hash(),
    )
