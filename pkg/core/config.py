# core/config.py
"""
Run configuration: one pydantic tree covering paths, phantom generation,
preprocessing, training and TTA.

Loaded from .json or .toml files; unknown keys are rejected. Resolution order
is command-line flags > config file > built-in defaults, and generic
``section.key=value`` overrides are applied on top.
"""
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.errors import ConfigError, MissingPath
from core.inference import TTASpec
from core.networks import Arch, ModelSpec
from core.preprocessing import ResizeSpec, SliceFilterSpec
from core.training import TrainConfig
from core.utils import PathLike


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_root: Optional[str] = None
    masks_root: Optional[str] = None
    work_dir: Optional[str] = None


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_per_class: int = Field(default=50, ge=1)
    seed: int = 0
    size: int = Field(default=224, ge=16)
    n_slices_min: int = Field(default=40, ge=16)
    n_slices_max: int = Field(default=80, ge=16)
    noise_sigma: float = Field(default=0.05, ge=0.0)
    domain_shift: bool = True
    domain_offset: float = 0.08
    n_per_class_b: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_slices(self):
        if self.n_slices_min > self.n_slices_max:
            raise ConfigError(f"synth.n_slices_min ({self.n_slices_min}) > synth.n_slices_max ({self.n_slices_max})")
        return self

    @property
    def n_slices_range(self):
        return (self.n_slices_min, self.n_slices_max)


class PreprocessingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    filter: SliceFilterSpec = Field(default_factory=SliceFilterSpec)
    resize: ResizeSpec = Field(default_factory=ResizeSpec)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    paths: PathsConfig = Field(default_factory=PathsConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    preprocessing: PreprocessingConfig = Field(default_factory=PreprocessingConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    tta: TTASpec = Field(default_factory=TTASpec)
    verbosity: int = Field(default=1, ge=0, le=2)

    @classmethod
    def desk_scale(cls) -> "RunConfig":
        """Small CPU-friendly setup: 64x64 slices resampled to 16x64x64, quarter-width network"""
        return cls(
            synth=SynthConfig(n_per_class=60, size=64),
            preprocessing=PreprocessingConfig(resize=ResizeSpec(depth=16, height=64, width=64)),
            training=TrainConfig(
                arch=ModelSpec(arch=Arch.HYBRID_DECOVNET, width_multiplier=0.25),
                batch_size=4, epochs=10, warmup_epochs=1, lr0=1e-3,
            ),
        )


def _validate(data: Dict[str, Any], source: str) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration in {source}: {e}") from e


def load_config(path: PathLike, base: Optional[RunConfig] = None) -> RunConfig:
    """
    Read a .json or .toml config. Sections present in the file replace the
    matching keys of ``base`` (defaults when omitted); everything else is kept.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingPath(f"config file not found: {path}")
    try:
        if path.suffix.lower() == ".toml":
            with open(path, 'rb') as f:
                data = tomllib.load(f)
        elif path.suffix.lower() == ".json":
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        else:
            raise ConfigError(f"unsupported config format '{path.suffix}' (use .json or .toml)")
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    merged = _merge(base.model_dump(mode="json") if base is not None else {}, data)
    return _validate(merged, str(path))


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def dump_config(config: RunConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2) + "\n"


def save_config(config: RunConfig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dump_config(config))
    return path


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (values parsed as JSON, else kept as strings)"""
    data = config.model_dump(mode="json")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override '{item}' has an empty key")
        node = data
        for depth, key in enumerate(keys[:-1]):
            if not isinstance(node.get(key), dict):
                raise ConfigError(f"unknown config section '{'.'.join(keys[:depth + 1])}'")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key '{dotted.strip()}'")
        node[keys[-1]] = _parse_value(raw.strip())
    return _validate(data, "overrides")
