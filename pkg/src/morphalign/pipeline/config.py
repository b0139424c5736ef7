"""Run configuration: a YAML file, an environment override, and CLI overrides."""

from __future__ import annotations

import copy
import enum
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from morphalign.refiner.model import RefinerConfig
from morphalign.stepflow import EstimatorConfig
from morphalign.synthmotion import PerturbBounds

DATASET_ROOT_ENV = "MORPHALIGN_DATASET_ROOT"


class ConfigError(ValueError):
    pass


class FlowSource(str, enum.Enum):
    BUILTIN_ESTIMATOR = "builtin_estimator"
    EXTERNAL_FLO_DIR = "external_flo_dir"
    ANALYTIC_GT = "analytic_gt"
    CORRUPTED_GT = "corrupted_gt"


class MaskPolicy(str, enum.Enum):
    VALID = "valid"        # flow validity and in-frame sampling
    INTERIOR = "interior"  # VALID minus a border of ceil(max gt displacement)
    FULL = "full"          # every pixel


@dataclass
class TrainingOptions:
    crops_per_pair: int = 16
    crop_size: int = 64
    composed_fraction: float = 0.5
    preset: str = "desk"


@dataclass
class PipelineConfig:
    dataset_root: str = "data"
    work_dir: str = "run"
    K: int = 5
    seed: int = 0
    bounds: PerturbBounds = field(default_factory=PerturbBounds)
    corruption: dict = field(default_factory=lambda: {"amplitude": 4.0, "grid": 8, "drift": 2.0})
    split_fractions: tuple = (0.8, 0.1, 0.1)
    train_split: str = "train"
    val_split: str = "val"
    eval_split: str = "test"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    training: TrainingOptions = field(default_factory=TrainingOptions)
    flow_source: FlowSource = FlowSource.BUILTIN_ESTIMATOR
    external_flow_dir: Optional[str] = None
    mask_policy: MaskPolicy = MaskPolicy.VALID
    appearance_strength: float = 0.0
    cd_pred_dir: Optional[str] = None
    jobs: int = 1

    # -- validation --------------------------------------------------------

    def validate(self, need_dataset: bool = False) -> "PipelineConfig":
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must be three fractions summing to 1")
        try:
            self.bounds.validate()
            self.estimator.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if need_dataset and not Path(self.dataset_root).is_dir():
            raise ConfigError(f"dataset_root {self.dataset_root} does not exist")
        if self.flow_source is FlowSource.EXTERNAL_FLO_DIR:
            if not self.external_flow_dir:
                raise ConfigError("flow_source external_flo_dir requires external_flow_dir")
            if not Path(self.external_flow_dir).is_dir():
                raise ConfigError(f"external_flow_dir {self.external_flow_dir} does not exist")
        return self

    # -- (de)serialisation -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dataset_root": self.dataset_root,
            "work_dir": self.work_dir,
            "K": self.K,
            "seed": self.seed,
            "bounds": self.bounds.to_dict(),
            "corruption": dict(self.corruption),
            "split_fractions": list(self.split_fractions),
            "train_split": self.train_split,
            "val_split": self.val_split,
            "eval_split": self.eval_split,
            "estimator": asdict(self.estimator),
            "refiner": self.refiner.to_dict(),
            "training": asdict(self.training),
            "flow_source": self.flow_source.value,
            "external_flow_dir": self.external_flow_dir,
            "mask_policy": self.mask_policy.value,
            "appearance_strength": self.appearance_strength,
            "cd_pred_dir": self.cd_pred_dir,
            "jobs": self.jobs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            if "bounds" in d:
                d["bounds"] = PerturbBounds.from_dict(d["bounds"])
            if "estimator" in d:
                d["estimator"] = EstimatorConfig(**d["estimator"])
            if "refiner" in d:
                d["refiner"] = RefinerConfig.from_dict(d["refiner"])
            if "training" in d:
                d["training"] = TrainingOptions(**d["training"])
            if "flow_source" in d:
                d["flow_source"] = FlowSource(d["flow_source"])
            if "mask_policy" in d:
                d["mask_policy"] = MaskPolicy(d["mask_policy"])
            if "split_fractions" in d:
                d["split_fractions"] = tuple(float(v) for v in d["split_fractions"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path=None, overrides: Optional[dict] = None, environ=None) -> PipelineConfig:
    """Resolve the configuration: defaults < file < environment < overrides.

    ``overrides`` maps dotted keys (``refiner.lr``) to values; strings are
    parsed as YAML scalars so ``"1e-3"`` or ``"true"`` get their natural type.
    """
    environ = os.environ if environ is None else environ
    data = PipelineConfig().to_dict()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        _merge(data, loaded)
    if environ.get(DATASET_ROOT_ENV):
        data["dataset_root"] = environ[DATASET_ROOT_ENV]
    for key, value in (overrides or {}).items():
        set_dotted(data, key, value)
    return PipelineConfig.from_dict(data)


def _merge(base: dict, new: dict) -> None:
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "corruption":
            _merge(base[k], v)
        else:
            base[k] = copy.deepcopy(v)


def set_dotted(data: dict, key: str, value) -> None:
    parts = key.replace("-", "_").split(".")
    node = data
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config section {part!r} in {key!r}")
        node = node[part]
    old = node.get(parts[-1])
    if isinstance(value, str):
        value = yaml.safe_load(value) if value != "" else value
        # YAML 1.1 reads "1e-3" as a string; follow the type being replaced
        if isinstance(old, float) and not isinstance(old, bool) and isinstance(value, (str, int)):
            try:
                value = float(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from exc
    node[parts[-1]] = value


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
