"""
Run configuration: pipeline, dataset, training runtime and output directory.

Sources in increasing precedence: built-in defaults, a TOML file with
[dataset], [pipeline], [train] and [output] sections, the CRPN_THREADS
environment variable, then command-line overrides.
"""

import logging
import os
import tomllib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping

from cascade_pipeline import BackboneSpec, LevelSpec, PipelineConfig, Schedule
from errors import ConfigError
from synth_data import DatasetSpec

logger = logging.getLogger(__name__)

THREADS_ENV = "CRPN_THREADS"

# [pipeline] keys that do not map 1:1 onto PipelineConfig fields
_STRUCTURED_KEYS = {"levels", "backbone_channels", "backbone_downsample", "base_lr", "decay_points", "lr_factor"}
_DERIVED_FIELDS = {"levels", "backbone", "schedule", "stage_assign"}
PIPELINE_KEYS = {f.name for f in fields(PipelineConfig)} - _DERIVED_FIELDS | _STRUCTURED_KEYS
DATASET_KEYS = {f.name for f in fields(DatasetSpec)}


def _make_dir(directory: Path, field_name: str) -> Path:
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {directory}: {e}", field_name)
    return directory


def ensure_parent_dir(path, field_name: str = "out") -> Path:
    """Create the directory an output file goes into and return the file path"""
    path = Path(path)
    _make_dir(path.parent, field_name)
    return path


@dataclass(frozen=True)
class TrainConfig:
    threads: int = 1
    val_scenes: int = 128

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError(f"must be >= 1, got {self.threads}", "threads")
        if self.val_scenes < 0:
            raise ConfigError(f"must be >= 0, got {self.val_scenes}", "val_scenes")


TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
OUTPUT_KEYS = {"dir"}
SECTIONS = {"dataset": DATASET_KEYS, "pipeline": PIPELINE_KEYS, "train": TRAIN_KEYS, "output": OUTPUT_KEYS}


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: Path = Path("runs")

    def run_tag(self) -> str:
        """Filename suffix naming every non-default ablation setting; empty for the defaults"""
        default = PipelineConfig()
        p = self.pipeline
        parts = []
        if p.num_stages != default.num_stages:
            parts.append(f"T{p.num_stages}")
        if p.alignment != default.alignment:
            parts.append(f"align-{p.alignment}")
        if p.metric != default.metric:
            parts.append(p.metric)
        if not p.use_stats:
            parts.append("nostats")
        if not p.use_iou_loss:
            parts.append("noiou")
        if p.nms_threshold != default.nms_threshold:
            parts.append(f"nms{p.nms_threshold:g}")
        if p.max_proposals != default.max_proposals:
            parts.append(f"top{p.max_proposals}")
        if p.seed != default.seed:
            parts.append(f"seed{p.seed}")
        return "".join(f"_{part}" for part in parts)

    def ensure_output_dir(self) -> Path:
        return _make_dir(self.output_dir, "output.dir")

    @property
    def metrics_path(self) -> Path:
        return self.output_dir / f"metrics{self.run_tag()}.csv"

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / f"model{self.run_tag()}.crpnw"


def _check_keys(raw: Mapping[str, Any], source: str):
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section in {source}", section)
        if not isinstance(values, Mapping):
            raise ConfigError(f"section must be a table in {source}", section)
        for key in values:
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key in {source}", f"{section}.{key}")


def read_toml(path) -> Dict[str, Dict[str, Any]]:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist", "config")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}", "config")
    _check_keys(raw, str(path))
    return raw


def _build_pipeline(values: Dict[str, Any], in_channels: int) -> PipelineConfig:
    values = dict(values)
    default_backbone = BackboneSpec()
    default_schedule = Schedule()

    levels = values.pop("levels", None)
    if levels is not None:
        try:
            values["levels"] = tuple(LevelSpec(int(stride), int(base)) for stride, base in levels)
        except (TypeError, ValueError):
            raise ConfigError(f"expected a list of [stride, base_size] pairs, got {levels}", "pipeline.levels")

    values["backbone"] = BackboneSpec(
        channels=tuple(values.pop("backbone_channels", default_backbone.channels)),
        downsample=tuple(values.pop("backbone_downsample", default_backbone.downsample)),
        in_channels=in_channels,
    )
    values["schedule"] = Schedule(
        base_lr=values.pop("base_lr", default_schedule.base_lr),
        decay_points=tuple(values.pop("decay_points", default_schedule.decay_points)),
        factor=values.pop("lr_factor", default_schedule.factor),
    )
    if "alpha" in values:
        values["alpha"] = tuple(values["alpha"])
    return PipelineConfig(**values)


def load_config(path=None, overrides: Mapping[str, Mapping[str, Any]] = None,
                env: Mapping[str, str] = None) -> RunConfig:
    """
    Build a RunConfig.

    `overrides` has the same section/key shape as the TOML file and wins over
    it; command-line flags arrive this way.
    """
    env = os.environ if env is None else env
    merged: Dict[str, Dict[str, Any]] = {section: {} for section in SECTIONS}

    if path is not None:
        for section, values in read_toml(path).items():
            merged[section].update(values)
        logger.info("loaded config %s", path)

    threads = env.get(THREADS_ENV)
    if threads:
        try:
            merged["train"]["threads"] = int(threads)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got '{threads}'", "threads")

    if overrides:
        _check_keys(overrides, "overrides")
        for section, values in overrides.items():
            merged[section].update({k: v for k, v in values.items() if v is not None})

    try:
        dataset = DatasetSpec(**merged["dataset"])
        pipeline = _build_pipeline(merged["pipeline"], dataset.channels)
        train = TrainConfig(**merged["train"])
    except TypeError as e:
        raise ConfigError(str(e), "config")
    output_dir = Path(merged["output"].get("dir", RunConfig.output_dir))
    return RunConfig(pipeline, dataset, train, output_dir)
