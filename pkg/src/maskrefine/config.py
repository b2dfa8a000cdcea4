"""INI config file handling: one file drives every CLI command, flags
override, and the effective config is persisted next to outputs so any
run can be reproduced from its own artifacts."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .masking import MaskSamplerConfig
from .models import TrainConfig
from .phantom import PhantomSpec
from .refinement import RefinementConfig
from .service import ServiceConfig


@dataclass
class DataConfig:
    kind: str = "phantom"  # phantom | dataset | nifti_dir
    dataset_dir: str = ""
    nifti_dir: str = ""
    axis: int = 2
    min_brain_fraction: float = 0.05
    modality: str = ""


@dataclass
class PhantomRunConfig:
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    count: int = 500
    validation_count: int = 50


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomRunConfig = field(default_factory=PhantomRunConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refinement: RefinementConfig = field(default_factory=lambda: RefinementConfig(tau=0.3))
    percentile: float = 80.0
    service: ServiceConfig = field(default_factory=ServiceConfig)
    seed: int = 0


def _get(parser, section, key, cast, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key).strip()
    if raw == "":
        return default
    try:
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _tuple_of(cast):
    def parse(raw: str):
        return tuple(cast(part.strip()) for part in raw.split(",") if part.strip())

    return parse


def load_config(path: str | Path | None) -> PipelineConfig:
    """Parse an INI file into the typed pipeline config; a missing path
    yields all defaults, a nonexistent explicit path is an error."""
    config = PipelineConfig()
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config {path}: {exc}") from exc

    d = config.data
    config.data = DataConfig(
        kind=_get(parser, "data", "kind", str, d.kind),
        dataset_dir=_get(parser, "data", "dataset_dir", str, d.dataset_dir),
        nifti_dir=_get(parser, "data", "nifti_dir", str, d.nifti_dir),
        axis=_get(parser, "data", "axis", int, d.axis),
        min_brain_fraction=_get(
            parser, "data", "min_brain_fraction", float, d.min_brain_fraction
        ),
        modality=_get(parser, "data", "modality", str, d.modality),
    )

    ps = config.phantom.spec
    pairs = _tuple_of(float)
    int_pairs = _tuple_of(int)
    spec = PhantomSpec(
        size=_get(parser, "phantom", "size", int, ps.size),
        blob_count_range=_get(parser, "phantom", "blob_count_range", int_pairs, ps.blob_count_range),
        blob_radius_range=_get(parser, "phantom", "blob_radius_range", pairs, ps.blob_radius_range),
        blob_contrast_range=_get(
            parser, "phantom", "blob_contrast_range", pairs, ps.blob_contrast_range
        ),
        central_scale_range=_get(
            parser, "phantom", "central_scale_range", pairs, ps.central_scale_range
        ),
        central_contrast_range=_get(
            parser, "phantom", "central_contrast_range", pairs, ps.central_contrast_range
        ),
        gradient_amplitude=_get(
            parser, "phantom", "gradient_amplitude", float, ps.gradient_amplitude
        ),
        noise_level=_get(parser, "phantom", "noise_level", float, ps.noise_level),
        noise_smoothness=_get(parser, "phantom", "noise_smoothness", float, ps.noise_smoothness),
        lesion=_get(parser, "phantom", "lesion", bool, ps.lesion),
        lesion_offset_range=_get(
            parser, "phantom", "lesion_offset_range", pairs, ps.lesion_offset_range
        ),
        lesion_radius_range=_get(
            parser, "phantom", "lesion_radius_range", pairs, ps.lesion_radius_range
        ),
        seed=_get(parser, "phantom", "seed", int, ps.seed),
    )
    config.phantom = PhantomRunConfig(
        spec=spec,
        count=_get(parser, "phantom", "count", int, config.phantom.count),
        validation_count=_get(
            parser, "phantom", "validation_count", int, config.phantom.validation_count
        ),
    )

    ms = MaskSamplerConfig(
        patch_side_lengths=_get(
            parser, "mask_sampler", "patch_side_lengths", int_pairs, (4, 8, 16)
        ),
        patch_count=_get(parser, "mask_sampler", "patch_count", int, 1000),
        sigma_range=_get(parser, "mask_sampler", "sigma_range", pairs, None),
        rng_seed=_get(parser, "mask_sampler", "rng_seed", int, 0),
    )

    t = config.train
    config.train = TrainConfig(
        epochs=_get(parser, "train", "epochs", int, t.epochs),
        batch_size=_get(parser, "train", "batch_size", int, t.batch_size),
        learning_rate=_get(parser, "train", "learning_rate", float, t.learning_rate),
        optimizer=_get(parser, "train", "optimizer", str, t.optimizer),
        cosine_decay=_get(parser, "train", "cosine_decay", bool, t.cosine_decay),
        radius=_get(parser, "train", "radius", float, t.radius),
        mask_config=ms,
        val_fraction=_get(parser, "train", "val_fraction", float, t.val_fraction),
        seed=_get(parser, "train", "seed", int, t.seed),
        checkpoint_every=_get(parser, "train", "checkpoint_every", int, t.checkpoint_every),
        base_channels=_get(parser, "train", "base_channels", int, t.base_channels),
        device=_get(parser, "train", "device", str, t.device),
    )

    r = config.refinement
    config.refinement = RefinementConfig(
        tau=_get(parser, "refinement", "tau", float, r.tau),
        first_shrink_percentile=_get(
            parser, "refinement", "first_shrink_percentile", float, r.first_shrink_percentile
        ),
        termination_fraction=_get(
            parser, "refinement", "termination_fraction", float, r.termination_fraction
        ),
        max_iterations=_get(parser, "refinement", "max_iterations", int, r.max_iterations),
        radius=_get(parser, "refinement", "radius", float, r.radius),
    )
    config.percentile = _get(parser, "refinement", "percentile", float, config.percentile)

    s = config.service
    config.service = ServiceConfig(
        model_dir=_get(parser, "service", "model_dir", str, s.model_dir),
        host=_get(parser, "service", "host", str, s.host),
        port=_get(parser, "service", "port", int, s.port),
        default_percentile=_get(
            parser, "service", "default_percentile", float, s.default_percentile
        ),
        export_dir=_get(parser, "service", "export_dir", str, s.export_dir),
    )

    config.seed = _get(parser, "run", "seed", int, config.seed)
    return config


def write_effective_config(config: PipelineConfig, path: str | Path) -> None:
    """Persist the fully-resolved config as INI; load_config() reads it back."""
    parser = configparser.ConfigParser()

    def fmt(value):
        if isinstance(value, tuple):
            return ",".join(str(v) for v in value)
        if value is None:
            return ""
        return str(value)

    parser["run"] = {"seed": fmt(config.seed)}
    parser["data"] = {
        "kind": config.data.kind,
        "dataset_dir": config.data.dataset_dir,
        "nifti_dir": config.data.nifti_dir,
        "axis": fmt(config.data.axis),
        "min_brain_fraction": fmt(config.data.min_brain_fraction),
        "modality": config.data.modality,
    }
    spec = config.phantom.spec
    parser["phantom"] = {
        "size": fmt(spec.size),
        "count": fmt(config.phantom.count),
        "validation_count": fmt(config.phantom.validation_count),
        "blob_count_range": fmt(spec.blob_count_range),
        "blob_radius_range": fmt(spec.blob_radius_range),
        "blob_contrast_range": fmt(spec.blob_contrast_range),
        "central_scale_range": fmt(spec.central_scale_range),
        "central_contrast_range": fmt(spec.central_contrast_range),
        "gradient_amplitude": fmt(spec.gradient_amplitude),
        "noise_level": fmt(spec.noise_level),
        "noise_smoothness": fmt(spec.noise_smoothness),
        "lesion": fmt(spec.lesion),
        "lesion_offset_range": fmt(spec.lesion_offset_range),
        "lesion_radius_range": fmt(spec.lesion_radius_range),
        "seed": fmt(spec.seed),
    }
    mask = config.train.mask_config
    parser["mask_sampler"] = {
        "patch_side_lengths": fmt(mask.patch_side_lengths),
        "patch_count": fmt(mask.patch_count),
        "sigma_range": fmt(mask.sigma_range),
        "rng_seed": fmt(mask.rng_seed),
    }
    train = config.train
    parser["train"] = {
        "epochs": fmt(train.epochs),
        "batch_size": fmt(train.batch_size),
        "learning_rate": fmt(train.learning_rate),
        "optimizer": train.optimizer,
        "cosine_decay": fmt(train.cosine_decay),
        "radius": fmt(train.radius),
        "val_fraction": fmt(train.val_fraction),
        "seed": fmt(train.seed),
        "checkpoint_every": fmt(train.checkpoint_every),
        "base_channels": fmt(train.base_channels),
        "device": train.device,
    }
    refine = config.refinement
    parser["refinement"] = {
        "tau": fmt(refine.tau),
        "percentile": fmt(config.percentile),
        "first_shrink_percentile": fmt(refine.first_shrink_percentile),
        "termination_fraction": fmt(refine.termination_fraction),
        "max_iterations": fmt(refine.max_iterations),
        "radius": fmt(refine.radius),
    }
    service = config.service
    parser["service"] = {
        "model_dir": service.model_dir,
        "host": service.host,
        "port": fmt(service.port),
        "default_percentile": fmt(service.default_percentile),
        "export_dir": fmt(service.export_dir),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as handle:
        parser.write(handle)
