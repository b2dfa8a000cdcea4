"""Learned reconstruction models and their training loops.

Two UNets share one architecture: the main model consumes the noise-
masked image stacked with the high-frequency guide (2 channels), the
init model consumes the guide alone (1 channel) and handles the first
iteration where the whole brain is masked.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import Slice
from .errors import CheckpointError, ValidationError
from .frequency import DEFAULT_HIGH_PASS_RADIUS, structural_guide
from .masking import MaskSamplerConfig, apply_mask, sample_training_mask

CHECKPOINT_MAGIC = "MASKREFINE-CKPT"
CHECKPOINT_SCHEMA = 1

KIND_MAIN = "main"
KIND_INIT = "init"
KIND_MAIN_NO_GUIDE = "main_no_guide"

_KIND_CHANNELS = {KIND_MAIN: 2, KIND_INIT: 1, KIND_MAIN_NO_GUIDE: 1}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 2e-4
    optimizer: str = "adam"
    cosine_decay: bool = True
    radius: float = DEFAULT_HIGH_PASS_RADIUS
    mask_config: MaskSamplerConfig = field(default_factory=MaskSamplerConfig)
    val_fraction: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only at the end
    base_channels: int = 16
    device: str = "cpu"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValidationError("epochs, batch_size and learning_rate must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValidationError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.optimizer not in ("adam", "adamw", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")

    def digest(self) -> str:
        payload = asdict(self)
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.SiLU(),
    )


class ReconstructionModel(nn.Module):
    """4-level UNet with skip connections; spatial size must be divisible by 8."""

    def __init__(self, kind: str, base_channels: int = 16):
        super().__init__()
        if kind not in _KIND_CHANNELS:
            raise ValidationError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.input_channels = _KIND_CHANNELS[kind]
        self.base_channels = base_channels
        self.radius: float | None = None  # guide radius the model was trained with
        c = base_channels
        self.enc1 = _conv_block(self.input_channels, c)
        self.enc2 = _conv_block(c, c * 2)
        self.enc3 = _conv_block(c * 2, c * 4)
        self.bottleneck = _conv_block(c * 4, c * 8)
        self.up3 = nn.ConvTranspose2d(c * 8, c * 4, 2, stride=2)
        self.dec3 = _conv_block(c * 8, c * 4)
        self.up2 = nn.ConvTranspose2d(c * 4, c * 2, 2, stride=2)
        self.dec2 = _conv_block(c * 4, c * 2)
        self.up1 = nn.ConvTranspose2d(c * 2, c, 2, stride=2)
        self.dec1 = _conv_block(c * 2, c)
        self.head = nn.Conv2d(c, 1, 1)
        # Zero-initialized head: the model starts as the identity over the
        # image channel and learns only the correction.
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.input_channels:
            raise ValidationError(
                f"{self.kind} model expects {self.input_channels} input channels, got {x.shape[1]}"
            )
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        b = self.bottleneck(self.pool(e3))
        d3 = self.dec3(torch.cat([self.up3(b), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        # Global residual over the image channel: visible pixels pass
        # through and the network learns the correction.
        return self.head(d1) + x[:, :1]


def _to_batch(planes: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(planes).astype(np.float32)).unsqueeze(1)


def _check_normalized(slices: list[Slice]) -> None:
    for slc in slices:
        if not slc.is_normalized():
            raise ValidationError(
                f"slice {slc.subject_id}:{slc.index} is not z-score normalized "
                "(brain mean outside [-0.5, 0.5] or std outside [0.5, 1.5])"
            )


def _guides(slices: list[Slice], radius: float) -> list[np.ndarray]:
    return [structural_guide(slc.pixels, radius) for slc in slices]


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def add(self, epoch: int, split: str, loss: float) -> None:
        self.records.append({"epoch": epoch, "split": split, "loss": float(loss)})

    def losses(self, split: str) -> list[float]:
        return [r["loss"] for r in self.records if r["split"] == split]

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(json.dumps(r) for r in self.records) + "\n")


def _split_train_val(slices: list[Slice], config: TrainConfig):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 9001]))
    order = rng.permutation(len(slices))
    n_val = max(1, int(round(config.val_fraction * len(slices))))
    if n_val >= len(slices):
        raise ValidationError("dataset too small for the requested validation split")
    val_idx = set(order[:n_val].tolist())
    train = [slices[i] for i in range(len(slices)) if i not in val_idx]
    val = [slices[i] for i in sorted(val_idx)]
    return train, val


def _make_optimizer(model: nn.Module, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    if config.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate)


def _train(
    kind: str,
    slices: list[Slice],
    config: TrainConfig,
    checkpoint_dir: str | Path | None,
) -> tuple[ReconstructionModel, TrainingLog]:
    if not slices:
        raise ValidationError("empty training dataset")
    _check_normalized(slices)

    torch.manual_seed(config.seed)
    device = torch.device(config.device)
    model = ReconstructionModel(kind, config.base_channels).to(device)
    model.radius = config.radius
    optimizer = _make_optimizer(model, config)
    scheduler = (
        torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
        if config.cosine_decay
        else None
    )

    train_slices, val_slices = _split_train_val(slices, config)
    train_guides = _guides(train_slices, config.radius)
    val_guides = _guides(val_slices, config.radius)

    masked = kind in (KIND_MAIN, KIND_MAIN_NO_GUIDE)
    # Per-slice validation corruptions are frozen so epoch losses compare.
    val_inputs = _build_inputs(
        kind, val_slices, val_guides, config, base_key=(config.seed, 7777), step=0
    )
    val_targets = _to_batch([s.pixels for s in val_slices]).to(device)

    log = TrainingLog()
    epoch_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 555]))
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = epoch_rng.permutation(len(train_slices))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            batch_slices = [train_slices[i] for i in batch_idx]
            batch_guides = [train_guides[i] for i in batch_idx]
            inputs = _build_inputs(
                kind, batch_slices, batch_guides, config, base_key=(config.seed, 1), step=step
            ).to(device)
            targets = _to_batch([s.pixels for s in batch_slices]).to(device)
            optimizer.zero_grad()
            loss = torch.mean((model(inputs) - targets) ** 2)
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
            step += 1
        if scheduler is not None:
            scheduler.step()
        log.add(epoch, "train", float(np.mean(epoch_losses)))

        model.eval()
        with torch.no_grad():
            val_loss = torch.mean((model(val_inputs.to(device)) - val_targets) ** 2).item()
        log.add(epoch, "val", val_loss)

        if checkpoint_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"{kind}_epoch{epoch:04d}.pt", config)

    if checkpoint_dir:
        save_checkpoint(model, Path(checkpoint_dir) / f"{kind}.pt", config)
    model.eval()
    return model, log


def _build_inputs(
    kind: str,
    slices: list[Slice],
    guides: list[np.ndarray],
    config: TrainConfig,
    base_key: tuple[int, int],
    step: int,
) -> torch.Tensor:
    """Stack model inputs for a batch; masked kinds get a fresh mask and
    fresh noise per slice, keyed deterministically."""
    planes = []
    for j, (slc, guide) in enumerate(zip(slices, guides)):
        if kind == KIND_INIT:
            planes.append(np.stack([guide]))
            continue
        rng = np.random.default_rng(np.random.SeedSequence([*base_key, step, j]))
        mask = sample_training_mask(slc.brain_mask, config.mask_config, rng)
        corrupted = apply_mask(slc.pixels, mask, rng)
        if kind == KIND_MAIN:
            planes.append(np.stack([corrupted, guide]))
        else:
            planes.append(np.stack([corrupted]))
    return torch.from_numpy(np.stack(planes).astype(np.float32))


def train_main(
    healthy_slices: list[Slice],
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    kind: str = KIND_MAIN,
) -> tuple[ReconstructionModel, TrainingLog]:
    """Train the masked-reconstruction model on healthy slices.

    ``kind`` may be set to ``main_no_guide`` for the guide-free ablation
    variant; everything else about the loop is identical.
    """
    if kind not in (KIND_MAIN, KIND_MAIN_NO_GUIDE):
        raise ValidationError(f"train_main builds main-model kinds, not {kind!r}")
    return _train(kind, healthy_slices, config, checkpoint_dir)


def train_init(
    healthy_slices: list[Slice],
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ReconstructionModel, TrainingLog]:
    """Train the first-iteration model: guide image in, full image out,
    no spatial masking."""
    return _train(KIND_INIT, healthy_slices, config, checkpoint_dir)


def _predict(model: ReconstructionModel, planes: list[np.ndarray]) -> np.ndarray:
    stacked = np.stack(planes).astype(np.float32)[None]
    if not np.all(np.isfinite(stacked)):
        raise ValidationError("non-finite values in model input")
    device = next(model.parameters()).device
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(stacked).to(device))
    return out.squeeze(0).squeeze(0).cpu().numpy().astype(np.float64)


def reconstruct(
    model: ReconstructionModel, masked: np.ndarray, guide: np.ndarray | None
) -> np.ndarray:
    """Inference pass of a main-kind model. Deterministic; shape-preserving."""
    if model.kind == KIND_MAIN:
        if guide is None:
            raise ValidationError("main model needs the guide plane")
        if masked.shape != guide.shape:
            raise ValidationError(f"plane shapes differ: {masked.shape} vs {guide.shape}")
        return _predict(model, [masked, guide])
    if model.kind == KIND_MAIN_NO_GUIDE:
        return _predict(model, [masked])
    raise ValidationError(f"reconstruct() needs a main-kind model, got {model.kind!r}")


def reconstruct_init(model: ReconstructionModel, guide: np.ndarray) -> np.ndarray:
    """Inference pass of the init model (guide only)."""
    if model.kind != KIND_INIT:
        raise ValidationError(f"reconstruct_init() needs an init model, got {model.kind!r}")
    return _predict(model, [guide])


def save_checkpoint(model: ReconstructionModel, path: str | Path, config: TrainConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "magic": CHECKPOINT_MAGIC,
            "schema_version": CHECKPOINT_SCHEMA,
            "kind": model.kind,
            "radius": float(model.radius if model.radius is not None else config.radius),
            "normalization": {"scheme": "zscore", "mean": 0.0, "std": 1.0},
            "base_channels": model.base_channels,
            "config_digest": config.digest(),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: str | Path, device: str = "cpu") -> ReconstructionModel:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location=device, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a reconstruction checkpoint")
    if payload.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"checkpoint schema {payload.get('schema_version')} unsupported "
            f"(expected {CHECKPOINT_SCHEMA})"
        )
    model = ReconstructionModel(payload["kind"], payload["base_channels"])
    model.load_state_dict(payload["state_dict"])
    model.radius = float(payload["radius"])
    model.to(device)
    model.eval()
    return model
