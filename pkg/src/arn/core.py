"""Domain types, configuration and seeded randomness shared across the package."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised when a configuration or shape contract is violated."""


class UsageError(RuntimeError):
    """Raised when an operation is called in a way its contract forbids."""


class LabelAccessError(RuntimeError):
    """Raised when training code reads an identity label of a target sample."""


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """One image together with its identity, camera and domain tags.

    ``camera`` may be ``None`` for datasets without camera metadata.
    """

    image: np.ndarray
    identity: int
    camera: int | None
    domain: Domain

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        if image.ndim != 3:
            raise ConfigError(f"image must be H x W x C, got shape {image.shape}")
        if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
            raise ConfigError("image values must be finite and within [0, 1]")
        if self.identity < 0:
            raise ConfigError(f"identity must be non-negative, got {self.identity}")
        if self.camera is not None and self.camera < 0:
            raise ConfigError(f"camera must be non-negative, got {self.camera}")
        image.flags.writeable = False
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "domain", Domain(self.domain))


class UnlabeledSample:
    """Target sample as seen by the trainer: the image is readable, the label is not."""

    __slots__ = ("_sample",)

    def __init__(self, sample: LabeledSample):
        self._sample = sample

    @property
    def image(self) -> np.ndarray:
        return self._sample.image

    @property
    def domain(self) -> Domain:
        return self._sample.domain

    @property
    def identity(self):
        raise LabelAccessError("target identity labels are not available during training")

    @property
    def camera(self):
        raise LabelAccessError("target camera labels are not available during training")


class UnlabeledView(Sequence):
    """Read-only sequence over target samples with labels stripped."""

    def __init__(self, samples: Sequence[LabeledSample]):
        self._items = tuple(UnlabeledSample(s) for s in samples)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index):
        return self._items[index]

    def __iter__(self) -> Iterator[UnlabeledSample]:
        return iter(self._items)


@dataclass
class DatasetSplit:
    train_source: list[LabeledSample]
    train_target: list[LabeledSample]
    query: list[LabeledSample]
    gallery: list[LabeledSample]

    def __post_init__(self):
        if len(self.train_source) < 1 or len(self.train_target) < 1:
            raise ConfigError("both training domains need at least one sample")
        for name in ("query", "gallery"):
            if any(s.domain is not Domain.TARGET for s in getattr(self, name)):
                raise ConfigError(f"{name} must contain target-domain samples only")

    def target_unlabeled(self) -> UnlabeledView:
        return UnlabeledView(self.train_target)

    @property
    def source_identities(self) -> list[int]:
        return sorted({s.identity for s in self.train_source})


@dataclass(frozen=True)
class ModelConfig:
    image_shape: tuple[int, int, int] = (32, 32, 3)
    feature_map_shape: tuple[int, int, int] = (4, 4, 64)
    latent_dim: int = 64
    num_classes: int = 20
    encoder_channels: tuple[int, int, int] = (128, 128, 64)
    dropout_rate: float = 0.5

    def __post_init__(self):
        for name in ("image_shape", "feature_map_shape", "encoder_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 2.0
    gamma: float = 1500.0
    margin: float = 1.0


@dataclass(frozen=True)
class AblationFlags:
    use_class: bool = True
    use_ctrs: bool = True
    use_private: bool = True
    use_rec: bool = True
    use_diff: bool = True

    def __post_init__(self):
        # no private features means nothing to orthogonalize
        if not self.use_private:
            object.__setattr__(self, "use_diff", False)

    @property
    def supervised(self) -> bool:
        return self.use_class or self.use_ctrs


# Table rows of the ablation study, keyed by CLI name.
VARIANTS: dict[str, AblationFlags] = {
    "rec_only": AblationFlags(use_class=False, use_ctrs=False, use_private=False),
    "no_supervised": AblationFlags(use_class=False, use_ctrs=False),
    "no_private": AblationFlags(use_private=False),
    "full": AblationFlags(),
}

VARIANT_LABELS: dict[str, str] = {
    "rec_only": "Ours w/o L_ctrs, L_class, E_S, E_T",
    "no_supervised": "Ours w/o L_ctrs, L_class",
    "no_private": "Ours w/o E_S, E_T",
    "full": "Ours",
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    identities_per_batch: int = 4
    images_per_identity: int = 4
    lr_backbone: float = 1e-7
    lr_encoders: float = 1e-3
    lr_classifier: float = 2e-3
    backbone_warmup_epochs: int = 5
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    momentum: float = 0.0
    freeze_backbone_after_warmup: bool = True
    diff_form: str = "sample"


def validate_config(model: ModelConfig, train: TrainConfig, weights: LossWeights) -> list[str]:
    """Return human-readable violations; each one starts with the offending field name."""
    problems: list[str] = []

    def check(ok: bool, name: str, message: str) -> None:
        if not ok:
            problems.append(f"{name}: {message}")

    for name in ("image_shape", "feature_map_shape"):
        shape = getattr(model, name)
        check(len(shape) == 3 and all(v > 0 for v in shape), name, f"needs 3 positive sizes, got {shape}")
    if len(model.feature_map_shape) == 3:
        h, w, _ = model.feature_map_shape
        check(h >= 2 and w >= 2, "feature_map_shape", "spatial size must be at least 2 x 2")
        if len(model.image_shape) == 3:
            check(
                model.image_shape[0] >= h and model.image_shape[1] >= w,
                "feature_map_shape",
                "cannot be spatially larger than image_shape",
            )
    check(model.latent_dim > 0, "latent_dim", "must be positive")
    check(model.num_classes > 0, "num_classes", "must be positive")
    check(
        len(model.encoder_channels) == 3 and all(c > 0 for c in model.encoder_channels),
        "encoder_channels",
        "needs 3 positive channel counts",
    )
    if len(model.encoder_channels) == 3:
        check(
            model.encoder_channels[-1] == model.latent_dim,
            "encoder_channels",
            "last layer width must equal latent_dim",
        )
    check(0.0 <= model.dropout_rate < 1.0, "dropout_rate", "must lie in [0, 1)")

    check(train.epochs > 0, "epochs", "must be positive")
    check(train.batch_size > 0 and train.batch_size % 2 == 0, "batch_size", "must be a positive even number")
    check(train.identities_per_batch >= 2, "identities_per_batch", "needs >= 2 identities for negative pairs")
    check(train.images_per_identity >= 2, "images_per_identity", "needs >= 2 images for positive pairs")
    check(
        train.identities_per_batch * train.images_per_identity == train.batch_size // 2,
        "identities_per_batch",
        "identities_per_batch * images_per_identity must equal batch_size / 2",
    )
    for name in ("lr_backbone", "lr_encoders", "lr_classifier"):
        check(getattr(train, name) > 0, name, "must be positive")
    check(train.backbone_warmup_epochs >= 0, "backbone_warmup_epochs", "must be non-negative")
    check(0.0 <= train.momentum < 1.0, "momentum", "must lie in [0, 1)")
    check(train.diff_form in ("sample", "feature"), "diff_form", "must be 'sample' or 'feature'")

    for name in ("alpha", "beta", "gamma"):
        check(getattr(weights, name) >= 0, name, "must be non-negative")
    check(weights.margin > 0, "margin", "must be positive")
    return problems


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def seeded_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    """Deterministic generator for ``seed``; ``stream`` derives an independent named child."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if stream is not None:
        entropy.append(_name_key(stream))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derived_seed(seed: int, stream: str) -> int:
    """Integer seed for libraries with their own generators (torch)."""
    return int(seeded_rng(seed, stream).integers(0, 2**63 - 1))


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
