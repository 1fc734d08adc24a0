"""Desk-scale classifiers: the attacked CNN and an auxiliary MLP.

``ConvClassifier`` is the attack target. Its penultimate 64-d activation is
the package's general-purpose feature extractor (used by the distribution
metrics), and its intermediate conv maps back the perceptual distance used
for calibration. ``VggTinyClassifier`` is the deliberately different auxiliary
architecture: the attack holds it at the source label so that fooling the
CNN cannot simply mean *becoming* the target class.

``train_classifiers`` trains both on the captioned dataset, enforces a
validation accuracy floor, and returns them frozen.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import torch
from torch import Tensor, nn

from .unet import CHECKPOINT_VERSION, DivergenceError, state_dict_digest

__all__ = [
    "AccuracyFloorError",
    "ConvClassifier",
    "VggTinyClassifier",
    "train_classifiers",
    "validation_accuracy",
    "prediction_disagreement",
    "save_classifier",
    "load_classifier",
]


class AccuracyFloorError(RuntimeError):
    """Raised when a trained classifier misses the required validation accuracy."""


class ConvClassifier(nn.Module):
    """Compact CNN: three stride-2 conv blocks, a 64-d feature head, logits."""

    arch_id = "conv-small"

    def __init__(
        self,
        in_channels: int = 1,
        image_size: int = 32,
        num_classes: int = 2,
        base_channels: int = 16,
        feature_dim: int = 64,
    ):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError(f"image_size must be divisible by 8, got {image_size}")
        self.arch = dict(
            in_channels=in_channels,
            image_size=image_size,
            num_classes=num_classes,
            base_channels=base_channels,
            feature_dim=feature_dim,
        )
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        c = base_channels
        self.block1 = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, stride=2, padding=1), nn.GroupNorm(4, c), nn.SiLU()
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.GroupNorm(4, 2 * c), nn.SiLU()
        )
        self.block3 = nn.Sequential(
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), nn.GroupNorm(4, 4 * c), nn.SiLU()
        )
        flat = 4 * c * (image_size // 8) ** 2
        self.feature_head = nn.Sequential(nn.Linear(flat, feature_dim), nn.SiLU())
        self.logit_head = nn.Linear(feature_dim, num_classes)

    def _check(self, x: Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.arch["in_channels"]:
            raise ValueError(
                f"expected (B, {self.arch['in_channels']}, H, W) images, got {tuple(x.shape)}"
            )

    def feature_maps(self, x: Tensor) -> List[Tensor]:
        """Intermediate conv activations, shallow to deep (for perceptual distance)."""
        self._check(x)
        h1 = self.block1(x)
        h2 = self.block2(h1)
        h3 = self.block3(h2)
        return [h1, h2, h3]

    def features(self, x: Tensor) -> Tensor:
        """Penultimate 64-d representation (the package's feature extractor)."""
        h3 = self.feature_maps(x)[-1]
        return self.feature_head(h3.flatten(1))

    def forward(self, x: Tensor) -> Tensor:
        return self.logit_head(self.features(x))


class VggTinyClassifier(nn.Module):
    """VGG-flavored auxiliary classifier: 5x5 convs, ReLU, max-pooling.

    Deliberately a different architectural family from
    :class:`ConvClassifier` (kernel size, activation, normalization-free,
    pooled downsampling), so its decision boundary is shaped differently
    even when trained on the same data.
    """

    arch_id = "vgg-tiny"

    def __init__(
        self,
        in_channels: int = 1,
        image_size: int = 32,
        num_classes: int = 2,
        base_channels: int = 12,
        hidden_dim: int = 96,
    ):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError(f"image_size must be divisible by 8, got {image_size}")
        self.arch = dict(
            in_channels=in_channels,
            image_size=image_size,
            num_classes=num_classes,
            base_channels=base_channels,
            hidden_dim=hidden_dim,
        )
        self.num_classes = num_classes
        c = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c, 5, padding=2),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c, 2 * c, 5, padding=2),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * c, 4 * c, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(4 * c * (image_size // 8) ** 2, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, num_classes),
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.arch["in_channels"]:
            raise ValueError(
                f"expected (B, {self.arch['in_channels']}, H, W) images, got {tuple(x.shape)}"
            )
        return self.net(x)


@torch.no_grad()
def validation_accuracy(model: nn.Module, images: Tensor, labels: Tensor) -> float:
    """Top-1 accuracy of `model` on the given batch."""
    was_training = model.training
    model.eval()
    preds = model(images).argmax(dim=1)
    if was_training:
        model.train()
    return float((preds == labels).float().mean())


@torch.no_grad()
def prediction_disagreement(f: nn.Module, g: nn.Module, images: Tensor) -> float:
    """Fraction of images on which the two classifiers predict different labels."""
    return float((f(images).argmax(dim=1) != g(images).argmax(dim=1)).float().mean())


def _train_one(
    model: nn.Module,
    images: Tensor,
    labels: Tensor,
    epochs: int,
    lr: float,
    batch_size: int,
    gen: torch.Generator,
) -> None:
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    n = images.shape[0]
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            loss = nn.functional.cross_entropy(model(images[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite classification loss: {loss.item()!r}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    model.eval()


def _freeze(model: nn.Module) -> None:
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()


def train_classifiers(
    dataset,
    seed: int = 0,
    *,
    epochs: int = 16,
    lr: float = 2e-3,
    batch_size: int = 64,
    val_fraction: float = 0.2,
    accuracy_floor: float = 0.95,
    conv_arch: Optional[dict] = None,
    aux_arch: Optional[dict] = None,
    target_dataset=None,
) -> Tuple[ConvClassifier, VggTinyClassifier, dict]:
    """Train the attacked CNN and the auxiliary MLP on one labeled dataset.

    ``dataset`` needs ``images`` (N, C, H, W) and ``labels`` (N,) attributes.
    When ``target_dataset`` is given, the attacked model trains and validates
    on that set instead while the auxiliary model keeps ``dataset``; training
    the two on deliberately different data distributions is how their decision
    rules are made to diverge beyond what the architecture gap alone provides.
    Both models must reach ``accuracy_floor`` on a held-out split of their own
    training distribution or an :class:`AccuracyFloorError` is raised.
    Returned models are frozen (parameters detached from future autograd) and
    the report carries their validation accuracies and parameter digests.
    """
    images, labels = dataset.images, dataset.labels
    if images.shape[0] != labels.shape[0]:
        raise ValueError("images and labels disagree on sample count")
    num_classes = int(labels.max().item()) + 1

    gen = torch.Generator().manual_seed(seed)
    train_images, train_labels, val_images, val_labels = _val_split(
        images, labels, val_fraction, gen
    )
    if target_dataset is None:
        f_train_images, f_train_labels = train_images, train_labels
        f_val_images, f_val_labels = val_images, val_labels
    else:
        t_images, t_labels = target_dataset.images, target_dataset.labels
        if t_images.shape[0] != t_labels.shape[0]:
            raise ValueError("target images and labels disagree on sample count")
        if t_images.shape[1:] != images.shape[1:]:
            raise ValueError("target dataset images must match the main dataset shape")
        num_classes = max(num_classes, int(t_labels.max().item()) + 1)
        f_train_images, f_train_labels, f_val_images, f_val_labels = _val_split(
            t_images, t_labels, val_fraction, gen
        )

    torch.manual_seed(seed)
    f = ConvClassifier(
        in_channels=images.shape[1],
        image_size=images.shape[-1],
        num_classes=num_classes,
        **(conv_arch or {}),
    )
    torch.manual_seed(seed + 1)
    g = VggTinyClassifier(
        in_channels=images.shape[1],
        image_size=images.shape[-1],
        num_classes=num_classes,
        **(aux_arch or {}),
    )

    _train_one(f, f_train_images, f_train_labels, epochs, lr, batch_size, gen)
    _train_one(g, train_images, train_labels, epochs, lr, batch_size, gen)

    acc_f = validation_accuracy(f, f_val_images, f_val_labels)
    acc_g = validation_accuracy(g, val_images, val_labels)
    if acc_f < accuracy_floor or acc_g < accuracy_floor:
        raise AccuracyFloorError(
            f"validation accuracy below floor {accuracy_floor}: "
            f"{f.arch_id}={acc_f:.3f}, {g.arch_id}={acc_g:.3f}"
        )

    _freeze(f)
    _freeze(g)
    report = {
        "val_accuracy_f": acc_f,
        "val_accuracy_g": acc_g,
        "digest_f": state_dict_digest(f),
        "digest_g": state_dict_digest(g),
        "arch_f": f.arch_id,
        "arch_g": g.arch_id,
        "n_train": int(train_labels.numel()),
        "n_val": int(val_labels.numel()),
        "separate_target_set": target_dataset is not None,
    }
    return f, g, report


def _val_split(images, labels, val_fraction, gen):
    n = images.shape[0]
    n_val = max(1, int(round(n * val_fraction)))
    order = torch.randperm(n, generator=gen)
    val_idx, train_idx = order[:n_val], order[n_val:]
    return images[train_idx], labels[train_idx], images[val_idx], labels[val_idx]


_CLASSIFIER_CLASSES = {cls.arch_id: cls for cls in (ConvClassifier, VggTinyClassifier)}


def save_classifier(path, model: nn.Module, seed: int, extra: Optional[dict] = None) -> None:
    """Write a versioned classifier checkpoint (either architecture)."""
    if model.arch_id not in _CLASSIFIER_CLASSES:
        raise ValueError(f"unknown classifier architecture {model.arch_id!r}")
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "classifier",
        "arch_id": model.arch_id,
        "arch": dict(model.arch),
        "state_dict": model.state_dict(),
        "seed": seed,
        "digest": state_dict_digest(model),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_classifier(path) -> Tuple[nn.Module, dict]:
    """Rebuild a frozen classifier from a checkpoint; returns (model, metadata)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    if payload.get("kind") != "classifier":
        raise ValueError(f"not a classifier checkpoint: kind={payload.get('kind')!r}")
    cls = _CLASSIFIER_CLASSES.get(payload.get("arch_id"))
    if cls is None:
        raise ValueError(f"unknown classifier architecture {payload.get('arch_id')!r}")
    model = cls(**payload["arch"])
    model.load_state_dict(payload["state_dict"])
    _freeze(model)
    if state_dict_digest(model) != payload["digest"]:
        raise ValueError("checkpoint digest mismatch after load")
    return model, {k: payload[k] for k in ("seed", "extra")}
