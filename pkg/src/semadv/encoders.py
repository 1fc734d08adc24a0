"""Two-tower image/text encoder pair trained contrastively.

A small CNN embeds images and a bag-of-words MLP embeds captions into a
shared unit sphere. Training pulls each image toward its own caption and away
from the other captions in the batch (symmetric InfoNCE with a learnable
temperature). The pair implements the :class:`semadv.losses.EncoderPair`
contract, so anything scoring text-image alignment can swap in a bigger
pretrained pair without code changes.

The text tower is order-free by construction: captions from the closed
template vocabulary are fully determined by their word multiset. Unknown
words map to a dedicated bucket so arbitrary prompts still embed
deterministically.
"""

from __future__ import annotations

import re
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from .unet import CHECKPOINT_VERSION, DivergenceError, state_dict_digest

__all__ = [
    "build_vocab",
    "tokenize",
    "TextTower",
    "ImageTower",
    "EncoderPairModel",
    "train_encoder_pair",
    "save_encoder_pair",
    "load_encoder_pair",
]

_TOKEN_RE = re.compile(r"[a-z]+")
_MAX_LOGIT_SCALE = 4.6052  # ln(100): temperature floor of 0.01


def tokenize(text: str) -> List[str]:
    """Lowercase word tokens; punctuation and digits are separators."""
    return _TOKEN_RE.findall(text.lower())


def build_vocab(captions: Iterable[str]) -> Tuple[str, ...]:
    """Sorted unique tokens over a caption corpus."""
    words = set()
    for caption in captions:
        words.update(tokenize(caption))
    if not words:
        raise ValueError("caption corpus produced an empty vocabulary")
    return tuple(sorted(words))


class TextTower(nn.Module):
    """Bag-of-words caption encoder: token counts -> MLP -> embedding."""

    def __init__(self, vocab: Sequence[str], embed_dim: int = 32, hidden_dim: int = 64):
        super().__init__()
        if len(vocab) != len(set(vocab)):
            raise ValueError("vocabulary contains duplicate tokens")
        self.vocab: Tuple[str, ...] = tuple(vocab)
        self._index: Dict[str, int] = {w: i + 1 for i, w in enumerate(self.vocab)}  # 0 = unknown
        self.embed_dim = embed_dim
        in_dim = 1 + len(self.vocab)
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, embed_dim),
        )

    def counts(self, text: str) -> Tensor:
        """Token-count vector with unknown words pooled at index 0."""
        vec = torch.zeros(1 + len(self.vocab))
        for token in tokenize(text):
            vec[self._index.get(token, 0)] += 1.0
        return vec

    def forward(self, texts: Sequence[str]) -> Tensor:
        batch = torch.stack([self.counts(t) for t in texts])
        return self.net(batch)


class ImageTower(nn.Module):
    """Three-stride CNN image encoder."""

    def __init__(
        self,
        in_channels: int = 1,
        image_size: int = 32,
        embed_dim: int = 32,
        base_channels: int = 16,
    ):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError(f"image_size must be divisible by 8, got {image_size}")
        self.in_channels = in_channels
        self.image_size = image_size
        self.embed_dim = embed_dim
        c = base_channels
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, stride=2, padding=1),
            nn.GroupNorm(4, c),
            nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.GroupNorm(4, 2 * c),
            nn.SiLU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.GroupNorm(4, 4 * c),
            nn.SiLU(),
        )
        flat = 4 * c * (image_size // 8) ** 2
        self.head = nn.Linear(flat, embed_dim)

    def forward(self, images: Tensor) -> Tensor:
        if images.dim() != 4 or images.shape[1] != self.in_channels:
            raise ValueError(
                f"expected (B, {self.in_channels}, H, W) images, got {tuple(images.shape)}"
            )
        feats = self.conv(images)
        return self.head(feats.flatten(1))


class EncoderPairModel(nn.Module):
    """Joint image/text embedding model satisfying the EncoderPair contract.

    Both towers project onto the unit sphere; ``logit_scale`` is the learned
    inverse temperature used only during contrastive training.
    """

    def __init__(
        self,
        vocab: Sequence[str],
        embed_dim: int = 32,
        image_size: int = 32,
        in_channels: int = 1,
        base_channels: int = 16,
        text_hidden_dim: int = 64,
    ):
        super().__init__()
        self.arch = dict(
            vocab=tuple(vocab),
            embed_dim=embed_dim,
            image_size=image_size,
            in_channels=in_channels,
            base_channels=base_channels,
            text_hidden_dim=text_hidden_dim,
        )
        self.image_tower = ImageTower(in_channels, image_size, embed_dim, base_channels)
        self.text_tower = TextTower(vocab, embed_dim, text_hidden_dim)
        self.logit_scale = nn.Parameter(torch.tensor(2.6593))  # ln(1/0.07)

    @property
    def vocab(self) -> Tuple[str, ...]:
        return self.text_tower.vocab

    def embed_image(self, images: Tensor) -> Tensor:
        """(B, C, H, W) images -> (B, d) unit-norm embeddings."""
        return nn.functional.normalize(self.image_tower(images), dim=-1, eps=1e-8)

    def embed_texts(self, texts: Sequence[str]) -> Tensor:
        """Batch of strings -> (B, d) unit-norm embeddings."""
        return nn.functional.normalize(self.text_tower(texts), dim=-1, eps=1e-8)

    def embed_text(self, text: str) -> Tensor:
        """Single string -> (d,) unit-norm embedding."""
        return self.embed_texts([text])[0]

    def contrastive_logits(self, images: Tensor, texts: Sequence[str]) -> Tensor:
        scale = self.logit_scale.clamp(max=_MAX_LOGIT_SCALE).exp()
        return scale * self.embed_image(images) @ self.embed_texts(texts).T


def caption_retrieval_accuracy(
    model: EncoderPairModel, images: Tensor, captions: Sequence[str]
) -> float:
    """Fraction of images whose nearest caption *string* is their own.

    Retrieval runs against the distinct caption strings, so repeated captions
    are a single candidate and an image is credited whenever it retrieves the
    right wording.
    """
    distinct = sorted(set(captions))
    with torch.no_grad():
        sims = model.embed_image(images) @ model.embed_texts(distinct).T
        best = sims.argmax(dim=1)
    hits = sum(1 for i, caption in enumerate(captions) if distinct[best[i]] == caption)
    return hits / len(captions)


def train_encoder_pair(
    images: Tensor,
    captions: Sequence[str],
    *,
    vocab: Optional[Sequence[str]] = None,
    embed_dim: int = 32,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 2e-3,
    seed: int = 0,
    val_fraction: float = 0.1,
    arch: Optional[dict] = None,
) -> Tuple[EncoderPairModel, dict]:
    """Train the pair with symmetric InfoNCE over (image, caption) batches.

    Repeated captions inside a batch act as false negatives; with a closed
    template vocabulary this only softens the objective and is harmless at
    this scale. Returns the trained model (in eval mode) and a report with
    the loss curve and caption-retrieval accuracy before/after training.
    """
    if images.dim() != 4:
        raise ValueError(f"expected (N, C, H, W) images, got {tuple(images.shape)}")
    if len(captions) != images.shape[0]:
        raise ValueError(
            f"{images.shape[0]} images but {len(captions)} captions"
        )
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    captions = tuple(captions)
    if vocab is None:
        vocab = build_vocab(captions)

    torch.manual_seed(seed)
    extra = dict(arch or {})
    allowed = {"embed_dim", "base_channels", "text_hidden_dim"}
    unknown = set(extra) - allowed
    if unknown:
        raise ValueError(f"unknown arch keys {sorted(unknown)}; allowed: {sorted(allowed)}")
    model = EncoderPairModel(
        vocab,
        embed_dim=extra.pop("embed_dim", embed_dim),
        image_size=images.shape[-1],
        in_channels=images.shape[1],
        **extra,
    )

    n = images.shape[0]
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    gen = torch.Generator().manual_seed(seed + 1)
    order = torch.randperm(n, generator=gen)
    val_idx, train_idx = order[:n_val], order[n_val:]
    train_images = images[train_idx]
    train_captions = [captions[i] for i in train_idx]
    val_images = images[val_idx] if n_val else images
    val_captions = [captions[i] for i in val_idx] if n_val else list(captions)

    model.eval()
    report = {
        "loss_curve": [],
        "val_accuracy_before": caption_retrieval_accuracy(model, val_images, val_captions),
    }

    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    n_train = train_images.shape[0]
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(n_train, generator=gen)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n_train, batch_size):
            idx = perm[start : start + batch_size]
            if idx.numel() < 2:
                continue
            batch_images = train_images[idx]
            batch_captions = [train_captions[i] for i in idx.tolist()]
            logits = model.contrastive_logits(batch_images, batch_captions)
            labels = torch.arange(logits.shape[0])
            loss = 0.5 * (
                nn.functional.cross_entropy(logits, labels)
                + nn.functional.cross_entropy(logits.T, labels)
            )
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite contrastive loss: {loss.item()!r}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            batches += 1
        report["loss_curve"].append(epoch_loss / max(batches, 1))

    model.eval()
    report["val_accuracy"] = caption_retrieval_accuracy(model, val_images, val_captions)
    return model, report


def save_encoder_pair(path, model: EncoderPairModel, seed: int, extra: Optional[dict] = None):
    """Write a versioned checkpoint; load with :func:`load_encoder_pair`."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "encoder_pair",
        "arch": dict(model.arch),
        "state_dict": model.state_dict(),
        "seed": seed,
        "digest": state_dict_digest(model),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_encoder_pair(path) -> Tuple[EncoderPairModel, dict]:
    """Rebuild an encoder pair from a checkpoint; returns (model, metadata)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    if payload.get("kind") != "encoder_pair":
        raise ValueError(f"not an encoder-pair checkpoint: kind={payload.get('kind')!r}")
    model = EncoderPairModel(**payload["arch"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    if state_dict_digest(model) != payload["digest"]:
        raise ValueError("checkpoint digest mismatch after load")
    return model, {k: payload[k] for k in ("seed", "extra")}
