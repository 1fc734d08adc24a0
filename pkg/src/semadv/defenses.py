"""Input-transformation and detection defenses, plus defended-ASR evaluation.

Two defenses are in scope:

* **JPEG re-encoding** — images round-trip through lossy JPEG at a chosen
  quality factor, destroying high-frequency adversarial structure.
* **Feature squeezing** — a detector: the classifier's softmax on the
  original image is compared against its softmax on squeezed variants
  (bit-depth reduction, median smoothing, non-local-means denoising); a max
  L1 gap above a calibrated threshold flags the input as adversarial.

``evaluate_under_defense`` recomputes the attack success rate with a defense
in the loop. A transform defense succeeds for a sample when the classifier
still emits the target label on the transformed image; the feature-squeezing
defense is beaten only when the input both evades detection *and* keeps the
target label on every squeezed variant.

All defenses are pure functions of (image, parameters); images live in
[-1, 1] and are quantized to the 8-bit grid on entry where the defense
semantics assume discrete pixels.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import median_filter
from skimage.restoration import denoise_nl_means
from torch import Tensor

from .losses import prepare_classifier_input

__all__ = [
    "jpeg_defense",
    "jpeg_encoded_size",
    "identity_defense",
    "FeatureSqueezeConfig",
    "FeatureSqueezeDefense",
    "squeezed_variants",
    "feature_squeeze",
    "calibrate_fs_threshold",
    "evaluate_under_defense",
]


def _to_batch(images: Tensor) -> Tuple[Tensor, bool]:
    if images.dim() == 3:
        return images.unsqueeze(0), True
    if images.dim() == 4:
        return images, False
    raise ValueError(f"expected (C, H, W) or (B, C, H, W), got {tuple(images.shape)}")


def _to_uint8(images: Tensor) -> np.ndarray:
    """[-1, 1] float -> uint8 (B, C, H, W)."""
    arr = ((images.detach().clamp(-1.0, 1.0) + 1.0) * 127.5).round().clamp(0, 255)
    return arr.to(torch.uint8).cpu().numpy()


def _from_uint8(arr: np.ndarray, like: Tensor) -> Tensor:
    out = torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)
    return out.to(dtype=like.dtype)


def _pil_mode(channels: int) -> str:
    if channels == 1:
        return "L"
    if channels == 3:
        return "RGB"
    raise ValueError(f"JPEG defense supports 1 or 3 channels, got {channels}")


def _encode_one(img_u8: np.ndarray, quality: int) -> bytes:
    channels = img_u8.shape[0]
    mode = _pil_mode(channels)
    if channels == 1:
        pil = Image.fromarray(img_u8[0], mode)
    else:
        pil = Image.fromarray(np.moveaxis(img_u8, 0, -1), mode)
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


def jpeg_defense(images: Tensor, quality: int = 75) -> Tensor:
    """Round-trip images through JPEG encode/decode at the given quality.

    Accepts (C, H, W) or (B, C, H, W) in [-1, 1]; returns the same shape and
    dtype, with values back in [-1, 1].
    """
    if not (1 <= int(quality) <= 100):
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    batch, squeeze = _to_batch(images)
    u8 = _to_uint8(batch)
    decoded = np.empty_like(u8)
    for i in range(u8.shape[0]):
        data = _encode_one(u8[i], int(quality))
        pil = Image.open(io.BytesIO(data))
        arr = np.asarray(pil)
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = np.moveaxis(arr, -1, 0)
        decoded[i] = arr
    out = _from_uint8(decoded, images)
    return out[0] if squeeze else out


def jpeg_encoded_size(image: Tensor, quality: int = 75) -> int:
    """Byte size of one image's JPEG encoding (for entropy comparisons)."""
    batch, _ = _to_batch(image)
    if batch.shape[0] != 1:
        raise ValueError("jpeg_encoded_size takes a single image")
    return len(_encode_one(_to_uint8(batch)[0], int(quality)))


def identity_defense(images: Tensor) -> Tensor:
    """The no-op defense; a baseline that must preserve ASR exactly."""
    return images


@dataclass(frozen=True)
class FeatureSqueezeConfig:
    """Squeezer parameters: bit depth, median window, and NLM settings.

    ``nlm`` is ``(search_window, patch_size, h_over_255)`` or ``None`` to
    disable denoising. Defaults follow the common grayscale configuration:
    5-bit depth, 2x2 median, 11-3-4 non-local means.
    """

    bits: int = 5
    median_window: int = 2
    nlm: Optional[Tuple[int, int, int]] = (11, 3, 4)

    def __post_init__(self) -> None:
        if not (1 <= self.bits <= 8):
            raise ValueError(f"bits must be in [1, 8], got {self.bits}")
        if self.median_window < 1:
            raise ValueError(f"median_window must be >= 1, got {self.median_window}")
        if self.nlm is not None:
            search, patch, h = self.nlm
            if search < 3 or search % 2 == 0:
                raise ValueError(f"NLM search window must be odd and >= 3, got {search}")
            if patch < 1:
                raise ValueError(f"NLM patch size must be >= 1, got {patch}")
            if h <= 0:
                raise ValueError(f"NLM strength must be positive, got {h}")


def _unit_interval(images: Tensor) -> Tensor:
    """[-1,1] -> [0,1], snapped to the 8-bit grid (defense entry contract)."""
    u = (images.clamp(-1.0, 1.0) + 1.0) / 2.0
    return (u * 255.0).round() / 255.0


def _bit_depth_reduce(u01: Tensor, bits: int) -> Tensor:
    levels = 2**bits - 1
    return (u01 * levels).round() / levels


def _median_smooth(u01: Tensor, window: int) -> Tensor:
    if window == 1:
        return u01.clone()
    out = np.empty(u01.shape, dtype=np.float64)
    arr = u01.cpu().numpy()
    for b in range(arr.shape[0]):
        for c in range(arr.shape[1]):
            out[b, c] = median_filter(arr[b, c], size=window, mode="reflect")
    return torch.from_numpy(out).to(dtype=u01.dtype)


def _nlm_denoise(u01: Tensor, search: int, patch: int, h255: float) -> Tensor:
    out = np.empty(u01.shape, dtype=np.float64)
    arr = u01.cpu().numpy().astype(np.float64)
    patch_distance = (search - 1) // 2
    for b in range(arr.shape[0]):
        for c in range(arr.shape[1]):
            out[b, c] = denoise_nl_means(
                arr[b, c],
                patch_size=patch,
                patch_distance=patch_distance,
                h=h255 / 255.0,
                fast_mode=True,
            )
    return torch.from_numpy(out).to(dtype=u01.dtype)


def squeezed_variants(images: Tensor, cfg: FeatureSqueezeConfig = FeatureSqueezeConfig()) -> List[Tensor]:
    """Each squeezer applied independently to the (8-bit-snapped) input.

    Returns images back in [-1, 1], one tensor per active squeezer in the
    order (bit depth, median, NLM).
    """
    batch, squeeze = _to_batch(images)
    u01 = _unit_interval(batch)
    outs = [
        _bit_depth_reduce(u01, cfg.bits),
        _median_smooth(u01, cfg.median_window),
    ]
    if cfg.nlm is not None:
        search, patch, h255 = cfg.nlm
        outs.append(_nlm_denoise(u01, search, patch, h255))
    result = [o * 2.0 - 1.0 for o in outs]
    return [r[0] if squeeze else r for r in result]


def _softmax_probs(f: Callable[[Tensor], Tensor], images: Tensor) -> Tensor:
    with torch.no_grad():
        return torch.softmax(f(prepare_classifier_input(images)), dim=1)


def feature_squeeze(
    images: Tensor,
    f: Callable[[Tensor], Tensor],
    threshold: float,
    cfg: FeatureSqueezeConfig = FeatureSqueezeConfig(),
) -> Tuple[Tensor, Tensor]:
    """Detect adversarial inputs by prediction shift under squeezing.

    Returns ``(decision, distances)``: ``decision`` is a (B,) bool tensor
    (True = flagged adversarial), ``distances`` is (B, n_squeezers) holding
    the L1 gaps between the classifier softmax on the original and on each
    squeezed variant. The decision is ``max distance > threshold``.
    """
    batch, squeeze = _to_batch(images)
    base = _unit_interval(batch) * 2.0 - 1.0
    probs = _softmax_probs(f, base)
    variants = squeezed_variants(batch, cfg)
    dists = []
    for variant in variants:
        v = variant if variant.dim() == 4 else variant.unsqueeze(0)
        dists.append((probs - _softmax_probs(f, v)).abs().sum(dim=1))
    distances = torch.stack(dists, dim=1)
    decision = distances.max(dim=1).values > threshold
    if squeeze:
        return decision[0], distances[0]
    return decision, distances


def calibrate_fs_threshold(
    clean_images: Tensor,
    f: Callable[[Tensor], Tensor],
    cfg: FeatureSqueezeConfig = FeatureSqueezeConfig(),
    quantile: float = 0.95,
) -> float:
    """Threshold at the given quantile of clean-image squeeze distances.

    With the default 0.95, at most ~5% of clean images from the calibration
    distribution are flagged as false positives.
    """
    if clean_images.dim() != 4 or clean_images.shape[0] < 2:
        raise ValueError("calibration needs a batch of at least 2 clean images")
    if not (0.0 < quantile < 1.0):
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    _, distances = feature_squeeze(clean_images, f, threshold=float("inf"), cfg=cfg)
    per_image_max = distances.max(dim=1).values.cpu().numpy()
    return float(np.quantile(per_image_max, quantile))


@dataclass(frozen=True)
class FeatureSqueezeDefense:
    """Bundled feature-squeezing detector: squeezer config plus threshold."""

    threshold: float
    cfg: FeatureSqueezeConfig = FeatureSqueezeConfig()

    def detect(self, images: Tensor, f: Callable[[Tensor], Tensor]) -> Tuple[Tensor, Tensor]:
        return feature_squeeze(images, f, self.threshold, self.cfg)


def evaluate_under_defense(
    results: Sequence,
    defense,
    f: Callable[[Tensor], Tensor],
) -> float:
    """Attack success rate with a defense in the loop.

    ``results`` must carry ``x_0`` images and ``y_target`` labels. For a
    transform defense (any callable image -> image), a sample counts as a
    success when ``f`` still assigns the target label to the transformed
    image. For :class:`FeatureSqueezeDefense`, the sample must evade
    detection *and* keep the target label on every squeezed variant.
    """
    if len(results) == 0:
        raise ValueError("cannot evaluate a defense over zero results")
    images = torch.stack([r.x_0 for r in results])
    targets = torch.tensor([int(r.y_target) for r in results])

    if isinstance(defense, FeatureSqueezeDefense):
        decision, _ = defense.detect(images, f)
        still_target = torch.ones(len(results), dtype=torch.bool)
        for variant in squeezed_variants(images, defense.cfg):
            with torch.no_grad():
                preds = f(prepare_classifier_input(variant)).argmax(dim=1)
            still_target &= preds == targets
        successes = (~decision) & still_target
        return float(successes.float().mean())

    defended = defense(images)
    with torch.no_grad():
        preds = f(prepare_classifier_input(defended)).argmax(dim=1)
    return float((preds == targets).float().mean())
