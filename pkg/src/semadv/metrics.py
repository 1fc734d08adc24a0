"""Attack metrics: success rate and feature-space distribution distances.

FID compares two feature sets through their Gaussian fits: squared mean
distance plus a covariance term with a matrix square root. KID is the
unbiased squared maximum mean discrepancy under the cubic polynomial kernel
``(x.y/d + 1)^3``, averaged over consecutive equal-size blocks so a standard
error is available. Both operate on features from any
:class:`FeatureExtractor`; the desk extractor is the attacked classifier's
penultimate layer, so absolute magnitudes are not comparable to published
numbers computed with large pretrained backbones — only orderings between
method variants are meaningful here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Protocol, Sequence, runtime_checkable

import numpy as np
import scipy.linalg
import torch
from torch import Tensor

from .classifiers import ConvClassifier

__all__ = [
    "CovarianceError",
    "FeatureExtractor",
    "ClassifierFeatureExtractor",
    "asr",
    "fid",
    "kid",
    "KidEstimate",
]


class CovarianceError(RuntimeError):
    """Raised when the FID covariance term is numerically unusable."""


@runtime_checkable
class FeatureExtractor(Protocol):
    """Deterministic map from an image batch to (B, d) feature vectors."""

    def extract(self, images: Tensor) -> Tensor: ...


class ClassifierFeatureExtractor:
    """Penultimate-layer features of the attacked CNN as the metric backbone."""

    def __init__(self, classifier: ConvClassifier):
        self.classifier = classifier
        self.classifier.eval()

    @torch.no_grad()
    def extract(self, images: Tensor) -> Tensor:
        return self.classifier.features(images)


def asr(results: Sequence) -> float:
    """Fraction of attack results with ``success=True``."""
    if len(results) == 0:
        raise ValueError("cannot compute a success rate over zero results")
    return sum(1 for r in results if r.success) / len(results)


def _as_feature_matrix(feats, name: str) -> np.ndarray:
    if isinstance(feats, Tensor):
        feats = feats.detach().cpu().numpy()
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"{name} must be (N, d), got shape {feats.shape}")
    if feats.shape[0] < 2:
        raise ValueError(f"{name} needs at least 2 samples, got {feats.shape[0]}")
    if not np.isfinite(feats).all():
        raise ValueError(f"{name} contains non-finite values")
    return feats


def fid(feats_a, feats_b, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ``|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})`` where both
    covariances are regularized with ``eps * I`` before the square root.
    Identical sets give 0 exactly (the square root of ``S^2`` is ``S``).

    Raises :class:`CovarianceError` with diagnostics if the matrix square
    root comes back materially complex or non-finite.
    """
    a = _as_feature_matrix(feats_a, "feats_a")
    b = _as_feature_matrix(feats_b, "feats_b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(d, d) + eps * np.eye(d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d) + eps * np.eye(d)

    covmean, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
    if not np.isfinite(covmean).all():
        raise CovarianceError("matrix square root produced non-finite entries")
    if np.iscomplexobj(covmean):
        imag_max = float(np.abs(covmean.imag).max())
        scale = max(float(np.abs(covmean.real).max()), 1.0)
        if imag_max > 1e-6 * scale:
            raise CovarianceError(
                f"matrix square root is materially complex: max imag {imag_max:.3e} "
                f"vs max real {scale:.3e} (covariances may be non-PSD)"
            )
        covmean = covmean.real

    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
    return value


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = x.shape[0], y.shape[0]
    k_xx = _poly_kernel(x, x)
    k_yy = _poly_kernel(y, y)
    k_xy = _poly_kernel(x, y)
    sum_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    sum_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    sum_xy = 2.0 * k_xy.mean()
    return float(sum_xx + sum_yy - sum_xy)


@dataclass(frozen=True)
class KidEstimate:
    """Blockwise KID: overall mean, per-block values, and their standard error."""

    value: float
    block_values: tuple

    @property
    def standard_error(self) -> float:
        blocks = np.asarray(self.block_values)
        if blocks.size < 2:
            return float("inf")
        return float(blocks.std(ddof=1) / np.sqrt(blocks.size))


def kid(feats_a, feats_b, block_size: int | None = None) -> KidEstimate:
    """Unbiased MMD^2 with the cubic polynomial kernel, averaged over blocks.

    Both sets are split into consecutive, non-overlapping blocks of
    ``block_size`` (default: one block covering ``min(len a, len b)``
    samples); the estimate is the mean of per-block unbiased MMD^2 values,
    and the block spread gives a standard error for null-consistency checks.
    """
    a = _as_feature_matrix(feats_a, "feats_a")
    b = _as_feature_matrix(feats_b, "feats_b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    limit = min(a.shape[0], b.shape[0])
    if block_size is None:
        block_size = limit
    if block_size < 2:
        raise ValueError(f"block_size must be >= 2, got {block_size}")
    if block_size > limit:
        raise ValueError(
            f"block_size {block_size} exceeds the smaller set size {limit}"
        )
    n_blocks = limit // block_size
    values: List[float] = []
    for i in range(n_blocks):
        sl = slice(i * block_size, (i + 1) * block_size)
        values.append(_mmd2_unbiased(a[sl], b[sl]))
    return KidEstimate(value=float(np.mean(values)), block_values=tuple(values))
