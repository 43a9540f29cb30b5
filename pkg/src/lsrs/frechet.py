"""Fréchet distance between feature statistics, with the mean/trace
decomposition, plus the fixed-seed (never trained) feature extractor that
stands in for a pretrained vision backbone.

All statistics accumulate in float64; the matrix square root uses the
symmetric form (S_r^1/2 S_g S_r^1/2)^1/2 via eigendecomposition with
negative eigenvalues clamped to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import DTYPE, Tape
from .rng import StreamKey

FEATURE_DIM = 16


@dataclass
class FrechetStats:
    mu: np.ndarray      # (D,) float64
    sigma: np.ndarray   # (D, D) float64
    n: int

    def __post_init__(self):
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-9):
            raise ValueError("FrechetStats: covariance not symmetric within 1e-9")
        self.full_rank_ok = self.n >= self.mu.size + 1


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues clamp to 0."""
    a = np.asarray(a, dtype=np.float64)
    sym_err = np.max(np.abs(a - a.T))
    if sym_err > 1e-9 * max(1.0, float(np.max(np.abs(a)))):
        raise ValueError(f"sqrtm: input not symmetric (max deviation {sym_err:.3e})")
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(real: FrechetStats, gen: FrechetStats):
    """Returns (fid, mean_diff2, trace_term) with fid == mean_diff2 + trace_term."""
    if real.mu.shape != gen.mu.shape:
        raise ValueError(f"frechet: dims {real.mu.shape} vs {gen.mu.shape}")
    diff = real.mu - gen.mu
    mean_diff2 = float(diff @ diff)
    sr = sqrtm_psd(real.sigma)
    cross = sqrtm_psd(sr @ gen.sigma @ sr)
    trace_term = float(np.trace(real.sigma) + np.trace(gen.sigma) - 2.0 * np.trace(cross))
    scale = max(1.0, abs(float(np.trace(real.sigma))) + abs(float(np.trace(gen.sigma))))
    if trace_term < 0 and trace_term > -1e-8 * scale:
        trace_term = 0.0  # numerical cleanup; analytically the term is >= 0
    return mean_diff2 + trace_term, mean_diff2, trace_term


def stats_from_features(features: np.ndarray) -> FrechetStats:
    """Unbiased covariance; requires at least two samples."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("stats: need an (N >= 2, D) feature matrix")
    mu = features.mean(axis=0)
    xc = features - mu
    sigma = (xc.T @ xc) / (features.shape[0] - 1)
    sigma = (sigma + sigma.T) / 2.0
    return FrechetStats(mu=mu, sigma=sigma, n=features.shape[0])


class FeatureExtractor:
    """Fixed-seed random conv net: stem, two residual blocks with 2x
    downsampling, global average pool to a 16-d feature. Never trained."""

    def __init__(self, channels, seed=97, width=FEATURE_DIM):
        self.seed = seed
        key = StreamKey("extractor", int(seed))
        self.stem = nn.Conv(3, channels, width, key.child("stem"))
        self.block1 = nn.ResidualBlock(width, width, key.child("b1"), downsample=True)
        self.block2 = nn.ResidualBlock(width, width, key.child("b2"), downsample=True)
        self.mix = nn.Dense(width, FEATURE_DIM, key.child("mix"))

    def features(self, images: np.ndarray) -> np.ndarray:
        """(N, H, W, C) -> (N, 16), batched, deterministic."""
        out = []
        for b0 in range(0, len(images), 256):
            tape = Tape()
            x = tape.apply(self.stem, np.asarray(images[b0:b0 + 256], dtype=DTYPE))
            x = self.block1.forward(x, tape)
            x = self.block2.forward(x, tape)
            pooled = x.mean(axis=(1, 2))
            out.append(nn.apply_layer(self.mix, pooled))
        return np.concatenate(out, axis=0).astype(np.float64)


def extract_features(extractor: FeatureExtractor, images):
    """Feature matrix and Fréchet stats for an image set."""
    if len(images) == 0:
        raise ValueError("extract_features: empty image set")
    feats = extractor.features(images)
    return feats, stats_from_features(feats)


def diversity(features: np.ndarray) -> float:
    """Mean pairwise Euclidean distance in feature space."""
    f = np.asarray(features, dtype=np.float64)
    n = f.shape[0]
    if n < 2:
        return 0.0
    sq = (f * f).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (f @ f.T)
    iu = np.triu_indices(n, k=1)
    return float(np.sqrt(np.clip(d2[iu], 0.0, None)).mean())
