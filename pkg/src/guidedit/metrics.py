"""Evaluation metrics: prompt similarity, structure distance, background distance.

Structure distance compares patch-token self-similarity matrices of the
two images; background distance compares the mask-selected pixels. Both
squared distances are normalized per element so values are independent of
resolution (note: this differs from an unnormalized squared-distance
convention, so absolute scales are not directly comparable across
conventions).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import torch

from .backends import JointEncoder, as_latent, cosine_sim

Tensor = torch.Tensor


@runtime_checkable
class StructureEncoder(Protocol):
    def patch_features(self, image: Tensor) -> Tensor: ...


class PatchProjectionEncoder:
    """Toy structure encoder: fixed linear projection of non-overlapping patches.

    Images are (C, H, W); each patch_size x patch_size block maps through a
    seeded fixed matrix to a feature row, mirroring patch-token features of
    a vision transformer at desk scale.
    """

    def __init__(self, patch_size: int = 4, feature_dim: int = 16, seed: int = 99):
        self.patch_size = patch_size
        self.feature_dim = feature_dim
        self._seed = seed
        self._proj: dict[int, Tensor] = {}

    def _projection(self, dim_in: int) -> Tensor:
        if dim_in not in self._proj:
            g = torch.Generator().manual_seed(self._seed + dim_in)
            self._proj[dim_in] = torch.randn(self.feature_dim, dim_in,
                                             dtype=torch.float64,
                                             generator=g) / math.sqrt(dim_in)
        return self._proj[dim_in]

    def patch_features(self, image: Tensor) -> Tensor:
        img = as_latent(image)
        if img.ndim == 2:
            img = img.unsqueeze(0)
        c, h, w = img.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible into {p}x{p} patches")
        patches = (img.view(c, h // p, p, w // p, p)
                   .permute(1, 3, 0, 2, 4)
                   .reshape((h // p) * (w // p), c * p * p))
        return patches @ self._projection(c * p * p).T


def self_similarity(features: Tensor) -> Tensor:
    """Cosine-similarity matrix between all pairs of patch feature rows."""
    f = as_latent(features)
    norms = torch.linalg.vector_norm(f, dim=1, keepdim=True)
    if torch.any(norms == 0):
        raise ValueError("zero-norm patch feature; self-similarity undefined")
    unit = f / norms
    return unit @ unit.T


def sd_from_features(feats_a: Tensor, feats_b: Tensor) -> float:
    """Per-element squared gap between the two self-similarity matrices."""
    sa = self_similarity(feats_a)
    sb = self_similarity(feats_b)
    if sa.shape != sb.shape:
        raise ValueError("patch counts differ between the two images")
    return float(((sa - sb) ** 2).sum() / sa.numel())


def clip_similarity(image, prompt: str, encoder: JointEncoder) -> float:
    """Cosine similarity between image and prompt embeddings."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    return float(cosine_sim(encoder.encode_image(as_latent(image)),
                            encoder.encode_text(prompt)))


def structure_distance(src_image, tgt_image, structure_encoder: StructureEncoder) -> float:
    """Self-similarity gap between the two images' patch features."""
    src = as_latent(src_image)
    tgt = as_latent(tgt_image)
    if src.shape != tgt.shape:
        raise ValueError(f"resolution mismatch: {tuple(src.shape)} vs {tuple(tgt.shape)}")
    return sd_from_features(structure_encoder.patch_features(src),
                            structure_encoder.patch_features(tgt))


def background_distance(src_image, tgt_image, mask) -> float:
    """Squared pixel gap over the background region, per background pixel.

    The mask marks background with 1; pixels are expected in [0, 1] per
    channel. An all-zero mask is an error, not a zero distance.
    """
    src = as_latent(src_image)
    tgt = as_latent(tgt_image)
    m = as_latent(mask)
    if src.shape != tgt.shape:
        raise ValueError(f"resolution mismatch: {tuple(src.shape)} vs {tuple(tgt.shape)}")
    if src.ndim == 2:
        src = src.unsqueeze(0)
        tgt = tgt.unsqueeze(0)
    if m.shape != src.shape[-2:]:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match image "
                         f"resolution {tuple(src.shape[-2:])}")
    n_bg = float(m.sum())
    if n_bg == 0:
        raise ValueError("mask marks no background pixels")
    gap = ((src - tgt) ** 2 * m).sum()
    return float(gap / n_bg)


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricRow:
    pair_id: str
    cs: float
    sd: float
    bd: float | None


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, pair_id: str, cs: float, sd: float, bd: float | None):
        if not -1.0 - 1e-12 <= cs <= 1.0 + 1e-12:
            raise ValueError(f"CS out of [-1, 1]: {cs}")
        if sd < 0 or (bd is not None and bd < 0):
            raise ValueError("SD and BD must be nonnegative")
        self.rows.append(MetricRow(pair_id, cs, sd, bd))

    def aggregates(self) -> dict:
        n = len(self.rows)
        bd_rows = [r.bd for r in self.rows if r.bd is not None]
        return {
            "count": n,
            "count_bd": len(bd_rows),
            "mean_cs": sum(r.cs for r in self.rows) / n if n else float("nan"),
            "mean_sd": sum(r.sd for r in self.rows) / n if n else float("nan"),
            "mean_bd": sum(bd_rows) / len(bd_rows) if bd_rows else None,
        }

    def write_csv(self, path):
        agg = self.aggregates()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair_id", "cs", "sd", "bd"])
            for r in self.rows:
                writer.writerow([r.pair_id, repr(r.cs), repr(r.sd),
                                 "" if r.bd is None else repr(r.bd)])
            writer.writerow(["aggregate_mean", repr(agg["mean_cs"]), repr(agg["mean_sd"]),
                             "" if agg["mean_bd"] is None else repr(agg["mean_bd"])])
            writer.writerow(["count", agg["count"], agg["count"], agg["count_bd"]])
