"""Discriminative foreground modulation.

The support mask splits support features into foreground and background
prototypes (masked average pooling).  Cosine similarity of every query
location to each prototype gives two response maps whose rectified
difference is a query-adaptive discriminative prior: positive exactly
where foreground evidence beats background evidence.  Both branches are
then modulated by concatenating prototype and guidance channels and
projecting back to width C with a 1x1 convolution, separately per
feature modality.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as vt
from .tensor import Tensor

log = logging.getLogger(__name__)

EPS_AREA = 1e-6

MODALITIES = ("res", "sam")


@dataclass
class DfmPriors:
    fg_proto: Tensor    # C
    bg_proto: Tensor    # C
    fg_map: Tensor      # H x W, cosine in [-1, 1]
    bg_map: Tensor      # H x W
    disc_prior: Tensor  # H x W, >= 0


@dataclass
class DfmParams:
    """One (weight, bias) conv1x1 pair per branch and modality.

    Each projection maps the concatenated (C + C + 1) channels back to C.
    """

    support_proj: dict[str, tuple[Tensor, Tensor]]
    query_proj: dict[str, tuple[Tensor, Tensor]]


def dfm_init(channels: int, rng: np.random.Generator) -> dict[str, dict[str, np.ndarray]]:
    """Xavier-uniform conv weights and zero biases for both projections."""
    c_in = 2 * channels + 1
    s = np.sqrt(6.0 / (c_in + channels))
    out: dict[str, dict[str, np.ndarray]] = {}
    for proj in ("support_proj", "query_proj"):
        for m in MODALITIES:
            out[f"{proj}.{m}"] = {
                "weight": rng.uniform(-s, s, size=(channels, c_in)),
                "bias": np.zeros(channels),
            }
    return out


def downsample_mask_nearest(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor resize of a binary H_img x W_img mask to h x w."""
    mask = np.asarray(mask, dtype=np.float64)
    hi, wi = mask.shape
    rows = np.minimum(((np.arange(h) + 0.5) * hi / h).astype(np.intp), hi - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * wi / w).astype(np.intp), wi - 1)
    return mask[rows[:, None], cols[None, :]]


def masked_prototypes(support_feat: Tensor,
                      support_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Foreground and background prototypes by masked average pooling.

    Sums are divided by max(area, EPS_AREA), so an all-foreground mask
    yields a zero background prototype (and vice versa) instead of a
    division error; the degenerate case is logged, not raised.
    """
    c, h, w = support_feat.shape
    mask = np.asarray(support_mask, dtype=np.float64)
    if mask.shape != (h, w):
        raise vt.ShapeError(f"mask {mask.shape} vs feature grid {(h, w)}")
    area_fg = float(mask.sum())
    area_bg = float(h * w) - area_fg
    if area_fg == 0.0:
        log.warning("degenerate episode: support mask has no foreground")
    if area_bg == 0.0:
        log.warning("degenerate episode: support mask has no background")

    def pooled(m: np.ndarray, area: float) -> Tensor:
        total = vt.scale(vt.global_avg_pool(vt.mul_map(support_feat, vt.tensor(m))),
                         float(h * w))
        return vt.scale(total, 1.0 / max(area, EPS_AREA))

    return pooled(mask, area_fg), pooled(1.0 - mask, area_bg)


def discriminative_prior(query_feat: Tensor, fg_proto: Tensor,
                         bg_proto: Tensor) -> DfmPriors:
    """Rectified cosine contrast of query features against both prototypes."""
    fg_map = vt.cosine_map(query_feat, fg_proto)
    bg_map = vt.cosine_map(query_feat, bg_proto)
    return DfmPriors(
        fg_proto=fg_proto,
        bg_proto=bg_proto,
        fg_map=fg_map,
        bg_map=bg_map,
        disc_prior=vt.relu(vt.sub(fg_map, bg_map)),
    )


def _modulate(feat: Tensor, fg_proto: Tensor, guide: Tensor,
              proj: tuple[Tensor, Tensor]) -> Tensor:
    c, h, w = feat.shape
    stacked = vt.concat(
        [feat, vt.broadcast_cvec(fg_proto, h, w), vt.reshape(guide, (1, h, w))],
        axis=0)
    weight, bias = proj
    return vt.conv1x1(stacked, weight, bias)


def modulate_support(feat: Tensor, fg_proto: Tensor, mask: np.ndarray,
                     p: DfmParams, modality: str) -> Tensor:
    """Support-branch modulation: guidance channel is the binary mask."""
    guide = vt.tensor(np.asarray(mask, dtype=np.float64))
    return _modulate(feat, fg_proto, guide, p.support_proj[modality])


def modulate_query(feat: Tensor, fg_proto: Tensor, disc_prior: Tensor,
                   p: DfmParams, modality: str) -> Tensor:
    """Query-branch modulation: guidance channel is the discriminative prior."""
    return _modulate(feat, fg_proto, disc_prior, p.query_proj[modality])
