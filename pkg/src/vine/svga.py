"""Spatial-view graph alignment.

Support features are refined per view by a spatial GAT over the feature
grid, summarized into one embedding per view, aligned across views by a
second GAT, and fused back into the original view's patch embeddings.
The query passes through the same spatial GAT; in the 1-shot case it
receives no view-level term (augmenting a single real query view with
its own statistics distorts semantics).  A prototype-consistency loss
ties the two branches together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as vt
from .gat import GatParams, gat_forward, gat_init
from .geometry import perturb_corners, warp, warp_mask
from .graphs import Graph
from .tensor import Tensor


@dataclass
class SvgaParams:
    gat_space: GatParams
    gat_view: GatParams


@dataclass
class SvgaOutput:
    support_refined: Tensor    # C x H x W
    query_refined: Tensor      # C x H x W
    proto_support: Tensor      # C
    proto_query: Tensor        # C
    proto_loss: Tensor         # scalar


@dataclass
class SvgaKshotOutput:
    support_refined: list      # K tensors, C x H x W
    query_refined: Tensor      # C x H x W
    proto_support: Tensor      # C
    proto_query: Tensor        # C
    proto_loss: Tensor         # scalar


def svga_init(channels: int, spatial_heads: int, view_heads: int,
              rng: np.random.Generator) -> dict[str, list[dict[str, np.ndarray]]]:
    """Initial arrays for both GATs; output width equals input width."""
    if channels % spatial_heads or channels % view_heads:
        raise ValueError(
            f"channels {channels} not divisible by heads "
            f"({spatial_heads} spatial, {view_heads} view)")
    return {
        "gat_space": gat_init(channels, channels // spatial_heads,
                              spatial_heads, rng),
        "gat_view": gat_init(channels, channels // view_heads, view_heads, rng),
    }


def make_pseudo_views(support_img: Tensor, support_mask: np.ndarray, r: int,
                      delta_max: float,
                      rng: np.random.Generator) -> list[tuple[Tensor, np.ndarray]]:
    """Original plus ``r`` homography-perturbed copies of a support pair.

    Index 0 holds the untouched originals.  With ``delta_max == 0`` the
    perturbation short-circuits to the exact identity, so every view is
    bit-identical to the original.
    """
    if r < 0:
        raise ValueError(f"view count must be nonnegative, got {r}")
    views = [(support_img, np.asarray(support_mask, dtype=np.float64))]
    for _ in range(r):
        h = perturb_corners(delta_max, rng)
        views.append((warp(support_img, h), warp_mask(support_mask, h)))
    return views


def _to_patches(f: Tensor) -> Tensor:
    """C x H x W -> N x C with N = H*W in row-major order."""
    c, h, w = f.shape
    return vt.transpose(vt.reshape(f, (c, h * w)))


def _to_map(x: Tensor, h: int, w: int) -> Tensor:
    c = x.shape[1]
    return vt.reshape(vt.transpose(x), (c, h, w))


def _check_shapes(feats: list[Tensor], spatial_g: Graph, view_g: Graph) -> None:
    c, h, w = feats[0].shape
    for f in feats[1:]:
        if f.shape != (c, h, w):
            raise vt.ShapeError(f"feature maps disagree: {f.shape} vs {(c, h, w)}")
    if h * w != spatial_g.num_nodes:
        raise vt.ShapeError(
            f"feature grid {h}x{w} vs spatial graph of {spatial_g.num_nodes} nodes")
    if len(feats) != view_g.num_nodes:
        raise vt.ShapeError(
            f"{len(feats)} views vs view graph of {view_g.num_nodes} nodes")


def _view_matrix(patches: list[Tensor]) -> Tensor:
    """Stack per-view mean embeddings into a (num_views x C) matrix."""
    rows = [vt.reshape(vt.mean_rows(p), (1, p.shape[1])) for p in patches]
    return rows[0] if len(rows) == 1 else vt.concat(rows, axis=0)


def svga_forward(support_feats: list[Tensor], query_feat: Tensor,
                 spatial_g: Graph, view_g: Graph, p: SvgaParams) -> SvgaOutput:
    """1-shot alignment: original support view fused with the view-GAT hub.

    ``support_feats[0]`` is the original view; the rest are pseudo-view
    features.  The query runs through the spatial GAT only.
    """
    _check_shapes(support_feats, spatial_g, view_g)
    c, h, w = query_feat.shape
    if support_feats[0].shape != (c, h, w):
        raise vt.ShapeError(
            f"query {query_feat.shape} vs support {support_feats[0].shape}")
    s_patches = [gat_forward(_to_patches(f), spatial_g, p.gat_space)
                 for f in support_feats]
    q_patch = gat_forward(_to_patches(query_feat), spatial_g, p.gat_space)
    v = _view_matrix(s_patches)
    v_view = gat_forward(v, view_g, p.gat_view)
    hub = vt.reshape(vt.gather_rows(v_view, np.array([0])), (c,))
    fused = vt.add_rowvec(s_patches[0], hub)
    support_refined = _to_map(fused, h, w)
    query_refined = _to_map(q_patch, h, w)
    proto_s = vt.global_avg_pool(support_refined)
    proto_q = vt.global_avg_pool(query_refined)
    return SvgaOutput(
        support_refined=support_refined,
        query_refined=query_refined,
        proto_support=proto_s,
        proto_query=proto_q,
        proto_loss=vt.mse(proto_q, proto_s),
    )


def svga_forward_kshot(support_feats: list[Tensor], query_feats: list[Tensor],
                       spatial_g: Graph, support_view_g: Graph,
                       query_view_g: Graph, p: SvgaParams) -> SvgaKshotOutput:
    """K-shot alignment: both branches aggregate over fully connected views.

    The support branch's views are the K real shots; the query branch's
    views are the real query (index 0) plus its own pseudo-views.  Every
    real view receives its own view-level term; the support prototype
    averages over shots.
    """
    if len(support_feats) < 2:
        raise ValueError(f"K-shot path needs K >= 2, got {len(support_feats)}")
    _check_shapes(support_feats, spatial_g, support_view_g)
    _check_shapes(query_feats, spatial_g, query_view_g)
    c, h, w = query_feats[0].shape

    def branch(feats: list[Tensor], view_g: Graph) -> list[Tensor]:
        patches = [gat_forward(_to_patches(f), spatial_g, p.gat_space)
                   for f in feats]
        v_view = gat_forward(_view_matrix(patches), view_g, p.gat_view)
        fused = []
        for r, patch in enumerate(patches):
            hub = vt.reshape(vt.gather_rows(v_view, np.array([r])), (c,))
            fused.append(_to_map(vt.add_rowvec(patch, hub), h, w))
        return fused

    s_refined = branch(support_feats, support_view_g)
    q_refined = branch(query_feats, query_view_g)[0]
    protos = [vt.global_avg_pool(f) for f in s_refined]
    stacked = vt.concat([vt.reshape(q, (1, c)) for q in protos], axis=0)
    proto_s = vt.mean_rows(stacked)
    proto_q = vt.global_avg_pool(q_refined)
    return SvgaKshotOutput(
        support_refined=s_refined,
        query_refined=q_refined,
        proto_support=proto_s,
        proto_query=proto_q,
        proto_loss=vt.mse(proto_q, proto_s),
    )
