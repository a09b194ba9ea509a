"""
Pseudo-views and spatial-view graph alignment
=============================================

Warp a support image into pseudo-views with small random homographies,
then refine support/query features over two graphs: a KNN graph across
the feature grid and a star graph across views.
"""

import numpy as np

import vine.svga as svga
import vine.tensor as vt
from vine.geometry import identity_homography, perturb_corners, warp
from vine.graphs import knn_spatial_graph, star_view_graph
from vine.episodes import sample_episode
from vine.trainer import encoder_forward, init_params, mount_params, _rng, tiny_config
from vine.config import load_config

cfg = tiny_config()
rng = np.random.default_rng(3)
ep = sample_episode("base", 1, cfg["episodes.view_shift"], rng,
                    size=cfg["episodes.image_size"],
                    clutter_n=cfg["episodes.clutter"])
img, mask = ep.supports[0]

# A pseudo-view is the same support under a small corner perturbation.
# delta_max bounds how far each corner moves (fraction of image size).
views = svga.make_pseudo_views(vt.tensor(img), mask, 3, 0.02, rng)
print(f"{len(views)} views; view 0 is the untouched original:",
      views[0][0].data.tobytes() == img.tobytes())

# With delta_max = 0 every pseudo-view is bit-identical to the source.
frozen = svga.make_pseudo_views(vt.tensor(img), mask, 2, 0.0, rng)
print("delta_max=0 exact:",
      all(v.data.tobytes() == img.tobytes() for v, _ in frozen))

# Warping alone: identity homography is exact, small perturbations are
# near-identity.
h = perturb_corners(0.02, rng)
warped = warp(vt.tensor(img), h)
ident = warp(vt.tensor(img), identity_homography())
print("identity warp bit-exact:", ident.data.tobytes() == img.tobytes())
print(f"perturbed warp mean abs diff: "
      f"{np.abs(warped.data - img).mean():.4f}")

# SVGA: encode each view, then run graph attention over the spatial KNN
# graph and the view star graph; the prototype-alignment loss measures
# support/query agreement after refinement.
model = mount_params(init_params(cfg, _rng(cfg["seed"], 0)), None, cfg)
grid = cfg["episodes.image_size"] // 4
feats = [encoder_forward(v, model.encoder_res) for v, _ in views]
q_feat = encoder_forward(vt.tensor(ep.query_image), model.encoder_res)
spatial = knn_spatial_graph(grid, grid, cfg["svga.knn_k"])
view_graph = star_view_graph(len(views) - 1)
out = svga.svga_forward(feats, q_feat, spatial, view_graph, model.svga)
print(f"refined support {out.support_refined.shape}, "
      f"query {out.query_refined.shape}, "
      f"proto alignment loss {float(out.proto_loss.data):.6f}")
