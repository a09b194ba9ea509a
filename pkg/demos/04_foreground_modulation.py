"""
Discriminative foreground modulation
====================================

Pool masked prototypes from the support, score every query cell by its
rectified cosine contrast against them, and use the resulting prior to
modulate features.  The prior map is dumped as a PGM heatmap.
"""

import os

import numpy as np

import vine.tensor as vt
from vine.dfm import (discriminative_prior, downsample_mask_nearest,
                      masked_prototypes, modulate_query)
from vine.episodes import sample_episode, write_pgm
from vine.trainer import _rng, encoder_forward, init_params, mount_params, tiny_config

OUT = os.path.join(os.path.dirname(__file__), "out", "04_dfm")
os.makedirs(OUT, exist_ok=True)

cfg = tiny_config()
size = cfg["episodes.image_size"]
grid = size // 4
ep = sample_episode("base", 1, 0.05, np.random.default_rng(11), size=size,
                    clutter_n=cfg["episodes.clutter"])
model = mount_params(init_params(cfg, _rng(cfg["seed"], 0)), None, cfg)

# Encode support and query, pool fg/bg prototypes under the downsampled
# support mask.
s_img, s_mask = ep.supports[0]
s_feat = encoder_forward(vt.tensor(s_img), model.encoder_sam)
q_feat = encoder_forward(vt.tensor(ep.query_image), model.encoder_sam)
mask_grid = downsample_mask_nearest(s_mask, grid, grid)
fg, bg = masked_prototypes(s_feat, mask_grid)
print(f"fg proto norm {np.linalg.norm(fg.data):.3f}, "
      f"bg proto norm {np.linalg.norm(bg.data):.3f}")

# The prior is ReLU(cos-to-fg minus cos-to-bg): nonnegative, high where
# a cell looks more like the support foreground than its background.
priors = discriminative_prior(q_feat, fg, bg)
pm = priors.disc_prior.data
print(f"prior range [{pm.min():.3f}, {pm.max():.3f}], "
      f"nonzero at {(pm > 0).mean():.2%} of cells")

heat = (255 * pm / max(pm.max(), 1e-9)).astype(np.uint8)
write_pgm(os.path.join(OUT, "disc_prior.pgm"), heat)
gt_grid = downsample_mask_nearest(ep.query_mask, grid, grid)
write_pgm(os.path.join(OUT, "query_gt_grid.pgm"),
          (gt_grid * 255).astype(np.uint8))

# How informative is the prior before any training?  Rank correlation
# with the ground-truth grid mask, untrained encoders:
order = pm.ravel().argsort().argsort()
fg_cells = gt_grid.ravel() > 0.5
if fg_cells.any() and (~fg_cells).any():
    auc = ((order[fg_cells].mean() - (fg_cells.sum() - 1) / 2)
           / (~fg_cells).sum())
    print(f"prior-vs-gt AUC at random init: {auc:.3f}")

# Modulation mixes the feature map, the broadcast fg prototype, and the
# prior through a learned 1x1 convolution.
modded = modulate_query(q_feat, priors.fg_proto, priors.disc_prior,
                        model.dfm, "sam")
print(f"modulated query features: {q_feat.shape} -> {modded.shape}")
print(f"wrote {OUT}/")
