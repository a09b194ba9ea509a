"""
Reference prompts and mask decoding
===================================

Build support prompts with masked cross-attention (keys restricted to
the support foreground), query prompts without masking, fuse them, and
decode a mask from token-feature affinities.
"""

import numpy as np

import vine.tensor as vt
from vine.dfm import downsample_mask_nearest
from vine.episodes import sample_episode
from vine.trainer import _rng, encoder_forward, init_params, mount_params, tiny_config
from vine.vrp import (build_query_prompt, build_support_prompt, decode_mask,
                      fuse_vrp)

cfg = tiny_config()
size = cfg["episodes.image_size"]
grid = size // 4
ep = sample_episode("base", 1, 0.05, np.random.default_rng(5), size=size,
                    clutter_n=1)
model = mount_params(init_params(cfg, _rng(cfg["seed"], 0)), None, cfg)

s_img, s_mask = ep.supports[0]
f_sam_s = encoder_forward(vt.tensor(s_img), model.encoder_sam)
f_res_s = encoder_forward(vt.tensor(s_img), model.encoder_res)
f_sam_q = encoder_forward(vt.tensor(ep.query_image), model.encoder_sam)
f_res_q = encoder_forward(vt.tensor(ep.query_image), model.encoder_res)
mask_grid = downsample_mask_nearest(s_mask, grid, grid)

# Stage 1 attends tokens to semantic features, stage 2 to structural
# ones; on the support side both stages see only foreground cells.
p_support = build_support_prompt(model.support_tokens, f_sam_s, f_res_s,
                                 mask_grid, model.vrp)
p_query = build_query_prompt(model.query_tokens, f_sam_q, f_res_q, model.vrp)
print(f"support prompt {p_support.shape}, query prompt {p_query.shape}")

# Fusion: support tokens attend to query tokens, producing the unified
# reference prompt that conditions the decoder.
fused = fuse_vrp(p_support, p_query, model.vrp)
print(f"fused prompt {fused.shape}")

# The decoder forms one affinity channel per token (scaled dot product
# with every feature cell), stacks the feature map on top, and maps the
# stack through two 1x1 convolutions to logits at image resolution.
logits = decode_mask(fused, f_sam_q, model.decoder)
print(f"logits {logits.shape} at image resolution")

# The final decoder stage initializes to zero, so an untrained model is
# exactly noncommittal: sigmoid(0) = 0.5 everywhere, and thresholding
# at 0.5 predicts all background.
print("untrained logits all zero:", bool((logits.data == 0).all()))
pred = (logits.data > 0).astype(float)
print(f"untrained prediction foreground fraction: {pred.mean():.3f}")
