"""Visual reference prompts and the mask decoder.

Prompt tokens attend to the support branch under mask guidance (keys
stay semantic across both stages, values switch from semantic to
structural), to the query branch without masking, and finally the
support prompt attends to the query prompt to form the unified
reference.  A small affinity decoder turns the fused tokens into
full-resolution mask logits, and the prediction loss combines
pixel-level BCE with region-level Dice.

All attention is single-head scaled dot-product (1/sqrt(C)) with
bias-free square projections and a residual add after every block.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as vt
from .geometry import upsample_bilinear
from .tensor import Tensor

log = logging.getLogger(__name__)

# finite stand-in for -inf: exp(x - max) underflows to exactly 0.0, so
# masked positions get exactly zero attention without NaN hazards
MASK_FILL = -1e30

DICE_EPS = 1.0


@dataclass
class AttnParams:
    wq: Tensor  # C x C
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class VrpParams:
    support_stage1: AttnParams
    support_stage2: AttnParams
    query_stage1: AttnParams
    query_stage2: AttnParams
    fuse: AttnParams


@dataclass
class DecoderParams:
    w1: Tensor         # hidden x (T + C)
    b1: Tensor
    w2: Tensor         # 1 x hidden
    b2: Tensor
    upsample: int


_ATTN_KEYS = ("wq", "wk", "wv", "wo")
_VRP_BLOCKS = ("support_stage1", "support_stage2",
               "query_stage1", "query_stage2", "fuse")


def attn_init(channels: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    s = np.sqrt(6.0 / (2 * channels))
    return {k: rng.uniform(-s, s, size=(channels, channels)) for k in _ATTN_KEYS}


def vrp_init(channels: int, rng: np.random.Generator) -> dict[str, dict[str, np.ndarray]]:
    return {b: attn_init(channels, rng) for b in _VRP_BLOCKS}


def decoder_init(tokens: int, channels: int, hidden: int, upsample: int,
                 rng: np.random.Generator) -> dict[str, np.ndarray]:
    """First stage Xavier; final stage zero so untrained logits are exactly 0."""
    c_in = tokens + channels
    s = np.sqrt(6.0 / (c_in + hidden))
    return {
        "w1": rng.uniform(-s, s, size=(hidden, c_in)),
        "b1": np.zeros(hidden),
        "w2": np.zeros((1, hidden)),
        "b2": np.zeros(1),
    }


def prompt_init(tokens: int, channels: int,
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    s = np.sqrt(6.0 / (tokens + channels))
    return {
        "support_tokens": rng.uniform(-s, s, size=(tokens, channels)),
        "query_tokens": rng.uniform(-s, s, size=(tokens, channels)),
    }


def _attend(tokens: Tensor, keys: Tensor, values: Tensor, p: AttnParams,
            mask: np.ndarray | None) -> Tensor:
    t, c = tokens.shape
    n = keys.shape[0]
    if keys.data.ndim != 2 or values.shape != keys.shape or keys.shape[1] != c:
        raise vt.ShapeError(
            f"attention: tokens {tokens.shape}, keys {keys.shape}, "
            f"values {values.shape} do not agree")
    q = vt.matmul(tokens, p.wq)
    k = vt.matmul(keys, p.wk)
    v = vt.matmul(values, p.wv)
    logits = vt.scale(vt.matmul(q, vt.transpose(k)), 1.0 / math.sqrt(c))
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=np.float64), (t, n))
        logits = vt.add(vt.mul(logits, vt.tensor(m)),
                        vt.tensor((1.0 - m) * MASK_FILL))
    alpha = vt.softmax(logits)
    return vt.add(tokens, vt.matmul(vt.matmul(alpha, v), p.wo))


def cross_attn(tokens: Tensor, keys: Tensor, values: Tensor,
               p: AttnParams) -> Tensor:
    """Scaled dot-product cross-attention with a residual add."""
    return _attend(tokens, keys, values, p, None)


def masked_cross_attn(tokens: Tensor, keys: Tensor, values: Tensor,
                      mask: np.ndarray, p: AttnParams) -> Tensor:
    """Cross-attention restricted to key positions where ``mask`` is 1.

    An all-ones mask reproduces :func:`cross_attn` bit for bit (the
    masking arithmetic multiplies by 1 and adds 0).  An all-zero mask
    would make every row degenerate, so it falls back to unmasked
    attention with a warning.
    """
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    if mask.shape[0] != keys.shape[0]:
        raise vt.ShapeError(f"mask length {mask.shape[0]} vs {keys.shape[0]} keys")
    if not mask.any():
        log.warning("all-zero attention mask: falling back to unmasked attention")
        return _attend(tokens, keys, values, p, None)
    return _attend(tokens, keys, values, p, mask)


def _flatten_map(f: Tensor) -> Tensor:
    c = f.shape[0]
    return vt.transpose(vt.reshape(f, (c, f.shape[1] * f.shape[2])))


def build_support_prompt(tokens: Tensor, f_sam: Tensor, f_res: Tensor,
                         mask: np.ndarray, p: VrpParams) -> Tensor:
    """Two masked stages: semantic keys throughout, values switch to
    structural features in stage 2."""
    sam = _flatten_map(f_sam)
    res = _flatten_map(f_res)
    flat = np.asarray(mask, dtype=np.float64).reshape(-1)
    stage1 = masked_cross_attn(tokens, sam, sam, flat, p.support_stage1)
    return masked_cross_attn(stage1, sam, res, flat, p.support_stage2)


def build_query_prompt(tokens: Tensor, f_sam: Tensor, f_res: Tensor,
                       p: VrpParams) -> Tensor:
    """Query counterpart of :func:`build_support_prompt`, unmasked."""
    sam = _flatten_map(f_sam)
    res = _flatten_map(f_res)
    stage1 = cross_attn(tokens, sam, sam, p.query_stage1)
    return cross_attn(stage1, sam, res, p.query_stage2)


def fuse_vrp(p_support: Tensor, p_query: Tensor, p: VrpParams) -> Tensor:
    """Unified reference prompt: support tokens attend over query tokens."""
    if p_support.shape != p_query.shape:
        raise vt.ShapeError(
            f"prompt shapes {p_support.shape} and {p_query.shape} differ")
    return cross_attn(p_support, p_query, p_query, p.fuse)


def decode_mask(vrp: Tensor, query_feat_sam: Tensor, p: DecoderParams) -> Tensor:
    """Token-feature affinities -> conv head -> upsampled mask logits.

    Affinity channel t is the 1/sqrt(C)-scaled dot product of token t
    with every feature location; the conv head sees affinities and raw
    features side by side.
    """
    t, c = vrp.shape
    _, h, w = query_feat_sam.shape
    flat = vt.reshape(query_feat_sam, (c, h * w))
    affinity = vt.reshape(vt.scale(vt.matmul(vrp, flat), 1.0 / math.sqrt(c)),
                          (t, h, w))
    stacked = vt.concat([affinity, query_feat_sam], axis=0)
    hid = vt.relu(vt.conv1x1(stacked, p.w1, p.b1))
    logits = vt.conv1x1(hid, p.w2, p.b2)
    up = upsample_bilinear(logits, p.upsample)
    return vt.reshape(up, (h * p.upsample, w * p.upsample))


def dice_loss(logits: Tensor, gt_mask: np.ndarray) -> Tensor:
    """1 - smoothed Dice overlap between sigmoid(logits) and the mask."""
    gt = np.asarray(gt_mask, dtype=np.float64)
    prob = vt.sigmoid(logits)
    inter = vt.sum_all(vt.mul(prob, vt.tensor(gt)))
    num = vt.add_const(vt.scale(inter, 2.0), DICE_EPS)
    den = vt.add_const(vt.sum_all(prob), float(gt.sum()) + DICE_EPS)
    return vt.add_const(vt.scale(vt.div(num, den), -1.0), 1.0)


def prediction_loss(logits: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Pixel-level BCE plus region-level Dice on mask logits."""
    gt = np.asarray(gt_mask, dtype=np.float64)
    if logits.shape != gt.shape:
        raise vt.ShapeError(f"logits {logits.shape} vs mask {gt.shape}")
    bce = vt.bce_with_logits(logits, vt.tensor(gt))
    return vt.add(bce, dice_loss(logits, gt_mask))


def total_loss(proto_loss: Tensor, pred_loss: Tensor, lambda_proto: float,
               lambda_pred: float) -> Tensor:
    """Weighted sum of the two objectives."""
    if lambda_proto < 0 or lambda_pred < 0:
        raise ValueError("loss weights must be nonnegative")
    return vt.add(vt.scale(proto_loss, lambda_proto),
                  vt.scale(pred_loss, lambda_pred))
