"""Multi-head graph attention over explicit edge lists.

The layer follows the original additive-attention formulation: per head
h, node features are projected (z_i = W_h x_i), each edge j -> i gets a
logit LeakyReLU(a_src . z_j + a_dst . z_i) with slope 0.2, logits are
softmax-normalized over every node's in-neighborhood, and messages
sum(alpha_ij z_j) are concatenated across heads.  No output bias, no
dropout: determinism outranks regularization at this scale.

``gat_forward`` is a pure function of (x, g, p) and safe for parallel
evaluation with shared immutable params.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as vt
from .graphs import Graph
from .tensor import Tensor

LEAKY_SLOPE = 0.2


@dataclass
class GatHead:
    weight: Tensor      # C_out x C_in
    attn_src: Tensor    # C_out
    attn_dst: Tensor    # C_out


@dataclass
class GatParams:
    """Per-head projection and attention vectors; heads share C_in/C_out."""

    heads: list[GatHead]
    leaky_slope: float = LEAKY_SLOPE

    @property
    def num_heads(self) -> int:
        return len(self.heads)


def gat_init(c_in: int, c_out: int, heads: int,
             rng: np.random.Generator) -> list[dict[str, np.ndarray]]:
    """Initial parameter arrays, uniform in [-s, s] with s = sqrt(6/(c_in+c_out)).

    Deterministic under a seeded generator.  Returns one dict per head
    with keys ``weight``, ``attn_src``, ``attn_dst``.
    """
    s = np.sqrt(6.0 / (c_in + c_out))
    out = []
    for _ in range(heads):
        out.append({
            "weight": rng.uniform(-s, s, size=(c_out, c_in)),
            "attn_src": rng.uniform(-s, s, size=c_out),
            "attn_dst": rng.uniform(-s, s, size=c_out),
        })
    return out


def params_from_arrays(heads) -> GatParams:
    """Bundle mounted head tensors (dicts or (w, a_src, a_dst) triples)."""
    built = []
    for h in heads:
        if isinstance(h, dict):
            built.append(GatHead(h["weight"], h["attn_src"], h["attn_dst"]))
        else:
            built.append(GatHead(*h))
    return GatParams(heads=built)


def gat_forward(x: Tensor, g: Graph, p: GatParams) -> Tensor:
    """Apply one GAT layer to N-by-C_in node features.

    Every node must have at least one incoming edge (guaranteed by
    self-loops), so each in-neighborhood softmax is well defined and
    sums to 1.  Output is N by (C_out * heads).
    """
    if x.data.ndim != 2 or x.shape[0] != g.num_nodes:
        raise vt.ShapeError(
            f"gat_forward: features {x.shape} vs {g.num_nodes} graph nodes")
    src, dst = g.src, g.dst
    outs = []
    for head in p.heads:
        c_out = head.weight.shape[0]
        z = vt.matmul(x, vt.transpose(head.weight))           # N x C_out
        s_src = vt.reshape(vt.matmul(z, vt.reshape(head.attn_src, (c_out, 1))),
                           (g.num_nodes,))
        s_dst = vt.reshape(vt.matmul(z, vt.reshape(head.attn_dst, (c_out, 1))),
                           (g.num_nodes,))
        e = vt.leaky_relu(vt.add(_gather_vec(s_src, src), _gather_vec(s_dst, dst)),
                          p.leaky_slope)
        alpha = vt.segment_softmax(e, dst, g.num_nodes)
        msgs = vt.row_scale(vt.gather_rows(z, src), alpha)
        outs.append(vt.segment_sum(msgs, dst, g.num_nodes))
    return outs[0] if len(outs) == 1 else vt.concat(outs, axis=1)


def _gather_vec(v: Tensor, idx: np.ndarray) -> Tensor:
    n = v.shape[0]
    rows = vt.gather_rows(vt.reshape(v, (n, 1)), idx)
    return vt.reshape(rows, (len(idx),))
