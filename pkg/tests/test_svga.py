"""Spatial-view alignment against a straight-line scalar pipeline."""

import numpy as np
import pytest

import vine.tensor as vt
from vine.gat import params_from_arrays
from vine.graphs import full_view_graph, knn_spatial_graph, star_view_graph
from vine.svga import (SvgaParams, make_pseudo_views, svga_forward,
                       svga_forward_kshot, svga_init)
from vine.tensor import Tape, ShapeError

from oracles import rel_err, svga_forward_loops, svga_kshot_loops


def random_heads(c_in, c_out, heads, rng):
    return [(rng.normal(size=(c_out, c_in)) * 0.5,
             rng.normal(size=(c_out,)) * 0.5,
             rng.normal(size=(c_out,)) * 0.5) for _ in range(heads)]


def mount_heads(tape, raw):
    return params_from_arrays([(tape.leaf(w), tape.leaf(s), tape.leaf(d))
                               for (w, s, d) in raw])


def make_params(tape, c, spatial_heads, view_heads, rng):
    raw_s = random_heads(c, c // spatial_heads, spatial_heads, rng)
    raw_v = random_heads(c, c // view_heads, view_heads, rng)
    params = SvgaParams(gat_space=mount_heads(tape, raw_s),
                        gat_view=mount_heads(tape, raw_v))
    return params, raw_s, raw_v


def test_init_shapes_and_divisibility():
    rng = np.random.default_rng(0)
    arrays = svga_init(8, 4, 1, rng)
    assert len(arrays["gat_space"]) == 4
    assert arrays["gat_space"][0]["weight"].shape == (2, 8)
    assert arrays["gat_view"][0]["weight"].shape == (8, 8)
    with pytest.raises(ValueError):
        svga_init(8, 3, 1, rng)


# --- pseudo-views ----------------------------------------------------------

def test_pseudo_views_index0_is_original():
    rng = np.random.default_rng(1)
    img = vt.tensor(rng.uniform(size=(3, 8, 8)))
    mask = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
    views = make_pseudo_views(img, mask, 3, 0.02, rng)
    assert len(views) == 4
    assert views[0][0] is img
    np.testing.assert_array_equal(views[0][1], mask)
    for _, m in views:
        assert set(np.unique(m)) <= {0.0, 1.0}


def test_pseudo_views_r0_singleton():
    rng = np.random.default_rng(2)
    img = vt.tensor(rng.uniform(size=(3, 4, 4)))
    views = make_pseudo_views(img, np.zeros((4, 4)), 0, 0.1, rng)
    assert len(views) == 1
    with pytest.raises(ValueError):
        make_pseudo_views(img, np.zeros((4, 4)), -1, 0.1, rng)


def test_pseudo_views_delta_zero_bit_identical():
    rng = np.random.default_rng(3)
    img = vt.tensor(rng.uniform(size=(3, 8, 8)))
    mask = (rng.uniform(size=(8, 8)) > 0.6).astype(float)
    for v_img, v_mask in make_pseudo_views(img, mask, 3, 0.0, rng):
        assert v_img.data.tobytes() == img.data.tobytes()
        assert v_mask.tobytes() == mask.astype(np.float64).tobytes()


def test_pseudo_views_seeded_reproducible():
    base = np.random.default_rng(4)
    img = vt.tensor(base.uniform(size=(3, 8, 8)))
    mask = (base.uniform(size=(8, 8)) > 0.5).astype(float)
    a = make_pseudo_views(img, mask, 3, 0.05, np.random.default_rng(7))
    b = make_pseudo_views(img, mask, 3, 0.05, np.random.default_rng(7))
    for (ia, ma), (ib, mb) in zip(a, b):
        assert ia.data.tobytes() == ib.data.tobytes()
        assert ma.tobytes() == mb.tobytes()


# --- 1-shot forward --------------------------------------------------------

def test_forward_matches_scalar_pipeline():
    # random 8-channel 4x4 features, 3 views, full scalar recomputation
    rng = np.random.default_rng(5)
    c, h, w = 8, 4, 4
    feats = [rng.normal(size=(c, h, w)) for _ in range(3)]
    query = rng.normal(size=(c, h, w))
    spatial = knn_spatial_graph(h, w, 5)
    viewg = star_view_graph(3)
    tape = Tape()
    params, raw_s, raw_v = make_params(tape, c, 4, 1, rng)
    out = svga_forward([tape.leaf(f) for f in feats], tape.leaf(query),
                       spatial, viewg, params)
    fused, q_patch, proto_s, proto_q, loss = svga_forward_loops(
        feats, query, spatial.edges, viewg.edges, raw_s, raw_v)
    np.testing.assert_allclose(
        out.support_refined.data, fused.T.reshape(c, h, w), atol=1e-10)
    np.testing.assert_allclose(
        out.query_refined.data, q_patch.T.reshape(c, h, w), atol=1e-10)
    np.testing.assert_allclose(out.proto_support.data, proto_s, atol=1e-10)
    np.testing.assert_allclose(out.proto_query.data, proto_q, atol=1e-10)
    assert abs(float(out.proto_loss.data) - loss) < 1e-10


def test_forward_oracle_sweep():
    # many small random instances against the scalar pipeline
    rng = np.random.default_rng(6)
    for trial in range(50):
        c = int(rng.integers(1, 4)) * 2
        h = int(rng.integers(2, 4))
        w = int(rng.integers(2, 4))
        views = int(rng.integers(1, 4))
        k = int(rng.integers(1, h * w))
        feats = [rng.normal(size=(c, h, w)) for _ in range(views)]
        query = rng.normal(size=(c, h, w))
        spatial = knn_spatial_graph(h, w, k)
        viewg = star_view_graph(views)
        tape = Tape()
        params, raw_s, raw_v = make_params(tape, c, 2, 1, rng)
        out = svga_forward([tape.leaf(f) for f in feats], tape.leaf(query),
                           spatial, viewg, params)
        fused, q_patch, _, _, loss = svga_forward_loops(
            feats, query, spatial.edges, viewg.edges, raw_s, raw_v)
        assert rel_err(out.support_refined.data, fused.T.reshape(c, h, w)) < 1e-10
        assert abs(float(out.proto_loss.data) - loss) < 1e-10


def test_fusion_is_exactly_additive():
    # support_refined minus the broadcast view vector == pure spatial output
    rng = np.random.default_rng(7)
    c, h, w = 4, 3, 3
    feats = [rng.normal(size=(c, h, w)) for _ in range(2)]
    query = rng.normal(size=(c, h, w))
    spatial = knn_spatial_graph(h, w, 3)
    viewg = star_view_graph(2)
    tape = Tape()
    params, raw_s, raw_v = make_params(tape, c, 2, 1, rng)
    out = svga_forward([tape.leaf(f) for f in feats], tape.leaf(query),
                       spatial, viewg, params)
    from oracles import gat_forward_loops
    pure = gat_forward_loops(feats[0].reshape(c, h * w).T, spatial.edges, raw_s)
    v = np.array([gat_forward_loops(f.reshape(c, h * w).T, spatial.edges,
                                    raw_s).mean(axis=0) for f in feats])
    hub = gat_forward_loops(v, viewg.edges, raw_v)[0]
    residual = out.support_refined.data.reshape(c, h * w).T - hub
    np.testing.assert_allclose(residual, pure, atol=1e-10)


def test_proto_loss_zero_on_identical_features_with_inert_view_term():
    # zero view-GAT weights kill the hub, so identical support/query
    # features give identical prototypes and an exactly zero loss
    rng = np.random.default_rng(8)
    c, h, w = 4, 3, 3
    feat = rng.normal(size=(c, h, w))
    spatial = knn_spatial_graph(h, w, 4)
    viewg = star_view_graph(1)
    tape = Tape()
    raw_s = random_heads(c, c // 2, 2, rng)
    zero_v = [(np.zeros((c, c)), np.zeros(c), np.zeros(c))]
    params = SvgaParams(gat_space=mount_heads(tape, raw_s),
                        gat_view=mount_heads(tape, zero_v))
    out = svga_forward([tape.leaf(feat)], tape.leaf(feat.copy()),
                       spatial, viewg, params)
    assert float(out.proto_loss.data) == 0.0
    np.testing.assert_array_equal(out.proto_support.data, out.proto_query.data)


def test_proto_loss_positive_iff_protos_differ():
    rng = np.random.default_rng(9)
    c, h, w = 4, 2, 2
    feats = [rng.normal(size=(c, h, w))]
    query = rng.normal(size=(c, h, w))
    spatial = knn_spatial_graph(h, w, 2)
    tape = Tape()
    params, _, _ = make_params(tape, c, 2, 1, rng)
    out = svga_forward([tape.leaf(f) for f in feats], tape.leaf(query),
                       spatial, star_view_graph(1), params)
    gap = float(np.abs(out.proto_support.data - out.proto_query.data).max())
    assert gap > 1e-6
    assert float(out.proto_loss.data) > 0.0


def test_constant_features_give_handcomputed_loss():
    # constant maps: every GAT output row equals W x (convexity), so the
    # prototypes are direct linear images of the two constants
    rng = np.random.default_rng(10)
    c, h, w = 4, 3, 3
    s_val = rng.normal(size=c)
    q_val = rng.normal(size=c)
    s_feat = np.tile(s_val[:, None, None], (1, h, w))
    q_feat = np.tile(q_val[:, None, None], (1, h, w))
    spatial = knn_spatial_graph(h, w, 3)
    tape = Tape()
    raw_s = random_heads(c, c // 2, 2, rng)
    zero_v = [(np.zeros((c, c)), np.zeros(c), np.zeros(c))]
    params = SvgaParams(gat_space=mount_heads(tape, raw_s),
                        gat_view=mount_heads(tape, zero_v))
    out = svga_forward([tape.leaf(s_feat)], tape.leaf(q_feat),
                       spatial, star_view_graph(1), params)
    big_w = np.concatenate([wh for (wh, _, _) in raw_s], axis=0)
    expect = float(((big_w @ q_val - big_w @ s_val) ** 2).mean())
    assert abs(float(out.proto_loss.data) - expect) < 1e-10


def test_shape_errors():
    rng = np.random.default_rng(11)
    c, h, w = 4, 2, 2
    spatial = knn_spatial_graph(h, w, 2)
    tape = Tape()
    params, _, _ = make_params(tape, c, 2, 1, rng)
    feats = [tape.leaf(rng.normal(size=(c, h, w)))] * 2
    query = tape.leaf(rng.normal(size=(c, h, w)))
    with pytest.raises(ShapeError):   # view graph expects 3 views
        svga_forward(feats, query, spatial, star_view_graph(3), params)
    with pytest.raises(ShapeError):   # spatial graph of the wrong grid
        svga_forward(feats, query, knn_spatial_graph(3, 3, 2),
                     star_view_graph(2), params)
    with pytest.raises(ShapeError):   # query shaped differently
        svga_forward(feats, tape.leaf(rng.normal(size=(c, h, w + 1))),
                     spatial, star_view_graph(2), params)


def test_proto_loss_gradient_matches_fd_on_2x2():
    # end-to-end gradient w.r.t. the backbone features themselves
    rng = np.random.default_rng(12)
    c, h, w = 2, 2, 2
    feat = rng.normal(size=(c, h, w))
    query = rng.normal(size=(c, h, w))
    spatial = knn_spatial_graph(h, w, 2)
    viewg = star_view_graph(1)
    raw_s = random_heads(c, c, 1, rng)
    raw_v = random_heads(c, c, 1, rng)

    def loss_of(f_arr, q_arr):
        tape = Tape()
        params = SvgaParams(gat_space=mount_heads(tape, raw_s),
                            gat_view=mount_heads(tape, raw_v))
        lf, lq = tape.leaf(f_arr), tape.leaf(q_arr)
        out = svga_forward([lf], lq, spatial, viewg, params)
        return out, tape, lf, lq

    out, tape, lf, lq = loss_of(feat, query)
    grads = tape.backward(out.proto_loss)
    from oracles import finite_diff_grad
    fd_f = finite_diff_grad(
        lambda a: float(loss_of(a, query)[0].proto_loss.data), feat, step=1e-5)
    fd_q = finite_diff_grad(
        lambda a: float(loss_of(feat, a)[0].proto_loss.data), query, step=1e-5)
    assert rel_err(grads.wrt(lf), fd_f, floor=1e-4) < 1e-4
    assert rel_err(grads.wrt(lq), fd_q, floor=1e-4) < 1e-4


# --- K-shot ----------------------------------------------------------------

def test_kshot_identical_shots_fuse_symmetrically():
    rng = np.random.default_rng(13)
    c, h, w = 4, 2, 2
    shot = rng.normal(size=(c, h, w))
    q = rng.normal(size=(c, h, w))
    spatial = knn_spatial_graph(h, w, 2)
    tape = Tape()
    params, _, _ = make_params(tape, c, 2, 1, rng)
    out = svga_forward_kshot([tape.leaf(shot), tape.leaf(shot.copy())],
                             [tape.leaf(q)], spatial, full_view_graph(2),
                             full_view_graph(1), params)
    np.testing.assert_array_equal(out.support_refined[0].data,
                                  out.support_refined[1].data)


def test_kshot_matches_scalar_pipeline():
    rng = np.random.default_rng(14)
    c, h, w = 4, 3, 3
    shots = [rng.normal(size=(c, h, w)) for _ in range(3)]
    q_views = [rng.normal(size=(c, h, w)) for _ in range(2)]
    spatial = knn_spatial_graph(h, w, 4)
    sv, qv = full_view_graph(3), full_view_graph(2)
    tape = Tape()
    params, raw_s, raw_v = make_params(tape, c, 2, 1, rng)
    out = svga_forward_kshot([tape.leaf(s) for s in shots],
                             [tape.leaf(qq) for qq in q_views],
                             spatial, sv, qv, params)
    s_ref, q_ref, proto_s, proto_q, loss = svga_kshot_loops(
        shots, q_views, spatial.edges, sv.edges, qv.edges, raw_s, raw_v)
    for got, want in zip(out.support_refined, s_ref):
        np.testing.assert_allclose(got.data, want.T.reshape(c, h, w), atol=1e-10)
    np.testing.assert_allclose(out.query_refined.data,
                               q_ref.T.reshape(c, h, w), atol=1e-10)
    np.testing.assert_allclose(out.proto_support.data, proto_s, atol=1e-10)
    assert abs(float(out.proto_loss.data) - loss) < 1e-10


def test_kshot_requires_two_shots():
    rng = np.random.default_rng(15)
    c, h, w = 4, 2, 2
    spatial = knn_spatial_graph(h, w, 2)
    tape = Tape()
    params, _, _ = make_params(tape, c, 2, 1, rng)
    with pytest.raises(ValueError):
        svga_forward_kshot([tape.leaf(np.zeros((c, h, w)))],
                           [tape.leaf(np.zeros((c, h, w)))],
                           spatial, full_view_graph(1), full_view_graph(1),
                           params)
