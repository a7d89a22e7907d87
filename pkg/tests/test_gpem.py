"""Refinement, gated fusion, and query-bridge contracts plus their oracles."""

from __future__ import annotations

import numpy as np
import pytest

from uwovis import autodiff as ad
from uwovis.autodiff import Tensor
from uwovis.gpem import (
    AlignmentError,
    ConfigurationError,
    GpemConfig,
    MultiScaleRefiner,
    QueryBridge,
    QuerySet,
    VisualGeometricFusion,
)

from oracles import (
    central_difference_check,
    fusion_oracle,
    pointwise_refine_oracle,
    single_token_bridge_oracle,
)


def random_levels(rng, shapes):
    return [Tensor(rng.standard_normal(s)) for s in shapes]


# -- multi-scale refinement --


def test_refine_preserves_shapes_and_fm_resolution(rng):
    shapes = [(8, 8, 4), (4, 4, 6), (2, 2, 8)]
    refiner = MultiScaleRefiner((4, 6, 8), latent_dim=5, num_points=2, rng=rng)
    refined, f_m = refiner(random_levels(rng, shapes))
    assert [t.shape for t in refined] == shapes
    assert f_m.shape == (8, 8, 5)
    assert np.all(np.isfinite(f_m.data))


def test_refine_level_count_mismatch_is_configuration_error(rng):
    refiner = MultiScaleRefiner((4, 6), latent_dim=4, num_points=2, rng=rng)
    with pytest.raises(ConfigurationError):
        refiner(random_levels(rng, [(8, 8, 4)]))


def test_refine_zero_value_projection_is_identity(rng):
    refiner = MultiScaleRefiner((4, 6), latent_dim=4, num_points=2, rng=rng)
    for l in range(2):
        refiner.params[f"refine.l{l}.w_val"].data[:] = 0.0
        refiner.params[f"refine.l{l}.b_val"].data[:] = 0.0
        refiner.params[f"refine.l{l}.w_off"].data[:] = 0.0
        refiner.params[f"refine.l{l}.b_off"].data[:] = 0.0
    levels = random_levels(rng, [(6, 6, 4), (3, 3, 6)])
    refined, _ = refiner(levels)
    for out, src in zip(refined, levels):
        np.testing.assert_array_equal(out.data, src.data)


def test_refine_single_level_single_point_matches_dense_oracle(rng):
    refiner = MultiScaleRefiner((8,), latent_dim=4, num_points=1, rng=rng)
    refiner.params["refine.l0.w_off"].data[:] = 0.0
    refiner.params["refine.l0.b_off"].data[:] = 0.0
    feat = rng.standard_normal((4, 4, 8))
    refined, _ = refiner([Tensor(feat)])
    expected = pointwise_refine_oracle(
        feat,
        refiner.params["refine.l0.w_val"].data,
        refiner.params["refine.l0.b_val"].data,
        refiner.params["refine.l0.w_out"].data,
        refiner.params["refine.l0.b_out"].data,
    )
    np.testing.assert_allclose(refined[0].data, expected, atol=1e-10)


def test_refine_gradients_match_finite_differences(rng):
    refiner = MultiScaleRefiner((3, 4), latent_dim=4, num_points=2, rng=rng)
    levels_data = [rng.standard_normal((4, 4, 3)), rng.standard_normal((2, 2, 4))]
    w0 = rng.standard_normal((4, 4, 3))
    w1 = rng.standard_normal((2, 2, 4))
    wm = rng.standard_normal((4, 4, 4))

    def probe():
        refined, f_m = refiner([Tensor(d) for d in levels_data])
        return (refined[0] * w0).sum() + (refined[1] * w1).sum() + (f_m * wm).sum()

    failures = central_difference_check(probe, dict(refiner.params), rtol=1e-4)
    assert not failures, failures[:5]


# -- visual-geometric fusion --


def test_fusion_output_width_and_level_errors(rng):
    fusion = VisualGeometricFusion((4, 6), latent_dim=5, rng=rng)
    vis = random_levels(rng, [(4, 4, 4), (2, 2, 6)])
    geo = random_levels(rng, [(4, 4, 4), (2, 2, 6)])
    fused = fusion(vis, geo)
    assert [t.shape for t in fused] == [(4, 4, 5), (2, 2, 5)]
    with pytest.raises(ConfigurationError):
        fusion(vis[:1], geo)


def test_fusion_misalignment_names_level(rng):
    fusion = VisualGeometricFusion((4, 6), latent_dim=5, rng=rng)
    vis = random_levels(rng, [(4, 4, 4), (2, 2, 6)])
    geo = random_levels(rng, [(4, 4, 4), (3, 3, 6)])
    with pytest.raises(AlignmentError, match="level 1"):
        fusion(vis, geo)


def test_fusion_alpha_saturation_closed_forms(rng):
    cs = 5
    fusion = VisualGeometricFusion((4,), latent_dim=cs, rng=rng)
    vis = random_levels(rng, [(3, 3, 4)])
    geo = random_levels(rng, [(3, 3, 4)])
    w_v = fusion.params["fuse.l0.w_v"].data
    w_g = fusion.params["fuse.l0.w_g"].data
    w1 = fusion.params["fuse.l0.mlp_w1"].data
    b1 = fusion.params["fuse.l0.mlp_b1"].data
    w2 = fusion.params["fuse.l0.mlp_w2"].data
    b2 = fusion.params["fuse.l0.mlp_b2"].data

    def mlp(x):
        return ad.gelu(ad.linear(Tensor(x), Tensor(w1), Tensor(b1))).data @ w2 + b2

    fv = vis[0].data.reshape(9, 4) @ w_v
    fg = geo[0].data.reshape(9, 4) @ w_g

    fusion.params["fuse.l0.b_alpha"].data[:] = -1e9  # alpha -> exactly 0
    out0 = fusion(vis, geo)[0].data.reshape(9, cs)
    np.testing.assert_array_equal(out0, mlp(fv))

    fusion.params["fuse.l0.b_alpha"].data[:] = 1e9  # alpha -> exactly 1
    out1 = fusion(vis, geo)[0].data.reshape(9, cs)
    np.testing.assert_array_equal(out1, mlp(fv + fg))


def test_fusion_matches_scalar_loop_oracle(rng):
    cs = 5
    fusion = VisualGeometricFusion((3,), latent_dim=cs, rng=rng)
    vis = rng.standard_normal((2, 2, 3))
    geo = rng.standard_normal((2, 2, 3))
    got = fusion([Tensor(vis)], [Tensor(geo)])[0].data
    p = fusion.params
    expected = fusion_oracle(
        vis,
        geo,
        p["fuse.l0.w_v"].data,
        p["fuse.l0.w_g"].data,
        p["fuse.l0.w_alpha"].data,
        p["fuse.l0.b_alpha"].data,
        p["fuse.l0.mlp_w1"].data,
        p["fuse.l0.mlp_b1"].data,
        p["fuse.l0.mlp_w2"].data,
        p["fuse.l0.mlp_b2"].data,
    )
    assert np.abs(got - expected).max() < 1e-6


def test_fusion_alpha_strictly_inside_unit_interval(rng):
    fusion = VisualGeometricFusion((4,), latent_dim=6, rng=rng)
    for trial in range(20):
        fv = Tensor(rng.standard_normal((5, 6)))
        fg = Tensor(rng.standard_normal((5, 6)))
        alpha = fusion.gate(0, fv, fg).data
        assert np.all(alpha > 0.0) and np.all(alpha < 1.0)


def test_fusion_monotone_blending_identity_mlp(rng):
    fusion = VisualGeometricFusion((4,), latent_dim=5, rng=rng)
    vis = random_levels(rng, [(3, 3, 4)])
    geo = random_levels(rng, [(3, 3, 4)])
    fusion.params["fuse.l0.w_alpha"].data[:] = 0.0

    outs = {}
    for tag, bias in (("zero", -1e9), ("half", 0.0), ("one", 1e9)):
        fusion.params["fuse.l0.b_alpha"].data[:] = bias
        outs[tag] = fusion(vis, geo, apply_mlp=False)[0].data
    # alpha = 0 keeps the visual branch; alpha = 1 adds the geometric branch;
    # the midpoint is exactly the average (linear in alpha)
    np.testing.assert_allclose(
        outs["half"], 0.5 * (outs["zero"] + outs["one"]), atol=1e-12
    )
    diff = outs["one"] - outs["zero"]
    assert np.abs(diff).max() > 0.0


def test_fusion_gradients_match_finite_differences(rng):
    fusion = VisualGeometricFusion((3,), latent_dim=4, rng=rng)
    vis = rng.standard_normal((3, 3, 3))
    geo = rng.standard_normal((3, 3, 3))
    w = rng.standard_normal((3, 3, 4))

    def probe():
        return (fusion([Tensor(vis)], [Tensor(geo)])[0] * w).sum()

    failures = central_difference_check(probe, dict(fusion.params), rtol=1e-4)
    assert not failures, failures[:5]


# -- query bridge --


def test_bridge_depth_zero_is_identity(rng):
    bridge = QueryBridge(latent_dim=6, num_layers=2, rng=rng)
    queries = QuerySet.create(5, 6, rng)
    fused = random_levels(rng, [(3, 3, 6)])
    out = bridge(fused, queries, depth=0)
    np.testing.assert_array_equal(out.vectors.data, queries.vectors.data)


def test_bridge_single_token_matches_closed_form(rng):
    bridge = QueryBridge(latent_dim=5, num_layers=1, rng=rng)
    queries = QuerySet.create(1, 5, rng)
    feat = rng.standard_normal((1, 1, 5))
    out = bridge([Tensor(feat)], queries)
    expected = single_token_bridge_oracle(
        queries.vectors.data[0], queries.pos.data[0], feat.reshape(5), bridge.params
    )
    np.testing.assert_allclose(out.vectors.data[0], expected, atol=1e-6)


def test_bridge_default_query_count_runs(rng):
    cfg = GpemConfig()
    assert cfg.num_queries == 100 and cfg.num_layers == 2
    bridge = QueryBridge(latent_dim=8, num_layers=cfg.num_layers, rng=rng)
    queries = QuerySet.create(cfg.num_queries, 8, rng)
    fused = random_levels(rng, [(4, 4, 8), (2, 2, 8), (1, 1, 8)])
    out = bridge(fused, queries)
    assert out.vectors.shape == (100, 8)
    assert np.all(np.isfinite(out.vectors.data))


def test_bridge_permutation_equivariance(rng):
    bridge = QueryBridge(latent_dim=6, num_layers=2, rng=rng)
    queries = QuerySet.create(7, 6, rng)
    fused = random_levels(rng, [(3, 3, 6), (2, 2, 6)])
    out = bridge(fused, queries).vectors.data
    perm = rng.permutation(7)
    permuted = QuerySet(
        vectors=Tensor(queries.vectors.data[perm], requires_grad=True),
        pos=Tensor(queries.pos.data[perm], requires_grad=True),
    )
    out_perm = bridge(fused, permuted).vectors.data
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-10)


def test_bridge_depth_beyond_layers_rejected(rng):
    bridge = QueryBridge(latent_dim=4, num_layers=1, rng=rng)
    with pytest.raises(ConfigurationError):
        bridge(random_levels(rng, [(2, 2, 4)]), QuerySet.create(3, 4, rng), depth=2)


def test_bridge_gradients_match_finite_differences(rng):
    bridge = QueryBridge(latent_dim=4, num_layers=1, rng=rng)
    queries = QuerySet.create(3, 4, rng)
    fused_data = [rng.standard_normal((2, 2, 4))]
    w = rng.standard_normal((3, 4))

    params = dict(bridge.params)
    params.update(queries.parameters())

    def probe():
        return (bridge([Tensor(d) for d in fused_data], queries).vectors * w).sum()

    failures = central_difference_check(probe, params, rtol=1e-4)
    assert not failures, failures[:5]
