"""Geometric prior enhancement: multi-scale refinement, gated visual-geometric
fusion, and a lightweight transformer bridge updating the object queries.

All forward passes run on the autodiff substrate, so gradients reach every
trainable array here; the encoder pyramids enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamDict, Tensor
from .encoders import FeaturePyramid

Array = np.ndarray


class ConfigurationError(ValueError):
    """Module parameters do not match the inputs they are applied to."""


class AlignmentError(ValueError):
    """Two pyramids disagree on spatial layout."""


@dataclass(frozen=True)
class GpemConfig:
    latent_dim: int = 32
    num_queries: int = 100
    num_layers: int = 2
    num_points: int = 4

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "num_queries": self.num_queries,
            "num_layers": self.num_layers,
            "num_points": self.num_points,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpemConfig":
        return cls(**d)


@dataclass
class QuerySet:
    """Learnable query vectors and their positional embeddings."""

    vectors: Tensor
    pos: Tensor

    @property
    def num_queries(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def create(cls, num_queries: int, dim: int, rng: np.random.Generator) -> "QuerySet":
        return cls(
            vectors=Tensor(0.1 * rng.standard_normal((num_queries, dim)), requires_grad=True),
            pos=Tensor(0.1 * rng.standard_normal((num_queries, dim)), requires_grad=True),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"queries.vectors": self.vectors, "queries.pos": self.pos}


def _init(rng: np.random.Generator, shape: tuple[int, ...], scale: float | None = None) -> Array:
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    s = scale if scale is not None else 1.0 / np.sqrt(fan_in)
    return s * rng.standard_normal(shape)


def _pixel_grid(h: int, w: int) -> tuple[Array, Array]:
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return ys.ravel(), xs.ravel()


def _resize_grid(src_h: int, src_w: int, dst_h: int, dst_w: int) -> tuple[Array, Array]:
    # align-corners sampling lattice in source pixel units
    ys = np.linspace(0.0, src_h - 1.0, dst_h) if dst_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, src_w - 1.0, dst_w) if dst_w > 1 else np.zeros(1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return gy.ravel(), gx.ravel()


class MultiScaleRefiner:
    """Per-level deformable sampling attention plus aggregation to level 0.

    Each output location samples ``num_points`` learned fractional offsets
    within its own level (levels keep their native channel widths), mixes
    them with a learned softmax, and adds the result back residually. The
    aggregated map is the sum of all refined levels, bilinearly resized to
    the finest resolution and projected to the shared latent width.
    """

    def __init__(
        self,
        channels: tuple[int, ...],
        latent_dim: int,
        num_points: int,
        rng: np.random.Generator,
    ):
        self.channels = tuple(channels)
        self.latent_dim = latent_dim
        self.num_points = num_points
        self.params = ParamDict()
        for l, c in enumerate(self.channels):
            p = num_points
            self.params.add(f"refine.l{l}.w_off", 0.01 * rng.standard_normal((c, 2 * p)))
            # random fractional offsets keep sampling points away from the
            # bilinear lattice kinks that would break finite differences
            self.params.add(f"refine.l{l}.b_off", rng.uniform(0.1, 0.45, 2 * p) * rng.choice([-1.0, 1.0], 2 * p))
            self.params.add(f"refine.l{l}.w_att", _init(rng, (c, p)))
            self.params.add(f"refine.l{l}.b_att", np.zeros(p))
            self.params.add(f"refine.l{l}.w_val", _init(rng, (c, c)))
            self.params.add(f"refine.l{l}.b_val", np.zeros(c))
            self.params.add(f"refine.l{l}.w_out", _init(rng, (c, c)))
            self.params.add(f"refine.l{l}.b_out", np.zeros(c))
            self.params.add(f"refine.l{l}.w_agg", _init(rng, (c, latent_dim)))

    def __call__(self, levels: list[Tensor]) -> tuple[list[Tensor], Tensor]:
        if len(levels) != len(self.channels):
            raise ConfigurationError(
                f"refiner built for {len(self.channels)} levels, got {len(levels)}"
            )
        p = self.num_points
        refined: list[Tensor] = []
        for l, feat in enumerate(levels):
            h, w, c = feat.shape
            if c != self.channels[l]:
                raise ConfigurationError(
                    f"level {l} has {c} channels, refiner expects {self.channels[l]}"
                )
            flat = feat.reshape(h * w, c)
            off = ad.linear(flat, self.params[f"refine.l{l}.w_off"], self.params[f"refine.l{l}.b_off"])
            attn = ad.softmax(
                ad.linear(flat, self.params[f"refine.l{l}.w_att"], self.params[f"refine.l{l}.b_att"]),
                axis=1,
            )
            vmap = ad.linear(flat, self.params[f"refine.l{l}.w_val"], self.params[f"refine.l{l}.b_val"])
            vmap = vmap.reshape(h, w, c)
            ref_y, ref_x = _pixel_grid(h, w)
            ys = (off[:, 0:p] + Tensor(ref_y[:, None])).reshape(h * w * p)
            xs = (off[:, p : 2 * p] + Tensor(ref_x[:, None])).reshape(h * w * p)
            sampled = ad.bilinear_sample(vmap, ys, xs).reshape(h * w, p, c)
            mixed = (attn.reshape(h * w, p, 1) * sampled).sum(axis=1)
            out = ad.linear(mixed, self.params[f"refine.l{l}.w_out"], self.params[f"refine.l{l}.b_out"])
            refined.append(feat + out.reshape(h, w, c))

        h0, w0, _ = refined[0].shape
        agg: Tensor | None = None
        for l, feat in enumerate(refined):
            h, w, c = feat.shape
            gy, gx = _resize_grid(h, w, h0, w0)
            up = ad.bilinear_sample(feat, Tensor(gy), Tensor(gx))
            proj = ad.matmul(up, self.params[f"refine.l{l}.w_agg"])
            agg = proj if agg is None else agg + proj
        assert agg is not None
        return refined, agg.reshape(h0, w0, self.latent_dim)


class VisualGeometricFusion:
    """Sigmoid-gated per-scale blending of visual and geometric features.

    Per level: project both modalities to the shared width, gate the
    geometric branch with a per-location, per-channel sigmoid weight
    computed from the concatenated projections, and push the blend through
    a two-layer perceptron.
    """

    def __init__(self, channels: tuple[int, ...], latent_dim: int, rng: np.random.Generator):
        self.channels = tuple(channels)
        self.latent_dim = latent_dim
        self.params = ParamDict()
        cs = latent_dim
        for l, c in enumerate(self.channels):
            self.params.add(f"fuse.l{l}.w_v", _init(rng, (c, cs)))
            self.params.add(f"fuse.l{l}.w_g", _init(rng, (c, cs)))
            self.params.add(f"fuse.l{l}.w_alpha", _init(rng, (2 * cs, cs)))
            self.params.add(f"fuse.l{l}.b_alpha", np.zeros(cs))
            self.params.add(f"fuse.l{l}.mlp_w1", _init(rng, (cs, cs)))
            self.params.add(f"fuse.l{l}.mlp_b1", np.zeros(cs))
            self.params.add(f"fuse.l{l}.mlp_w2", _init(rng, (cs, cs)))
            self.params.add(f"fuse.l{l}.mlp_b2", np.zeros(cs))

    def gate(self, level: int, fv: Tensor, fg: Tensor) -> Tensor:
        gate_in = ad.concat([fv, fg], axis=1)
        return ad.sigmoid(
            ad.linear(gate_in, self.params[f"fuse.l{level}.w_alpha"], self.params[f"fuse.l{level}.b_alpha"])
        )

    def __call__(
        self,
        refined: list[Tensor],
        geo: list[Tensor],
        apply_mlp: bool = True,
    ) -> list[Tensor]:
        if len(refined) != len(geo):
            raise ConfigurationError(
                f"modalities have {len(refined)} vs {len(geo)} levels"
            )
        if len(refined) != len(self.channels):
            raise ConfigurationError(
                f"fusion built for {len(self.channels)} levels, got {len(refined)}"
            )
        fused: list[Tensor] = []
        cs = self.latent_dim
        for l, (fv_map, fg_map) in enumerate(zip(refined, geo)):
            if fv_map.shape[:2] != fg_map.shape[:2]:
                raise AlignmentError(
                    f"level {l}: visual {fv_map.shape[:2]} vs geometric {fg_map.shape[:2]}"
                )
            h, w, _ = fv_map.shape
            fv = ad.matmul(fv_map.reshape(h * w, fv_map.shape[2]), self.params[f"fuse.l{l}.w_v"])
            fg = ad.matmul(fg_map.reshape(h * w, fg_map.shape[2]), self.params[f"fuse.l{l}.w_g"])
            alpha = self.gate(l, fv, fg)
            blend = fv + alpha * fg
            if apply_mlp:
                hidden = ad.gelu(
                    ad.linear(blend, self.params[f"fuse.l{l}.mlp_w1"], self.params[f"fuse.l{l}.mlp_b1"])
                )
                blend = ad.linear(hidden, self.params[f"fuse.l{l}.mlp_w2"], self.params[f"fuse.l{l}.mlp_b2"])
            fused.append(blend.reshape(h, w, cs))
        return fused


def _attention(q: Tensor, k: Tensor, v: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    dim = q.shape[1]
    qh = ad.matmul(q, p[f"{prefix}.w_q"])
    kh = ad.matmul(k, p[f"{prefix}.w_k"])
    vh = ad.matmul(v, p[f"{prefix}.w_v"])
    scores = ad.matmul(qh, kh.T) * (1.0 / np.sqrt(dim))
    return ad.matmul(ad.matmul(ad.softmax(scores, axis=1), vh), p[f"{prefix}.w_o"])


class QueryBridge:
    """Transformer bridge: queries cross-attend to every fused scale.

    Per layer, the cross-attention outputs of all scales are summed into
    the queries, followed by self-attention and a feed-forward block, each
    with a residual connection.
    """

    def __init__(self, latent_dim: int, num_layers: int, rng: np.random.Generator):
        self.latent_dim = latent_dim
        self.num_layers = num_layers
        self.params = ParamDict()
        cs = latent_dim
        for n in range(num_layers):
            for tag in ("cross", "self"):
                for name in ("w_q", "w_k", "w_v", "w_o"):
                    self.params.add(f"bridge.l{n}.{tag}.{name}", _init(rng, (cs, cs)))
            self.params.add(f"bridge.l{n}.ffn_w1", _init(rng, (cs, cs)))
            self.params.add(f"bridge.l{n}.ffn_b1", np.zeros(cs))
            self.params.add(f"bridge.l{n}.ffn_w2", _init(rng, (cs, cs)))
            self.params.add(f"bridge.l{n}.ffn_b2", np.zeros(cs))

    def __call__(self, fused: list[Tensor], queries: QuerySet, depth: int | None = None) -> QuerySet:
        depth = self.num_layers if depth is None else depth
        if depth > self.num_layers:
            raise ConfigurationError(
                f"bridge has {self.num_layers} layers, requested depth {depth}"
            )
        q = queries.vectors
        pos = queries.pos
        flat_levels = [lv.reshape(lv.shape[0] * lv.shape[1], lv.shape[2]) for lv in fused]
        for n in range(depth):
            q_in = q + pos
            cross: Tensor | None = None
            for kv in flat_levels:
                out = _attention(q_in, kv, kv, self.params, f"bridge.l{n}.cross")
                cross = out if cross is None else cross + out
            if cross is not None:
                q = q + cross
            q_in = q + pos
            q = q + _attention(q_in, q_in, q, self.params, f"bridge.l{n}.self")
            hidden = ad.gelu(ad.linear(q, self.params[f"bridge.l{n}.ffn_w1"], self.params[f"bridge.l{n}.ffn_b1"]))
            q = q + ad.linear(hidden, self.params[f"bridge.l{n}.ffn_w2"], self.params[f"bridge.l{n}.ffn_b2"])
        return QuerySet(vectors=q, pos=pos)


# -- functional forms mirroring the module surface ---------------------------


def pyramid_to_tensors(pyramid: FeaturePyramid) -> list[Tensor]:
    return [Tensor(lv) for lv in pyramid.levels]


def refine_multiscale(
    pyramid: FeaturePyramid | list[Tensor], refiner: MultiScaleRefiner
) -> tuple[list[Tensor], Tensor]:
    levels = pyramid_to_tensors(pyramid) if isinstance(pyramid, FeaturePyramid) else pyramid
    return refiner(levels)


def fuse_visual_geometric(
    refined: list[Tensor],
    geo: FeaturePyramid | list[Tensor],
    fusion: VisualGeometricFusion,
    apply_mlp: bool = True,
) -> list[Tensor]:
    geo_levels = pyramid_to_tensors(geo) if isinstance(geo, FeaturePyramid) else geo
    return fusion(refined, geo_levels, apply_mlp=apply_mlp)


def bridge_queries(
    fused: list[Tensor], queries: QuerySet, bridge: QueryBridge, depth: int | None = None
) -> QuerySet:
    return bridge(fused, queries, depth=depth)
