"""Semantic alignment injection: underwater prompt bank, similarity-based
template selection, global-token fusion, and the classification / mask heads.

Template selection is plain NumPy (it runs once, before training, on frozen
encoder outputs); the heads run on the autodiff substrate so they train.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamDict, Tensor
from .encoders import (
    EncoderConfig,
    GlobalDepthToken,
    ImageSample,
    TemplateEmbeddings,
    encode_visual,
    fill_template,
    _rng,
)
from .gpem import ConfigurationError, QuerySet

logger = logging.getLogger(__name__)

Array = np.ndarray

GROUP_ORDER = (
    "generic",
    "environment",
    "medium/visibility",
    "lighting",
    "depth/distance",
    "scene/interaction",
)

_PIXEL_PROJ_TAG = 47


class SelectionError(ValueError):
    """Invalid template-selection configuration."""


@dataclass
class TemplateBank:
    """The 60 underwater prompt templates, six named groups of ten."""

    groups: dict[str, list[str]]

    def __post_init__(self):
        for g, templates in self.groups.items():
            for t in templates:
                if "{}" not in t:
                    raise SelectionError(f"template {t!r} in group {g!r} has no placeholder")

    @property
    def templates(self) -> list[str]:
        return [t for g in self.groups for t in self.groups[g]]

    @property
    def template_ids(self) -> list[str]:
        return [f"{g}:{i:02d}" for g in self.groups for i in range(len(self.groups[g]))]

    def __len__(self) -> int:
        return sum(len(v) for v in self.groups.values())

    def save(self, path: str | Path) -> None:
        records = [
            {"group": g, "id": f"{g}:{i:02d}", "template": t}
            for g in self.groups
            for i, t in enumerate(self.groups[g])
        ]
        Path(path).write_text(
            json.dumps(records, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )

    @classmethod
    def from_records(cls, records: list[dict]) -> "TemplateBank":
        groups: dict[str, list[str]] = {}
        for rec in records:
            groups.setdefault(rec["group"], []).append(rec["template"])
        return cls(groups=groups)


def build_prompt_bank(path: str | Path | None = None) -> TemplateBank:
    """Load the prompt bank; defaults to the bundled 60-template bank."""
    if path is None:
        text = (
            importlib_resources.files("uwovis.resources")
            .joinpath("prompt_bank.json")
            .read_text(encoding="utf-8")
        )
    else:
        text = Path(path).read_text(encoding="utf-8")
    return TemplateBank.from_records(json.loads(text))


@dataclass(frozen=True)
class SelectionConfig:
    """Strategy and knobs for turning per-template embeddings into one
    embedding per class."""

    strategy: str = "mixed"  # mean-all | mixed | weighted
    top_n: int = 20
    lambda_mix: float = 0.5
    alpha_enh: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("mean-all", "mixed", "weighted"):
            raise SelectionError(f"unknown selection strategy {self.strategy!r}")
        if self.top_n < 1:
            raise SelectionError("top_n must be >= 1")
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise SelectionError("lambda_mix must lie in [0, 1]")
        if self.alpha_enh < 1.0:
            raise SelectionError("alpha_enh must be >= 1")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "top_n": self.top_n,
            "lambda_mix": self.lambda_mix,
            "alpha_enh": self.alpha_enh,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionConfig":
        return cls(**d)


@dataclass
class SimilarityTensor:
    """Cosine similarities between pixel features and every (class, template)
    embedding, shape (B, H, W, K, T)."""

    values: Array

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class ClassEmbeddings:
    """One unit-norm embedding per class, plus the template choices that
    produced it (for reporting)."""

    vectors: Array
    class_names: list[str]
    top_template_indices: list[list[int]] | None = None
    fallback_classes: list[str] = field(default_factory=list)
    sampled_image_ids: dict[str, int] = field(default_factory=dict)


def compute_similarity_tensor(
    pixel_features: Array, templates: TemplateEmbeddings
) -> SimilarityTensor:
    """S[b,h,w,k,t] = cosine(pixel feature, template embedding)."""
    feats = np.asarray(pixel_features, dtype=np.float64)
    if feats.ndim != 4:
        raise ConfigurationError(f"pixel features must be (B,H,W,D), got {feats.shape}")
    if feats.shape[-1] != templates.dim:
        raise ConfigurationError(
            f"pixel feature dim {feats.shape[-1]} != embedding dim {templates.dim}"
        )
    fn = feats / np.maximum(np.linalg.norm(feats, axis=-1, keepdims=True), 1e-12)
    emb = templates.embeddings
    en = emb / np.maximum(np.linalg.norm(emb, axis=-1, keepdims=True), 1e-12)
    values = np.einsum("bhwd,ktd->bhwkt", fn, en)
    return SimilarityTensor(values=values)


def mean_spatial(sim: SimilarityTensor) -> Array:
    """Average similarity over spatial positions -> (B, K, T)."""
    return sim.values.mean(axis=(1, 2))


def _top_n_indices(scores: Array, n: int) -> Array:
    """Indices of the n largest scores, ties broken toward lower index."""
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:n])


def _normalize_rows(v: Array) -> Array:
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)


def select_templates_mean_all(templates: TemplateEmbeddings) -> ClassEmbeddings:
    """Similarity-free baseline: per class, the normalized mean over all
    templates."""
    vec = _normalize_rows(templates.embeddings.mean(axis=1))
    return ClassEmbeddings(vectors=vec, class_names=list(templates.class_names))


def select_templates_mixed(
    s_bar: Array, templates: TemplateEmbeddings, cfg: SelectionConfig
) -> ClassEmbeddings:
    """Rank templates by batch-averaged similarity and interpolate the
    top-N mean with the all-template mean."""
    k, t, _ = templates.embeddings.shape
    if cfg.top_n > t:
        raise SelectionError(f"top_n={cfg.top_n} exceeds template count {t}")
    scores = np.asarray(s_bar, dtype=np.float64).mean(axis=0)  # (K, T)
    emb = templates.embeddings
    mean_all = emb.mean(axis=1)  # (K, D)
    vectors = np.empty_like(mean_all)
    chosen: list[list[int]] = []
    for i in range(k):
        idx = _top_n_indices(scores[i], cfg.top_n)
        chosen.append(idx.tolist())
        top_mean = emb[i, idx].mean(axis=0)
        # written as base + lambda * delta so the N = T case is exactly
        # lambda-independent (delta is bitwise zero)
        vectors[i] = mean_all[i] + cfg.lambda_mix * (top_mean - mean_all[i])
    return ClassEmbeddings(
        vectors=_normalize_rows(vectors),
        class_names=list(templates.class_names),
        top_template_indices=chosen,
    )


def select_templates_weighted(
    s_bar: Array, templates: TemplateEmbeddings, cfg: SelectionConfig
) -> ClassEmbeddings:
    """Boost top-N templates by ``alpha_enh`` and average with the
    normalized weight distribution."""
    k, t, _ = templates.embeddings.shape
    if cfg.top_n > t:
        raise SelectionError(f"top_n={cfg.top_n} exceeds template count {t}")
    s = np.asarray(s_bar, dtype=np.float64)
    b = s.shape[0]
    weights = template_weight_distribution(s, cfg)
    emb = templates.embeddings
    vectors = np.einsum("bkt,ktd->kd", weights, emb) / b
    chosen = [
        _top_n_indices(s.mean(axis=0)[i], cfg.top_n).tolist() for i in range(k)
    ]
    return ClassEmbeddings(
        vectors=_normalize_rows(vectors),
        class_names=list(templates.class_names),
        top_template_indices=chosen,
    )


def template_weight_distribution(s_bar: Array, cfg: SelectionConfig) -> Array:
    """Per (batch, class) probability distribution over templates."""
    b, k, t = s_bar.shape
    weights = np.ones((b, k, t), dtype=np.float64)
    for bi in range(b):
        for ki in range(k):
            idx = _top_n_indices(s_bar[bi, ki], cfg.top_n)
            weights[bi, ki, idx] = cfg.alpha_enh
    return weights / weights.sum(axis=2, keepdims=True)


def select_class_embeddings(
    s_bar: Array | None, templates: TemplateEmbeddings, cfg: SelectionConfig
) -> ClassEmbeddings:
    if cfg.strategy == "mean-all":
        return select_templates_mean_all(templates)
    if s_bar is None:
        raise SelectionError(f"strategy {cfg.strategy!r} needs a similarity tensor")
    if cfg.strategy == "mixed":
        return select_templates_mixed(s_bar, templates, cfg)
    return select_templates_weighted(s_bar, templates, cfg)


def pixel_features_for_selection(
    image: ImageSample, enc_config: EncoderConfig
) -> Array:
    """Finest visual level pushed through a frozen seeded projection into the
    text embedding space, unit-normalized; shape (1, H, W, D)."""
    pyr = encode_visual(image, enc_config)
    feat = pyr.levels[0]
    rng = _rng(enc_config.seed, _PIXEL_PROJ_TAG)
    proj = rng.standard_normal((feat.shape[-1], enc_config.embed_dim))
    proj /= np.sqrt(feat.shape[-1])
    mapped = feat @ proj
    return _normalize_rows(mapped)[None]


def select_with_single_image(
    dataset,
    class_names: list[str],
    enc_config: EncoderConfig,
    cfg: SelectionConfig,
    bank: TemplateBank | None = None,
    templates: TemplateEmbeddings | None = None,
) -> ClassEmbeddings:
    """Run template selection on one seeded-sampled image per category.

    Categories with no image fall back to the mean over all templates; the
    fallback is logged and recorded on the result.
    """
    from .encoders import encode_text

    bank = bank if bank is not None else build_prompt_bank()
    if templates is None:
        templates = encode_text(class_names, bank.templates, enc_config)
    k = len(class_names)
    t = templates.num_templates
    if cfg.strategy == "mean-all":
        return select_templates_mean_all(templates)

    rng = np.random.default_rng(cfg.seed)
    rows = np.zeros((1, k, t), dtype=np.float64)
    fallback: list[str] = []
    sampled_ids: dict[str, int] = {}
    for ki, name in enumerate(class_names):
        ids = sorted(dataset.image_ids_for_category(name))
        if not ids:
            fallback.append(name)
            continue
        image_id = ids[int(rng.integers(len(ids)))]
        sampled_ids[name] = image_id
        image = dataset.load_image(image_id)
        feats = pixel_features_for_selection(image, enc_config)
        sub = TemplateEmbeddings(
            embeddings=templates.embeddings[ki : ki + 1],
            class_names=[name],
            template_ids=templates.template_ids,
        )
        sim = compute_similarity_tensor(feats, sub)
        rows[0, ki] = mean_spatial(sim)[0, 0]

    result = select_class_embeddings(rows, templates, cfg)
    if fallback:
        logger.warning(
            "no images for %d categories (%s); falling back to mean-all for them",
            len(fallback),
            ", ".join(fallback),
        )
        mean_all = select_templates_mean_all(templates)
        for name in fallback:
            ki = class_names.index(name)
            result.vectors[ki] = mean_all.vectors[ki]
            if result.top_template_indices is not None:
                result.top_template_indices[ki] = list(range(t))
    result.fallback_classes = fallback
    result.sampled_image_ids = sampled_ids
    return result


# -- trainable heads ---------------------------------------------------------


class GlobalTokenFusion:
    """F_f = F_m + broadcast(projection of the global depth token)."""

    def __init__(self, token_dim: int, latent_dim: int, rng: np.random.Generator):
        self.params = ParamDict()
        self.params.add("saim.token_w", rng.standard_normal((token_dim, latent_dim)) / np.sqrt(token_dim))
        self.params.add("saim.token_b", np.zeros(latent_dim))

    def __call__(self, g_cls: GlobalDepthToken | Tensor, f_m: Tensor) -> Tensor:
        vec = g_cls.vector if isinstance(g_cls, GlobalDepthToken) else g_cls
        tok = ad.as_tensor(vec).reshape(1, -1)
        proj = ad.linear(tok, self.params["saim.token_w"], self.params["saim.token_b"])
        return f_m + proj.reshape(1, 1, proj.shape[1])


class MaskHead:
    """Dot-product mask head: logits[q, h, w] = <embed(query_q), F_f[h, w]>."""

    def __init__(self, latent_dim: int, rng: np.random.Generator):
        cs = latent_dim
        self.params = ParamDict()
        self.params.add("saim.mask_w1", rng.standard_normal((cs, cs)) / np.sqrt(cs))
        self.params.add("saim.mask_b1", np.zeros(cs))
        self.params.add("saim.mask_w2", rng.standard_normal((cs, cs)) / np.sqrt(cs))
        self.params.add("saim.mask_b2", np.zeros(cs))

    def embed(self, queries: Tensor) -> Tensor:
        hidden = ad.gelu(ad.linear(queries, self.params["saim.mask_w1"], self.params["saim.mask_b1"]))
        return ad.linear(hidden, self.params["saim.mask_w2"], self.params["saim.mask_b2"])

    def __call__(self, queries: QuerySet | Tensor, f_f: Tensor) -> Tensor:
        q = queries.vectors if isinstance(queries, QuerySet) else queries
        h, w, c = f_f.shape
        emb = self.embed(q)
        logits = ad.matmul(emb, f_f.reshape(h * w, c).T)
        return logits.reshape(q.shape[0], h, w)


def fuse_global(g_cls: GlobalDepthToken | Tensor, f_m: Tensor, fusion: GlobalTokenFusion) -> Tensor:
    return fusion(g_cls, f_m)


def predict_masks(queries: QuerySet | Tensor, f_f: Tensor, head: MaskHead) -> Tensor:
    return head(queries, f_f)


def classify_queries(
    f_f: Tensor,
    queries: QuerySet | Tensor,
    class_emb: ClassEmbeddings | Array,
    temperature: float | Tensor,
    mask_logits: Tensor | None = None,
    pooling: str = "mask",
) -> Tensor:
    """Cosine logits between per-query pooled features and class embeddings.

    Pooling is mask-weighted by default (weights are the sigmoid of each
    query's own predicted mask); ``pooling="mean"`` uses a plain spatial
    average instead. Logits are scaled by 1 / temperature.
    """
    temp_value = temperature.item() if isinstance(temperature, Tensor) else float(temperature)
    if temp_value <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temp_value}")
    emb = class_emb.vectors if isinstance(class_emb, ClassEmbeddings) else np.asarray(class_emb)
    q = queries.vectors if isinstance(queries, QuerySet) else queries
    h, w, c = f_f.shape
    if emb.shape[1] != c:
        raise ConfigurationError(
            f"class embedding dim {emb.shape[1]} != latent dim {c}"
        )
    flat = f_f.reshape(h * w, c)
    if pooling == "mask" and mask_logits is not None:
        wts = ad.sigmoid(mask_logits.reshape(q.shape[0], h * w))
        pooled = ad.matmul(wts, flat) / wts.sum(axis=1, keepdims=True)
    else:
        pooled_row = flat.mean(axis=0, keepdims=True)
        pooled = pooled_row + Tensor(np.zeros((q.shape[0], 1)))
    f_q = ad.l2_normalize(pooled + q, axis=1)
    logits = ad.matmul(f_q, Tensor(np.asarray(emb, dtype=np.float64).T))
    if isinstance(temperature, Tensor):
        return logits * (temperature ** -1.0)
    return logits * (1.0 / temp_value)
