"""Frozen feature producers: visual pyramid, geometric pyramid, text embeddings.

These are deterministic seeded stubs standing in for pretrained backbones.
Everything downstream talks to them only through the types below, so a real
encoder can be dropped in without touching any other module; the test suite
verifies that by running a second, structurally different stub family
("moment") through the same contracts.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict

import numpy as np

Array = np.ndarray

MIN_IMAGE_SIDE = 16


class EncoderError(ValueError):
    """Base class for encoder contract violations."""


class ImageSizeError(EncoderError):
    """Image under the minimum spatial size supported by the pyramid."""


class TemplateFormatError(EncoderError):
    """Prompt template without a class-name placeholder."""


@dataclass(frozen=True)
class EncoderConfig:
    """Declares pyramid geometry, embedding widths and the frozen seed."""

    levels: int = 3
    strides: tuple[int, ...] = (4, 8, 16)
    channels: tuple[int, ...] = (32, 64, 128)
    embed_dim: int = 32
    token_dim: int = 32
    seed: int = 0
    family: str = "conv"

    def __post_init__(self):
        if self.levels < 2:
            raise EncoderError("encoder pyramid needs at least 2 levels")
        if len(self.strides) != self.levels or len(self.channels) != self.levels:
            raise EncoderError(
                f"strides/channels must both have {self.levels} entries"
            )
        if any(s <= 0 for s in self.strides) or any(c <= 0 for c in self.channels):
            raise EncoderError("strides and channels must be positive")
        if list(self.strides) != sorted(set(self.strides)):
            raise EncoderError("strides must be strictly increasing")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["strides"] = tuple(d["strides"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class ImageSample:
    """An RGB image in [0, 1] with an opaque identifier."""

    pixels: Array
    id: str
    height: int = 0
    width: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise EncoderError(f"expected HxWx3 pixels, got {self.pixels.shape}")
        self.height = int(self.pixels.shape[0])
        self.width = int(self.pixels.shape[1])

    def validate(self) -> None:
        if self.height < MIN_IMAGE_SIDE or self.width < MIN_IMAGE_SIDE:
            raise ImageSizeError(
                f"image {self.id!r} is {self.height}x{self.width}; "
                f"minimum side is {MIN_IMAGE_SIDE}"
            )
        if not np.all(np.isfinite(self.pixels)):
            raise EncoderError(f"image {self.id!r} contains non-finite pixels")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise EncoderError(f"image {self.id!r} has pixels outside [0, 1]")


@dataclass
class FeaturePyramid:
    """Ordered multi-scale dense feature maps, finest first."""

    levels: list[Array]
    scale_factors: list[int]

    def __post_init__(self):
        sizes = [lv.shape[:2] for lv in self.levels]
        for a, b in zip(sizes, sizes[1:]):
            if not (a[0] > b[0] and a[1] > b[1]):
                raise EncoderError(f"pyramid spatial sizes must strictly decrease: {sizes}")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def shapes(self) -> list[tuple[int, int, int]]:
        return [lv.shape for lv in self.levels]


@dataclass
class GlobalDepthToken:
    vector: Array

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)


@dataclass
class TemplateEmbeddings:
    """Per-class, per-template unit-norm text embeddings, shape (K, T, D)."""

    embeddings: Array
    class_names: list[str]
    template_ids: list[str]

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def num_templates(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]


# -- deterministic weight material ------------------------------------------


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *tags])))

_VISUAL_TAG = 11
_GEO_TAG = 23
_TOKEN_TAG = 31


def _pool_to(img: Array, stride: int) -> Array:
    """Average-pool C-channel map by ``stride`` with edge padding (ceil sizes)."""
    h, w = img.shape[:2]
    ph = math.ceil(h / stride) * stride - h
    pw = math.ceil(w / stride) * stride - w
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    hh, ww = img.shape[0] // stride, img.shape[1] // stride
    return img.reshape(hh, stride, ww, stride, -1).mean(axis=(1, 3))


def _coord_grid(h: int, w: int) -> Array:
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gy, gx], axis=-1)


def _mlp_features(z: Array, out_dim: int, rng: np.random.Generator) -> Array:
    in_dim = z.shape[-1]
    hidden = max(8, out_dim)
    w1 = rng.standard_normal((in_dim, hidden)) / np.sqrt(in_dim)
    b1 = 0.1 * rng.standard_normal(hidden)
    w2 = rng.standard_normal((hidden, out_dim)) / np.sqrt(hidden)
    b2 = 0.1 * rng.standard_normal(out_dim)
    return np.tanh(np.tanh(z @ w1 + b1) @ w2 + b2)


def _moment_features(z: Array, pooled: Array, out_dim: int, rng: np.random.Generator) -> Array:
    stats = np.concatenate(
        [pooled, np.abs(pooled - pooled.mean(axis=(0, 1))), z], axis=-1
    )
    w = rng.standard_normal((stats.shape[-1], out_dim)) / np.sqrt(stats.shape[-1])
    return np.tanh(stats @ w)


def _geometry_channels(pixels: Array) -> Array:
    lum = pixels.mean(axis=2)
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    gx[:, 1:] = lum[:, 1:] - lum[:, :-1]
    gy[1:, :] = lum[1:, :] - lum[:-1, :]
    return np.stack([lum, gx, gy], axis=-1)


def _encode_pyramid(chans: Array, config: EncoderConfig, tag: int) -> FeaturePyramid:
    levels = []
    for lvl, (stride, c_out) in enumerate(zip(config.strides, config.channels)):
        pooled = _pool_to(chans, stride)
        coords = _coord_grid(pooled.shape[0], pooled.shape[1])
        z = np.concatenate([pooled, coords], axis=-1)
        rng = _rng(config.seed, tag, lvl)
        if config.family == "moment":
            feat = _moment_features(z, pooled, c_out, rng)
        else:
            feat = _mlp_features(z, c_out, rng)
        levels.append(np.ascontiguousarray(feat, dtype=np.float64))
    return FeaturePyramid(levels=levels, scale_factors=list(config.strides))


# -- public operations -------------------------------------------------------


def encode_visual(image: ImageSample, config: EncoderConfig) -> FeaturePyramid:
    """Multi-scale visual features; pure function of (image, config.seed)."""
    image.validate()
    return _encode_pyramid(image.pixels, config, _VISUAL_TAG)


def encode_geometry(
    image: ImageSample, config: EncoderConfig
) -> tuple[FeaturePyramid, GlobalDepthToken]:
    """Multi-scale geometric features plus a global depth token."""
    image.validate()
    chans = _geometry_channels(image.pixels)
    pyramid = _encode_pyramid(chans, config, _GEO_TAG)
    stats = np.array(
        [
            chans[..., 0].mean(),
            chans[..., 0].std(),
            np.abs(chans[..., 1]).mean(),
            np.abs(chans[..., 2]).mean(),
            chans[..., 0].max(),
            chans[..., 0].min(),
        ]
    )
    rng = _rng(config.seed, _TOKEN_TAG)
    w = rng.standard_normal((stats.size, config.token_dim)) / np.sqrt(stats.size)
    b = 0.1 * rng.standard_normal(config.token_dim)
    return pyramid, GlobalDepthToken(vector=np.tanh(stats @ w + b))


def fill_template(template: str, class_name: str) -> str:
    """Insert a class name into every placeholder of a prompt template."""
    if "{}" not in template:
        raise TemplateFormatError(
            f"template {template!r} has no '{{}}' placeholder"
        )
    return template.replace("{}", class_name)


def _hash_vector(key: str, seed: int, dim: int) -> Array:
    digest = hashlib.sha256(f"{seed}|{key}".encode("utf-8")).digest()
    entropy = int.from_bytes(digest[:16], "big")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


_STRING_SALT_WEIGHT = 0.05


def _hash_embedding(prompt: str, seed: int, dim: int) -> Array:
    """Seeded hash embedding of a filled prompt.

    Composed word-wise so prompts sharing words get correlated embeddings
    (the semantic structure open-vocabulary transfer rides on), plus a small
    whole-string component that keeps distinct strings distinct even when
    they share a word multiset.
    """
    total = _STRING_SALT_WEIGHT * _hash_vector("\x00" + prompt, seed, dim)
    for word in prompt.split():
        total = total + _hash_vector(word, seed, dim)
    return total / np.linalg.norm(total)


def encode_text(
    class_names: list[str], templates: list[str], config: EncoderConfig
) -> TemplateEmbeddings:
    """Embed every (class, template) pair; rows are unit-normalized.

    The stub hashes the *filled* prompt string, so template identity shapes
    the embedding and identical prompts map to identical rows.
    """
    for t in templates:
        if "{}" not in t:
            raise TemplateFormatError(f"template {t!r} has no '{{}}' placeholder")
    k, t_count, d = len(class_names), len(templates), config.embed_dim
    emb = np.zeros((k, t_count, d), dtype=np.float64)
    for i, name in enumerate(class_names):
        for j, tpl in enumerate(templates):
            emb[i, j] = _hash_embedding(fill_template(tpl, name), config.seed, d)
    return TemplateEmbeddings(
        embeddings=emb,
        class_names=list(class_names),
        template_ids=[f"t{j:02d}" for j in range(t_count)],
    )


def encoder_checksum(config: EncoderConfig, probe: ImageSample) -> str:
    """Digest of all encoder outputs on a probe input (frozen-weights witness)."""
    pyr = encode_visual(probe, config)
    geo, tok = encode_geometry(probe, config)
    h = hashlib.sha256()
    for lv in pyr.levels + geo.levels:
        h.update(np.ascontiguousarray(lv).tobytes())
    h.update(np.ascontiguousarray(tok.vector).tobytes())
    h.update(_hash_embedding("probe {}", config.seed, config.embed_dim).tobytes())
    return h.hexdigest()
