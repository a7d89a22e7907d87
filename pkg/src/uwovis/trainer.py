"""Desk-scale training loop wiring encoders -> refinement -> fusion -> bridge
-> heads -> matching losses, with seeded end-to-end determinism, plus
checkpointing and open-vocabulary inference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetIndex, DataError
from .encoders import (
    EncoderConfig,
    ImageSample,
    encode_geometry,
    encode_visual,
    encoder_checksum,
)
from .evaluation import InstancePrediction
from .gpem import (
    GpemConfig,
    MultiScaleRefiner,
    QueryBridge,
    QuerySet,
    VisualGeometricFusion,
    pyramid_to_tensors,
)
from .kernels import bilinear_sample_forward
from .losses import TargetSet, total_loss
from .saim import (
    ClassEmbeddings,
    GlobalTokenFusion,
    MaskHead,
    SelectionConfig,
    build_prompt_bank,
    classify_queries,
    select_with_single_image,
)

Array = np.ndarray

CHECKPOINT_FORMAT = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class OptimizerConfig:
    algo: str = "adam"  # adam | sgd, both with a fixed step size
    step_size: float = 2e-3
    steps: int = 200
    batch_size: int = 4

    def to_dict(self) -> dict:
        return {
            "algo": self.algo,
            "step_size": self.step_size,
            "steps": self.steps,
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gpem: GpemConfig = field(default_factory=GpemConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss_weights: tuple[float, float, float] = (2.0, 5.0, 5.0)
    seed: int = 0
    task_mode: str = "in-domain"
    temperature_init: float = 0.2
    score_floor: float = 0.05
    pooling: str = "mask"  # mask | mean
    cls_loss: str = "bce"  # bce | softmax

    def __post_init__(self):
        if self.encoder.embed_dim != self.gpem.latent_dim:
            raise DataError(
                f"text embedding dim {self.encoder.embed_dim} must equal the "
                f"shared latent width {self.gpem.latent_dim}"
            )
        if self.task_mode not in ("in-domain", "cross-domain"):
            raise DataError(f"unknown task mode {self.task_mode!r}")
        if self.pooling not in ("mask", "mean"):
            raise DataError(f"unknown pooling {self.pooling!r}")
        if self.cls_loss not in ("bce", "softmax"):
            raise DataError(f"unknown classification loss {self.cls_loss!r}")

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "gpem": self.gpem.to_dict(),
            "selection": self.selection.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "loss_weights": list(self.loss_weights),
            "seed": self.seed,
            "task_mode": self.task_mode,
            "temperature_init": self.temperature_init,
            "score_floor": self.score_floor,
            "pooling": self.pooling,
            "cls_loss": self.cls_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            encoder=EncoderConfig.from_dict(d["encoder"]),
            gpem=GpemConfig.from_dict(d["gpem"]),
            selection=SelectionConfig.from_dict(d["selection"]),
            optimizer=OptimizerConfig.from_dict(d["optimizer"]),
            loss_weights=tuple(d.get("loss_weights", (2.0, 5.0, 5.0))),
            seed=int(d.get("seed", 0)),
            task_mode=d.get("task_mode", "in-domain"),
            temperature_init=float(d.get("temperature_init", 0.2)),
            score_floor=float(d.get("score_floor", 0.05)),
            pooling=d.get("pooling", "mask"),
            cls_loss=d.get("cls_loss", "bce"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class Model:
    """All trainable state: refiner, fusion, bridge, queries, heads."""

    def __init__(self, config: RunConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        g = config.gpem
        enc = config.encoder
        self.refiner = MultiScaleRefiner(enc.channels, g.latent_dim, g.num_points, rng)
        self.fusion = VisualGeometricFusion(enc.channels, g.latent_dim, rng)
        self.bridge = QueryBridge(g.latent_dim, g.num_layers, rng)
        self.queries = QuerySet.create(g.num_queries, g.latent_dim, rng)
        self.token_fusion = GlobalTokenFusion(enc.token_dim, g.latent_dim, rng)
        self.mask_head = MaskHead(g.latent_dim, rng)
        self.log_tau = Tensor(math.log(config.temperature_init), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.refiner.params)
        params.update(self.fusion.params)
        params.update(self.bridge.params)
        params.update(self.queries.parameters())
        params.update(self.token_fusion.params)
        params.update(self.mask_head.params)
        params["saim.log_tau"] = self.log_tau
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def encode(self, image: ImageSample) -> tuple[list[Array], list[Array], Array]:
        """Frozen encoder outputs; cacheable because encoders never train."""
        enc = self.config.encoder
        pyr_v = encode_visual(image, enc)
        pyr_g, g_cls = encode_geometry(image, enc)
        return pyr_v.levels, pyr_g.levels, g_cls.vector

    def forward_encoded(
        self,
        encoded: tuple[list[Array], list[Array], Array],
        class_emb: ClassEmbeddings | Array,
    ) -> tuple[Tensor, Tensor]:
        visual_levels, geo_levels, token = encoded
        refined, f_m = self.refiner([Tensor(lv) for lv in visual_levels])
        fused = self.fusion(refined, [Tensor(lv) for lv in geo_levels])
        queries = self.bridge(fused, self.queries)
        f_f = self.token_fusion(Tensor(token), f_m)
        m_logits = self.mask_head(queries, f_f)
        y_cls = classify_queries(
            f_f,
            queries,
            class_emb,
            temperature=ad.exp(self.log_tau),
            mask_logits=m_logits,
            pooling=self.config.pooling,
        )
        return y_cls, m_logits

    def forward(
        self, image: ImageSample, class_emb: ClassEmbeddings | Array
    ) -> tuple[Tensor, Tensor]:
        """Returns (class logits (N_Q, K), mask logits (N_Q, H0, W0))."""
        return self.forward_encoded(self.encode(image), class_emb)

    def state_arrays(self) -> dict[str, Array]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state(self, state: dict[str, Array]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise DataError(f"checkpoint lacks parameters: {sorted(missing)[:4]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DataError(
                    f"parameter {name} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.copy()


class _Optimizer:
    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        lr = self.cfg.step_size
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.cfg.algo == "sgd":
                p.data = p.data - lr * g
                continue
            m = self.m[name] = 0.9 * self.m[name] + 0.1 * g
            v = self.v[name] = 0.999 * self.v[name] + 0.001 * g * g
            mhat = m / (1.0 - 0.9 ** self.t)
            vhat = v / (1.0 - 0.999 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + 1e-8)


def downsample_mask(mask: Array, stride: int) -> Array:
    """Majority-pool a full-resolution binary mask to the mask-head grid.

    A mask that would vanish keeps one pixel at its centroid so every
    instance stays supervisable.
    """
    h, w = mask.shape
    hh = math.ceil(h / stride)
    ww = math.ceil(w / stride)
    padded = np.zeros((hh * stride, ww * stride), dtype=np.float64)
    padded[:h, :w] = mask
    pooled = padded.reshape(hh, stride, ww, stride).mean(axis=(1, 3))
    out = (pooled >= 0.5).astype(np.float64)
    if out.sum() == 0 and mask.sum() > 0:
        ys, xs = np.nonzero(mask)
        out[min(int(ys.mean()) // stride, hh - 1), min(int(xs.mean()) // stride, ww - 1)] = 1.0
    return out


def build_targets(
    dataset: DatasetIndex, image_id: int, class_names: list[str], stride: int
) -> TargetSet:
    """Ground truth for one image in head resolution and vocabulary indices.

    Instances whose category is outside ``class_names`` are skipped (the
    cross-domain training precondition)."""
    name_to_idx = {n: i for i, n in enumerate(class_names)}
    class_ids: list[int] = []
    masks: list[Array] = []
    for ann in dataset.annotations_for_image(image_id):
        name = dataset.categories[ann.category_id].name
        if name not in name_to_idx:
            continue
        class_ids.append(name_to_idx[name])
        masks.append(downsample_mask(dataset.decode_mask(ann.id), stride))
    if not masks:
        size = dataset.images[image_id]
        h0 = math.ceil(size.height / stride)
        w0 = math.ceil(size.width / stride)
        return TargetSet(class_ids=[], masks=np.zeros((0, h0, w0)))
    return TargetSet(class_ids=class_ids, masks=np.stack(masks))


@dataclass
class Checkpoint:
    state: dict[str, Array]
    config: RunConfig
    class_names: list[str]
    class_embeddings: Array
    loss_history: list[float]
    step: int
    encoder_checksums: tuple[str, str] = ("", "")

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        params_dir = out / "params"
        params_dir.mkdir(parents=True, exist_ok=True)
        names = sorted(self.state)
        for name in names:
            np.save(params_dir / f"{name}.npy", self.state[name])
        np.save(out / "class_embeddings.npy", self.class_embeddings)
        self.config.save(out / "config.json")
        meta = {
            "format_version": CHECKPOINT_FORMAT,
            "step": self.step,
            "parameters": names,
            "class_names": self.class_names,
            "encoder_checksum_before": self.encoder_checksums[0],
            "encoder_checksum_after": self.encoder_checksums[1],
        }
        (out / "meta.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (out / "loss_history.json").write_text(
            json.dumps([round(v, 12) for v in self.loss_history]) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, out_dir: str | Path) -> "Checkpoint":
        out = Path(out_dir)
        if not (out / "meta.json").exists():
            raise DataError(f"no checkpoint at {out}")
        meta = json.loads((out / "meta.json").read_text(encoding="utf-8"))
        if meta.get("format_version") != CHECKPOINT_FORMAT:
            raise DataError(
                f"unsupported checkpoint format {meta.get('format_version')}"
            )
        state = {
            name: np.load(out / "params" / f"{name}.npy")
            for name in meta["parameters"]
        }
        history = json.loads((out / "loss_history.json").read_text(encoding="utf-8"))
        return cls(
            state=state,
            config=RunConfig.load(out / "config.json"),
            class_names=list(meta["class_names"]),
            class_embeddings=np.load(out / "class_embeddings.npy"),
            loss_history=[float(v) for v in history],
            step=int(meta["step"]),
            encoder_checksums=(
                meta.get("encoder_checksum_before", ""),
                meta.get("encoder_checksum_after", ""),
            ),
        )

    def build_model(self) -> Model:
        model = Model(self.config)
        model.load_state(self.state)
        return model


def train(config: RunConfig, dataset: DatasetIndex) -> Checkpoint:
    """Optimize all trainable parameters on the dataset; encoders stay frozen
    (checksummed before and after as a witness)."""
    image_ids = sorted(dataset.images)
    if not image_ids:
        raise DataError("training dataset has no images")
    class_names = dataset.category_names()
    stride = config.encoder.strides[0]

    probe = dataset.load_image(image_ids[0])
    checksum_before = encoder_checksum(config.encoder, probe)

    class_emb = select_with_single_image(
        dataset, class_names, config.encoder, config.selection
    )
    targets = {
        img_id: build_targets(dataset, img_id, class_names, stride)
        for img_id in image_ids
    }
    model = Model(config)
    encoded = {
        img_id: model.encode(dataset.load_image(img_id)) for img_id in image_ids
    }
    opt = _Optimizer(model.parameters(), config.optimizer)
    rng = np.random.default_rng(config.seed)
    history: list[float] = []
    batch = min(config.optimizer.batch_size, len(image_ids))

    for step in range(config.optimizer.steps):
        chosen = rng.choice(len(image_ids), size=batch, replace=False)
        model.zero_grad()
        loss_total: Tensor | None = None
        for idx in chosen:
            img_id = image_ids[int(idx)]
            y_cls, m_logits = model.forward_encoded(encoded[img_id], class_emb)
            if not (np.isfinite(y_cls.data).all() and np.isfinite(m_logits.data).all()):
                raise TrainingDiverged(step, float("nan"))
            loss, _ = total_loss(
                y_cls,
                m_logits,
                targets[img_id],
                config.loss_weights,
                cls_kind=config.cls_loss,
            )
            loss_total = loss if loss_total is None else loss_total + loss
        assert loss_total is not None
        loss_total = loss_total * (1.0 / batch)
        value = loss_total.item()
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        history.append(value)
        loss_total.backward()
        opt.step()

    checksum_after = encoder_checksum(config.encoder, probe)
    if checksum_before != checksum_after:
        raise RuntimeError("frozen encoder outputs changed during training")

    return Checkpoint(
        state=model.state_arrays(),
        config=config,
        class_names=class_names,
        class_embeddings=class_emb.vectors.copy(),
        loss_history=history,
        step=config.optimizer.steps,
        encoder_checksums=(checksum_before, checksum_after),
    )


def _upsample_bilinear(plane: Array, out_h: int, out_w: int) -> Array:
    h, w = plane.shape
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    flat = bilinear_sample_forward(
        np.ascontiguousarray(plane[:, :, None]), gy.ravel(), gx.ravel()
    )
    return flat.reshape(out_h, out_w)


def infer(
    checkpoint_or_model: Checkpoint | Model,
    image: ImageSample,
    vocabulary: list[str],
    selection: ClassEmbeddings,
    score_floor: float | None = None,
) -> list[InstancePrediction]:
    """Decode per-query instances against an arbitrary vocabulary.

    The vocabulary may contain names never seen in training; only the class
    embedding matrix changes size. Score is class probability times mask
    confidence; masks are thresholded at 0.5 after bilinear upsampling.
    """
    if isinstance(checkpoint_or_model, Checkpoint):
        model = checkpoint_or_model.build_model()
    else:
        model = checkpoint_or_model
    if selection.vectors.shape[0] != len(vocabulary):
        raise DataError(
            f"vocabulary has {len(vocabulary)} names but embeddings cover "
            f"{selection.vectors.shape[0]} classes"
        )
    floor = model.config.score_floor if score_floor is None else score_floor
    y_cls, m_logits = model.forward(image, selection)
    y = y_cls.data
    m = m_logits.data
    h, w = image.height, image.width
    predictions: list[InstancePrediction] = []
    for q in range(y.shape[0]):
        k = int(np.argmax(y[q]))
        p_cls = float(1.0 / (1.0 + np.exp(-y[q, k])))
        logits_full = _upsample_bilinear(m[q], h, w)
        probs = 1.0 / (1.0 + np.exp(-logits_full))
        binmask = probs > 0.5
        if not binmask.any():
            continue
        confidence = float(probs[binmask].mean())
        score = p_cls * confidence
        if score < floor:
            continue
        predictions.append(
            InstancePrediction(
                image_id=int(image.id) if image.id.isdigit() else -1,
                category=vocabulary[k],
                mask=binmask.astype(np.uint8),
                score=score,
            )
        )
    return predictions


def build_eval_embeddings(
    dataset: DatasetIndex,
    vocabulary: list[str],
    config: RunConfig,
    selection: SelectionConfig | None = None,
) -> ClassEmbeddings:
    """Class embeddings for an arbitrary inference vocabulary, using the
    checkpoint's frozen text encoder and the configured selection strategy."""
    sel = selection if selection is not None else config.selection
    return select_with_single_image(dataset, vocabulary, config.encoder, sel)
