"""Training loop, checkpointing, determinism, and inference contracts."""

from __future__ import annotations

import numpy as np
import pytest

from uwovis.data import DataError
from uwovis.encoders import EncoderConfig
from uwovis.gpem import GpemConfig
from uwovis.losses import TargetSet
from uwovis.saim import SelectionConfig, select_with_single_image
from uwovis.trainer import (
    Checkpoint,
    Model,
    OptimizerConfig,
    RunConfig,
    TrainingDiverged,
    build_targets,
    downsample_mask,
    infer,
    train,
)

from conftest import tiny_run_config


def small_config(**overrides):
    base = dict(
        encoder=EncoderConfig(
            levels=2, strides=(4, 8), channels=(6, 8), embed_dim=12, token_dim=6, seed=0
        ),
        gpem=GpemConfig(latent_dim=12, num_queries=6, num_layers=1, num_points=2),
        selection=SelectionConfig(strategy="mixed", top_n=5),
        optimizer=OptimizerConfig(steps=5, batch_size=3, step_size=2e-3),
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


def test_config_round_trip(tmp_path):
    cfg = small_config()
    path = tmp_path / "config.json"
    cfg.save(path)
    again = RunConfig.load(path)
    assert again.to_dict() == cfg.to_dict()


def test_config_rejects_mismatched_embed_and_latent_dims():
    with pytest.raises(DataError):
        RunConfig(
            encoder=EncoderConfig(
                levels=2, strides=(4, 8), channels=(6, 8), embed_dim=16, token_dim=6, seed=0
            ),
            gpem=GpemConfig(latent_dim=12, num_queries=4, num_layers=1, num_points=2),
        )


def test_downsample_mask_majority_and_centroid_rescue():
    mask = np.zeros((8, 8))
    mask[0:4, 0:4] = 1.0
    out = downsample_mask(mask, 4)
    np.testing.assert_array_equal(out, [[1.0, 0.0], [0.0, 0.0]])
    # a sliver that majority-pooling would erase keeps its centroid pixel
    sliver = np.zeros((8, 8))
    sliver[5, 5] = 1.0
    out = downsample_mask(sliver, 4)
    assert out.sum() == 1.0
    assert out[1, 1] == 1.0


def test_build_targets_vocabulary_filtering(fixture_index):
    names = fixture_index.category_names()
    t_all = build_targets(fixture_index, 1, names, stride=4)
    assert t_all.num_instances == 2
    assert t_all.masks.shape == (2, 16, 16)
    present = {names[i] for i in t_all.class_ids}
    t_filtered = build_targets(fixture_index, 1, sorted(present)[:1], stride=4)
    assert t_filtered.num_instances <= t_all.num_instances


def test_train_zero_steps_keeps_initialization(fixture_index):
    cfg = small_config(optimizer=OptimizerConfig(steps=0, batch_size=2, step_size=1e-3))
    ckpt = train(cfg, fixture_index)
    fresh = Model(cfg)
    for name, tensor in fresh.parameters().items():
        np.testing.assert_array_equal(ckpt.state[name], tensor.data)
    assert ckpt.loss_history == []


def test_train_deterministic_across_runs(fixture_index):
    cfg = small_config()
    a = train(cfg, fixture_index)
    b = train(cfg, fixture_index)
    assert a.loss_history == b.loss_history
    for name in a.state:
        np.testing.assert_array_equal(a.state[name], b.state[name])


def test_train_loss_decreases_on_fixture(fixture_index):
    cfg = small_config(optimizer=OptimizerConfig(steps=30, batch_size=6, step_size=5e-3))
    ckpt = train(cfg, fixture_index)
    assert ckpt.loss_history[-1] < ckpt.loss_history[0]


def test_frozen_encoder_checksums_match(fixture_index):
    ckpt = train(small_config(), fixture_index)
    before, after = ckpt.encoder_checksums
    assert before and before == after


def test_divergence_reports_step(fixture_index):
    cfg = small_config(optimizer=OptimizerConfig(steps=60, batch_size=2, step_size=1e14, algo="sgd"))
    with pytest.raises(TrainingDiverged) as err:
        train(cfg, fixture_index)
    assert err.value.step >= 1


def test_checkpoint_round_trip_bit_identical_forward(tmp_path, fixture_index):
    cfg = small_config()
    ckpt = train(cfg, fixture_index)
    ckpt.save(tmp_path / "ckpt")
    loaded = Checkpoint.load(tmp_path / "ckpt")
    assert loaded.class_names == ckpt.class_names
    np.testing.assert_array_equal(loaded.class_embeddings, ckpt.class_embeddings)

    image = fixture_index.load_image(1)
    y1, m1 = ckpt.build_model().forward(image, ckpt.class_embeddings)
    y2, m2 = loaded.build_model().forward(image, loaded.class_embeddings)
    np.testing.assert_array_equal(y1.data, y2.data)
    np.testing.assert_array_equal(m1.data, m2.data)


def test_checkpoint_load_missing_directory(tmp_path):
    with pytest.raises(DataError):
        Checkpoint.load(tmp_path / "nothing")


@pytest.fixture(scope="module")
def trained_ckpt(fixture_index):
    cfg = small_config(
        optimizer=OptimizerConfig(steps=80, batch_size=6, step_size=5e-3)
    )
    return train(cfg, fixture_index)


def test_infer_vocabulary_embedding_mismatch(fixture_index, trained_ckpt):
    cfg = trained_ckpt.config
    emb = select_with_single_image(
        fixture_index, trained_ckpt.class_names, cfg.encoder, cfg.selection
    )
    image = fixture_index.load_image(1)
    with pytest.raises(DataError):
        infer(trained_ckpt, image, trained_ckpt.class_names + ["extra"], emb)


def test_infer_score_floor_can_empty_predictions(fixture_index, trained_ckpt):
    cfg = trained_ckpt.config
    emb = select_with_single_image(
        fixture_index, trained_ckpt.class_names, cfg.encoder, cfg.selection
    )
    image = fixture_index.load_image(1)
    preds = infer(trained_ckpt, image, trained_ckpt.class_names, emb, score_floor=2.0)
    assert preds == []


def test_infer_predictions_carry_vocabulary_names(fixture_index, trained_ckpt):
    cfg = trained_ckpt.config
    vocabulary = trained_ckpt.class_names + ["unseen thing", "another unseen"]
    emb = select_with_single_image(fixture_index, vocabulary, cfg.encoder, cfg.selection)
    image = fixture_index.load_image(2)
    preds = infer(trained_ckpt, image, vocabulary, emb, score_floor=0.0)
    assert preds, "a trained checkpoint with zero floor keeps some query"
    for p in preds:
        assert p.category in vocabulary
        assert p.mask.shape == (64, 64)
        assert 0.0 <= p.score <= 1.0
        assert p.image_id == 2


def test_open_vocabulary_resize_without_retraining(fixture_index):
    """Swapping vocabularies only changes the classification head width."""
    cfg = small_config()
    ckpt = train(cfg, fixture_index)
    model = ckpt.build_model()
    image = fixture_index.load_image(1)
    for extra in (0, 3, 7):
        vocab = ckpt.class_names + [f"novel {i}" for i in range(extra)]
        emb = select_with_single_image(fixture_index, vocab, cfg.encoder, cfg.selection)
        y, m = model.forward(image, emb)
        assert y.shape == (cfg.gpem.num_queries, len(vocab))
        assert m.shape == (cfg.gpem.num_queries, 16, 16)


def test_full_model_gradients_match_finite_differences():
    """Analytic gradients of the combined matching loss vs central
    differences, for every trainable parameter, float64, 16x16 input.

    The assignment is held fixed across probe evaluations: matching is a
    discrete choice, so the differentiable object is the loss at the
    current assignment (which is also what training backpropagates).
    """
    from oracles import central_difference_check
    from uwovis.encoders import ImageSample
    from uwovis.losses import hungarian_match, total_loss as tl

    cfg = tiny_run_config()
    model = Model(cfg)
    rng = np.random.default_rng(5)
    image = ImageSample(pixels=rng.random((16, 16, 3)), id="probe")
    encoded = model.encode(image)
    emb = rng.standard_normal((3, cfg.gpem.latent_dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    gt = np.zeros((2, 4, 4))
    gt[0, :2, :2] = 1.0
    gt[1, 2:, 1:3] = 1.0
    targets = TargetSet(class_ids=[0, 2], masks=gt)

    y0, m0 = model.forward_encoded(encoded, emb)
    fixed_assignment = hungarian_match(y0, m0, targets)

    def probe():
        y, m = model.forward_encoded(encoded, emb)
        loss, _ = tl(y, m, targets, assignment=fixed_assignment)
        return loss

    failures = central_difference_check(probe, model.parameters(), rtol=1e-4)
    assert not failures, failures[:8]
