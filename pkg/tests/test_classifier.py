import numpy as np
import pytest
import torch

from transocc.classifier import (ClassifierConfig, CorruptModelError, DimensionError, ModelVersionError,
                                 TrainConfig, TrainingError, build_network, expanded_batch, load_model,
                                 model_from_bytes, model_to_bytes, predict_proba, save_model, train,
                                 write_loss_log)
from transocc.scoring import probability_matrix
from transocc.transforms import LinearMagnificationSpec, TransformSet, preset


def test_configs_validate():
    with pytest.raises(ValueError):
        ClassifierConfig(n_classes=1, input_dims=(8, 8, 1))
    with pytest.raises(ValueError):
        ClassifierConfig(n_classes=3, input_dims=(8, 8, 1), architecture="wide_residual", depth=15)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    assert TrainConfig().learning_rate == 2e-4 and TrainConfig().batch_size == 128


def test_expanded_dataset_size_and_balance():
    images = np.zeros((1500, 2, 2, 1), dtype=np.float32)
    ts = preset("LM(5,0)")
    x, y = expanded_batch(images, ts, np.arange(1500 * ts.n))
    assert len(x) == 7500
    assert np.bincount(y).tolist() == [1500] * 5


def test_expanded_batch_uses_scoring_transforms(rng):
    images = rng.random((3, 4, 4, 1), dtype=np.float32)
    ts = preset("LM(5,2)")
    x, y = expanded_batch(images, ts, np.array([7, 0, 14]))
    # pair k -> image k // n, transform k % n
    assert y.tolist() == [2, 0, 4]
    assert np.array_equal(x[0], images[1])
    assert np.array_equal(x[2], np.clip(np.float32(1.4) * images[2] - np.float32(0.4), 0, 1))


def test_memorises_one_image():
    ts = TransformSet("pair", (LinearMagnificationSpec(1, 0), LinearMagnificationSpec(1.5, 0.1)))
    image = np.random.default_rng(0).uniform(0.2, 0.6, (1, 8, 8, 1)).astype(np.float32)
    model = train(image, ts, ClassifierConfig(2, (8, 8, 1)), TrainConfig(learning_rate=1e-2, epochs=60))
    x, y = expanded_batch(image, ts, np.arange(2))
    assert (model.predict_proba(x).argmax(1) == y).mean() == 1.0


def test_seeded_training_is_deterministic(small_splits):
    images = small_splits[0].images[:40]
    ts = preset("LM(3,0)")
    cc = ClassifierConfig(3, images.shape[1:], seed=3)
    a = train(images, ts, cc, TrainConfig(epochs=3, batch_size=32))
    b = train(images, ts, cc, TrainConfig(epochs=3, batch_size=32))
    assert a.loss_curve == b.loss_curve
    assert a.model_id == b.model_id
    assert abs(a.loss_curve[-1] - b.loss_curve[-1]) < 1e-6
    c = train(images, ts, ClassifierConfig(3, images.shape[1:], seed=4), TrainConfig(epochs=3, batch_size=32))
    assert c.loss_curve != a.loss_curve


def test_training_does_not_touch_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    train(np.full((2, 4, 4, 1), 0.5, np.float32), preset("LM(3,0)"), ClassifierConfig(3, (4, 4, 1)),
          TrainConfig(epochs=1))
    assert torch.equal(torch.rand(3), expected)


def test_loss_curve_is_finite_and_decreases(small_model):
    curve = small_model.loss_curve
    assert len(curve) == 25 and np.isfinite(curve).all()
    assert curve[-1] <= small_model.initial_loss


def test_recognises_training_pairs(small_model, small_splits):
    images = small_splits[0].images
    x, y = expanded_batch(images, small_model.transform_set, np.arange(len(images) * 5))
    assert (small_model.predict_proba(x).argmax(1) == y).mean() >= 0.9


def test_predict_proba_is_a_distribution(small_model, small_splits, rng):
    for images in (small_splits[1].images, rng.random((20, 16, 16, 1), dtype=np.float32),
                   np.zeros((2, 16, 16, 1), np.float32), np.ones((2, 16, 16, 1), np.float32)):
        p = predict_proba(small_model, images)
        assert p.shape == (len(images), 5)
        assert (p >= 0).all() and np.abs(p.sum(1) - 1).max() < 1e-6


def test_batching_matches_single_and_permutes(small_model, small_splits):
    images = small_splits[1].images[:12]
    batched = small_model.predict_proba(images)
    single = np.concatenate([small_model.predict_proba(images[i:i + 1]) for i in range(12)])
    np.testing.assert_allclose(batched, single, atol=1e-6)
    perm = np.random.default_rng(0).permutation(12)
    np.testing.assert_allclose(small_model.predict_proba(images[perm]), batched[perm], atol=1e-6)


def test_dimension_mismatch(small_model):
    with pytest.raises(DimensionError):
        small_model.predict_proba(np.zeros((1, 8, 8, 1), np.float32))
    with pytest.raises(DimensionError):
        train(np.zeros((2, 16, 16, 1), np.float32), preset("LM(3,0)"), ClassifierConfig(5, (16, 16, 1)),
              TrainConfig(epochs=1))


def test_empty_training_set():
    with pytest.raises(ValueError, match="non-empty"):
        train(np.zeros((0, 4, 4, 1), np.float32), preset("LM(3,0)"), ClassifierConfig(3, (4, 4, 1)), TrainConfig())


def test_non_finite_loss_aborts():
    x = np.random.default_rng(0).random((4, 8, 8, 1), dtype=np.float32)
    with pytest.raises(TrainingError, match="non-finite loss"):
        train(x, preset("LM(5,2)"), ClassifierConfig(5, (8, 8, 1)), TrainConfig(epochs=5, learning_rate=1e30))


class TestPersistence:
    def test_round_trip(self, small_model, tmp_path, rng):
        digest = save_model(small_model, tmp_path / "model.bin")
        assert len(digest) == 64
        loaded = load_model(tmp_path / "model.bin")
        images = rng.random((10, 16, 16, 1), dtype=np.float32)
        assert np.abs(loaded.predict_proba(images) - small_model.predict_proba(images)).max() < 1e-6
        assert loaded.transform_set == small_model.transform_set
        assert loaded.loss_curve == small_model.loss_curve
        assert loaded.dataset_hash == small_model.dataset_hash and loaded.model_id == small_model.model_id

    def test_truncated_file(self, small_model, tmp_path):
        data = model_to_bytes(small_model)
        for cut in (4, 20, len(data) // 2, len(data) - 1):
            (tmp_path / "t.bin").write_bytes(data[:cut])
            with pytest.raises(CorruptModelError):
                load_model(tmp_path / "t.bin")

    def test_flipped_byte(self, small_model):
        data = bytearray(model_to_bytes(small_model))
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(CorruptModelError):
            model_from_bytes(bytes(data))

    def test_version_mismatch(self, small_model):
        data = bytearray(model_to_bytes(small_model))
        data[8:12] = (99).to_bytes(4, "little")
        with pytest.raises(ModelVersionError):
            model_from_bytes(bytes(data))

    def test_five_class_model_against_four_transforms(self, small_model, tmp_path):
        save_model(small_model, tmp_path / "m.bin")
        loaded = load_model(tmp_path / "m.bin")
        with pytest.raises(DimensionError):
            probability_matrix(loaded, np.full((16, 16, 1), 0.5, np.float32), preset("R(4,0)"))

    def test_loss_log(self, small_model, tmp_path):
        write_loss_log(small_model, tmp_path / "loss.csv")
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss" and len(lines) == 27
        assert float(lines[-1].split(",")[1]) == small_model.loss_curve[-1]


def test_wide_residual_builds_and_trains():
    cc = ClassifierConfig(4, (16, 16, 3), architecture="wide_residual", depth=10, width_factor=1)
    net = build_network(cc)
    assert net(torch.zeros(2, 3, 16, 16)).shape == (2, 4)
    x = np.random.default_rng(0).random((6, 16, 16, 3), dtype=np.float32)
    model = train(x, preset("R(4,0)"), cc, TrainConfig(epochs=1, batch_size=8))
    p = model.predict_proba(x)
    assert np.abs(p.sum(1) - 1).max() < 1e-6
