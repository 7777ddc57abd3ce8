"""Estimator front end: fit/predict surface, cloning, and validation."""
import numpy as np
import pytest
from sklearn.base import clone

from nerdseg.errors import ConfigError, ShapeError
from nerdseg.estimator import NerdSegmenter


def _toy_stacks(rng, count, size=32):
    images = np.zeros((count, size, size, 1), dtype=np.float32)
    labels = np.zeros((count, size, size), dtype=np.uint8)
    for i in range(count):
        r, c = rng.integers(4, size - 12, size=2)
        images[i, r : r + 8, c : c + 8, 0] = 1.0
        labels[i, r : r + 8, c : c + 8] = 1
    images += rng.normal(0, 0.02, size=images.shape).astype(np.float32)
    return images.clip(0, 1), labels


def _quick_estimator(**kw):
    base = dict(head="nerdc", filters=(2, 2, 4, 4, 4), norm="none",
                calibrator_hidden=(8,), base_lr=1e-2, weight_decay=0.0,
                batch_size=4, epochs=2, seed=0)
    base.update(kw)
    return NerdSegmenter(**base)


def test_fit_predict_score(rng):
    images, labels = _toy_stacks(rng, 10)
    est = _quick_estimator()
    fitted = est.fit(images[:8], labels[:8], images[8:], labels[8:])
    assert fitted is est
    assert est.n_features_in_ == 1
    assert len(est.history_.records) == 2
    assert 0.0 <= est.best_val_dice_ <= 1.0
    masks = est.predict(images[8:])
    assert masks.shape == (2, 32, 32)
    assert masks.dtype == bool
    score = est.score(images[8:], labels[8:])
    assert 0.0 <= score <= 1.0
    proba = est.predict_proba(images[8:])
    assert proba.shape == (2, 32, 32)
    assert proba.min() >= 0.0 and proba.max() <= 1.0
    np.testing.assert_array_equal(masks, proba >= est.threshold)


def test_accepts_unchannelled_images(rng):
    images, labels = _toy_stacks(rng, 6)
    est = _quick_estimator().fit(images[..., 0], labels)
    assert est.n_features_in_ == 1
    assert est.predict(images[:2, ..., 0]).shape == (2, 32, 32)


def test_auto_validation_split_is_seeded(rng):
    images, labels = _toy_stacks(rng, 10)
    a = _quick_estimator(seed=3).fit(images, labels)
    b = _quick_estimator(seed=3).fit(images, labels)
    assert a.best_val_dice_ == b.best_val_dice_
    for (name, pa), (_, pb) in zip(a.model_.state_dict().items(),
                                   b.model_.state_dict().items()):
        assert pa.equal(pb), name
    c = _quick_estimator(seed=4).fit(images, labels)
    assert any(
        not pa.equal(pc)
        for (_, pa), (_, pc) in zip(a.model_.state_dict().items(),
                                    c.model_.state_dict().items())
    )


def test_clone_and_params_roundtrip():
    est = _quick_estimator(head="nerdm", positive_scale=True, epochs=7)
    params = est.get_params()
    assert params["head"] == "nerdm"
    assert params["positive_scale"] is True
    assert params["epochs"] == 7
    assert params["filters"] == (2, 2, 4, 4, 4)
    duplicate = clone(est)
    assert duplicate.get_params() == params
    assert not hasattr(duplicate, "model_")
    est.set_params(head="baseline")
    assert est.get_params()["head"] == "baseline"


def test_all_heads_fit(rng):
    images, labels = _toy_stacks(rng, 6)
    for head in ("baseline", "nerdm", "nerdc"):
        est = _quick_estimator(head=head, epochs=1).fit(images, labels)
        assert est.predict(images[:1]).shape == (1, 32, 32)


def test_parameter_overhead(rng):
    images, labels = _toy_stacks(rng, 6)
    est = _quick_estimator(epochs=1).fit(images, labels)
    counts = est.parameter_overhead()
    assert set(counts) == {"total", "calibrator", "backbone"}
    assert counts["calibrator"] > 0
    assert counts["backbone"] + counts["calibrator"] == counts["total"]


def test_validation_errors(rng):
    images, labels = _toy_stacks(rng, 6)
    with pytest.raises(ConfigError, match="together or neither"):
        _quick_estimator().fit(images, labels, X_val=images[:1])
    with pytest.raises(ShapeError, match="does not match images"):
        _quick_estimator().fit(images, labels[:, :16, :16])
    with pytest.raises(ConfigError, match="at least 2 samples"):
        _quick_estimator().fit(images[:1], labels[:1])
    with pytest.raises(ConfigError, match="leaves no training data"):
        _quick_estimator(validation_fraction=0.95).fit(images[:2], labels[:2])
    with pytest.raises(ConfigError, match="not fitted"):
        _quick_estimator().predict(images)
    with pytest.raises(ConfigError, match="not fitted"):
        _quick_estimator().parameter_overhead()
