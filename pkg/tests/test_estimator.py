import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from zsad.errors import DataError
from zsad.estimator import ZeroShotAnomalyDetector

TINY = dict(image_size=32, patch_size=4, vision_layers=2, vision_width=16,
            vision_heads=2, joint_dim=16, text_layers=2, text_width=16,
            k_layers=2, branches="e_attn", tuned_layers=1, prompt_length=4,
            deep_tokens_per_layer=2, batch_size=4, epochs=1, max_steps=2)


def tiny_detector(**overrides):
    return ZeroShotAnomalyDetector(**{**TINY, **overrides})


def toy_samples(n=8, size=32, seed=0):
    rng = np.random.default_rng(seed)
    images, labels, masks = [], [], []
    for i in range(n):
        image = np.full((size, size), 0.35) + rng.normal(0, 0.02, (size, size))
        mask = np.zeros((size, size))
        if i % 2:
            mask[10:20, 10:20] = 1
            image[10:20, 10:20] = 0.9
        images.append(np.clip(image, 0, 1))
        labels.append(i % 2)
        masks.append(mask if i % 2 else None)
    return images, labels, masks


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        det = tiny_detector()
        params = det.get_params()
        assert params["image_size"] == 32
        det.set_params(seed=7)
        assert det.get_params()["seed"] == 7

    def test_clone_preserves_params(self):
        det = tiny_detector(seed=5)
        other = clone(det)
        assert other.get_params() == det.get_params()

    def test_unfitted_raises(self):
        det = tiny_detector()
        with pytest.raises(NotFittedError):
            det.decision_function([np.zeros((32, 32))])
        with pytest.raises(NotFittedError):
            det.transform([np.zeros((32, 32))])


class TestFitAndScore:
    def test_fit_scores_and_maps(self):
        images, labels, masks = toy_samples()
        det = tiny_detector().fit(images, labels, masks=masks)
        assert det.n_steps_ == 2
        assert len(det.loss_trace_) == 2
        scores = det.decision_function(images)
        assert scores.shape == (8,)
        assert ((0.0 <= scores) & (scores <= 1.0)).all()
        preds = det.predict(images, threshold=float(np.median(scores)))
        assert set(preds.tolist()) <= {0, 1}
        maps = det.transform(images[:2], out_hw=(32, 32))
        assert all(m.shape == (32, 32) for m in maps)
        assert all(0.0 <= m.min() and m.max() <= 1.0 for m in maps)

    def test_grayscale_and_rgb_arrays_accepted(self):
        images, labels, masks = toy_samples(n=4)
        rgb = [np.stack([im] * 3, axis=-1) for im in images]
        det = tiny_detector().fit(rgb, labels, masks=masks)
        gray_scores = det.decision_function(images)
        rgb_scores = det.decision_function(rgb)
        assert np.allclose(gray_scores, rgb_scores, atol=1e-6)

    def test_anomalous_without_mask_rejected(self):
        images, labels, _ = toy_samples(n=4)
        det = tiny_detector()
        with pytest.raises(DataError, match="without a mask"):
            det.fit(images, labels)

    def test_length_mismatch_rejected(self):
        images, labels, masks = toy_samples(n=4)
        with pytest.raises(DataError, match="lengths differ"):
            tiny_detector().fit(images, labels[:-1], masks=masks)

    def test_seeded_fits_agree(self):
        images, labels, masks = toy_samples(n=4)
        s1 = tiny_detector().fit(images, labels, masks=masks).decision_function(images)
        s2 = tiny_detector().fit(images, labels, masks=masks).decision_function(images)
        assert np.array_equal(s1, s2)
