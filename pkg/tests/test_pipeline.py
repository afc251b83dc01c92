import numpy as np
import pytest

from cnneelm.network import forward
from cnneelm.pipeline import (
    STAGES,
    ModelBundle,
    PreprocessSettings,
    batch_inputs,
    classify_image,
    head_scores,
    image_input,
    predict_inputs,
    standardize_stack,
)


class TestStandardize:
    def test_zero_mean_unit_variance(self, rng):
        x = standardize_stack(3 + 2 * rng.random((2, 9, 12, 12)))
        for s in x:
            assert abs(s.mean()) < 1e-12 and s.std() == pytest.approx(1.0)

    def test_constant_stack_maps_to_zero(self):
        assert not standardize_stack(np.full((9, 4, 4), 0.7)).any()


class TestImageInput:
    def test_shape_and_determinism(self, tiny_ds):
        a = image_input(tiny_ds.images[0])
        assert a.shape == (9, 12, 12)
        assert np.array_equal(a, image_input(tiny_ds.images[0]))

    def test_unstandardized_patches_come_from_image(self, tiny_ds):
        img = tiny_ds.images[3]
        x = image_input(img, PreprocessSettings(standardize=False))
        assert x.min() >= img.min() and x.max() <= img.max()

    def test_batch(self, tiny_ds):
        xs = batch_inputs(tiny_ds.images[:4])
        assert xs.shape == (4, 9, 12, 12)
        assert np.array_equal(xs[2], image_input(tiny_ds.images[2]))

    def test_input_shape(self):
        assert PreprocessSettings(patch_count=4, patch_size=8).input_shape == (4, 8, 8)


class TestBundle:
    def test_unknown_head(self, tiny_bundles):
        with pytest.raises(ValueError):
            ModelBundle(tiny_bundles["elm"].network, "baseline", "svm", None)

    def test_softmax_scores_are_probabilities(self, tiny_ds, tiny_bundles):
        b = tiny_bundles["softmax"]
        trace = forward(b.network, batch_inputs(tiny_ds.images[:3]), b.activation)
        s = head_scores(b, trace)
        assert np.allclose(s.sum(axis=1), 1) and np.allclose(s, trace.probs)

    def test_forest_scores_are_probabilities(self, tiny_ds, tiny_bundles):
        s, labels = predict_inputs(tiny_bundles["forest"], batch_inputs(tiny_ds.images[:3]))
        assert np.allclose(s.sum(axis=1), 1, atol=1e-8)
        assert labels.tolist() == np.argmax(s, axis=1).tolist()


class TestClassifyImage:
    @pytest.mark.parametrize("kind", ["softmax", "forest", "elm"])
    def test_matches_batch_path(self, tiny_ds, tiny_bundles, kind):
        b = tiny_bundles[kind]
        img = tiny_ds.images[5]
        res = classify_image(b, img)
        scores, labels = predict_inputs(b, image_input(img)[None])
        assert res.label == labels[0]
        assert np.allclose(res.scores, scores[0], atol=1e-12)

    def test_stage_timing(self, tiny_ds, tiny_bundles):
        res = classify_image(tiny_bundles["elm"], tiny_ds.images[0])
        assert tuple(res.stage_ms) == STAGES
        assert all(v >= 0 for v in res.stage_ms.values())
        assert sum(res.stage_ms.values()) == pytest.approx(res.total_ms, rel=1e-9)

    def test_resizes_other_sizes(self, tiny_ds, tiny_bundles, rng):
        res = classify_image(tiny_bundles["elm"], rng.random((64, 80)))
        assert 0 <= res.label < 6
