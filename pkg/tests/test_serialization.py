import json

import numpy as np
import pytest

from cnneelm.pipeline import classify_image
from cnneelm.serialization import (
    FORMAT_VERSION,
    FormatVersionError,
    MissingFieldError,
    ModelFormatError,
    NonFiniteError,
    ShapeError,
    bundle_to_dict,
    dumps,
    load_model,
    loads,
    save_model,
)

KINDS = ["softmax", "forest", "elm"]


@pytest.fixture(params=KINDS)
def bundle(request, tiny_bundles):
    return tiny_bundles[request.param]


class TestRoundTrip:
    def test_save_load_save_byte_identical(self, bundle, tmp_path):
        a = save_model(bundle, tmp_path / "a.json")
        b = save_model(load_model(a), tmp_path / "b.json")
        assert a.read_bytes() == b.read_bytes()

    def test_values_preserved_exactly(self, bundle):
        back = loads(dumps(bundle))
        assert np.array_equal(back.network.flat(), bundle.network.flat())
        assert back.settings == bundle.settings and back.class_names == bundle.class_names
        assert back.activation is bundle.activation and back.seed == bundle.seed

    def test_predictions_preserved(self, bundle, tiny_ds):
        back = loads(dumps(bundle))
        img = tiny_ds.images[7]
        assert np.array_equal(classify_image(back, img).scores, classify_image(bundle, img).scores)

    def test_canonical_text(self, bundle):
        text = dumps(bundle)
        assert text.endswith("\n") and "\n" not in text[:-1]
        doc = json.loads(text)
        assert doc["formatVersion"] == FORMAT_VERSION
        assert text == json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"

    def test_document_fields(self, tiny_bundles):
        doc = bundle_to_dict(tiny_bundles["elm"])
        assert {"formatVersion", "activation", "headKind", "classNames", "seed", "settings", "network", "head"} <= set(doc)
        assert doc["head"]["type"] == "elm"
        assert bundle_to_dict(tiny_bundles["softmax"])["head"] is None


def corrupt(bundle, edit):
    doc = json.loads(dumps(bundle))
    edit(doc)
    return json.dumps(doc)


class TestRejection:
    def test_truncated_file(self, tiny_bundles):
        text = dumps(tiny_bundles["elm"])
        with pytest.raises(FormatVersionError, match="format version"):
            loads(text[: len(text) // 2])

    def test_not_json(self):
        with pytest.raises(FormatVersionError, match="format version"):
            loads("hello")
        with pytest.raises(FormatVersionError):
            loads("[1, 2]")

    def test_wrong_version(self, tiny_bundles):
        text = corrupt(tiny_bundles["elm"], lambda d: d.update(formatVersion=99))
        with pytest.raises(FormatVersionError, match="99"):
            loads(text)

    @pytest.mark.parametrize("field", ["network", "classNames", "settings", "seed", "formatVersion"])
    def test_missing_top_level_field(self, tiny_bundles, field):
        text = corrupt(tiny_bundles["forest"], lambda d: d.pop(field))
        with pytest.raises(MissingFieldError, match=field):
            loads(text)

    def test_missing_nested_field_named(self, tiny_bundles):
        text = corrupt(tiny_bundles["elm"], lambda d: d["head"].pop("outputWeights"))
        with pytest.raises(MissingFieldError, match="head.outputWeights"):
            loads(text)
        text = corrupt(tiny_bundles["forest"], lambda d: d["head"]["trees"][1].pop("leafDists"))
        with pytest.raises(MissingFieldError, match=r"head.trees\[1\].leafDists"):
            loads(text)

    def test_missing_head_payload(self, tiny_bundles):
        with pytest.raises(MissingFieldError, match="head"):
            loads(corrupt(tiny_bundles["elm"], lambda d: d.update(head=None)))

    @pytest.mark.parametrize("token", ["NaN", "Infinity", "-Infinity"])
    def test_non_finite_value(self, tiny_bundles, token):
        text = dumps(tiny_bundles["elm"])
        doc = json.loads(text)
        first = repr(doc["network"]["layers"][0]["weights"]["data"][0])
        with pytest.raises(NonFiniteError):
            loads(text.replace(first, token, 1))

    def test_non_finite_not_saved(self, tiny_bundles, tmp_path):
        b = tiny_bundles["softmax"]
        bad = b.network.copy()
        bad.layers[0].bias[0] = np.inf
        from dataclasses import replace

        with pytest.raises(NonFiniteError):
            save_model(replace(b, network=bad), tmp_path / "x.json")

    def test_shape_mismatch(self, tiny_bundles):
        def shrink(d):
            d["network"]["layers"][0]["weights"]["data"].pop()

        with pytest.raises(ShapeError, match="layers"):
            loads(corrupt(tiny_bundles["elm"], shrink))

    def test_inconsistent_elm_width(self, tiny_bundles):
        def widen(d):
            w = d["head"]["outputWeights"]
            w["shape"][1] += 1
            w["data"] += [0.0] * w["shape"][0]

        with pytest.raises(ShapeError):
            loads(corrupt(tiny_bundles["elm"], widen))

    def test_forest_split_out_of_range(self, tiny_bundles):
        def bad_split(d):
            d["head"]["trees"][0]["splitFeatures"]["data"][0] = 10_000

        with pytest.raises(ShapeError, match="out of range"):
            loads(corrupt(tiny_bundles["forest"], bad_split))

    def test_unknown_head_kind(self, tiny_bundles):
        with pytest.raises(ModelFormatError):
            loads(corrupt(tiny_bundles["elm"], lambda d: d.update(headKind="svm")))

    def test_all_errors_are_value_errors(self):
        for cls in (FormatVersionError, MissingFieldError, ShapeError, NonFiniteError):
            assert issubclass(cls, ModelFormatError) and issubclass(cls, ValueError)
