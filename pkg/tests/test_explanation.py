import json

import numpy as np
import pytest

from saers.errors import DataError
from saers.explanation import explain, read_explanation, write_explanation
from saers.model import ModelConfig, init_params, score_triple
from tests.conftest import tiny_catalog


def meta_catalog(seed=0, **kw):
    return tiny_catalog(n_items=5, n_attributes=3, m=5, m_g=4, seed=seed,
                        with_metadata=True, image_frame=(16, 16), **kw)


def make_params(catalog, variant="SAERS", seed=0, scale=1.0):
    config = ModelConfig(d=6, m=catalog.m, m_g=catalog.m_g,
                         n_attributes=catalog.n_attributes, variant=variant, dtype="f64")
    params = init_params(config, ["ua", "ub"], list(catalog.attribute_names), seed=seed)
    if scale != 1.0:
        for arr in params.arrays().values():
            arr *= scale
    return params


class TestExplain:
    def test_zero_attention_uniform_weights_with_name_tiebreak(self):
        catalog = meta_catalog()
        params = make_params(catalog)
        for name in ("W1", "b1", "w2", "b2"):
            params.arrays()[name][...] = 0.0
        expl = explain(params, "ua", catalog.item_ids()[0], catalog)
        weights = [a.weight for a in expl.attributes]
        np.testing.assert_allclose(weights, 1.0 / 3.0, atol=1e-12)
        assert [a.name for a in expl.attributes] == sorted(catalog.attribute_names)
        assert expl.top_attribute == sorted(catalog.attribute_names)[0]

    def test_weights_equal_forward_cache(self):
        catalog = meta_catalog(seed=1)
        params = make_params(catalog, seed=2, scale=60.0)
        item = catalog.item_ids()[1]
        expl = explain(params, "ub", item, catalog)
        _, _, cache, _ = score_triple(params, "ub", item, catalog.item_ids()[0], catalog)
        by_name = {a.name: a.weight for a in expl.attributes}
        for k, name in enumerate(params.attribute_names):
            assert by_name[name] == float(cache.weights[k])
        assert abs(expl.score - cache.score) < 1e-12

    def test_top_attribute_is_argmax(self):
        catalog = meta_catalog(seed=3)
        params = make_params(catalog, seed=4, scale=60.0)
        for item in catalog.item_ids():
            expl = explain(params, "ua", item, catalog)
            _, _, cache, _ = score_triple(params, "ua", item, catalog.item_ids()[0],
                                          catalog)
            argmax = params.attribute_names[int(np.argmax(cache.weights))]
            assert expl.top_attribute == argmax

    def test_planted_alignment_picks_focus_attribute(self):
        # hand-set params: attribute attr01's transferred feature is the only
        # one the attention MLP responds to
        catalog = meta_catalog(seed=5)
        params = make_params(catalog, seed=6)
        item_id = catalog.item_ids()[0]
        item = catalog.items[item_id]
        item.attr_feats["attr00"] = np.zeros(5)
        item.attr_feats["attr01"] = np.ones(5)
        item.attr_feats["attr02"] = np.zeros(5)
        d = params.config.d
        params.E[:] = 0.0
        params.E[1, 0, :] = 1.0          # transferred(attr01) = (5, 0, ...)
        params.W1[:] = 0.0
        params.W1[0, d] = 1.0            # first hidden unit reads transferred[0]
        params.b1[:] = 0.0
        params.w2[:] = 0.0
        params.w2[0] = 1.0               # logit = ReLU(transferred[0])
        params.b2[:] = 0.0
        expl = explain(params, "ua", item_id, catalog)
        assert expl.top_attribute == "attr01"
        # independent softmax evaluation: logits = (0, 5, 0)
        expected = np.exp([0.0, 5.0, 0.0])
        expected /= expected.sum()
        by_name = {a.weight: a.name for a in expl.attributes}
        assert abs(max(by_name) - expected[1]) < 1e-12

    def test_weights_sum_to_one(self):
        catalog = meta_catalog(seed=7)
        params = make_params(catalog, seed=8, scale=80.0)
        for item in catalog.item_ids():
            expl = explain(params, "ua", item, catalog)
            assert abs(sum(a.weight for a in expl.attributes) - 1.0) <= 1e-6

    def test_global_only_variant_unsupported(self):
        catalog = meta_catalog(seed=9)
        params = make_params(catalog, variant="SAERS-SAF")
        with pytest.raises(DataError, match="unsupported"):
            explain(params, "ua", catalog.item_ids()[0], catalog)

    def test_missing_class_metadata_rejected(self):
        catalog = tiny_catalog(n_items=2, n_attributes=3, with_metadata=False,
                               image_frame=(16, 16))
        params = make_params(catalog)
        with pytest.raises(DataError, match="class"):
            explain(params, "ua", catalog.item_ids()[0], catalog)

    def test_missing_frame_rejected(self):
        catalog = meta_catalog(seed=10)
        catalog.image_frame = None
        params = make_params(catalog)
        with pytest.raises(DataError, match="frame"):
            explain(params, "ua", catalog.item_ids()[0], catalog)

    def test_bbox_computed_from_maps_when_absent(self):
        catalog = meta_catalog(seed=11)
        params = make_params(catalog)
        item_id = catalog.item_ids()[0]
        item = catalog.items[item_id]
        rng = np.random.default_rng(12)
        for name in catalog.attribute_names:
            del item.bbox[name]
            F = np.zeros((2, 4, 4))
            F[0, 1:3, 1:3] = 1.0
            item.feature_maps[name] = F
            item.grad_maps[name] = np.abs(rng.normal(size=(2, 4, 4)))
        expl = explain(params, "ua", item_id, catalog)
        h, w = catalog.image_frame
        for a in expl.attributes:
            x0, y0, x1, y1 = a.bbox
            assert 0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h


class TestSerialization:
    def _expl(self):
        catalog = meta_catalog(seed=13)
        params = make_params(catalog, seed=14, scale=60.0)
        return explain(params, "ua", catalog.item_ids()[0], catalog)

    def test_round_trip(self, tmp_path):
        expl = self._expl()
        write_explanation(expl, tmp_path / "e.json")
        back = read_explanation(tmp_path / "e.json")
        assert back.user_id == expl.user_id and back.item_id == expl.item_id
        assert back.image_frame == expl.image_frame
        assert [(a.name, a.weight, a.bbox) for a in back.attributes] == \
            [(a.name, a.weight, a.bbox) for a in expl.attributes]

    def test_schema_and_precision(self, tmp_path):
        expl = self._expl()
        write_explanation(expl, tmp_path / "e.json")
        data = json.loads((tmp_path / "e.json").read_text())
        assert set(data) == {"user", "item", "score", "image_frame", "attributes"}
        for a in data["attributes"]:
            assert set(a) == {"name", "weight", "class", "confidence", "bbox"}
        total = sum(a["weight"] for a in data["attributes"])
        assert abs(total - 1.0) <= 1e-5

    def test_bbox_integers_within_frame(self, tmp_path):
        expl = self._expl()
        write_explanation(expl, tmp_path / "e.json")
        data = json.loads((tmp_path / "e.json").read_text())
        h, w = data["image_frame"]
        for a in data["attributes"]:
            x0, y0, x1, y1 = a["bbox"]
            assert all(isinstance(v, int) for v in a["bbox"])
            assert 0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h
