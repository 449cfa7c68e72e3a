"""Attribute preference inference for one (user, item) pair.

The attention weights of the recommendation forward pass double as the
explanation: each attribute gets its weight, predicted class, confidence and
image-space bounding box, ranked by weight.  Weights are the raw softmax
outputs; no calibrated-probability claim is attached.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from saers.errors import DataError
from saers.localizer import localize_attribute
from saers.model import ModelParams, forward_batch, _stack_item
from saers.tensor_store import FeatureCatalog


@dataclass
class AttributeExplanation:
    name: str
    weight: float
    predicted_class: str
    class_confidence: float
    bbox: tuple[int, int, int, int]


@dataclass
class Explanation:
    """Ranked attribute weights with classes and boxes for one (user, item)."""

    user_id: str
    item_id: str
    score: float
    image_frame: tuple[int, int]
    attributes: list[AttributeExplanation]

    @property
    def top_attribute(self) -> str:
        return self.attributes[0].name

    def to_dict(self) -> dict:
        return {
            "user": self.user_id,
            "item": self.item_id,
            "score": self.score,
            "image_frame": list(self.image_frame),
            "attributes": [
                {"name": a.name, "weight": a.weight, "class": a.predicted_class,
                 "confidence": a.class_confidence, "bbox": list(a.bbox)}
                for a in self.attributes
            ],
        }


def explain(params: ModelParams, user: str, item: str, catalog: FeatureCatalog,
            image_frame: tuple[int, int] | None = None) -> Explanation:
    """Build the explanation for recommending ``item`` to ``user``.

    Weights come from the same forward pass that scores the pair.  Classes
    and confidences are read from the catalog; bounding boxes are read from
    the catalog or, when feature/gradient maps are present, localized on the
    fly.  The global-only variant has no attribute weights to report.
    """
    variant = params.config.variant
    if variant == "SAERS-SAF":
        raise DataError("variant 'SAERS-SAF' has no attribute attention; "
                        "explanations are unsupported")
    try:
        u_row = params.user_index[user]
    except KeyError:
        raise DataError(f"unknown user id {user!r}") from None
    try:
        item_feats = catalog.items[item]
    except KeyError:
        raise DataError(f"unknown item id {item!r}") from None

    frame = image_frame or catalog.image_frame
    if frame is None:
        raise DataError("image frame dimensions unknown; set catalog.image_frame "
                        "or pass image_frame")

    dt = params.config.np_dtype
    feats = _stack_item(item_feats, params.attribute_names, dt)
    g = np.asarray(item_feats.global_feat, dtype=dt)
    cache = forward_batch(params, params.U[u_row][None, :], feats[None], g[None])
    weights = cache.weights[0].astype(np.float64)
    score = float(cache.scores[0])

    entries = []
    for k, name in enumerate(params.attribute_names):
        if name not in item_feats.predicted_class:
            raise DataError(f"item {item!r} has no predicted class for attribute "
                            f"{name!r}; explanations need class metadata")
        cls = item_feats.predicted_class[name]
        conf = float(item_feats.class_confidence.get(name, 1.0))
        if name in item_feats.bbox:
            bbox = item_feats.bbox[name]
        elif name in item_feats.feature_maps:
            region, _ = localize_attribute(item_feats, name, frame)
            bbox = region.as_tuple()
        else:
            raise DataError(f"item {item!r} attribute {name!r} has neither a stored "
                            "bbox nor feature/gradient maps to localize")
        h, w = frame
        x0, y0, x1, y1 = bbox
        if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
            raise DataError(f"item {item!r} attribute {name!r}: bbox {bbox} outside "
                            f"image frame {frame}")
        entries.append(AttributeExplanation(name=name, weight=float(weights[k]),
                                            predicted_class=cls, class_confidence=conf,
                                            bbox=tuple(bbox)))
    entries.sort(key=lambda a: (-a.weight, a.name))
    return Explanation(user_id=user, item_id=item, score=score,
                       image_frame=tuple(frame), attributes=entries)


def write_explanation(expl: Explanation, path: str | Path) -> None:
    """Serialize with stable key order; weights keep full float precision."""
    Path(path).write_text(json.dumps(expl.to_dict(), indent=1))


def read_explanation(path: str | Path) -> Explanation:
    data = json.loads(Path(path).read_text())
    attrs = [AttributeExplanation(name=a["name"], weight=float(a["weight"]),
                                  predicted_class=a["class"],
                                  class_confidence=float(a["confidence"]),
                                  bbox=tuple(int(v) for v in a["bbox"]))
             for a in data["attributes"]]
    return Explanation(user_id=data["user"], item_id=data["item"],
                       score=float(data["score"]),
                       image_frame=tuple(int(v) for v in data["image_frame"]),
                       attributes=attrs)
