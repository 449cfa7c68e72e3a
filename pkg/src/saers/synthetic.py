"""Seeded synthetic corpus with planted attribute preferences.

Items carry one feature vector per attribute (a class prototype plus noise)
and a global feature encoding a population-wide quality scalar.  Each user
focuses on a couple of attributes with one preferred class each; purchase
histories are Gumbel-perturbed top-N draws of the ground-truth utility

    utility(u, i) = focus_strength * #matched focus classes + quality_weight * q_i

so attribute-aware models can separate preferred items while content-free
models see no signal on items outside the training interactions.  Everything
is deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from saers.tensor_store import FeatureCatalog, ItemFeatures, write_feature_manifest

ATTRIBUTE_CLASSES: dict[str, list[str]] = {
    "high_neck": ["ruffle_semi_high", "turtle", "plain_semi_high", "none"],
    "collar": ["rib", "puritan", "shirt", "none"],
    "lapel": ["notched", "shawl", "collarless", "peak"],
    "neckline": ["v", "square", "round", "boat"],
    "sleeves_length": ["sleeveless", "short", "three_quarter", "long"],
    "body_length": ["high_waist", "regular", "long", "cropped"],
    "skirt_length": ["short", "knee", "midi", "ankle"],
    "trousers_length": ["short", "mid", "three_quarter", "full"],
    "heel_height": ["flat", "low", "mid", "high"],
    "boots_height": ["ankle", "mid_calf", "knee", "over_knee"],
    "closure": ["lace_up", "slip_on", "zipper", "buckle"],
    "toe_style": ["round", "pointed", "peep", "open"],
}

ATTRIBUTE_NAMES = list(ATTRIBUTE_CLASSES)


@dataclass
class SyntheticSpec:
    n_users: int = 700
    n_items: int = 7000
    m: int = 12
    m_g: int = 8
    min_interactions: int = 12
    max_interactions: int = 20
    n_focus: int = 2
    focus_strength: float = 5.0
    quality_weight: float = 2.0
    feature_noise: float = 0.1
    global_noise: float = 0.15
    gumbel_scale: float = 1.0
    image_frame: tuple[int, int] = (96, 96)
    seed: int = 0


@dataclass
class GroundTruth:
    """Planted preferences kept around for test assertions."""

    item_class: np.ndarray      # (n_items, A) class index per attribute
    quality: np.ndarray         # (n_items,)
    focus_attrs: np.ndarray     # (n_users, n_focus) attribute indices
    focus_class: np.ndarray     # (n_users, n_focus) preferred class indices
    utility: np.ndarray         # (n_users, n_items)


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    catalog: FeatureCatalog
    interactions: list[tuple[str, str]]
    truth: GroundTruth
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)


def _region_boxes(frame: tuple[int, int], n: int) -> list[tuple[int, int, int, int]]:
    """A 4x3 grid of canonical attribute regions inside the image frame."""
    h, w = frame
    rows, cols = 4, 3
    boxes = []
    for k in range(n):
        r, c = divmod(k, cols)
        y0, y1 = r * h // rows, (r + 1) * h // rows - 1
        x0, x1 = c * w // cols, (c + 1) * w // cols - 1
        boxes.append((x0, y0, x1, y1))
    return boxes


def generate_corpus(spec: SyntheticSpec) -> SyntheticCorpus:
    rng = np.random.default_rng(spec.seed)
    A = len(ATTRIBUTE_NAMES)
    n_classes = min(len(v) for v in ATTRIBUTE_CLASSES.values())

    # Orthonormal class prototypes within each attribute keep classes
    # linearly separable at modest feature dimensions.
    prototypes = np.empty((A, n_classes, spec.m))
    for k in range(A):
        q, _ = np.linalg.qr(rng.normal(size=(spec.m, n_classes)))
        prototypes[k] = q.T

    item_class = rng.integers(n_classes, size=(spec.n_items, A))
    quality = rng.normal(size=spec.n_items)
    g_dir = rng.normal(size=spec.m_g)
    g_dir /= np.linalg.norm(g_dir)

    feats = prototypes[np.arange(A)[None, :], item_class] \
        + spec.feature_noise * rng.normal(size=(spec.n_items, A, spec.m))
    globals_ = quality[:, None] * g_dir[None, :] \
        + spec.global_noise * rng.normal(size=(spec.n_items, spec.m_g))

    focus_attrs = np.stack([rng.choice(A, size=spec.n_focus, replace=False)
                            for _ in range(spec.n_users)])
    focus_class = rng.integers(n_classes, size=(spec.n_users, spec.n_focus))

    utility = np.broadcast_to(spec.quality_weight * quality,
                              (spec.n_users, spec.n_items)).copy()
    for f in range(spec.n_focus):
        matched = item_class[:, focus_attrs[:, f]].T == focus_class[:, f][:, None]
        utility += spec.focus_strength * matched

    user_ids = [f"u{k:04d}" for k in range(spec.n_users)]
    item_ids = [f"i{k:05d}" for k in range(spec.n_items)]

    interactions: list[tuple[str, str]] = []
    for u in range(spec.n_users):
        n_u = int(rng.integers(spec.min_interactions, spec.max_interactions + 1))
        perturbed = utility[u] + rng.gumbel(0.0, spec.gumbel_scale, size=spec.n_items)
        picks = np.argpartition(perturbed, -n_u)[-n_u:]
        for it in sorted(picks.tolist()):
            interactions.append((user_ids[u], item_ids[it]))

    boxes = _region_boxes(spec.image_frame, A)
    confidences = rng.uniform(0.7, 1.0, size=(spec.n_items, A))
    items: dict[str, ItemFeatures] = {}
    for i, item_id in enumerate(item_ids):
        attr_feats = {name: feats[i, k].astype(np.float32)
                      for k, name in enumerate(ATTRIBUTE_NAMES)}
        item = ItemFeatures(attr_feats=attr_feats,
                            global_feat=globals_[i].astype(np.float32))
        for k, name in enumerate(ATTRIBUTE_NAMES):
            item.predicted_class[name] = ATTRIBUTE_CLASSES[name][int(item_class[i, k])]
            item.class_confidence[name] = float(round(confidences[i, k], 6))
            item.bbox[name] = boxes[k]
        items[item_id] = item

    catalog = FeatureCatalog(
        attribute_names=list(ATTRIBUTE_NAMES),
        attribute_classes={k: list(v) for k, v in ATTRIBUTE_CLASSES.items()},
        m=spec.m, m_g=spec.m_g, items=items, image_frame=spec.image_frame)
    truth = GroundTruth(item_class=item_class, quality=quality,
                        focus_attrs=focus_attrs, focus_class=focus_class,
                        utility=utility)
    return SyntheticCorpus(spec=spec, catalog=catalog, interactions=interactions,
                           truth=truth, user_ids=user_ids, item_ids=item_ids)


def write_interactions(interactions: list[tuple[str, str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# user_id<TAB>item_id\n")
        for user, item in interactions:
            f.write(f"{user}\t{item}\n")


def write_corpus(corpus: SyntheticCorpus, directory: str | Path) -> None:
    """Materialize the corpus: features/manifest.json + interactions.tsv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_feature_manifest(corpus.catalog, directory / "features")
    write_interactions(corpus.interactions, directory / "interactions.tsv")
