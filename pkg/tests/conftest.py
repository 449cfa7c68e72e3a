import numpy as np
import pytest

from saers.tensor_store import FeatureCatalog, InteractionDataset, ItemFeatures

FIXTURES = __file__.rsplit("/", 1)[0] + "/fixtures"


def tiny_catalog(n_items=6, n_attributes=3, m=5, m_g=4, seed=0,
                 with_metadata=False, image_frame=None):
    """In-memory catalog with random features for unit tests."""
    rng = np.random.default_rng(seed)
    names = [f"attr{k:02d}" for k in range(n_attributes)]
    classes = {n: ["c0", "c1", "c2"] for n in names}
    items = {}
    for i in range(n_items):
        item = ItemFeatures(
            attr_feats={n: rng.normal(size=m) for n in names},
            global_feat=rng.normal(size=m_g))
        if with_metadata:
            for k, n in enumerate(names):
                item.predicted_class[n] = classes[n][int(rng.integers(3))]
                item.class_confidence[n] = float(rng.uniform(0.5, 1.0))
                item.bbox[n] = (2 * k, 1, 2 * k + 3, 6)
        items[f"it{i:03d}"] = item
    return FeatureCatalog(attribute_names=names, attribute_classes=classes,
                          m=m, m_g=m_g, items=items, image_frame=image_frame)


def tiny_interactions(n_users=4, n_items=6, per_user=5, seed=0):
    """Interaction dataset where every user has ``per_user`` distinct items."""
    rng = np.random.default_rng(seed)
    item_ids = [f"it{i:03d}" for i in range(n_items)]
    users = {}
    for u in range(n_users):
        picks = rng.choice(n_items, size=per_user, replace=False)
        users[f"u{u:02d}"] = frozenset(item_ids[p] for p in picks)
    counts = {}
    for its in users.values():
        for it in its:
            counts[it] = counts.get(it, 0) + 1
    return InteractionDataset(users=users, items=frozenset(counts), counts=counts)


@pytest.fixture
def catalog():
    return tiny_catalog()
