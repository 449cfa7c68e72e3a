"""Tensor serialization, feature catalogs, interaction ingestion and splits.

The on-disk tensor container is one ``.sat`` file per tensor plus a JSON
manifest.  The ``.sat`` layout is fixed and bit-exact:

    offset 0   magic "SAT1"
    offset 4   dtype code, 1 octet (1 = float32, 2 = float64)
    offset 5   ndim, 1 octet
    offset 6   2 reserved zero octets
    offset 8   ndim little-endian uint64 dimension sizes
    then       raw little-endian row-major payload

NaN/Inf are rejected at the I/O boundary in both directions so downstream
numerics can assume finite values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from saers.errors import DataError, TensorFormatError

SAT_MAGIC = b"SAT1"

_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


# ---------------------------------------------------------------------------
# .sat tensor files
# ---------------------------------------------------------------------------

def write_tensor(path: str | Path, t: np.ndarray) -> None:
    """Write a float32/float64 tensor to ``path`` in the ``.sat`` layout.

    Raises ``ValueError`` for unsupported dtypes, empty dimensions or
    non-finite payloads; round-trips bit-exactly through ``read_tensor``.
    """
    t = np.asarray(t)
    if t.dtype not in _DTYPE_TO_CODE:
        raise ValueError(f"unsupported tensor dtype {t.dtype}; expected float32 or float64")
    if any(dim < 1 for dim in t.shape):
        raise ValueError(f"tensor dimensions must be >= 1, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("refusing to write non-finite (NaN/Inf) tensor data")
    code = _DTYPE_TO_CODE[t.dtype]
    buf = np.ascontiguousarray(t).astype(t.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as f:
        f.write(SAT_MAGIC)
        f.write(struct.pack("<BBxx", code, t.ndim))
        f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        f.write(buf.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a ``.sat`` file back into a C-contiguous numpy array."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise TensorFormatError(f"{path}: file too short for a .sat header")
    if raw[:4] != SAT_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}, expected {SAT_MAGIC!r}")
    code, ndim = struct.unpack_from("<BBxx", raw, 4)
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    dtype = _CODE_TO_DTYPE[code]
    dims_end = 8 + 8 * ndim
    if len(raw) < dims_end:
        raise TensorFormatError(f"{path}: truncated dimension table")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 8)
    if any(dim < 1 for dim in shape):
        raise TensorFormatError(f"{path}: dimension sizes must be >= 1, got {shape}")
    n_elem = int(np.prod(shape, dtype=np.int64)) if shape else 1
    expected = dims_end + n_elem * dtype.itemsize
    if len(raw) < expected:
        raise TensorFormatError(
            f"{path}: truncated payload ({len(raw) - dims_end} bytes, "
            f"need {n_elem * dtype.itemsize})"
        )
    if len(raw) > expected:
        raise TensorFormatError(f"{path}: {len(raw) - expected} bytes of trailing data")
    data = np.frombuffer(raw, dtype=dtype, count=n_elem, offset=dims_end)
    out = data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
    if not np.all(np.isfinite(out)):
        raise TensorFormatError(f"{path}: payload contains NaN/Inf values")
    return out


# ---------------------------------------------------------------------------
# Feature catalogs
# ---------------------------------------------------------------------------

@dataclass
class ItemFeatures:
    """Per-item features: one vector per attribute plus a global vector.

    The map/class/bbox sub-dictionaries are optional and keyed by attribute
    name; ``feature_maps`` and ``grad_maps`` hold (T, H, W) tensors and, when
    both are present for an attribute, share their shape.
    """

    attr_feats: dict[str, np.ndarray]
    global_feat: np.ndarray
    feature_maps: dict[str, np.ndarray] = field(default_factory=dict)
    grad_maps: dict[str, np.ndarray] = field(default_factory=dict)
    predicted_class: dict[str, str] = field(default_factory=dict)
    class_confidence: dict[str, float] = field(default_factory=dict)
    bbox: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)


@dataclass
class FeatureCatalog:
    """All item features plus the attribute vocabulary.

    ``attribute_names`` fixes the canonical attribute order used everywhere
    (transfer matrices, attention weights, explanations).
    """

    attribute_names: list[str]
    attribute_classes: dict[str, list[str]]
    m: int
    m_g: int
    items: dict[str, ItemFeatures]
    image_frame: tuple[int, int] | None = None

    @property
    def n_attributes(self) -> int:
        return len(self.attribute_names)

    def item_ids(self) -> list[str]:
        return sorted(self.items)

    def validate(self) -> None:
        """Enforce catalog invariants, raising DataError on violation."""
        if len(set(self.attribute_names)) != len(self.attribute_names):
            raise DataError("duplicate attribute names in catalog")
        for name in self.attribute_names:
            if name not in self.attribute_classes:
                raise DataError(f"attribute {name!r} has no class list")
        for item_id, feats in self.items.items():
            missing = [n for n in self.attribute_names if n not in feats.attr_feats]
            if missing:
                raise DataError(f"item {item_id!r} is missing attribute vectors {missing}")
            unknown = [n for n in feats.attr_feats if n not in self.attribute_names]
            if unknown:
                raise DataError(f"item {item_id!r} has unknown attribute names {unknown}")
            for name, vec in feats.attr_feats.items():
                if vec.shape != (self.m,):
                    raise DataError(
                        f"item {item_id!r} attribute {name!r} has shape {vec.shape}, "
                        f"expected ({self.m},)"
                    )
            if feats.global_feat.shape != (self.m_g,):
                raise DataError(
                    f"item {item_id!r} global feature has shape "
                    f"{feats.global_feat.shape}, expected ({self.m_g},)"
                )
            for name in set(feats.feature_maps) | set(feats.grad_maps):
                fmap = feats.feature_maps.get(name)
                gmap = feats.grad_maps.get(name)
                if (fmap is None) != (gmap is None):
                    raise DataError(
                        f"item {item_id!r} attribute {name!r} has only one of F/G maps"
                    )
                if fmap is not None and fmap.shape != gmap.shape:
                    raise DataError(
                        f"item {item_id!r} attribute {name!r}: F shape {fmap.shape} "
                        f"!= G shape {gmap.shape}"
                    )
            for name, conf in feats.class_confidence.items():
                if not 0.0 <= conf <= 1.0:
                    raise DataError(
                        f"item {item_id!r} attribute {name!r} confidence {conf} not in [0,1]"
                    )

    def dense_features(self, item_ids: list[str], dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
        """Stack attribute and global features for ``item_ids``.

        Returns ``(feats, globals)`` with shapes (n, A, m) and (n, m_g).
        """
        A = self.n_attributes
        feats = np.empty((len(item_ids), A, self.m), dtype=dtype)
        glob = np.empty((len(item_ids), self.m_g), dtype=dtype)
        for row, item_id in enumerate(item_ids):
            try:
                item = self.items[item_id]
            except KeyError:
                raise DataError(f"item {item_id!r} has no features in the catalog") from None
            for k, name in enumerate(self.attribute_names):
                feats[row, k] = item.attr_feats[name]
            glob[row] = item.global_feat
        return feats, glob


def load_feature_manifest(directory: str | Path) -> FeatureCatalog:
    """Load ``manifest.json`` plus referenced ``.sat`` files from a directory.

    The manifest schema is::

        {"m": int, "m_g": int, "attribute_names": [12 strings],
         "attribute_classes": {name: [labels]},
         "items": {item_id: {"attrs": {name: path}, "global": path,
                             "maps": {name: {"F": path, "G": path,
                                             "class": label, "confidence": float,
                                             "bbox": [x0, y0, x1, y1]}}}}}

    plus an optional top-level ``"image_frame": [H, W]``.  All paths are
    relative to ``directory``.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no manifest.json in {directory}")
    try:
        spec = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc

    for key in ("m", "m_g", "attribute_names", "attribute_classes", "items"):
        if key not in spec:
            raise DataError(f"{manifest_path}: missing required key {key!r}")
    names = list(spec["attribute_names"])
    if len(names) != 12:
        raise DataError(f"{manifest_path}: expected 12 attribute names, got {len(names)}")
    classes = {str(k): [str(c) for c in v] for k, v in spec["attribute_classes"].items()}
    m, m_g = int(spec["m"]), int(spec["m_g"])
    frame = None
    if spec.get("image_frame") is not None:
        frame = (int(spec["image_frame"][0]), int(spec["image_frame"][1]))

    items: dict[str, ItemFeatures] = {}
    for item_id, entry in spec["items"].items():
        if "attrs" not in entry or "global" not in entry:
            raise DataError(f"item {item_id!r}: manifest entry needs 'attrs' and 'global'")
        attr_feats = {}
        for name, rel in entry["attrs"].items():
            if name not in names:
                raise DataError(f"item {item_id!r}: unknown attribute name {name!r}")
            attr_feats[name] = read_tensor(directory / rel)
        gvec = read_tensor(directory / entry["global"])
        feats = ItemFeatures(attr_feats=attr_feats, global_feat=gvec)
        for name, maps in entry.get("maps", {}).items():
            if name not in names:
                raise DataError(f"item {item_id!r}: unknown attribute name {name!r} in maps")
            if "F" in maps:
                feats.feature_maps[name] = read_tensor(directory / maps["F"])
            if "G" in maps:
                feats.grad_maps[name] = read_tensor(directory / maps["G"])
            if "class" in maps:
                feats.predicted_class[name] = str(maps["class"])
                if maps["class"] not in classes.get(name, []):
                    raise DataError(
                        f"item {item_id!r} attribute {name!r}: class {maps['class']!r} "
                        "not in the attribute's class list"
                    )
            if "confidence" in maps:
                feats.class_confidence[name] = float(maps["confidence"])
            if "bbox" in maps:
                bbox = maps["bbox"]
                if len(bbox) != 4:
                    raise DataError(f"item {item_id!r} attribute {name!r}: bbox must have 4 entries")
                feats.bbox[name] = tuple(int(v) for v in bbox)
        items[item_id] = feats

    catalog = FeatureCatalog(
        attribute_names=names,
        attribute_classes=classes,
        m=m,
        m_g=m_g,
        items=items,
        image_frame=frame,
    )
    catalog.validate()
    return catalog


def write_feature_manifest(catalog: FeatureCatalog, directory: str | Path) -> None:
    """Write a catalog as ``manifest.json`` plus one ``.sat`` per tensor."""
    catalog.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    attr_slug = {name: f"a{idx:02d}" for idx, name in enumerate(catalog.attribute_names)}
    manifest: dict = {
        "m": catalog.m,
        "m_g": catalog.m_g,
        "attribute_names": list(catalog.attribute_names),
        "attribute_classes": {k: list(v) for k, v in catalog.attribute_classes.items()},
        "items": {},
    }
    if catalog.image_frame is not None:
        manifest["image_frame"] = list(catalog.image_frame)
    for idx, item_id in enumerate(catalog.item_ids()):
        feats = catalog.items[item_id]
        item_dir = directory / "items" / f"{idx:06d}"
        item_dir.mkdir(parents=True, exist_ok=True)
        rel_dir = f"items/{idx:06d}"
        entry: dict = {"attrs": {}, "global": f"{rel_dir}/global.sat"}
        for name in catalog.attribute_names:
            rel = f"{rel_dir}/{attr_slug[name]}.sat"
            write_tensor(directory / rel, feats.attr_feats[name])
            entry["attrs"][name] = rel
        write_tensor(directory / entry["global"], feats.global_feat)
        maps_entry: dict = {}
        meta_names = (
            set(feats.feature_maps)
            | set(feats.predicted_class)
            | set(feats.class_confidence)
            | set(feats.bbox)
        )
        for name in sorted(meta_names):
            sub: dict = {}
            if name in feats.feature_maps:
                sub["F"] = f"{rel_dir}/{attr_slug[name]}.F.sat"
                sub["G"] = f"{rel_dir}/{attr_slug[name]}.G.sat"
                write_tensor(directory / sub["F"], feats.feature_maps[name])
                write_tensor(directory / sub["G"], feats.grad_maps[name])
            if name in feats.predicted_class:
                sub["class"] = feats.predicted_class[name]
            if name in feats.class_confidence:
                sub["confidence"] = feats.class_confidence[name]
            if name in feats.bbox:
                sub["bbox"] = list(feats.bbox[name])
            maps_entry[name] = sub
        if maps_entry:
            entry["maps"] = maps_entry
        manifest["items"][item_id] = entry
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# Interactions and splits
# ---------------------------------------------------------------------------

@dataclass
class InteractionDataset:
    """Implicit feedback: user -> set of interacted items, plus popularity.

    Duplicate records deduplicate to set membership; ``counts`` holds the
    number of retained users that interacted with each item.
    """

    users: dict[str, frozenset[str]]
    items: frozenset[str]
    counts: dict[str, int]

    @property
    def n_interactions(self) -> int:
        return sum(len(v) for v in self.users.values())


def load_interactions(path: str | Path, min_user_interactions: int = 5) -> InteractionDataset:
    """Parse a ``user<TAB>item`` TSV, dedup, and drop inactive users.

    Users with fewer than ``min_user_interactions`` distinct items after
    dedup are discarded.  Lines starting with ``#`` and blank lines are
    ignored.
    """
    users: dict[str, set[str]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: malformed interaction line {line!r}")
            users.setdefault(parts[0], set()).add(parts[1])

    kept = {u: frozenset(its) for u, its in users.items() if len(its) >= min_user_interactions}
    if not kept:
        raise DataError(f"{path}: no users with >= {min_user_interactions} interactions")
    counts: dict[str, int] = {}
    for its in kept.values():
        for item in its:
            counts[item] = counts.get(item, 0) + 1
    items = frozenset(counts)
    return InteractionDataset(users=kept, items=items, counts=counts)


@dataclass
class SplitDataset:
    """Leave-one-out split: train interactions plus held-out val/test items."""

    train: InteractionDataset
    val_item: dict[str, str]
    test_item: dict[str, str]
    cold_items: frozenset[str]
    seed: int


def split_leave_one_out(ds: InteractionDataset, seed: int) -> SplitDataset:
    """Hold out one validation and one test item per user, uniformly.

    Deterministic for a given seed: users are visited in sorted order and a
    single generator draws val then test without replacement from each
    user's (sorted) items.  Cold items are those never observed in the
    resulting train sets.
    """
    rng = np.random.default_rng(seed)
    train_users: dict[str, frozenset[str]] = {}
    val_item: dict[str, str] = {}
    test_item: dict[str, str] = {}
    for user in sorted(ds.users):
        items = sorted(ds.users[user])
        if len(items) < 2:
            raise DataError(f"user {user!r} has {len(items)} items; cannot hold out val+test")
        v_idx = int(rng.integers(len(items)))
        val = items.pop(v_idx)
        t_idx = int(rng.integers(len(items)))
        test = items.pop(t_idx)
        val_item[user] = val
        test_item[user] = test
        train_users[user] = frozenset(items)

    counts: dict[str, int] = {}
    for its in train_users.values():
        for item in its:
            counts[item] = counts.get(item, 0) + 1
    cold = frozenset(i for i in ds.items if i not in counts)
    train = InteractionDataset(users=train_users, items=ds.items, counts=counts)
    return SplitDataset(train=train, val_item=val_item, test_item=test_item,
                        cold_items=cold, seed=seed)


def save_split(split: SplitDataset, path: str | Path) -> None:
    """Write the split file: ``{"seed": int, "val": {...}, "test": {...}}``."""
    payload = {"seed": split.seed, "val": dict(sorted(split.val_item.items())),
               "test": dict(sorted(split.test_item.items()))}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_split(path: str | Path, ds: InteractionDataset) -> SplitDataset:
    """Rebuild a SplitDataset from a split file and the source interactions."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("seed", "val", "test"):
        if key not in payload:
            raise DataError(f"{path}: missing key {key!r}")
    val, test = payload["val"], payload["test"]
    train_users: dict[str, frozenset[str]] = {}
    for user, items in ds.users.items():
        if user not in val or user not in test:
            raise DataError(f"{path}: split is missing user {user!r}")
        held = {val[user], test[user]}
        if val[user] == test[user]:
            raise DataError(f"{path}: user {user!r} has val == test item")
        if not held <= items:
            raise DataError(f"{path}: held-out items for user {user!r} not in interactions")
        train_users[user] = frozenset(items - held)
    counts: dict[str, int] = {}
    for its in train_users.values():
        for item in its:
            counts[item] = counts.get(item, 0) + 1
    cold = frozenset(i for i in ds.items if i not in counts)
    train = InteractionDataset(users=train_users, items=ds.items, counts=counts)
    return SplitDataset(train=train, val_item=dict(val), test_item=dict(test),
                        cold_items=cold, seed=int(payload["seed"]))
