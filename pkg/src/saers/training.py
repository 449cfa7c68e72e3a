"""Triple sampling, the training loop, and checkpointing.

An epoch samples as many (user, positive, negative) triples as there are
train interactions, in batches; validation AUC is probed every
``eval_every`` epochs and the best-probe parameters are retained.  Training
stops when ``early_stop_patience`` probes pass without improvement or at the
epoch cap.  Everything is deterministic for a given seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from saers.errors import CheckpointError
from saers.model import ModelConfig, ModelParams, forward_batch, init_params
from saers.optimizer import AdamState, TrainHyper, adam_step, backward_batch
from saers.tensor_store import FeatureCatalog, SplitDataset, read_tensor, write_tensor

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Training-run configuration; model geometry plus loop controls."""

    d: int = 16
    hidden: int | None = None
    variant: str = "SAERS"
    dtype: str = "f64"
    hyper: TrainHyper = field(default_factory=TrainHyper)
    epochs: int = 50
    eval_every: int = 5
    seed: int = 0
    early_stop_patience: int = 5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        return {"d": self.d, "hidden": self.hidden, "variant": self.variant,
                "dtype": self.dtype, "hyper": self.hyper.to_dict(),
                "epochs": self.epochs, "eval_every": self.eval_every,
                "seed": self.seed, "early_stop_patience": self.early_stop_patience}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hyper" in d:
            d["hyper"] = TrainHyper.from_dict(d["hyper"])
        return cls(**d)


@dataclass
class TrainStats:
    """Per-epoch mean loss, the validation AUC trace, and wall-clock time."""

    epoch_loss: list[float] = field(default_factory=list)
    val_auc: list[tuple[int, float]] = field(default_factory=list)
    wall_clock: float = 0.0
    epochs_run: int = 0
    best_epoch: int = 0
    best_val_auc: float = float("nan")

    def to_dict(self) -> dict:
        return {"epoch_loss": self.epoch_loss,
                "val_auc": [[e, a] for e, a in self.val_auc],
                "wall_clock": self.wall_clock, "epochs_run": self.epochs_run,
                "best_epoch": self.best_epoch, "best_val_auc": self.best_val_auc}


class _SampleIndex:
    """Sorted views of a split for deterministic triple sampling."""

    def __init__(self, split: SplitDataset):
        self.users = sorted(split.train.users)
        self.items = sorted(split.train.items)
        self.user_items = {u: sorted(split.train.users[u]) for u in self.users}
        self.user_sets = {u: split.train.users[u] for u in self.users}


def _index_for(split: SplitDataset) -> _SampleIndex:
    idx = getattr(split, "_sample_index", None)
    if idx is None:
        idx = _SampleIndex(split)
        split._sample_index = idx
    return idx


def sample_triple(split: SplitDataset, rng: np.random.Generator) -> tuple[str, str, str]:
    """Draw (u, i, j): u uniform over users, i uniform over train(u),
    j uniform over the item universe by rejection until j is not in train(u)."""
    idx = _index_for(split)
    u = idx.users[int(rng.integers(len(idx.users)))]
    pos_items = idx.user_items[u]
    i = pos_items[int(rng.integers(len(pos_items)))]
    interacted = idx.user_sets[u]
    while True:
        j = idx.items[int(rng.integers(len(idx.items)))]
        if j not in interacted:
            return u, i, j


def train(config: TrainConfig, split: SplitDataset, catalog: FeatureCatalog,
          n_threads: int = 1) -> tuple[ModelParams, TrainStats]:
    """Run BPR training and return the best-validation parameters."""
    from saers.evaluation import SaersScorer, auc  # deferred: circular import

    model_cfg = ModelConfig(d=config.d, m=catalog.m, m_g=catalog.m_g,
                            n_attributes=catalog.n_attributes,
                            hidden=config.hidden, variant=config.variant,
                            dtype=config.dtype)
    user_ids = sorted(split.train.users)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    params = init_params(model_cfg, user_ids,
                         list(catalog.attribute_names),
                         seed=seeds[0])
    rng = np.random.default_rng(seeds[1])

    item_ids = sorted(split.train.items)
    item_index = {it: k for k, it in enumerate(item_ids)}
    feats_all, glob_all = catalog.dense_features(item_ids, dtype=model_cfg.np_dtype)

    n_triples = split.train.n_interactions
    batch = config.hyper.batch_size
    n_batches = -(-n_triples // batch)
    state = AdamState.init(params.arrays())
    stats = TrainStats()
    best_params = params.copy()
    best_auc = -np.inf
    probes_since_best = 0
    start = time.monotonic()

    for epoch in range(1, config.epochs + 1):
        epoch_loss = 0.0
        remaining = n_triples
        for _ in range(n_batches):
            b = min(batch, remaining)
            remaining -= b
            triples = [sample_triple(split, rng) for _ in range(b)]
            u_idx = np.array([params.user_index[t[0]] for t in triples])
            i_idx = np.array([item_index[t[1]] for t in triples])
            j_idx = np.array([item_index[t[2]] for t in triples])
            u_emb = params.U[u_idx]
            cache_i = forward_batch(params, u_emb, feats_all[i_idx], glob_all[i_idx])
            cache_j = forward_batch(params, u_emb, feats_all[j_idx], glob_all[j_idx])
            grads, losses = backward_batch(cache_i, cache_j, u_idx, params,
                                           lam=config.hyper.lam)
            adam_step(params.arrays(), grads.arrays(), state, config.hyper)
            epoch_loss += float(losses.sum())
        stats.epoch_loss.append(epoch_loss / n_triples)
        stats.epochs_run = epoch

        if epoch % config.eval_every == 0 or epoch == config.epochs:
            scorer = SaersScorer(params, catalog)
            probe = auc(scorer, split, scenario="all", which="val", n_threads=n_threads)
            stats.val_auc.append((epoch, probe))
            if probe > best_auc:
                best_auc = probe
                best_params = params.copy()
                stats.best_epoch = epoch
                probes_since_best = 0
            else:
                probes_since_best += 1
            if probes_since_best >= config.early_stop_patience:
                break

    stats.best_val_auc = float(best_auc)
    stats.wall_clock = time.monotonic() - start
    return best_params, stats


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, config: TrainConfig, stats: TrainStats,
                    directory: str | Path) -> None:
    """Write a version-stamped manifest plus one .sat file per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "model": params.config.to_dict(),
        "train": config.to_dict(),
        "users": list(params.user_ids),
        "attribute_names": list(params.attribute_names),
        "tensors": {name: f"{name}.sat" for name in params.arrays()},
        "best_epoch": stats.best_epoch,
    }
    for name, arr in params.arrays().items():
        write_tensor(directory / f"{name}.sat", arr)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (directory / "stats.json").write_text(json.dumps(stats.to_dict(), sort_keys=True))


_EXPECTED_SHAPES = {
    "U": lambda c, n: (n, c.d),
    "E": lambda c, n: (c.n_attributes, c.d, c.m),
    "W_g": lambda c, n: (c.d, c.m_g),
    "W1": lambda c, n: (c.hidden, 2 * c.d),
    "b1": lambda c, n: (c.hidden,),
    "w2": lambda c, n: (c.hidden,),
    "b2": lambda c, n: (1,),
}


def load_checkpoint(directory: str | Path) -> tuple[ModelParams, TrainConfig, dict]:
    """Inverse of save_checkpoint; validates version and tensor shapes."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')!r} "
                              f"!= supported {CHECKPOINT_VERSION}")
    model_cfg = ModelConfig.from_dict(manifest["model"])
    users = manifest["users"]
    tensors = {}
    for name, fname in manifest["tensors"].items():
        path = directory / fname
        if not path.is_file():
            raise CheckpointError(f"checkpoint tensor {name!r} missing (expected {fname})")
        tensors[name] = read_tensor(path)
    for name, arr in tensors.items():
        expected = _EXPECTED_SHAPES[name](model_cfg, len(users))
        if arr.shape != expected:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, config "
                                  f"implies {expected}")
    params = ModelParams(config=model_cfg, user_ids=tuple(users),
                         attribute_names=tuple(manifest["attribute_names"]),
                         **{k: v.astype(model_cfg.np_dtype) for k, v in tensors.items()})
    train_cfg = TrainConfig.from_dict(manifest["train"])
    stats_path = directory / "stats.json"
    stats = json.loads(stats_path.read_text()) if stats_path.is_file() else {}
    return params, train_cfg, stats
