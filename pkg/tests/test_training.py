import numpy as np
import pytest
from scipy import stats as scipy_stats

from saers.errors import CheckpointError
from saers.tensor_store import InteractionDataset, split_leave_one_out
from saers.training import (
    TrainConfig,
    TrainStats,
    load_checkpoint,
    sample_triple,
    save_checkpoint,
    train,
)
from saers.optimizer import TrainHyper
from tests.conftest import tiny_catalog, tiny_interactions


def small_split(seed=0, n_users=4, n_items=6, per_user=5):
    ds = tiny_interactions(n_users=n_users, n_items=n_items, per_user=per_user, seed=seed)
    return split_leave_one_out(ds, seed=seed)


def fast_config(**kw):
    defaults = dict(d=4, hidden=4, variant="SAERS", dtype="f64", seed=0, epochs=2,
                    eval_every=1, early_stop_patience=5,
                    hyper=TrainHyper(lam=0.0, lr=0.01, batch_size=8))
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestSampleTriple:
    def test_forced_outcome(self):
        users = {"ua": frozenset(["a"])}
        ds = InteractionDataset(users=users, items=frozenset(["a", "b"]),
                                counts={"a": 1})
        split_users = {"ua": frozenset(["a"])}
        from saers.tensor_store import SplitDataset
        split = SplitDataset(train=InteractionDataset(users=split_users,
                                                      items=frozenset(["a", "b"]),
                                                      counts={"a": 1}),
                             val_item={}, test_item={}, cold_items=frozenset(), seed=0)
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert sample_triple(split, rng) == ("ua", "a", "b")
        assert ds is not None

    def test_negative_never_in_train(self):
        split = small_split(seed=1)
        rng = np.random.default_rng(1)
        for _ in range(100_000):
            u, i, j = sample_triple(split, rng)
            assert i in split.train.users[u]
            assert j not in split.train.users[u]

    def test_positive_distribution_uniform(self):
        split = small_split(seed=2)
        user = sorted(split.train.users)[0]
        items = sorted(split.train.users[user])
        assert len(items) == 3
        rng = np.random.default_rng(2)
        counts = {it: 0 for it in items}
        n = 0
        while n < 100_000:
            u, i, _ = sample_triple(split, rng)
            if u == user:
                counts[i] += 1
                n += 1
        observed = [counts[it] for it in items]
        chi2 = scipy_stats.chisquare(observed)
        assert chi2.pvalue > 0.01


class TestTrain:
    def test_epoch_is_one_batch_on_tiny_fixture(self):
        # 4 users x 5 items per user => train has 12 interactions; with a
        # batch of 256 an epoch is a single batch of 12 triples
        split = small_split(seed=3)
        assert split.train.n_interactions == 12
        catalog = tiny_catalog(n_items=6, seed=3)
        config = fast_config(epochs=1, hyper=TrainHyper(lam=0.0, lr=0.01, batch_size=256))
        params, stats = train(config, split, catalog)
        assert stats.epochs_run == 1
        assert len(stats.epoch_loss) == 1

    def test_deterministic_per_seed(self):
        split = small_split(seed=4)
        catalog = tiny_catalog(n_items=6, seed=4)
        p1, s1 = train(fast_config(seed=9), split, catalog)
        p2, s2 = train(fast_config(seed=9), split, catalog)
        for a, b in zip(p1.arrays().values(), p2.arrays().values()):
            assert a.tobytes() == b.tobytes()
        assert s1.epoch_loss == s2.epoch_loss
        p3, _ = train(fast_config(seed=10), split, catalog)
        assert any(a.tobytes() != b.tobytes()
                   for a, b in zip(p1.arrays().values(), p3.arrays().values()))

    def test_best_checkpoint_is_max_probe(self):
        split = small_split(seed=5)
        catalog = tiny_catalog(n_items=6, seed=5)
        config = fast_config(epochs=6, eval_every=1, early_stop_patience=6)
        params, stats = train(config, split, catalog)
        assert stats.best_val_auc == max(a for _, a in stats.val_auc)
        assert stats.best_epoch in [e for e, a in stats.val_auc
                                    if a == stats.best_val_auc]

    def test_early_stopping_respects_patience(self):
        split = small_split(seed=6)
        catalog = tiny_catalog(n_items=6, seed=6)
        config = fast_config(epochs=50, eval_every=1, early_stop_patience=2)
        params, stats = train(config, split, catalog)
        assert stats.epochs_run < 50

    def test_loss_decreases_on_learnable_fixture(self):
        split = small_split(seed=7, n_users=6, n_items=10)
        catalog = tiny_catalog(n_items=10, seed=7)
        config = fast_config(epochs=12, eval_every=6,
                             hyper=TrainHyper(lam=0.0, lr=0.05, batch_size=16))
        _, stats = train(config, split, catalog)
        assert stats.epoch_loss[-1] < stats.epoch_loss[0]


class TestCheckpoint:
    def _trained(self, tmp_path):
        split = small_split(seed=8)
        catalog = tiny_catalog(n_items=6, seed=8)
        config = fast_config()
        params, stats = train(config, split, catalog)
        save_checkpoint(params, config, stats, tmp_path / "ckpt")
        return params, config, stats

    def test_round_trip_bit_identical(self, tmp_path):
        params, config, stats = self._trained(tmp_path)
        loaded, train_cfg, _ = load_checkpoint(tmp_path / "ckpt")
        for (n1, a), (n2, b) in zip(params.arrays().items(), loaded.arrays().items()):
            assert n1 == n2
            assert a.tobytes() == b.tobytes()
        assert loaded.user_ids == params.user_ids
        assert loaded.attribute_names == params.attribute_names
        assert train_cfg.seed == config.seed

    def test_missing_tensor_names_it(self, tmp_path):
        self._trained(tmp_path)
        (tmp_path / "ckpt" / "W_g.sat").unlink()
        with pytest.raises(CheckpointError, match="W_g"):
            load_checkpoint(tmp_path / "ckpt")

    def test_mismatched_config_rejected(self, tmp_path):
        import json
        self._trained(tmp_path)
        manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        manifest["model"]["d"] = 99
        (tmp_path / "ckpt" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(tmp_path / "ckpt")

    def test_version_mismatch_rejected(self, tmp_path):
        import json
        self._trained(tmp_path)
        manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        manifest["version"] = 999
        (tmp_path / "ckpt" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "ckpt")

    def test_metrics_identical_after_reload(self, tmp_path):
        from saers.evaluation import SaersScorer, auc
        split = small_split(seed=11)
        catalog = tiny_catalog(n_items=6, seed=11)
        config = fast_config(epochs=3)
        params, stats = train(config, split, catalog)
        before = auc(SaersScorer(params, catalog), split, "all")
        save_checkpoint(params, config, stats, tmp_path / "c2")
        loaded, _, _ = load_checkpoint(tmp_path / "c2")
        after = auc(SaersScorer(loaded, catalog), split, "all")
        assert before == after
