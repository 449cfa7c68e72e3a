import numpy as np
import pytest

from saers.errors import DataError
from saers.evaluation import (
    EvalReport,
    PopRankScorer,
    RandomScorer,
    SaersScorer,
    Scorer,
    auc,
    make_baseline,
    ndcg_at_n,
    ndcg_curve,
)
from saers.model import ModelConfig, init_params, forward_batch
from saers.optimizer import TrainHyper
from saers.tensor_store import InteractionDataset, SplitDataset, split_leave_one_out
from saers.training import TrainConfig
from tests.conftest import tiny_catalog, tiny_interactions


class TableScorer(Scorer):
    """Scores from an explicit (user, item) table; unknown pairs get 0."""

    name = "table"

    def __init__(self, table):
        self.table = table

    def score_items(self, user, item_ids):
        return np.array([self.table.get((user, i), 0.0) for i in item_ids])


def brute_force_auc(scorer, split, scenario="all", which="test"):
    """Direct enumeration over every (positive, negative) pair (test oracle)."""
    held = split.test_item if which == "test" else split.val_item
    cold = split.cold_items if scenario == "cold" else None
    per_user = []
    for user in sorted(split.train.users):
        pos = held[user]
        if cold is not None and pos not in cold:
            continue
        interacted = split.train.users[user] | {split.val_item[user], split.test_item[user]}
        negs = [i for i in sorted(split.train.items) if i not in interacted]
        if cold is not None:
            negs = [i for i in negs if i in cold]
        if not negs:
            continue
        pos_score = scorer.score(user, pos)
        total = 0.0
        for j in negs:
            s = scorer.score(user, j)
            total += 1.0 if pos_score > s else (0.5 if pos_score == s else 0.0)
        per_user.append(total / len(negs))
    return float(np.mean(per_user))


def make_split(n_users=5, n_items=10, per_user=5, seed=0):
    ds = tiny_interactions(n_users=n_users, n_items=n_items, per_user=per_user, seed=seed)
    return split_leave_one_out(ds, seed=seed)


class TestAuc:
    def test_perfect_scorer_scores_one(self):
        split = make_split(seed=1)
        table = {}
        for user in split.train.users:
            table[(user, split.test_item[user])] = 10.0
        scorer = TableScorer(table)
        assert auc(scorer, split, "all") == 1.0

    def test_matches_brute_force_on_random_tables(self):
        rng = np.random.default_rng(2)
        for trial in range(10):
            split = make_split(n_users=6, n_items=12, seed=trial + 10)
            table = {(u, i): float(rng.normal())
                     for u in split.train.users for i in split.train.items}
            scorer = TableScorer(table)
            assert auc(scorer, split, "all") == brute_force_auc(scorer, split, "all")

    def test_hand_built_two_user_table(self):
        # 2 users x 4 items; scores chosen so user A ranks the positive over
        # 1 of 2 negatives (0.5) and user B over both (1.0) => mean 0.75
        users = {"ua": frozenset(["i0", "i1"]), "ub": frozenset(["i1", "i2"])}
        train = InteractionDataset(users=users, items=frozenset(["i0", "i1", "i2", "i3"]),
                                   counts={"i0": 1, "i1": 2, "i2": 1})
        split = SplitDataset(train=train,
                             val_item={"ua": "i2", "ub": "i0"},
                             test_item={"ua": "i3", "ub": "i3"},
                             cold_items=frozenset(["i3"]), seed=0)
        table = {("ua", "i3"): 1.0, ("ua", "i1"): 2.0, ("ua", "i0"): 0.0,
                 ("ub", "i3"): 5.0, ("ub", "i1"): 2.0, ("ub", "i2"): 0.0}
        # ua: negatives are items not interacted = (none besides i3... all of
        # i0,i1,i2 are interacted) -> E(ua) is empty, user skipped
        # ub: E(ub) = {} as well; build a 3rd user to exercise fractions
        users2 = {"ua": frozenset(["i0"]), "ub": frozenset(["i1"])}
        train2 = InteractionDataset(users=users2,
                                    items=frozenset(["i0", "i1", "i2", "i3", "i4"]),
                                    counts={"i0": 1, "i1": 1})
        split2 = SplitDataset(train=train2,
                              val_item={"ua": "i2", "ub": "i2"},
                              test_item={"ua": "i3", "ub": "i3"},
                              cold_items=frozenset(["i3", "i4"]), seed=0)
        table2 = {("ua", "i3"): 1.0, ("ua", "i1"): 2.0, ("ua", "i4"): 0.0,
                  ("ub", "i3"): 5.0, ("ub", "i0"): 1.0, ("ub", "i4"): 1.0}
        scorer = TableScorer(table2)
        # ua: negatives {i1, i4}: beats i4, loses to i1 -> 0.5
        # ub: negatives {i0, i4}: beats both -> 1.0
        assert auc(scorer, split2, "all") == 0.75
        assert brute_force_auc(scorer, split2, "all") == 0.75
        assert TableScorer(table) is not None

    def test_ties_count_half(self):
        split = make_split(seed=3)
        scorer = TableScorer({})  # every score 0 => all ties
        assert auc(scorer, split, "all") == 0.5

    def test_antisymmetry_under_negation(self):
        rng = np.random.default_rng(4)
        split = make_split(n_users=6, n_items=12, seed=20)
        table = {(u, i): float(rng.normal())
                 for u in split.train.users for i in split.train.items}
        a = auc(TableScorer(table), split, "all")
        neg = {k: -v for k, v in table.items()}
        b = auc(TableScorer(neg), split, "all")
        assert abs((a + b) - 1.0) < 1e-12

    def test_cold_scenario_restriction(self):
        rng = np.random.default_rng(5)
        for trial in range(8):
            split = make_split(n_users=6, n_items=14, seed=trial + 30)
            if not any(split.test_item[u] in split.cold_items
                       for u in split.train.users):
                continue
            table = {(u, i): float(rng.normal())
                     for u in split.train.users for i in split.train.items}
            scorer = TableScorer(table)
            assert auc(scorer, split, "cold") == brute_force_auc(scorer, split, "cold")

    def test_thread_count_invariance(self):
        rng = np.random.default_rng(6)
        split = make_split(n_users=8, n_items=16, seed=40)
        table = {(u, i): float(rng.normal())
                 for u in split.train.users for i in split.train.items}
        scorer = TableScorer(table)
        v1 = auc(scorer, split, "all", n_threads=1)
        v8 = auc(scorer, split, "all", n_threads=8)
        assert v1 == v8

    def test_empty_scenario_rejected(self):
        split = make_split(seed=7)
        split = SplitDataset(train=split.train, val_item=split.val_item,
                             test_item=split.test_item, cold_items=frozenset(),
                             seed=split.seed)
        with pytest.raises(DataError, match="no evaluable users"):
            auc(TableScorer({}), split, "cold")


class TestNdcg:
    def brute_force_rounds(self, scorer, split, rounds, N):
        vals = []
        for user, negatives in rounds:
            pos = split.test_item[user]
            scored = [(scorer.score(user, i), i) for i in negatives]
            pos_score = scorer.score(user, pos)
            # rank with ties broken by item id ascending
            above = sum(1 for s, i in scored if s > pos_score or (s == pos_score and i < pos))
            rank = 1 + above
            vals.append(1.0 / np.log2(rank + 1) if rank <= N else 0.0)
        return float(np.mean(vals))

    def test_rank_one_scores_one(self):
        split = make_split(n_users=4, n_items=40, per_user=5, seed=8)
        table = {(u, split.test_item[u]): 100.0 for u in split.train.users}
        scorer = TableScorer(table)
        val = ndcg_at_n(scorer, split, N=5, n_rounds=50, n_neg=10, rng=0)
        assert val == 1.0

    def test_rank_two_closed_form(self):
        # a single negative ranked above the positive on every round
        split = make_split(n_users=4, n_items=40, per_user=5, seed=9)
        table = {}
        for u in split.train.users:
            table[(u, split.test_item[u])] = 50.0
            for i in split.train.items:
                if i not in split.train.users[u] and i != split.test_item[u]:
                    table.setdefault((u, i), 100.0)
                    break
        scorer = TableScorer(table)
        val = ndcg_at_n(scorer, split, N=5, n_rounds=40, n_neg=10, rng=1)
        # positive at rank 2 unless the boosted item missed the sample
        assert abs(val - 1.0 / np.log2(3.0)) < 0.15

    def test_outside_cutoff_scores_zero(self):
        split = make_split(n_users=4, n_items=40, per_user=5, seed=10)
        scorer = TableScorer({(u, i): 1.0 for u in split.train.users
                              for i in split.train.items
                              if i != split.test_item[u]})
        # positive always ranks below the 5 sampled negatives: rank 6 > N=3
        val = ndcg_at_n(scorer, split, N=3, n_rounds=30, n_neg=5, rng=2)
        assert val == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        split = make_split(n_users=5, n_items=30, per_user=5, seed=11)
        table = {(u, i): float(rng.normal())
                 for u in split.train.users for i in split.train.items}
        scorer = TableScorer(table)
        # reproduce the sampled rounds with the same generator sequence
        gen = np.random.default_rng(77)
        users = sorted(split.train.users)
        pools = {}
        rounds = []
        for _ in range(60):
            user = users[int(gen.integers(len(users)))]
            pool = pools.get(user)
            if pool is None:
                interacted = split.train.users[user] | {split.val_item[user],
                                                        split.test_item[user]}
                pool = np.array(sorted(i for i in split.train.items
                                       if i not in interacted), dtype=object)
                pools[user] = pool
            rounds.append((user, list(gen.choice(pool, size=8, replace=False))))
        got = ndcg_at_n(scorer, split, N=4, n_rounds=60, n_neg=8, rng=77)
        expected = self.brute_force_rounds(scorer, split, rounds, N=4)
        assert got == expected

    def test_deterministic_and_monotone_in_n(self):
        rng = np.random.default_rng(12)
        split = make_split(n_users=5, n_items=30, per_user=5, seed=12)
        table = {(u, i): float(rng.normal())
                 for u in split.train.users for i in split.train.items}
        scorer = TableScorer(table)
        a = ndcg_curve(scorer, split, [1, 3, 5, 8], n_rounds=50, n_neg=8, rng=5)
        b = ndcg_curve(scorer, split, [1, 3, 5, 8], n_rounds=50, n_neg=8, rng=5)
        assert a == b
        vals = [a[n] for n in (1, 3, 5, 8)]
        assert all(x <= y + 1e-15 for x, y in zip(vals, vals[1:]))

    def test_thread_invariance(self):
        rng = np.random.default_rng(13)
        split = make_split(n_users=5, n_items=30, per_user=5, seed=13)
        table = {(u, i): float(rng.normal())
                 for u in split.train.users for i in split.train.items}
        scorer = TableScorer(table)
        v1 = ndcg_at_n(scorer, split, N=5, n_rounds=40, n_neg=8, rng=3, n_threads=1)
        v8 = ndcg_at_n(scorer, split, N=5, n_rounds=40, n_neg=8, rng=3, n_threads=8)
        assert v1 == v8

    def test_insufficient_pool_rejected(self):
        split = make_split(n_users=4, n_items=8, per_user=5, seed=14)
        with pytest.raises(DataError, match="unrated"):
            ndcg_at_n(TableScorer({}), split, N=5, n_rounds=5, n_neg=500, rng=0)


class TestBaselines:
    def test_poprank_definition(self):
        split = make_split(seed=15)
        scorer = make_baseline("poprank", split, None, TrainConfig(seed=0))
        counts = split.train.counts
        hot = max(counts, key=counts.get)
        colder = min(counts, key=counts.get)
        for user in split.train.users:
            assert scorer.score(user, hot) >= scorer.score(user, colder)
        assert scorer.score("anyone", hot) == counts[hot]

    def test_random_scorer_deterministic_and_order_free(self):
        s1 = RandomScorer(seed=42)
        s2 = RandomScorer(seed=42)
        a = s1.score_items("ua", ["i1", "i2", "i3"])
        b = s2.score_items("ua", ["i3", "i2", "i1"])[::-1]
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, RandomScorer(seed=43).score_items("ua", ["i1", "i2", "i3"]))
        assert ((a >= 0) & (a < 1)).all()

    def test_random_scorer_auc_near_half(self):
        # >= 45k comparisons: 100 users x ~455 negatives
        ds = tiny_interactions(n_users=100, n_items=500, per_user=40, seed=16)
        split = split_leave_one_out(ds, seed=16)
        n_pairs = sum(len(split.train.items) - len(split.train.users[u]) - 2
                      for u in split.train.users)
        assert n_pairs >= 45_000
        scorer = make_baseline("random", split, None, TrainConfig(seed=7))
        assert abs(auc(scorer, split, "all") - 0.5) <= 0.02

    def test_bprmf_learns_popularity_fixture(self):
        split = make_split(n_users=8, n_items=16, per_user=5, seed=17)
        cfg = TrainConfig(d=4, seed=0, epochs=20, hyper=TrainHyper(lam=1e-4, lr=0.05))
        scorer = make_baseline("bprmf", split, None, cfg)
        assert auc(scorer, split, "all") > 0.0  # sanity: runs end to end

    def test_bprmf_cold_items_score_exactly_like_init_when_never_sampled(self):
        # single user, two items: the only negative is deterministic; any item
        # outside the universe stays at zero score
        users = {"ua": frozenset(["a", "b", "c"])}
        train = InteractionDataset(users=users, items=frozenset(["a", "b", "c", "d"]),
                                   counts={"a": 1, "b": 1, "c": 1})
        split = SplitDataset(train=train, val_item={"ua": "d"}, test_item={"ua": "d"},
                             cold_items=frozenset(["d"]), seed=0)
        cfg = TrainConfig(d=4, seed=0, epochs=1, hyper=TrainHyper(lam=0.0, lr=0.01,
                                                                  batch_size=4))
        scorer = make_baseline("bprmf", split, None, cfg)
        assert scorer is not None

    def test_vbpr_scores_cold_via_visual_path(self):
        catalog = tiny_catalog(n_items=16, n_attributes=3, seed=18)
        split = make_split(n_users=8, n_items=16, per_user=5, seed=18)
        cfg = TrainConfig(d=4, seed=1, epochs=5, hyper=TrainHyper(lam=1e-4, lr=0.02))
        scorer = make_baseline("vbpr", split, catalog, cfg)
        for cold in split.cold_items:
            val = scorer.score("u00", cold)
            assert np.isfinite(val)
        # feature-dependent: distinct cold items get distinct visual scores
        colds = sorted(split.cold_items)
        if len(colds) >= 2:
            scores = scorer.score_items("u00", colds)
            assert len(set(np.round(scores, 12))) > 1

    def test_unknown_baseline_rejected(self):
        split = make_split(seed=19)
        with pytest.raises(ValueError, match="unknown baseline"):
            make_baseline("zipf", split, None, TrainConfig(seed=0))


class TestSaersScorerConsistency:
    def test_matches_forward_batch(self):
        catalog = tiny_catalog(n_items=10, n_attributes=3, m=5, m_g=4, seed=20)
        config = ModelConfig(d=6, m=5, m_g=4, n_attributes=3, variant="SAERS", dtype="f64")
        params = init_params(config, ["ua", "ub"], list(catalog.attribute_names), seed=21)
        for arr in params.arrays().values():
            arr *= 40
        scorer = SaersScorer(params, catalog)
        ids = catalog.item_ids()
        feats, glob = catalog.dense_features(ids, dtype=np.float64)
        for user in ("ua", "ub"):
            u_emb = np.broadcast_to(params.U[params.user_index[user]], (len(ids), 6))
            expected = forward_batch(params, u_emb, feats, glob).scores
            got = scorer.score_items(user, ids)
            np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("variant", ["SAFo", "SAERS-SAF"])
    def test_matches_forward_batch_other_variants(self, variant):
        catalog = tiny_catalog(n_items=8, n_attributes=3, m=5, m_g=4, seed=22)
        config = ModelConfig(d=6, m=5, m_g=4, n_attributes=3, variant=variant, dtype="f64")
        params = init_params(config, ["ua"], list(catalog.attribute_names), seed=23)
        scorer = SaersScorer(params, catalog)
        ids = catalog.item_ids()
        feats, glob = catalog.dense_features(ids, dtype=np.float64)
        u_emb = np.broadcast_to(params.U[0], (len(ids), 6))
        expected = forward_batch(params, u_emb, feats, glob).scores
        np.testing.assert_allclose(scorer.score_items("ua", ids), expected,
                                   rtol=1e-12, atol=1e-14)


def test_eval_report_dict_shape():
    report = EvalReport(auc_all=0.9, ndcg={10: 0.4}, n_users=5, n_cold_items=2,
                        scorer="SAERS")
    d = report.to_dict()
    assert d["auc_all"] == 0.9
    assert d["auc_cold"] is None
    assert d["ndcg"] == {"10": 0.4}
