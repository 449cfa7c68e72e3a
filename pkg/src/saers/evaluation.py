"""Ranking evaluation: pairwise AUC, sampled NDCG@N, and baseline scorers.

AUC averages, over users, the fraction of non-interacted items ranked below
the held-out positive (ties count 0.5).  The cold-items scenario restricts
both the positive and the negatives to items never observed at training
time; users whose held-out item is not cold are skipped.

NDCG@N samples a user and 500 unrated items per round, ranks the 501
candidates (score descending, ties by item id ascending) and credits
1/log2(rank+1) when the positive lands within the cut-off; values are
averaged over rounds.  "Unrated" means outside the user's train, validation
and test items.

Evaluation is deterministic for fixed seeds and independent of the thread
count: per-user/per-round work is partitioned into ordered chunks and
reduced in a fixed order.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from saers.errors import DataError
from saers.model import ModelParams
from saers.optimizer import AdamState, TrainHyper, adam_step
from saers.tensor_store import FeatureCatalog, SplitDataset

BASELINES = ("random", "poprank", "bprmf", "vbpr")


@dataclass
class EvalReport:
    """Metric bundle emitted as JSON and as a delimited table."""

    auc_all: float | None = None
    auc_cold: float | None = None
    ndcg: dict[int, float] = field(default_factory=dict)
    n_users: int = 0
    n_cold_items: int = 0
    scorer: str = ""

    def to_dict(self) -> dict:
        return {"auc_all": self.auc_all, "auc_cold": self.auc_cold,
                "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
                "n_users": self.n_users, "n_cold_items": self.n_cold_items,
                "scorer": self.scorer}


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------

class Scorer:
    """Scoring contract: deterministic (user, item) -> real score."""

    name = "scorer"

    def score_items(self, user: str, item_ids: list[str]) -> np.ndarray:
        raise NotImplementedError

    def score(self, user: str, item: str) -> float:
        return float(self.score_items(user, [item])[0])


class SaersScorer(Scorer):
    """Scores via the model forward pass; works for any item with features.

    User-independent quantities (transferred attribute features, their
    attention-MLP contribution, the projected global feature) are cached per
    item at construction, so scoring all items for many users stays cheap.
    """

    def __init__(self, params: ModelParams, catalog: FeatureCatalog):
        self.params = params
        self.catalog = catalog
        self.name = params.config.variant
        self._item_ids = catalog.item_ids()
        self._index = {it: k for k, it in enumerate(self._item_ids)}
        feats, glob = catalog.dense_features(self._item_ids, dtype=params.config.np_dtype)
        d = params.config.d
        self._transferred = np.einsum("adm,iam->iad", params.E, feats)
        self._global_proj = glob @ params.W_g.T
        if self.name == "SAERS":
            self._z_item = np.einsum("hd,iad->iah", params.W1[:, d:],
                                     self._transferred) + params.b1
            self._w1_user = params.W1[:, :d]

    def _rows(self, item_ids: list[str]) -> np.ndarray:
        try:
            return np.array([self._index[i] for i in item_ids])
        except KeyError as exc:
            raise DataError(f"item {exc.args[0]!r} has no features in the catalog") from None

    def score_items(self, user: str, item_ids: list[str]) -> np.ndarray:
        try:
            u_row = self.params.user_index[user]
        except KeyError:
            raise DataError(f"unknown user id {user!r}") from None
        rows = self._rows(item_ids)
        u = self.params.U[u_row]
        if self.name == "SAFo":
            f_i = self._transferred[rows].mean(axis=1)
        elif self.name == "SAERS-SAF":
            f_i = self._global_proj[rows]
        else:
            z = self._z_item[rows] + (self._w1_user @ u)
            logits = np.maximum(z, 0.0) @ self.params.w2 + self.params.b2
            shifted = logits - logits.max(axis=1, keepdims=True)
            exps = np.exp(shifted)
            weights = exps / exps.sum(axis=1, keepdims=True)
            f_i = np.einsum("ba,bad->bd", weights, self._transferred[rows]) \
                + self._global_proj[rows]
        return (f_i @ u).astype(np.float64)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)).astype(np.uint64)
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)).astype(np.uint64)
    return x ^ (x >> np.uint64(31))


def _id_hash(s: str) -> np.uint64:
    return np.uint64(int.from_bytes(hashlib.blake2b(s.encode(), digest_size=8).digest(),
                                    "little"))


class RandomScorer(Scorer):
    """Seeded uniform scores, stable per (user, item) pair across processes."""

    name = "random"

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._cache: dict[str, np.uint64] = {}

    def _h(self, s: str) -> np.uint64:
        h = self._cache.get(s)
        if h is None:
            h = _id_hash(s)
            self._cache[s] = h
        return h

    def score_items(self, user: str, item_ids: list[str]) -> np.ndarray:
        uh = self._h(user)
        ih = np.array([self._h(i) for i in item_ids], dtype=np.uint64)
        with np.errstate(over="ignore"):
            mixed = _splitmix64(ih ^ _splitmix64(np.uint64(uh) + self.seed))
        return (mixed >> np.uint64(11)).astype(np.float64) / float(1 << 53)


class PopRankScorer(Scorer):
    """Score = train popularity count; identical ranking for every user."""

    name = "poprank"

    def __init__(self, counts: dict[str, int]):
        self.counts = counts

    def score_items(self, user: str, item_ids: list[str]) -> np.ndarray:
        return np.array([self.counts.get(i, 0) for i in item_ids], dtype=np.float64)


class _FactorScorer(Scorer):
    """Latent-factor baseline scoring shared by BPR-MF and VBPR."""

    def __init__(self, name, user_index, item_index, P, Q, beta, Theta=None,
                 E_v=None, vis=None):
        self.name = name
        self.user_index = user_index
        self.item_index = item_index
        self.P, self.Q, self.beta = P, Q, beta
        self.Theta, self.E_v, self.vis = Theta, E_v, vis

    def score_items(self, user: str, item_ids: list[str]) -> np.ndarray:
        try:
            u = self.user_index[user]
        except KeyError:
            raise DataError(f"unknown user id {user!r}") from None
        try:
            rows = np.array([self.item_index[i] for i in item_ids])
        except KeyError as exc:
            raise DataError(f"unknown item id {exc.args[0]!r}") from None
        scores = self.Q[rows] @ self.P[u] + self.beta[rows]
        if self.Theta is not None:
            scores = scores + self.vis[rows] @ self.Theta[u]
        return scores.astype(np.float64)


# ---------------------------------------------------------------------------
# Baseline training
# ---------------------------------------------------------------------------

def _sample_batch_indices(split: SplitDataset, rng: np.random.Generator, b: int,
                          users, user_items, user_sets, items,
                          user_index, item_index):
    u_idx = np.empty(b, dtype=np.int64)
    i_idx = np.empty(b, dtype=np.int64)
    j_idx = np.empty(b, dtype=np.int64)
    n_users, n_items = len(users), len(items)
    for k in range(b):
        u = users[int(rng.integers(n_users))]
        its = user_items[u]
        i = its[int(rng.integers(len(its)))]
        interacted = user_sets[u]
        while True:
            j = items[int(rng.integers(n_items))]
            if j not in interacted:
                break
        u_idx[k] = user_index[u]
        i_idx[k] = item_index[i]
        j_idx[k] = item_index[j]
    return u_idx, i_idx, j_idx


def _train_factor_baseline(kind: str, split: SplitDataset, catalog: FeatureCatalog | None,
                           config) -> _FactorScorer:
    """Train BPR-MF or VBPR with the shared BPR/Adam stack.

    Item-side parameters start at zero, so items unseen during training keep
    a content-free score of exactly zero (BPR-MF) or fall back to the visual
    path (VBPR).
    """
    users = sorted(split.train.users)
    items = sorted(split.train.items)
    user_index = {u: k for k, u in enumerate(users)}
    item_index = {i: k for k, i in enumerate(items)}
    user_items = {u: sorted(split.train.users[u]) for u in users}
    user_sets = {u: split.train.users[u] for u in users}
    d = config.d
    hyper = config.hyper
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(seeds[0])
    rng = np.random.default_rng(seeds[1])

    P = init_rng.uniform(-0.01, 0.01, size=(len(users), d))
    Q = np.zeros((len(items), d))
    beta = np.zeros(len(items))
    arrays = {"P": P, "Q": Q, "beta": beta}
    g_all = Theta = E_v = None
    if kind == "vbpr":
        if catalog is None:
            raise ValueError("vbpr needs a feature catalog for global features")
        dv = -(-d // 2)
        Theta = init_rng.uniform(-0.01, 0.01, size=(len(users), dv))
        E_v = init_rng.uniform(-0.01, 0.01, size=(dv, catalog.m_g))
        _, g_all = catalog.dense_features(items, dtype=np.float64)
        arrays.update({"Theta": Theta, "E_v": E_v})

    state = AdamState.init(arrays)
    n_triples = split.train.n_interactions
    batch = hyper.batch_size
    n_batches = -(-n_triples // batch)

    for _ in range(config.epochs):
        remaining = n_triples
        for _ in range(n_batches):
            b = min(batch, remaining)
            remaining -= b
            u_idx, i_idx, j_idx = _sample_batch_indices(
                split, rng, b, users, user_items, user_sets, items,
                user_index, item_index)
            diff = np.einsum("bd,bd->b", P[u_idx], Q[i_idx] - Q[j_idx]) \
                + beta[i_idx] - beta[j_idx]
            if kind == "vbpr":
                vis_diff = (g_all[i_idx] - g_all[j_idx]) @ E_v.T
                diff = diff + np.einsum("bv,bv->b", Theta[u_idx], vis_diff)
            c = expit(diff) - 1.0

            grads = {k: np.zeros_like(a) for k, a in arrays.items()}
            np.add.at(grads["P"], u_idx, c[:, None] * (Q[i_idx] - Q[j_idx]))
            np.add.at(grads["Q"], i_idx, c[:, None] * P[u_idx])
            np.add.at(grads["Q"], j_idx, -c[:, None] * P[u_idx])
            np.add.at(grads["beta"], i_idx, c)
            np.add.at(grads["beta"], j_idx, -c)
            if kind == "vbpr":
                np.add.at(grads["Theta"], u_idx, c[:, None] * vis_diff)
                grads["E_v"] += np.einsum("b,bv,bm->vm", c, Theta[u_idx],
                                          g_all[i_idx] - g_all[j_idx])
            for arr in grads.values():
                arr /= b
            if hyper.lam > 0.0:
                scale = 2.0 * hyper.lam / b
                np.add.at(grads["P"], u_idx, scale * P[u_idx])
                np.add.at(grads["Q"], i_idx, scale * Q[i_idx])
                np.add.at(grads["Q"], j_idx, scale * Q[j_idx])
                np.add.at(grads["beta"], i_idx, scale * beta[i_idx])
                np.add.at(grads["beta"], j_idx, scale * beta[j_idx])
                if kind == "vbpr":
                    np.add.at(grads["Theta"], u_idx, scale * Theta[u_idx])
                    grads["E_v"] += 2.0 * hyper.lam * E_v
            adam_step(arrays, grads, state, hyper)

    vis = g_all @ E_v.T if kind == "vbpr" else None
    return _FactorScorer(kind, user_index, item_index, P, Q, beta,
                         Theta=Theta, E_v=E_v, vis=vis)


def make_baseline(kind: str, split: SplitDataset, catalog: FeatureCatalog | None,
                  config) -> Scorer:
    """Build one of the comparison scorers: random, poprank, bprmf, vbpr."""
    if kind == "random":
        return RandomScorer(seed=config.seed)
    if kind == "poprank":
        return PopRankScorer(split.train.counts)
    if kind in ("bprmf", "vbpr"):
        return _train_factor_baseline(kind, split, catalog, config)
    raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINES}")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _chunks(seq, n_chunks):
    size = -(-len(seq) // n_chunks) if seq else 1
    return [seq[k:k + size] for k in range(0, len(seq), size)]


def _user_candidates(split: SplitDataset, universe: np.ndarray, user: str,
                     positive: str, cold: frozenset[str] | None) -> np.ndarray:
    interacted = split.train.users[user] | {split.val_item[user], split.test_item[user]}
    keep = [it for it in universe if it not in interacted]
    if cold is not None:
        keep = [it for it in keep if it in cold]
    return np.array(keep, dtype=object)


def auc(scorer: Scorer, split: SplitDataset, scenario: str = "all",
        which: str = "test", n_threads: int = 1) -> float:
    """Mean per-user pairwise AUC; ties between scores count 0.5.

    ``which`` selects the held-out positive ("test" or "val").  In the cold
    scenario only users whose positive is a cold item are evaluated and the
    negatives are restricted to cold items.
    """
    if scenario not in ("all", "cold"):
        raise ValueError(f"scenario must be 'all' or 'cold', got {scenario!r}")
    if which not in ("test", "val"):
        raise ValueError(f"which must be 'test' or 'val', got {which!r}")
    held = split.test_item if which == "test" else split.val_item
    cold = split.cold_items if scenario == "cold" else None
    universe = np.array(sorted(split.train.items), dtype=object)
    users = sorted(split.train.users)

    def eval_chunk(chunk):
        out = []
        for user in chunk:
            positive = held[user]
            if cold is not None and positive not in cold:
                continue
            negatives = _user_candidates(split, universe, user, positive, cold)
            if negatives.size == 0:
                continue
            scores = scorer.score_items(user, list(negatives))
            pos = scorer.score(user, positive)
            wins = float(np.count_nonzero(pos > scores))
            ties = float(np.count_nonzero(pos == scores))
            out.append((wins + 0.5 * ties) / negatives.size)
        return out

    chunks = _chunks(users, max(1, n_threads * 4))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(eval_chunk, chunks))
    else:
        results = [eval_chunk(c) for c in chunks]
    per_user = [v for chunk in results for v in chunk]
    if not per_user:
        raise DataError(f"no evaluable users in scenario {scenario!r}")
    return float(np.mean(np.array(per_user, dtype=np.float64)))


def auc_evaluated_users(split: SplitDataset, scenario: str = "all",
                        which: str = "test") -> int:
    """Number of users the AUC protocol evaluates under a scenario."""
    held = split.test_item if which == "test" else split.val_item
    if scenario == "all":
        return len(split.train.users)
    return sum(1 for u in split.train.users if held[u] in split.cold_items)


def ndcg_at_n(scorer: Scorer, split: SplitDataset, N: int, n_rounds: int = 10000,
              n_neg: int = 500, rng: np.random.Generator | int | None = None,
              n_threads: int = 1) -> float:
    """Sampled list-wise NDCG at cut-off N (single relevant item, IDCG = 1)."""
    return ndcg_curve(scorer, split, [N], n_rounds=n_rounds, n_neg=n_neg, rng=rng,
                      n_threads=n_threads)[N]


def ndcg_curve(scorer: Scorer, split: SplitDataset, Ns: list[int],
               n_rounds: int = 10000, n_neg: int = 500,
               rng: np.random.Generator | int | None = None,
               n_threads: int = 1) -> dict[int, float]:
    """NDCG@N for several cut-offs from one shared set of sampled rounds."""
    if any(n < 1 for n in Ns):
        raise ValueError("NDCG cut-offs must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    users = sorted(split.train.users)
    pools: dict[str, np.ndarray] = {}

    # Round sampling happens once, in order, so results are independent of
    # how the scoring work is chunked across threads.
    rounds = []
    for _ in range(n_rounds):
        user = users[int(rng.integers(len(users)))]
        pool = pools.get(user)
        if pool is None:
            interacted = split.train.users[user] | {split.val_item[user],
                                                    split.test_item[user]}
            pool = np.array(sorted(it for it in split.train.items
                                   if it not in interacted), dtype=object)
            pools[user] = pool
        if pool.size < n_neg:
            raise DataError(f"user {user!r} has only {pool.size} unrated items, "
                            f"need {n_neg}")
        negatives = rng.choice(pool, size=n_neg, replace=False)
        rounds.append((user, negatives))

    def rank_chunk(chunk):
        ranks = np.empty(len(chunk), dtype=np.int64)
        for k, (user, negatives) in enumerate(chunk):
            positive = split.test_item[user]
            neg_scores = scorer.score_items(user, list(negatives))
            pos_score = scorer.score(user, positive)
            above = int(np.count_nonzero(neg_scores > pos_score))
            tied = negatives[neg_scores == pos_score]
            above += int(np.count_nonzero(tied < positive))
            ranks[k] = 1 + above
        return ranks

    chunks = _chunks(rounds, max(1, n_threads * 4))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            rank_parts = list(pool.map(rank_chunk, chunks))
    else:
        rank_parts = [rank_chunk(c) for c in chunks]
    ranks = np.concatenate(rank_parts) if rank_parts else np.empty(0, dtype=np.int64)
    gains = 1.0 / np.log2(ranks + 1.0)
    return {N: float(np.mean(np.where(ranks <= N, gains, 0.0))) for N in Ns}
