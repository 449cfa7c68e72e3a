"""Forward computation: attribute transfer, preference attention, scoring.

An item embedding is built from its A transferred attribute features
``E^k f_a^k(i)`` (d-vectors) and a projected global feature ``W_g g_i``:

* ``SAFo``       - plain average of the transferred attribute features.
* ``SAERS-SAF``  - the projected global feature only.
* ``SAERS``      - attention-weighted sum of transferred features plus the
                    projected global feature; attention weights come from a
                    two-layer MLP over [user_embedding ; transferred_k].

Scores are inner products between user and item embeddings.  All forward
passes are read-only over the parameters; batch versions keep every
intermediate needed for exact backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from saers.tensor_store import FeatureCatalog, ItemFeatures

VARIANTS = ("SAFo", "SAERS-SAF", "SAERS")

_VARIANT_ALIASES = {
    "safo": "SAFo",
    "saers-saf": "SAERS-SAF",
    "saers_minus_saf": "SAERS-SAF",
    "saers-minus-saf": "SAERS-SAF",
    "saers": "SAERS",
}


def normalize_variant(name: str) -> str:
    try:
        return _VARIANT_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown model variant {name!r}; expected one of {VARIANTS}") from None


@dataclass
class ModelConfig:
    """Model geometry: embedding dim, attribute count, feature dims."""

    d: int
    m: int
    m_g: int
    n_attributes: int = 12
    hidden: int | None = None
    variant: str = "SAERS"
    dtype: str = "f64"

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        if self.hidden is None:
            self.hidden = self.d
        if self.d < 1 or self.m < 1 or self.m_g < 1 or self.hidden < 1:
            raise ValueError("model dimensions must be >= 1")
        if self.n_attributes < 1:
            raise ValueError("attribute count must be >= 1")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_dict(self) -> dict:
        return {"d": self.d, "m": self.m, "m_g": self.m_g,
                "n_attributes": self.n_attributes, "hidden": self.hidden,
                "variant": self.variant, "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """All trainable parameters plus the user/attribute vocabularies."""

    config: ModelConfig
    user_ids: tuple[str, ...]
    attribute_names: tuple[str, ...]
    U: np.ndarray        # (n_users, d) user embeddings
    E: np.ndarray        # (A, d, m) per-attribute transfer matrices
    W_g: np.ndarray      # (d, m_g) global feature projector
    W1: np.ndarray       # (hidden, 2d) attention MLP, first layer
    b1: np.ndarray       # (hidden,)
    w2: np.ndarray       # (hidden,) attention MLP, output layer
    b2: np.ndarray       # (1,)
    user_index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.user_index:
            self.user_index = {u: i for i, u in enumerate(self.user_ids)}

    def arrays(self) -> dict[str, np.ndarray]:
        """Ordered name -> array view of every trainable tensor."""
        return {"U": self.U, "E": self.E, "W_g": self.W_g,
                "W1": self.W1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "ModelParams":
        return ModelParams(config=self.config, user_ids=self.user_ids,
                           attribute_names=self.attribute_names,
                           U=self.U.copy(), E=self.E.copy(), W_g=self.W_g.copy(),
                           W1=self.W1.copy(), b1=self.b1.copy(), w2=self.w2.copy(),
                           b2=self.b2.copy(), user_index=self.user_index)

    def astype(self, dtype: str) -> "ModelParams":
        cfg = ModelConfig(**{**self.config.to_dict(), "dtype": dtype})
        np_dt = cfg.np_dtype
        out = self.copy()
        out.config = cfg
        for name, arr in out.arrays().items():
            setattr(out, name, arr.astype(np_dt))
        return out


def init_params(config: ModelConfig, user_ids: list[str],
                attribute_names: list[str], seed: int) -> ModelParams:
    """Seeded i.i.d. uniform(-0.01, 0.01) initialization of every tensor."""
    if len(attribute_names) != config.n_attributes:
        raise ValueError(f"config expects {config.n_attributes} attributes, "
                         f"got {len(attribute_names)} names")
    rng = np.random.default_rng(seed)
    dt = config.np_dtype

    def u(*shape):
        return rng.uniform(-0.01, 0.01, size=shape).astype(dt)

    d, m, m_g, A, h = config.d, config.m, config.m_g, config.n_attributes, config.hidden
    return ModelParams(
        config=config,
        user_ids=tuple(sorted(user_ids)),
        attribute_names=tuple(attribute_names),
        U=u(len(user_ids), d),
        E=u(A, d, m),
        W_g=u(d, m_g),
        W1=u(h, 2 * d),
        b1=u(h),
        w2=u(h),
        b2=u(1),
    )


# ---------------------------------------------------------------------------
# Batched forward pass (core implementation)
# ---------------------------------------------------------------------------

@dataclass
class BatchCache:
    """Every intermediate of a batched forward pass, kept for backprop."""

    u_emb: np.ndarray        # (B, d)
    feats: np.ndarray        # (B, A, m)
    g_feat: np.ndarray       # (B, m_g)
    transferred: np.ndarray  # (B, A, d)
    z: np.ndarray | None     # (B, A, hidden) pre-ReLU attention activations
    h_relu: np.ndarray | None
    logits: np.ndarray       # (B, A)
    weights: np.ndarray      # (B, A)
    f_i: np.ndarray          # (B, d)
    scores: np.ndarray       # (B,)
    variant: str


def forward_batch(params: ModelParams, u_emb: np.ndarray, feats: np.ndarray,
                  g_feat: np.ndarray, variant: str | None = None) -> BatchCache:
    """Score a batch of (user embedding, item features) pairs.

    ``u_emb`` is (B, d), ``feats`` is (B, A, m), ``g_feat`` is (B, m_g).
    """
    variant = normalize_variant(variant or params.config.variant)
    A = params.config.n_attributes
    B = u_emb.shape[0]
    dt = u_emb.dtype

    # (A, B, m) @ (A, m, d) -> (A, B, d); batched matmul stays on BLAS.
    transferred = np.ascontiguousarray(
        (feats.transpose(1, 0, 2) @ params.E.transpose(0, 2, 1)).transpose(1, 0, 2))
    z = h_relu = None
    if variant == "SAFo":
        weights = np.full((B, A), 1.0 / A, dtype=dt)
        logits = np.zeros((B, A), dtype=dt)
        f_i = transferred.mean(axis=1)
    elif variant == "SAERS-SAF":
        weights = np.full((B, A), 1.0 / A, dtype=dt)
        logits = np.zeros((B, A), dtype=dt)
        f_i = g_feat @ params.W_g.T
    else:
        u_rep = np.broadcast_to(u_emb[:, None, :], transferred.shape)
        x = np.concatenate([u_rep, transferred], axis=2)       # (B, A, 2d)
        z = (x.reshape(B * A, -1) @ params.W1.T).reshape(B, A, -1) + params.b1
        h_relu = np.maximum(z, 0.0)
        logits = h_relu @ params.w2 + params.b2                # (B, A)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exps = np.exp(shifted)
        weights = exps / exps.sum(axis=1, keepdims=True)
        f_i = (weights[:, None, :] @ transferred)[:, 0, :] + g_feat @ params.W_g.T
    scores = np.einsum("bd,bd->b", u_emb, f_i)
    return BatchCache(u_emb=u_emb, feats=feats, g_feat=g_feat, transferred=transferred,
                      z=z, h_relu=h_relu, logits=logits, weights=weights,
                      f_i=f_i, scores=scores, variant=variant)


# ---------------------------------------------------------------------------
# Single-sample API (thin wrappers over the batch core)
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Single forward pass retained for backprop and explanations."""

    batch: BatchCache

    @property
    def transferred(self) -> np.ndarray:
        return self.batch.transferred[0]

    @property
    def logits(self) -> np.ndarray:
        return self.batch.logits[0]

    @property
    def weights(self) -> np.ndarray:
        return self.batch.weights[0]

    @property
    def f_i(self) -> np.ndarray:
        return self.batch.f_i[0]

    @property
    def score(self) -> float:
        return float(self.batch.scores[0])


def _stack_item(item: ItemFeatures, attribute_names: tuple[str, ...], dtype) -> np.ndarray:
    try:
        return np.stack([np.asarray(item.attr_feats[n], dtype=dtype) for n in attribute_names])
    except KeyError as exc:
        raise ValueError(f"item is missing attribute feature {exc.args[0]!r}") from None


def attention_weights(u_emb: np.ndarray, transferred: np.ndarray,
                      params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Attention logits and softmax weights for one user over A transferred
    attribute features.

    ``transferred`` is (A, d); logits are w2 . ReLU(W1 [u ; t_k] + b1) + b2
    and the softmax subtracts the max logit for stability.
    """
    u_emb = np.asarray(u_emb)
    transferred = np.asarray(transferred)
    if not (np.all(np.isfinite(u_emb)) and np.all(np.isfinite(transferred))):
        raise ValueError("non-finite attention inputs")
    if transferred.ndim != 2 or transferred.shape[1] != u_emb.shape[0]:
        raise ValueError(f"transferred shape {transferred.shape} does not match "
                         f"user embedding length {u_emb.shape[0]}")
    u_rep = np.broadcast_to(u_emb[None, :], transferred.shape)
    x = np.concatenate([u_rep, transferred], axis=1)
    z = x @ params.W1.T + params.b1
    logits = np.maximum(z, 0.0) @ params.w2 + params.b2[0]
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    return logits, exps / exps.sum()


def item_embedding(u_emb: np.ndarray, item: ItemFeatures, params: ModelParams,
                   variant: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Embed one item for one user; returns (f_i, attention weights)."""
    dt = params.config.np_dtype
    feats = _stack_item(item, params.attribute_names, dt)
    if feats.shape != (params.config.n_attributes, params.config.m):
        raise ValueError(f"attribute features have shape {feats.shape}, expected "
                         f"({params.config.n_attributes}, {params.config.m})")
    g = np.asarray(item.global_feat, dtype=dt)
    if g.shape != (params.config.m_g,):
        raise ValueError(f"global feature has shape {g.shape}, expected ({params.config.m_g},)")
    cache = forward_batch(params, np.asarray(u_emb, dtype=dt)[None, :],
                          feats[None], g[None], variant)
    return cache.f_i[0], cache.weights[0]


def predict(u_emb: np.ndarray, f_i: np.ndarray) -> float:
    """Inner-product preference score."""
    u_emb = np.asarray(u_emb)
    f_i = np.asarray(f_i)
    if u_emb.shape != f_i.shape:
        raise ValueError(f"embedding shapes differ: {u_emb.shape} vs {f_i.shape}")
    return float(u_emb @ f_i)


def score_triple(params: ModelParams, u: str, i: str, j: str,
                 catalog: FeatureCatalog, variant: str | None = None,
                 ) -> tuple[float, float, ForwardCache, ForwardCache]:
    """Two forward passes for a (user, positive, negative) triple."""
    try:
        u_idx = params.user_index[u]
    except KeyError:
        raise ValueError(f"unknown user id {u!r}") from None
    dt = params.config.np_dtype
    caches = []
    for item_id in (i, j):
        try:
            item = catalog.items[item_id]
        except KeyError:
            raise ValueError(f"unknown item id {item_id!r}") from None
        feats = _stack_item(item, params.attribute_names, dt)
        g = np.asarray(item.global_feat, dtype=dt)
        caches.append(forward_batch(params, params.U[u_idx][None, :],
                                    feats[None], g[None], variant))
    ci, cj = ForwardCache(caches[0]), ForwardCache(caches[1])
    return ci.score, cj.score, ci, cj
