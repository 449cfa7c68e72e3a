"""BPR objective, exact analytic gradients, Adam, and a gradient checker.

The pairwise loss for a sampled triple (u, i, j) is

    L = -ln sigmoid(score_ui - score_uj) + lam * ||Theta||^2

where ``Theta`` covers the parameters that participate in the triple: the
sampled user's embedding row plus the shared tensors active for the model
variant.  Gradients flow through the full forward graph, including the
softmax-attention Jacobian (attention depends on both the user embedding and
the transferred attribute features).  Per-triple gradients are averaged over
a batch, so the learning-rate grid keeps its meaning across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from saers.model import BatchCache, ForwardCache, ModelParams, score_triple
from saers.tensor_store import FeatureCatalog

# Shared tensors regularized and updated per variant; the sampled user's row
# of U is always included.
_ACTIVE_SHARED = {
    "SAFo": ("E",),
    "SAERS-SAF": ("W_g",),
    "SAERS": ("E", "W_g", "W1", "b1", "w2", "b2"),
}


@dataclass
class TrainHyper:
    """BPR/Adam hyperparameters."""

    lam: float = 1e-4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256

    def to_dict(self) -> dict:
        return {"lam": self.lam, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "batch_size": self.batch_size}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        return cls(**d)


def neg_log_sigmoid(x: float | np.ndarray) -> float | np.ndarray:
    """-ln(sigmoid(x)), computed stably for any finite x."""
    return np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def _reg_norm_sq(params: ModelParams, users: tuple[str, ...]) -> float:
    total = 0.0
    for name in _ACTIVE_SHARED[params.config.variant]:
        arr = params.arrays()[name]
        total += float(np.sum(arr.astype(np.float64) ** 2))
    for u in users:
        row = params.U[params.user_index[u]].astype(np.float64)
        total += float(row @ row)
    return total


def bpr_loss(y_ui: float, y_uj: float, params: ModelParams | None = None,
             lam: float = 0.0, users: tuple[str, ...] = ()) -> float:
    """Pairwise ranking loss for one triple, with optional L2 penalty.

    ``users`` names the user rows entering the penalty (normally just the
    sampled user); shared tensors active for the variant are always
    penalized when ``lam > 0``.
    """
    if not (np.isfinite(y_ui) and np.isfinite(y_uj)):
        raise ValueError("non-finite scores")
    loss = float(neg_log_sigmoid(y_ui - y_uj))
    if lam > 0.0:
        if params is None:
            raise ValueError("lam > 0 requires params for the L2 penalty")
        loss += lam * _reg_norm_sq(params, users)
    return loss


@dataclass
class Gradients:
    """Dense gradients matching ModelParams shapes; untouched user rows are 0."""

    U: np.ndarray
    E: np.ndarray
    W_g: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "E": self.E, "W_g": self.W_g,
                "W1": self.W1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(**{k: np.zeros_like(v, dtype=np.float64)
                      for k, v in params.arrays().items()})


def _accumulate_pass(grads: Gradients, cache: BatchCache, u_idx: np.ndarray,
                     coef: np.ndarray, params: ModelParams) -> None:
    """Add coef-weighted d(score)/d(theta) of one forward pass into grads."""
    variant = cache.variant
    u = cache.u_emb.astype(np.float64)
    t = cache.transferred.astype(np.float64)
    feats = cache.feats.astype(np.float64)
    g = cache.g_feat.astype(np.float64)
    f_i = cache.f_i.astype(np.float64)
    d = params.config.d

    B, A = cache.weights.shape

    def _accum_E(dt_scaled):
        # (A, d, B) @ (A, B, m) -> (A, d, m)
        grads.E += dt_scaled.transpose(1, 2, 0) @ feats.transpose(1, 0, 2)

    if variant == "SAFo":
        _accum_E(np.broadcast_to(((coef / A)[:, None] * u)[:, None, :], t.shape))
        du = f_i
    elif variant == "SAERS-SAF":
        grads.W_g += (coef[:, None] * u).T @ g
        du = f_i
    else:
        alpha = cache.weights.astype(np.float64)
        z = cache.z.astype(np.float64)
        h_relu = cache.h_relu.astype(np.float64)
        w2 = params.w2.astype(np.float64)
        W1 = params.W1.astype(np.float64)
        h = w2.shape[0]

        p = (t @ u[:, :, None])[:, :, 0]                            # u . t_k
        q = alpha * (p - np.einsum("ba,ba->b", alpha, p)[:, None])  # d(score)/d(logits)
        r = (z > 0) * w2                                            # (B, A, hidden)
        dzc = (coef[:, None] * q)[..., None] * r                    # coef folded in
        u_rep = np.broadcast_to(u[:, None, :], t.shape)
        x = np.concatenate([u_rep, t], axis=2)
        grads.W1 += dzc.reshape(B * A, h).T @ x.reshape(B * A, 2 * d)
        grads.b1 += dzc.sum(axis=(0, 1))
        qc = coef[:, None] * q
        grads.w2 += h_relu.reshape(B * A, h).T @ qc.reshape(B * A)
        grads.b2 += qc.sum()
        r_flat = r.reshape(B * A, h)
        dt = alpha[..., None] * u[:, None, :] \
            + q[..., None] * (r_flat @ W1[:, d:]).reshape(B, A, d)
        _accum_E(coef[:, None, None] * dt)
        grads.W_g += (coef[:, None] * u).T @ g
        du = f_i + np.sum(q[..., None] * (r_flat @ W1[:, :d]).reshape(B, A, d), axis=1)

    np.add.at(grads.U, u_idx, coef[:, None] * du)


def backward_batch(cache_i: BatchCache, cache_j: BatchCache, u_idx: np.ndarray,
                   params: ModelParams, lam: float = 0.0) -> tuple[Gradients, np.ndarray]:
    """Mean gradients of the BPR loss over a batch of triples.

    Returns ``(gradients, per-triple data losses)``.
    """
    if cache_i.u_emb.shape != cache_j.u_emb.shape:
        raise ValueError("positive/negative caches disagree on batch shape")
    diff = cache_i.scores.astype(np.float64) - cache_j.scores.astype(np.float64)
    coef = expit(diff) - 1.0           # dL/d(score_ui); negated for score_uj
    losses = neg_log_sigmoid(diff)
    B = diff.shape[0]

    grads = Gradients.zeros_like(params)
    _accumulate_pass(grads, cache_i, u_idx, coef, params)
    _accumulate_pass(grads, cache_j, u_idx, -coef, params)
    for arr in grads.arrays().values():
        arr /= B
    if lam > 0.0:
        for name in _ACTIVE_SHARED[params.config.variant]:
            grads.arrays()[name] += 2.0 * lam * params.arrays()[name].astype(np.float64)
        np.add.at(grads.U, u_idx, (2.0 * lam / B) * params.U[u_idx].astype(np.float64))
    return grads, losses


def backward(caches: tuple[ForwardCache, ForwardCache], triple: tuple[str, str, str],
             catalog: FeatureCatalog, params: ModelParams, lam: float = 0.0) -> Gradients:
    """Exact analytic gradients of the loss for a single triple."""
    cache_i, cache_j = caches
    u, _, _ = triple
    u_idx = np.array([params.user_index[u]])
    if cache_i.batch.u_emb.shape[0] != 1:
        raise ValueError("single-triple backward expects batch-of-1 caches")
    grads, _ = backward_batch(cache_i.batch, cache_j.batch, u_idx, params, lam)
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def init(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(a, dtype=np.float64) for k, a in arrays.items()},
                   v={k: np.zeros_like(a, dtype=np.float64) for k, a in arrays.items()})


def adam_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, hyper: TrainHyper) -> None:
    """One bias-corrected Adam update, applied in place."""
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, theta in arrays.items():
        g = grads[name]
        if theta.shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: "
                             f"{g.shape} vs {theta.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        theta -= (hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(theta.dtype)


# ---------------------------------------------------------------------------
# Finite-difference gradient checker
# ---------------------------------------------------------------------------

def random_check_fixture(seed: int, d: int = 4, n_attributes: int = 3, m: int = 5,
                         m_g: int = 6, hidden: int | None = None,
                         variant: str = "SAERS",
                         ) -> tuple[ModelParams, FeatureCatalog, tuple[str, str, str]]:
    """Small random model + catalog + triple for gradient checking (f64)."""
    from saers.model import ModelConfig, init_params
    from saers.tensor_store import FeatureCatalog, ItemFeatures

    rng = np.random.default_rng(seed)
    names = [f"attr{k:02d}" for k in range(n_attributes)]
    items = {}
    for item_id in ("item_a", "item_b", "item_c"):
        items[item_id] = ItemFeatures(
            attr_feats={n: rng.normal(size=m) for n in names},
            global_feat=rng.normal(size=m_g))
    catalog = FeatureCatalog(attribute_names=names,
                             attribute_classes={n: ["x"] for n in names},
                             m=m, m_g=m_g, items=items)
    config = ModelConfig(d=d, m=m, m_g=m_g, n_attributes=n_attributes,
                         hidden=hidden, variant=variant, dtype="f64")
    params = init_params(config, ["user_0", "user_1"], names,
                         seed=int(rng.integers(2 ** 31)))
    # Spread the parameters so attention logits differ across attributes.
    for arr in params.arrays().values():
        arr *= 50.0
    return params, catalog, ("user_0", "item_a", "item_b")


def finite_diff_check(params: ModelParams, triple: tuple[str, str, str],
                      catalog: FeatureCatalog, eps: float = 1e-5,
                      lam: float = 0.0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Perturbs every coordinate of every parameter tensor; the relative error
    denominator is max(|analytic|, |numeric|, 1e-8).  Requires f64 params.
    The default step is near-optimal for f64 central differences at unit
    loss scale; much smaller steps drown small-gradient coordinates in
    round-off.
    """
    if params.config.dtype != "f64":
        raise ValueError("gradient checking requires f64 parameters")
    u, i, j = triple

    def loss_value() -> float:
        y_ui, y_uj, _, _ = score_triple(params, u, i, j, catalog)
        return bpr_loss(y_ui, y_uj, params, lam, users=(u,))

    y_ui, y_uj, ci, cj = score_triple(params, u, i, j, catalog)
    analytic = backward((ci, cj), triple, catalog, params, lam)

    worst = 0.0
    for name, arr in params.arrays().items():
        grad = analytic.arrays()[name]
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.shape[0]):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_value()
            flat[idx] = orig - eps
            down = loss_value()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(gflat[idx])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
