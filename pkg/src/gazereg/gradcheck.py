"""Finite-difference checks for the KL logit gradient and the full policy backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import total_loss
from .numerics import finite_diff_check, kl_grad_wrt_logits
from .policy import PolicyDims, PolicyParams, backward_batch, forward_batch

LOSS_TOL = 1e-5
MODEL_TOL = 1e-3
# larger than the KL check step: the model loss carries more round-off than a single KL
MODEL_STEP = 1e-5

# (layers, heads, attention source) per tiny configuration
TINY_VARIANTS = (
    (1, 1, "final_layer"),
    (2, 1, "final_layer"),
    (1, 2, "final_layer"),
    (2, 2, "all_layers_mean"),
)


def kl_oracle(g: np.ndarray, z: np.ndarray) -> np.longdouble:
    """KL(g || softmax(z)) in extended precision, so central differences resolve tiny gradient entries.

    The result stays a long double: rounding it to float64 before differencing
    would throw the extra precision away.
    """
    g = np.asarray(g, dtype=np.longdouble)
    z = np.asarray(z, dtype=np.longdouble)
    top = z.max()
    log_s = z - top - np.log(np.exp(z - top).sum())
    mask = g > 0
    return np.sum(g[mask] * (np.log(g[mask]) - log_s[mask]))


def kl_identity_error(n_pairs: int = 100, n: int = 64, seed: int = 0, step: float = 1e-6) -> float:
    """Worst relative error of softmax(z) - g against central differences over random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        g = rng.dirichlet(np.ones(n))
        z = rng.normal(0.0, 2.0, size=n)
        err = finite_diff_check(lambda x: kl_oracle(g, x), kl_grad_wrt_logits(g, z), z, step)
        worst = max(worst, float(err))
    return worst


def tiny_problem(layers: int, heads: int, seed: int):
    """A 2x2-patch, 4-dim policy with perturbed weights and a random batch."""
    dims = PolicyDims(vocab=10, dim=4, hidden=5, layers=layers, heads=heads, grid=2, patch_px=2, n_views=2, horizon=2)
    rng = np.random.default_rng(seed)
    params = PolicyParams.init(dims, seed)
    for name in params:
        # push the attention weights off the init scale so the attention is not near-uniform;
        # the decoder stays small so its tanh units do not saturate
        gain = 3.0 if name in ("tok_emb", "patch_w", "query_w", "key_w") else 1.0
        params.tensors[name] = params[name] * gain + rng.normal(0.0, 0.1 * gain, size=params[name].shape)
    B = 3
    # images near mid-grey keep the gained pixel features O(1)
    batch = {
        "views": rng.uniform(0.45, 0.55, size=(B, dims.n_views, dims.image_size, dims.image_size, 3)),
        "tokens": rng.integers(0, dims.vocab, size=(B, 5)),
        "proprio": rng.uniform(size=(B, 2)),
        "target": rng.uniform(size=(B, dims.horizon, 2)),
        "prior": rng.dirichlet(np.ones(dims.n_patches), size=(B, dims.n_views)),
    }
    return params, batch


@dataclass
class ModelCheck:
    layers: int
    heads: int
    source: str
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values())


def model_gradcheck(
    lam: float = 0.5, seed: int = 0, variants=TINY_VARIANTS, fault: float = 0.0, step: float = MODEL_STEP
) -> list[ModelCheck]:
    """Per-tensor errors of the analytic gradient of the total loss.

    `fault` scales every analytic gradient by (1 + fault); it exists so the check
    can be shown to fail when the backward pass is wrong.
    """
    out = []
    for i, (layers, heads, source) in enumerate(variants):
        params, b = tiny_problem(layers, heads, seed + i)

        def loss_of(p):
            pred, trace = forward_batch(p, b["views"], b["tokens"], b["proprio"])
            return total_loss(pred, b["target"], b["prior"], trace, lam, source), trace

        (breakdown, d_actions, d_logits), trace = loss_of(params)
        grads = backward_batch(params, trace, d_actions, d_logits)
        check = ModelCheck(layers, heads, source)
        for name in params:

            def f(x, name=name):
                q = params.copy()
                q.tensors[name] = x.reshape(params[name].shape)
                return loss_of(q)[0][0].total

            check.errors[name] = finite_diff_check(f, grads[name] * (1.0 + fault), params[name].copy(), step)
        out.append(check)
    return out
