"""Minimal vision-language-action policy with an exposed language-to-patch attention.

Per view, image patches are embedded (pixel values plus fixed patch coordinates),
a global language query built from mean-pooled token embeddings attends over them,
and the attention-weighted values form a context vector. Contexts are averaged over
views, concatenated with a proprio embedding and decoded by a tanh MLP into an
action sequence. With two layers the second query is the first query plus the
first layer's context.

Everything runs batched over a leading example axis; `forward`/`infer` wrap a single
observation. The backward pass is analytic and accepts two upstream signals: the
gradient of the loss with respect to the actions and a gradient with respect to
the attention logits (the gaze term).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .numerics import ShapeError, softmax

# input gains: centred pixels and patch coordinates are scaled up so that, at the
# standard init, patch embeddings differ enough for attention to form early
PIXEL_GAIN = 16.0
COORD_GAIN = 8.0
PARAM_NAMES = ("tok_emb", "patch_w", "query_w", "key_w", "value_w", "proprio_w", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class PolicyDims:
    vocab: int = 32
    dim: int = 96
    hidden: int = 64
    layers: int = 1
    heads: int = 8
    grid: int = 8
    patch_px: int = 4
    n_views: int = 2
    horizon: int = 8
    action_dim: int = 2
    proprio_dim: int = 2
    channels: int = 3
    patch_context: bool = True

    @property
    def image_size(self) -> int:
        return self.grid * self.patch_px

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_features(self) -> int:
        # pixels, optionally the mean of the 8 neighbouring patches, then (x, y, 1)
        pixels = self.patch_px * self.patch_px * self.channels
        return pixels * (2 if self.patch_context else 1) + 3

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d = self.dim
        return {
            "tok_emb": (self.vocab, d),
            "patch_w": (self.patch_features, d),
            "query_w": (d, d),
            "key_w": (self.layers, d, d),
            "value_w": (self.layers, d, d),
            "proprio_w": (self.proprio_dim, d),
            "w1": (2 * d, self.hidden),
            "b1": (self.hidden,),
            "w2": (self.hidden, self.horizon * self.action_dim),
            "b2": (self.horizon * self.action_dim,),
        }

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_configs(cls, data, model) -> "PolicyDims":
        return cls(
            vocab=model.vocab,
            dim=model.dim,
            hidden=model.hidden,
            layers=model.layers,
            heads=model.heads,
            patch_context=model.patch_context,
            grid=data.grid,
            patch_px=data.patch_px,
            n_views=data.n_views,
            horizon=data.horizon,
        )


class PolicyParams:
    """Named float64 tensors plus the dims they were built for."""

    def __init__(self, dims: PolicyDims, tensors: dict[str, np.ndarray]):
        expected = dims.shapes()
        if set(tensors) != set(expected):
            raise ShapeError(f"parameter names {sorted(tensors)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {tensors[name].shape}, expected {shape}")
        self.dims = dims
        self.tensors = {name: np.asarray(tensors[name], dtype=np.float64) for name in PARAM_NAMES}

    @classmethod
    def init(cls, dims: PolicyDims, seed: int) -> "PolicyParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in dims.shapes().items():
            if name in ("b1", "b2"):
                tensors[name] = np.zeros(shape)
                continue
            fan_in = shape[-2]
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        return cls(dims, tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(PARAM_NAMES)

    def items(self):
        return ((n, self.tensors[n]) for n in PARAM_NAMES)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.dims, {n: t.copy() for n, t in self.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(t) for n, t in self.items()}

    def rounded(self) -> "PolicyParams":
        """The parameters as a single-precision checkpoint would store them."""
        return PolicyParams(self.dims, {n: t.astype(np.float32).astype(np.float64) for n, t in self.items()})


@dataclass
class ForwardTrace:
    feats: np.ndarray  # (B, n, N, f)
    tokens: np.ndarray  # (B, N_l)
    proprio: np.ndarray  # (B, d_p)
    x: np.ndarray  # (B, n, N, d)
    lang: np.ndarray  # (B, d) mean-pooled token embedding
    queries: list  # per layer (B, n, d)
    keys: list  # per layer (B, n, heads, N, dh)
    values: list  # per layer (B, n, heads, N, dh)
    logits: np.ndarray  # (L, B, n, heads, N)
    attn: np.ndarray  # (L, B, n, heads, N)
    contexts: list  # per layer (B, n, d)
    joint: np.ndarray  # (B, 2d)
    hidden: np.ndarray  # (B, d_h)

    @property
    def batch(self) -> int:
        return self.feats.shape[0]

    def attention(self, source: str = "final_layer") -> np.ndarray:
        """Regularized attention (B, n, N): head mean of the final layer or of all layers."""
        if source == "final_layer":
            maps = self.attn[-1].mean(axis=2)
        elif source == "all_layers_mean":
            maps = self.attn.mean(axis=(0, 3))
        else:
            raise ValueError(f"unknown attention source {source!r}")
        return maps / maps.sum(axis=-1, keepdims=True)


def patch_features(views: np.ndarray, dims: PolicyDims) -> np.ndarray:
    """(B, n, H, W, C) images -> (B, n, N_v, patch_features), row-major patch order."""
    views = np.asarray(views, dtype=np.float64)
    if views.ndim == 4:
        views = views[None]
    B, n, H, W, C = views.shape
    size, px, P = dims.image_size, dims.patch_px, dims.grid
    if (n, H, W, C) != (dims.n_views, size, size, dims.channels):
        raise ShapeError(f"views have shape {(n, H, W, C)}, expected {(dims.n_views, size, size, dims.channels)}")
    patches = views.reshape(B, n, P, px, P, px, C).transpose(0, 1, 2, 4, 3, 5, 6)
    pix = (patches.reshape(B, n, P * P, px * px * C) - 0.5) * PIXEL_GAIN
    rows, cols = np.divmod(np.arange(P * P), P)
    coords = np.stack([((cols + 0.5) / P - 0.5) * COORD_GAIN, ((rows + 0.5) / P - 0.5) * COORD_GAIN, np.ones(P * P)], axis=-1)
    coords = np.broadcast_to(coords, (B, n, P * P, 3))
    if not dims.patch_context:
        return np.concatenate([pix, coords], axis=-1)
    # zero-padded 3x3 neighbourhood sum minus the centre, i.e. the surrounding patches
    grid = pix.reshape(B, n, P, P, -1)
    pad = np.pad(grid, ((0, 0), (0, 0), (1, 1), (1, 1), (0, 0)))
    nb = sum(pad[:, :, 1 + dr : 1 + dr + P, 1 + dc : 1 + dc + P] for dr in (-1, 0, 1) for dc in (-1, 0, 1)) - grid
    return np.concatenate([pix, nb.reshape(B, n, P * P, -1) / 8.0, coords], axis=-1)


def _check_inputs(params: PolicyParams, tokens: np.ndarray, proprio: np.ndarray, batch: int) -> None:
    dims = params.dims
    if tokens.ndim != 2 or tokens.shape[0] != batch:
        raise ShapeError(f"tokens have shape {tokens.shape}, expected ({batch}, N_l)")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= dims.vocab):
        raise ShapeError(f"token ids must lie in [0, {dims.vocab})")
    if proprio.shape != (batch, dims.proprio_dim):
        raise ShapeError(f"proprio has shape {proprio.shape}, expected ({batch}, {dims.proprio_dim})")


def forward_batch(params: PolicyParams, views, tokens, proprio) -> tuple[np.ndarray, ForwardTrace]:
    dims = params.dims
    feats = patch_features(views, dims)
    B, n, N, _ = feats.shape
    tokens = np.asarray(tokens, dtype=np.int64)
    proprio = np.asarray(proprio, dtype=np.float64)
    _check_inputs(params, tokens, proprio, B)
    d, nh, dh = dims.dim, dims.heads, dims.head_dim
    scale = 1.0 / np.sqrt(dh)

    x = feats @ params["patch_w"]
    lang = params["tok_emb"][tokens].mean(axis=1)
    q = np.broadcast_to((lang @ params["query_w"])[:, None, :], (B, n, d)).copy()

    queries, keys, values, contexts, logits, attn = [], [], [], [], [], []
    for layer in range(dims.layers):
        k = (x @ params["key_w"][layer]).reshape(B, n, N, nh, dh).transpose(0, 1, 3, 2, 4)
        v = (x @ params["value_w"][layer]).reshape(B, n, N, nh, dh).transpose(0, 1, 3, 2, 4)
        qh = q.reshape(B, n, nh, dh)
        z = (k @ qh[..., None])[..., 0] * scale
        s = softmax(z, axis=-1)
        ctx = (s[..., None, :] @ v)[..., 0, :].reshape(B, n, d)
        queries.append(q)
        keys.append(k)
        values.append(v)
        logits.append(z)
        attn.append(s)
        contexts.append(ctx)
        q = q + ctx

    pooled = contexts[-1].mean(axis=1)
    joint = np.concatenate([pooled, proprio @ params["proprio_w"]], axis=1)
    hidden = np.tanh(joint @ params["w1"] + params["b1"])
    out = hidden @ params["w2"] + params["b2"]
    trace = ForwardTrace(
        feats=feats,
        tokens=tokens,
        proprio=proprio,
        x=x,
        lang=lang,
        queries=queries,
        keys=keys,
        values=values,
        logits=np.stack(logits),
        attn=np.stack(attn),
        contexts=contexts,
        joint=joint,
        hidden=hidden,
    )
    return out.reshape(B, dims.horizon, dims.action_dim), trace


def backward_batch(params: PolicyParams, trace: ForwardTrace, d_actions, d_attn_logits=None) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/dactions (B, h, d_a) and optional dL/dlogits (L, B, n, heads, N)."""
    dims = params.dims
    B, n, N, f = trace.feats.shape
    d, nh, dh = dims.dim, dims.heads, dims.head_dim
    scale = 1.0 / np.sqrt(dh)
    d_actions = np.asarray(d_actions, dtype=np.float64)
    if d_actions.shape != (B, dims.horizon, dims.action_dim):
        raise ShapeError(f"d_actions has shape {d_actions.shape}, expected {(B, dims.horizon, dims.action_dim)}")
    if d_attn_logits is not None:
        d_attn_logits = np.asarray(d_attn_logits, dtype=np.float64)
        if d_attn_logits.shape != trace.logits.shape:
            raise ShapeError(f"d_attn_logits has shape {d_attn_logits.shape}, expected {trace.logits.shape}")
    if trace.x.shape != (B, n, N, d):
        raise ShapeError("stale trace: activations do not match the parameter dims")

    grads = params.zeros_like()
    dout = d_actions.reshape(B, -1)
    grads["w2"] = trace.hidden.T @ dout
    grads["b2"] = dout.sum(axis=0)
    da1 = (dout @ params["w2"].T) * (1.0 - trace.hidden**2)
    grads["w1"] = trace.joint.T @ da1
    grads["b1"] = da1.sum(axis=0)
    djoint = da1 @ params["w1"].T
    grads["proprio_w"] = trace.proprio.T @ djoint[:, d:]

    dctx = np.broadcast_to(djoint[:, None, :d] / n, (B, n, d))
    dq_next = np.zeros((B, n, d))
    dx = np.zeros((B, n, N, d))
    xf = trace.x.reshape(-1, d)
    for layer in reversed(range(dims.layers)):
        if layer < dims.layers - 1:
            dctx = dq_next
        s = trace.attn[layer]
        k, v = trace.keys[layer], trace.values[layer]
        qh = trace.queries[layer].reshape(B, n, nh, dh)
        dctx_h = dctx.reshape(B, n, nh, dh)
        ds = (v @ dctx_h[..., None])[..., 0]
        dv = s[..., :, None] * dctx_h[..., None, :]
        dz = s * (ds - np.sum(s * ds, axis=-1, keepdims=True))
        if d_attn_logits is not None:
            dz = dz + d_attn_logits[layer]
        dk = dz[..., :, None] * qh[..., None, :] * scale
        dq = (dz[..., None, :] @ k)[..., 0, :] * scale
        dk = dk.transpose(0, 1, 3, 2, 4).reshape(B, n, N, d)
        dv = dv.transpose(0, 1, 3, 2, 4).reshape(B, n, N, d)
        grads["key_w"][layer] = xf.T @ dk.reshape(-1, d)
        grads["value_w"][layer] = xf.T @ dv.reshape(-1, d)
        dx += dk @ params["key_w"][layer].T + dv @ params["value_w"][layer].T
        dq_next = dq.reshape(B, n, d) + dq_next

    dq0 = dq_next.sum(axis=1)
    grads["query_w"] = trace.lang.T @ dq0
    dlang = dq0 @ params["query_w"].T
    n_tok = trace.tokens.shape[1]
    np.add.at(grads["tok_emb"], trace.tokens, np.broadcast_to(dlang[:, None, :] / n_tok, (B, n_tok, d)))
    grads["patch_w"] = trace.feats.reshape(-1, f).T @ dx.reshape(-1, d)
    return grads


def _as_batch(obs):
    views = np.asarray(obs.views, dtype=np.float64)[None]
    tokens = np.asarray(obs.tokens)[None]
    proprio = np.asarray(obs.proprio, dtype=np.float64)[None]
    return views, tokens, proprio


def forward(params: PolicyParams, obs) -> tuple[np.ndarray, ForwardTrace]:
    actions, trace = forward_batch(params, *_as_batch(obs))
    return actions[0], trace


def backward(params: PolicyParams, obs, trace: ForwardTrace, d_actions, d_attn_logits=None) -> dict[str, np.ndarray]:
    d_actions = np.asarray(d_actions, dtype=np.float64)[None]
    if d_attn_logits is not None:
        d_attn_logits = np.asarray(d_attn_logits, dtype=np.float64)
        d_attn_logits = d_attn_logits.reshape(trace.logits.shape)
    return backward_batch(params, trace, d_actions, d_attn_logits)


def infer(params: PolicyParams, obs) -> np.ndarray:
    """Actions from images, instruction and proprio only; there is no gaze input."""
    return forward(params, obs)[0]


def infer_batch(params: PolicyParams, views, tokens, proprio) -> np.ndarray:
    return forward_batch(params, views, tokens, proprio)[0]


def attention_all_layers_mean(trace: ForwardTrace) -> np.ndarray:
    """Per-view attention averaged over layers (and heads), renormalized: (B, n, N)."""
    return trace.attention("all_layers_mean")
