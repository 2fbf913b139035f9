"""Action regression loss, gaze KL regularizer and their lambda-weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import InvalidInputError, ShapeError, log_softmax
from .policy import ForwardTrace


@dataclass(frozen=True)
class LossBreakdown:
    action_loss: float
    gaze_loss: float
    total: float
    lam: float

    def as_dict(self) -> dict[str, float]:
        return {"action_loss": self.action_loss, "gaze_loss": self.gaze_loss, "total": self.total, "lambda": self.lam}


def action_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error over every entry (batch included) and its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def _log_attention(trace: ForwardTrace, source: str) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Log of the regularized attention (B, n, N), per-map log-softmaxes, map count, first layer."""
    L = trace.logits.shape[0]
    first = L - 1 if source == "final_layer" else 0
    if source not in ("final_layer", "all_layers_mean"):
        raise InvalidInputError(f"unknown attention source {source!r}")
    logs = log_softmax(trace.logits[first:], axis=-1)  # (L', B, n, heads, N)
    n_maps = logs.shape[0] * logs.shape[3]
    stacked = np.moveaxis(logs, 3, 1).reshape(-1, *logs.shape[1:3], logs.shape[-1])
    top = stacked.max(axis=0)
    log_mean = top + np.log(np.exp(stacked - top).sum(axis=0)) - np.log(n_maps)
    return log_mean, logs, n_maps, first


def gaze_loss(g_per_view, trace: ForwardTrace, source: str = "final_layer") -> tuple[float, np.ndarray]:
    """Mean over examples and views of KL(G || S) and its gradient w.r.t. every attention logit.

    `g_per_view` has shape (B, n, N) (or (n, N) for a single example). With one
    regularized map per view the logit gradient is (S - G) / (B * n).
    """
    g = np.asarray(g_per_view, dtype=np.float64)
    if g.ndim == 2:
        g = g[None]
    L, B, n, heads, N = trace.logits.shape
    if g.shape[:2] != (B, n):
        raise ShapeError(f"got priors for {g.shape[:2]} (examples, views), trace has {(B, n)}")
    if g.shape[2] != N:
        raise ShapeError(f"prior length {g.shape[2]} does not match {N} patches")
    log_s, logs, n_maps, first = _log_attention(trace, source)
    safe_g = np.where(g > 0, g, 1.0)
    kl = np.sum(np.where(g > 0, g * (np.log(safe_g) - log_s), 0.0), axis=-1)
    loss = float(kl.mean())

    d_logits = np.zeros_like(trace.logits)
    norm = 1.0 / (B * n)
    if n_maps == 1:
        d_logits[-1] = (np.exp(logs[0]) - g[:, :, None, :]) * norm
    else:
        # d KL / d S_bar = -G / S_bar; each map contributes S_bar / n_maps
        u = -np.exp(np.log(safe_g) - log_s) * (g > 0) / n_maps
        s = np.exp(logs)
        u = u[None, :, :, None, :]
        d_logits[first:] = s * (u - np.sum(s * u, axis=-1, keepdims=True)) * norm
    return loss, d_logits


def total_loss(pred, target, g_per_view, trace: ForwardTrace, lam: float, source: str = "final_layer"):
    """Returns (LossBreakdown, d_actions, d_attn_logits); lambda is applied exactly once, here."""
    if lam < 0:
        raise InvalidInputError(f"lambda must be >= 0, got {lam}")
    a_loss, d_actions = action_loss(pred, target)
    g_loss, d_logits = gaze_loss(g_per_view, trace, source)
    breakdown = LossBreakdown(action_loss=a_loss, gaze_loss=g_loss, total=a_loss + lam * g_loss, lam=float(lam))
    return breakdown, d_actions, lam * d_logits
