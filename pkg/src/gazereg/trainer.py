"""Training loop with gaze regularization, gaze-free evaluation and convergence tracking."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import env
from .config import DataConfig, ExperimentConfig, TrainConfig
from .dataset import Dataset
from .gaze_prior import make_variant, make_weights, project_batch
from .losses import LossBreakdown, action_loss, total_loss
from .metrics import topk_overlap_batch
from .numerics import InvalidInputError
from .policy import PolicyDims, PolicyParams, backward_batch, forward_batch

K_GRID = (1, 5, 10)
EVAL_CHUNK = 256


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, last_record: dict | None):
        super().__init__(f"non-finite loss at step {step}; last finite metrics: {last_record}")
        self.step = step
        self.last_record = last_record


class ConfigMismatchError(ValueError):
    pass


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: PolicyParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class MetricsRecord:
    step: int | None
    losses: LossBreakdown | None
    success: float
    overlap: dict[int, float] | None
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        """Stable-order record; wall time is left out so streams stay byte-reproducible."""
        losses = None
        if self.losses is not None:
            losses = self.losses.as_dict()
        return {
            "step": self.step,
            "losses": losses,
            "success": self.success,
            "overlap": None if self.overlap is None else {str(k): self.overlap[k] for k in sorted(self.overlap)},
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), allow_nan=False)


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[MetricsRecord]
    loss_history: list[float] = field(default_factory=list)
    best_params: PolicyParams | None = None
    best_step: int | None = None

    def metrics_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.metrics)


def prepare_priors(ds: Dataset, tcfg: TrainConfig) -> np.ndarray:
    """Patch-level priors (E, n, N) from the stored heatmap windows: aggregate, project, apply variant."""
    if ds.gaze is None:
        raise InvalidInputError("dataset has no gaze heatmaps; regenerate it or disable the gaze path")
    stored_T = (ds.gaze.shape[2] - 1) // 2
    if tcfg.window > stored_T:
        raise ConfigMismatchError(f"train window T={tcfg.window} exceeds the dataset's stored window T={stored_T}")
    grid = ds.config.grid
    if tcfg.variant == "uniform":
        n_patches = grid * grid
        return np.full((len(ds), ds.gaze.shape[1], n_patches), 1.0 / n_patches)
    center = stored_T
    if tcfg.variant == "single_frame":
        return project_batch(ds.gaze[:, :, center].astype(np.float64), grid)
    w = make_weights(tcfg.window, tcfg.sigma)
    frames = ds.gaze[:, :, center - tcfg.window : center + tcfg.window + 1].astype(np.float64)
    agg = np.einsum("t,enthw->enhw", w, frames)
    priors = project_batch(agg, grid)
    if tcfg.variant == "shuffled":
        priors = np.stack([make_variant(p, "shuffled", seed=env.episode_seed(tcfg.seed, i, stream=7)) for i, p in enumerate(priors)])
    return priors


def oracle_priors(scenes, cfg: DataConfig, T: int = 2, sigma: float = 1.0) -> np.ndarray:
    """Structured priors for freshly generated scenes (used for post-hoc overlap only)."""
    w = make_weights(T, sigma)
    out = []
    for scene in scenes:
        frames = np.stack([env.oracle_gaze(scene, cfg, d, T) for d in range(-T, T + 1)], axis=1)
        out.append(project_batch(np.einsum("t,nthw->nhw", w, frames), cfg.grid))
    return np.stack(out)


@dataclass
class EvalSet:
    scenes: list
    views: np.ndarray
    tokens: np.ndarray
    proprio: np.ndarray
    priors: np.ndarray | None


@lru_cache(maxsize=8)
def _eval_set(cfg_json: str, n: int, with_gaze: bool, T: int, sigma: float) -> EvalSet:
    cfg = DataConfig.model_validate_json(cfg_json)
    scenes = [env.generate_scene(env.episode_seed(cfg.seed, i, env.EVAL_STREAM), cfg) for i in range(n)]
    obs = [env.render(s, cfg) for s in scenes]
    return EvalSet(
        scenes=scenes,
        views=np.stack([o.views for o in obs]).astype(np.float32),
        tokens=np.stack([o.tokens for o in obs]),
        proprio=np.stack([o.proprio for o in obs]),
        priors=oracle_priors(scenes, cfg, T, sigma) if with_gaze else None,
    )


def eval_set(cfg: DataConfig, n: int, with_gaze: bool = True, T: int = 2, sigma: float = 1.0) -> EvalSet:
    """Scenes from the evaluation seed stream, disjoint from every training episode."""
    return _eval_set(cfg.model_dump_json(), n, with_gaze, T, sigma)


def _perturbed_views(es: EvalSet, cfg: DataConfig, perturb) -> np.ndarray:
    kind, magnitude = perturb
    out = []
    for i, scene in enumerate(es.scenes):
        obs = env.Observation(views=es.views[i].astype(np.float64), tokens=es.tokens[i], proprio=es.proprio[i])
        centers = None
        if kind == "foveate":
            if es.priors is None:
                raise InvalidInputError("foveation needs gaze; it cannot run with gaze stripped")
            peaks = np.argmax(es.priors[i], axis=-1)
            px = cfg.patch_px
            centers = [((p // cfg.grid + 0.5) * px - 0.5, (p % cfg.grid + 0.5) * px - 0.5) for p in peaks]
        seed = env.episode_seed(scene.seed, 0, stream=3)
        out.append(env.perturb(obs, kind, magnitude, seed, fovea_centers=centers).views)
    return np.stack(out)


def evaluate(
    params: PolicyParams,
    cfg: DataConfig,
    n_episodes: int = 200,
    perturb=None,
    strip_gaze: bool = False,
    source: str = "final_layer",
    T: int = 2,
    sigma: float = 1.0,
) -> MetricsRecord:
    """Gaze-free rollouts on fresh scenes; overlap against the oracle prior is computed afterwards."""
    t0 = time.perf_counter()
    es = eval_set(cfg, n_episodes, with_gaze=not strip_gaze, T=T, sigma=sigma)
    views = es.views if perturb is None or perturb[1] == 0 else _perturbed_views(es, cfg, perturb)
    hits = 0
    attn_chunks = []
    for lo in range(0, n_episodes, EVAL_CHUNK):
        hi = min(lo + EVAL_CHUNK, n_episodes)
        actions, trace = forward_batch(params, views[lo:hi], es.tokens[lo:hi], es.proprio[lo:hi])
        hits += sum(env.success(a, s) for a, s in zip(actions, es.scenes[lo:hi]))
        attn_chunks.append(trace.attention(source))
    overlap = None
    if es.priors is not None:
        attn = np.concatenate(attn_chunks)
        overlap = {k: float(topk_overlap_batch(attn, es.priors, k).mean()) for k in K_GRID}
    return MetricsRecord(step=None, losses=None, success=hits / n_episodes, overlap=overlap, wall_time=time.perf_counter() - t0)


def _check_compatible(cfg: ExperimentConfig, ds: Dataset) -> None:
    if ds.config != cfg.data:
        raise ConfigMismatchError("dataset was generated with a different data config than the experiment")


def train(cfg: ExperimentConfig, ds: Dataset, on_record=None) -> TrainResult:
    """Adam on action MSE + lambda * KL(prior || attention), evaluated every `eval_interval` steps.

    With ``gaze_path=False`` priors and the KL term are never computed; with lambda = 0
    the two paths produce bit-identical parameters.
    """
    _check_compatible(cfg, ds)
    tcfg = cfg.train
    dims = PolicyDims.from_configs(cfg.data, cfg.model)
    seed = tcfg.seed if cfg.model.init_seed is None else cfg.model.init_seed
    params = PolicyParams.init(dims, seed)
    result = TrainResult(params=params, metrics=[])
    if tcfg.steps == 0:
        return result

    priors = prepare_priors(ds, tcfg) if tcfg.gaze_path else None
    opt = Adam(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 11]))
    best = -1.0
    last = None
    t0 = time.perf_counter()
    for step in range(1, tcfg.steps + 1):
        idx = rng.integers(len(ds), size=tcfg.batch)
        pred, trace = forward_batch(params, ds.views[idx], ds.tokens[idx], ds.proprio[idx])
        target = ds.actions[idx].astype(np.float64)
        if priors is not None:
            losses, d_actions, d_logits = total_loss(pred, target, priors[idx], trace, tcfg.lam, tcfg.attention_source)
        else:
            a_loss, d_actions = action_loss(pred, target)
            losses, d_logits = LossBreakdown(a_loss, float("nan"), a_loss, tcfg.lam), None
        if not np.isfinite(losses.total):
            raise DivergenceError(step, last)
        grads = backward_batch(params, trace, d_actions, d_logits)
        opt.step(params, grads)
        result.loss_history.append(losses.total)

        if step % tcfg.eval_interval == 0 or step == tcfg.steps:
            deployed = params.rounded()
            rec = evaluate(
                deployed, cfg.data, tcfg.eval_episodes, source=tcfg.attention_source, T=tcfg.window, sigma=tcfg.sigma
            )
            if priors is None:
                losses = LossBreakdown(losses.action_loss, None, losses.total, tcfg.lam)
            rec.step, rec.losses = step, losses
            rec.wall_time = time.perf_counter() - t0
            result.metrics.append(rec)
            last = rec.as_dict()
            if rec.success > best:
                best = rec.success
                result.best_params, result.best_step = deployed, step
            if on_record is not None:
                on_record(rec)
    return result


def steps_to_threshold(records, threshold: float):
    """First evaluated step whose success reaches `threshold`, else None."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInputError("threshold must lie in [0, 1]")
    for rec in records:
        step, succ = (rec["step"], rec["success"]) if isinstance(rec, dict) else (rec.step, rec.success)
        if succ >= threshold:
            return step
    return None
