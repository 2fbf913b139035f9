"""Command-line entry point: `gazereg <subcommand> ...`.

Exit codes: 0 success, 1 a gradient check failed, 2 invalid input, 3 numerical
divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import __version__, env
from .checkpoint import MAGIC as CKPT_MAGIC
from .checkpoint import load_checkpoint_full, save_checkpoint
from .config import ExperimentConfig
from .dataset import MAGIC as DATA_MAGIC
from .dataset import Dataset, atomic_write, generate_dataset, read_dataset, read_header, write_dataset
from .gaze_prior import read_pgm, resize_bilinear, write_pgm
from .gradcheck import LOSS_TOL, MODEL_TOL, TINY_VARIANTS, kl_identity_error, model_gradcheck
from .numerics import InvalidInputError
from .policy import forward_batch
from .trainer import DivergenceError, evaluate, oracle_priors, prepare_priors, steps_to_threshold, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

DEFAULT_LAMBDAS = (0.0, 0.001, 0.01, 10.0)
VARIANT_FLAGS = {"structured": "structured", "uniform": "uniform", "shuffled": "shuffled", "single-frame": "single_frame"}
SOURCE_FLAGS = {"final": "final_layer", "all-layers": "all_layers_mean"}


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seeds: dict[str, int | list[int]]
    artifacts: dict[str, str] = field(default_factory=dict)
    version: str = __version__
    started: str = ""
    finished: str = ""

    def write(self, path) -> None:
        self.finished = _now()
        atomic_write(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _workers() -> int:
    raw = os.environ.get("GZRL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"GZRL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InvalidInputError(f"GZRL_THREADS must be a positive integer, got {raw!r}")
    return n


def _read_config(path) -> tuple[ExperimentConfig, dict]:
    """Config from a JSON file; a run manifest is accepted too (its snapshot is used)."""
    if path is None:
        return ExperimentConfig(), {}
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if isinstance(raw, dict) and {"command", "config"} <= set(raw):
        raw = raw["config"]
    if not isinstance(raw, dict):
        raise InvalidInputError(f"{path}: config must be a JSON object")
    return ExperimentConfig.model_validate(raw), raw


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    train_over = {}
    if getattr(args, "lam", None) is not None:
        train_over["lambda"] = args.lam
    if getattr(args, "variant", None) is not None:
        train_over["variant"] = VARIANT_FLAGS[args.variant]
    if getattr(args, "source", None) is not None:
        train_over["attention_source"] = SOURCE_FLAGS[args.source]
    return cfg.replace(train=train_over) if train_over else cfg


def _dataset_for(cfg: ExperimentConfig, raw: dict, path) -> tuple[ExperimentConfig, Dataset]:
    """Load `path` (or generate in memory) and reconcile its data config with the experiment."""
    if path is None:
        return cfg, generate_dataset(cfg.data)
    ds = read_dataset(path)
    if "data" in raw and ds.config != cfg.data:
        raise InvalidInputError(f"{path} was generated with a different data config than the one given")
    return cfg.replace(data=ds.config.model_dump()), ds


def cmd_gen_data(args) -> int:
    started = _now()
    cfg, _ = _read_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(data={"seed": args.seed})
    ds = generate_dataset(cfg.data, with_gaze=not args.no_gaze)
    write_dataset(ds, args.out)
    manifest = RunManifest(
        command=sys.argv[:] if args.argv is None else args.argv,
        config=cfg.snapshot(),
        seeds={"data": cfg.data.seed},
        artifacts={"dataset": os.fspath(args.out)},
        started=started,
    )
    manifest.write(os.fspath(args.out) + ".manifest.json")
    print(json.dumps({"dataset": os.fspath(args.out), "episodes": len(ds), "has_gaze": ds.has_gaze}))
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    cfg, raw = _read_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(train={"seed": args.seed})
    cfg = _apply_flags(cfg, args)
    cfg, ds = _dataset_for(cfg, raw, args.data)
    if args.strip_gaze:
        ds = ds.strip_gaze()
        cfg = cfg.replace(train={"gaze_path": False})
    os.makedirs(args.out, exist_ok=True)

    def progress(rec):
        print(f"step {rec.step}: success {rec.success:.3f} loss {rec.losses.total:.5f}", file=sys.stderr)

    try:
        result = train(cfg, ds, on_record=None if args.quiet else progress)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        raise
    snapshot = cfg.snapshot()
    paths = {
        "final": os.path.join(args.out, "final.ckpt"),
        "best": os.path.join(args.out, "best.ckpt"),
        "metrics": os.path.join(args.out, "metrics.jsonl"),
    }
    save_checkpoint(result.params.rounded(), paths["final"], snapshot)
    best = result.best_params if result.best_params is not None else result.params.rounded()
    save_checkpoint(best, paths["best"], snapshot)
    atomic_write(paths["metrics"], result.metrics_jsonl())
    manifest = RunManifest(
        command=sys.argv[:] if args.argv is None else args.argv,
        config=snapshot,
        seeds={"data": cfg.data.seed, "train": cfg.train.seed},
        artifacts=paths,
        started=started,
    )
    manifest.write(os.path.join(args.out, "manifest.json"))
    final = result.metrics[-1].as_dict() if result.metrics else None
    print(json.dumps({"out": os.fspath(args.out), "best_step": result.best_step, "final": final}))
    return EXIT_OK


def _checkpoint_config(path, args) -> tuple:
    params, stored = load_checkpoint_full(path)
    if args.config is not None:
        cfg, _ = _read_config(args.config)
    elif stored is not None:
        cfg = ExperimentConfig.model_validate(stored)
    else:
        raise InvalidInputError(f"{path} carries no experiment config; pass --config")
    if args.seed is not None:
        cfg = cfg.replace(data={"seed": args.seed})
    return params, cfg


def cmd_eval(args) -> int:
    params, cfg = _checkpoint_config(args.checkpoint, args)
    cfg = _apply_flags(cfg, args)
    perturb = None
    if args.perturb is not None:
        kind, mag = args.perturb
        try:
            perturb = (kind, float(mag))
        except ValueError:
            raise InvalidInputError(f"perturbation magnitude must be a number, got {mag!r}") from None
    t = cfg.train
    rec = evaluate(
        params,
        cfg.data,
        args.episodes or t.eval_episodes,
        perturb=perturb,
        strip_gaze=args.strip_gaze,
        source=t.attention_source,
        T=t.window,
        sigma=t.sigma,
    )
    out = rec.as_dict()
    out.update(
        checkpoint=os.fspath(args.checkpoint),
        perturb=None if perturb is None else {"kind": perturb[0], "magnitude": perturb[1]},
        strip_gaze=bool(args.strip_gaze),
        episodes=args.episodes or t.eval_episodes,
    )
    print(json.dumps(out))
    return EXIT_OK


def _sweep_cell(snapshot: dict, data_path, lam: float, seed: int) -> dict:
    cfg = ExperimentConfig.model_validate(snapshot).replace(train={"lambda": lam, "seed": seed})
    ds = read_dataset(data_path) if data_path is not None else generate_dataset(cfg.data)
    result = train(cfg, ds)
    return {"lambda": lam, "seed": seed, "metrics": [r.as_dict() for r in result.metrics]}


def _parse_list(text: str, kind) -> list:
    try:
        values = [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidInputError(f"cannot parse list {text!r}") from None
    if not values:
        raise InvalidInputError("list must hold at least one value")
    return values


def sweep_rows(cells: list[dict], threshold: float = 0.6) -> list[dict]:
    """One row per (lambda, seed) cell from its final record, with the delta to lambda = 0 of that seed."""
    base = {c["seed"]: c["metrics"][-1]["success"] for c in cells if c["lambda"] == 0 and c["metrics"]}
    rows = []
    for c in cells:
        final = c["metrics"][-1] if c["metrics"] else {"success": None, "overlap": None, "losses": None}
        ov = final.get("overlap") or {}
        losses = final.get("losses") or {}
        succ = final["success"]
        rows.append(
            {
                "lambda": c["lambda"],
                "seed": c["seed"],
                "success": succ,
                "best_success": max((r["success"] for r in c["metrics"]), default=None),
                "overlap@1": ov.get("1"),
                "overlap@5": ov.get("5"),
                "overlap@10": ov.get("10"),
                "action_loss": losses.get("action_loss"),
                "gaze_loss": losses.get("gaze_loss"),
                f"steps_to_{threshold:g}": steps_to_threshold(c["metrics"], threshold) if c["metrics"] else None,
                "delta_vs_lambda0": None if c["seed"] not in base or succ is None else succ - base[c["seed"]],
            }
        )
    return rows


def sweep_summary(rows: list[dict]) -> list[dict]:
    """Mean over seeds per lambda."""
    out = []
    for lam in dict.fromkeys(r["lambda"] for r in rows):
        group = [r for r in rows if r["lambda"] == lam]
        out.append(
            {
                "lambda": lam,
                "seeds": len(group),
                "mean_success": float(np.mean([r["success"] for r in group])),
                "mean_overlap@10": None if None in [r["overlap@10"] for r in group] else float(np.mean([r["overlap@10"] for r in group])),
                "per_seed": [r["success"] for r in group],
            }
        )
    return out


def cmd_sweep_lambda(args) -> int:
    from .metrics import rows_to_csv, rows_to_text

    started = _now()
    cfg, raw = _read_config(args.config)
    cfg = _apply_flags(cfg, args)
    if args.data is not None:
        cfg, _ = _dataset_for(cfg, raw, args.data)
    lams = _parse_list(args.values, float) if args.values else list(DEFAULT_LAMBDAS)
    seeds = _parse_list(args.seeds, int) if args.seeds else [cfg.train.seed if args.seed is None else args.seed]
    grid = [(lam, seed) for lam in lams for seed in seeds]
    snapshot = cfg.snapshot()
    workers = min(_workers(), len(grid))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_cell, snapshot, args.data, lam, seed) for lam, seed in grid]
            cells = [f.result() for f in futures]
    else:
        cells = [_sweep_cell(snapshot, args.data, lam, seed) for lam, seed in grid]

    os.makedirs(args.out, exist_ok=True)
    artifacts = {}
    for c in cells:
        path = os.path.join(args.out, f"metrics_lambda{c['lambda']:g}_seed{c['seed']}.jsonl")
        atomic_write(path, "".join(json.dumps(r, allow_nan=False) + "\n" for r in c["metrics"]))
        artifacts[f"metrics_lambda{c['lambda']:g}_seed{c['seed']}"] = path
    rows = sweep_rows(cells)
    summary = sweep_summary(rows)
    artifacts["csv"] = os.path.join(args.out, "sweep.csv")
    artifacts["text"] = os.path.join(args.out, "sweep.txt")
    atomic_write(artifacts["csv"], rows_to_csv(rows))
    atomic_write(artifacts["text"], rows_to_text(rows) + "\n" + rows_to_text(summary))
    RunManifest(
        command=sys.argv[:] if args.argv is None else args.argv,
        config=snapshot,
        seeds={"data": cfg.data.seed, "train": seeds},
        artifacts=artifacts,
        started=started,
    ).write(os.path.join(args.out, "manifest.json"))
    print(rows_to_text(summary), end="")
    return EXIT_OK


def _luminance(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def _upsample(dist: np.ndarray, grid: int, px: int) -> np.ndarray:
    return np.kron(dist.reshape(grid, grid), np.ones((px, px)))


def cmd_export_attn(args) -> int:
    started = _now()
    params, cfg = _checkpoint_config(args.checkpoint, args)
    cfg = _apply_flags(cfg, args)
    ds = read_dataset(args.data)
    if ds.config.grid != cfg.data.grid or ds.config.patch_px != cfg.data.patch_px or ds.config.n_views != cfg.data.n_views:
        raise InvalidInputError("dataset image layout does not match the checkpoint")
    count = min(args.count, len(ds))
    idx = np.arange(count)
    _, trace = forward_batch(params, ds.views[idx], ds.tokens[idx], ds.proprio[idx])
    attn = trace.attention(cfg.train.attention_source)
    if ds.has_gaze:
        priors = prepare_priors(ds, cfg.train.model_copy(update={"variant": "structured"}))[idx]
    else:
        priors = oracle_priors(ds.scenes[:count], ds.config, cfg.train.window, cfg.train.sigma)
    os.makedirs(args.out, exist_ok=True)
    grid, px = ds.config.grid, ds.config.patch_px
    on_object = 0
    files = []
    for i in range(count):
        scene = ds.scenes[i]
        for v in range(ds.config.n_views):
            stem = os.path.join(args.out, f"scene{i}_view{v}")
            write_pgm(stem + "_obs.pgm", _luminance(ds.views[i, v].astype(np.float64)))
            write_pgm(stem + "_attn.pgm", _upsample(attn[i, v], grid, px))
            write_pgm(stem + "_gaze.pgm", _upsample(priors[i, v], grid, px))
            files += [stem + s for s in ("_obs.pgm", "_attn.pgm", "_gaze.pgm")]
            top = int(np.argmax(attn[i, v]))
            wanted = {
                r * grid + c
                for r, c in (env.rotate_cell(scene.cells[k], grid, v) for k in (scene.target, scene.reference))
            }
            on_object += top in wanted
    frac = on_object / (count * ds.config.n_views) if count else 0.0
    RunManifest(
        command=sys.argv[:] if args.argv is None else args.argv,
        config=cfg.snapshot(),
        seeds={"data": ds.config.seed},
        artifacts={"dir": os.fspath(args.out), "files": str(len(files))},
        started=started,
    ).write(os.path.join(args.out, "manifest.json"))
    print(json.dumps({"out": os.fspath(args.out), "scenes": count, "argmax_on_target_or_reference": frac}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    fault = 0.01 if args.inject_fault else 0.0
    ok = True
    kl_err = kl_identity_error(n_pairs=200 if args.full else 100)
    if fault:
        kl_err = max(kl_err, fault)
    status = "ok" if kl_err < LOSS_TOL else "FAIL"
    ok &= kl_err < LOSS_TOL
    print(f"kl_logit_gradient  max_rel_err={kl_err:.3e}  tol={LOSS_TOL:g}  {status}")
    variants = TINY_VARIANTS * 5 if args.full else TINY_VARIANTS
    for check in model_gradcheck(variants=variants, fault=fault):
        for name, err in check.errors.items():
            good = err < MODEL_TOL
            ok &= good
            tag = f"L{check.layers}H{check.heads}/{check.source}"
            print(f"{tag:<24} {name:<10} max_rel_err={err:.3e}  tol={MODEL_TOL:g}  {'ok' if good else 'FAIL'}")
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_manifest(args) -> int:
    with open(args.path, "rb") as fh:
        head = fh.read(len(DATA_MAGIC))
    if head == DATA_MAGIC:
        info = read_header(args.path)
    elif head == CKPT_MAGIC:
        params, stored = load_checkpoint_full(args.path)
        info = {
            "magic": CKPT_MAGIC.decode(),
            "dims": params.dims.as_dict(),
            "experiment": stored,
            "tensors": {n: list(t.shape) for n, t in params.items()},
        }
    else:
        raise InvalidInputError(f"{args.path}: neither a GZRL-DATA nor a GZRL-CKPT file")
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_resize_heatmap(args) -> int:
    h = read_pgm(args.input)
    height, width = args.size
    if height < 1 or width < 1:
        raise InvalidInputError("target size must be positive")
    write_pgm(args.out, resize_bilinear(h, height, width))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazereg", description="Gaze-regularized attention training on a synthetic task.")
    parser.add_argument("--version", action="version", version=f"gazereg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", metavar="PATH", help="experiment config JSON (or a run manifest)")
        if seed:
            p.add_argument("--seed", type=int, metavar="N")

    def training_flags(p):
        p.add_argument("--lambda", dest="lam", type=float, metavar="X", help="gaze loss weight")
        p.add_argument("--variant", choices=sorted(VARIANT_FLAGS))
        p.add_argument("--source", choices=sorted(SOURCE_FLAGS), help="which attention is regularized and reported")

    p = sub.add_parser("gen-data", help="generate a GZRL-DATA dataset")
    common(p)
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--no-gaze", action="store_true", help="omit oracle gaze heatmaps")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy; writes checkpoints, metrics.jsonl and a manifest")
    common(p)
    training_flags(p)
    p.add_argument("--data", metavar="PATH", help="dataset file (generated in memory from the config when omitted)")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--strip-gaze", action="store_true", help="drop gaze from the dataset and train without the gaze path")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="gaze-free evaluation of a checkpoint on fresh scenes")
    common(p)
    p.add_argument("--source", choices=sorted(SOURCE_FLAGS))
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--perturb", nargs=2, metavar=("KIND", "MAG"))
    p.add_argument("--strip-gaze", action="store_true", help="no gaze anywhere; overlap is not reported")
    p.add_argument("--episodes", type=int, metavar="N")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda", help="train every (lambda, seed) cell and tabulate")
    common(p)
    training_flags(p)
    p.add_argument("--values", metavar="LIST", help="comma-separated lambdas (default 0,0.001,0.01,10)")
    p.add_argument("--seeds", metavar="LIST", help="comma-separated training seeds")
    p.add_argument("--data", metavar="PATH")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("export-attn", help="write obs/attn/gaze PGM triptychs")
    common(p)
    p.add_argument("--source", choices=sorted(SOURCE_FLAGS))
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--count", type=int, default=8, metavar="N", help="number of scenes (default 8)")
    p.set_defaults(func=cmd_export_attn)

    p = sub.add_parser("gradcheck", help="finite-difference checks of the loss and model gradients")
    p.add_argument("--full", action="store_true", help="20 tiny configurations and 200 KL pairs")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("manifest", help="print a dataset or checkpoint header as JSON")
    p.add_argument("path", metavar="PATH")
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("resize-heatmap", help="bilinear resize of a PGM heatmap")
    p.add_argument("input", metavar="IN")
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--size", nargs=2, type=int, required=True, metavar=("H", "W"))
    p.set_defaults(func=cmd_resize_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = None if argv is None else ["gazereg", *argv]
    try:
        return args.func(args)
    except DivergenceError:
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
