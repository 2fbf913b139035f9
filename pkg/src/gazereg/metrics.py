"""Attention/gaze alignment metrics and ablation-table assembly."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .numerics import InvalidInputError, ShapeError


def topk_indices(s, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties go to the lowest index."""
    s = np.asarray(s, dtype=np.float64)
    if not 1 <= k <= s.shape[-1]:
        raise InvalidInputError(f"k={k} outside [1, {s.shape[-1]}]")
    return np.argsort(-s, axis=-1, kind="stable")[..., :k]


def topk_overlap(s, g, k: int) -> float:
    """Prior mass of `g` inside the k most-attended patches of `s`."""
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise ShapeError(f"attention shape {s.shape} != prior shape {g.shape}")
    return float(g[topk_indices(s, k)].sum())


def topk_overlap_batch(s: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    if s.shape != g.shape:
        raise ShapeError(f"attention shape {s.shape} != prior shape {g.shape}")
    idx = topk_indices(s, k)
    return np.take_along_axis(g, idx, axis=-1).sum(axis=-1)


def topk_iou(a, b, k: int) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    ta = set(topk_indices(a, k).tolist())
    tb = set(topk_indices(b, k).tolist())
    return len(ta & tb) / len(ta | tb)


@dataclass
class OverlapReport:
    k: int
    overlaps: list[float]
    mean: float = field(init=False)
    delta: float | None = None

    def __post_init__(self):
        self.mean = float(np.mean(self.overlaps)) if self.overlaps else float("nan")

    def compare(self, other: "OverlapReport") -> "OverlapReport":
        return OverlapReport(k=self.k, overlaps=list(self.overlaps), delta=self.mean - other.mean)


def overlap_report(attn: np.ndarray, prior: np.ndarray, k: int) -> OverlapReport:
    vals = topk_overlap_batch(attn.reshape(-1, attn.shape[-1]), prior.reshape(-1, prior.shape[-1]), k)
    return OverlapReport(k=k, overlaps=[float(v) for v in vals])


class ScheduleError(ValueError):
    pass


def _final(stream):
    return stream[-1]


def _overlap_at(record, k: int):
    ov = record.get("overlap") or {}
    return ov.get(str(k), ov.get(k))


def compare_models(streams_a: list, streams_b: list, k: int = 10, labels=("A", "B")) -> list[dict]:
    """Align two groups of per-seed metrics streams (lists of record dicts).

    Returns one row per eval step with mean success of each group and the signed
    delta A - B, followed by a final row with per-seed values.
    """
    if not streams_a or not streams_b:
        raise InvalidInputError("each group needs at least one stream")
    steps = [r["step"] for r in streams_a[0]]
    for stream in list(streams_a) + list(streams_b):
        if [r["step"] for r in stream] != steps:
            raise ScheduleError("metrics streams do not share an evaluation schedule")
    la, lb = labels
    rows = []
    for i, step in enumerate(steps):
        sa = [s[i]["success"] for s in streams_a]
        sb = [s[i]["success"] for s in streams_b]
        rows.append(
            {
                "step": step,
                f"success_{la}": float(np.mean(sa)),
                f"success_{lb}": float(np.mean(sb)),
                "delta": float(np.mean(sa) - np.mean(sb)),
            }
        )
    fa = [_final(s) for s in streams_a]
    fb = [_final(s) for s in streams_b]
    oa = [_overlap_at(r, k) for r in fa]
    ob = [_overlap_at(r, k) for r in fb]
    final = {
        "step": "final",
        f"success_{la}": float(np.mean([r["success"] for r in fa])),
        f"success_{lb}": float(np.mean([r["success"] for r in fb])),
        "delta": float(np.mean([r["success"] for r in fa]) - np.mean([r["success"] for r in fb])),
        f"overlap@{k}_{la}": float(np.mean(oa)) if None not in oa else None,
        f"overlap@{k}_{lb}": float(np.mean(ob)) if None not in ob else None,
        f"per_seed_{la}": [r["success"] for r in fa],
        f"per_seed_{lb}": [r["success"] for r in fb],
    }
    rows.append(final)
    return rows


def format_delta(x: float) -> str:
    return f"{x:+.1f}"


def rows_to_csv(rows: list[dict]) -> str:
    header: list[str] = []
    for row in rows:
        header += [k for k in row if k not in header]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (";".join(map(str, v)) if isinstance(v, list) else v) for k, v in row.items()})
    return buf.getvalue()


def rows_to_text(rows: list[dict]) -> str:
    """Aligned plain-text table for docs."""
    header: list[str] = []
    for row in rows:
        header += [k for k in row if k not in header]

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        if isinstance(v, list):
            return "/".join(f"{x:.3f}" if isinstance(x, float) else str(x) for x in v)
        return str(v)

    table = [header] + [[cell(row.get(h)) for h in header] for row in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
