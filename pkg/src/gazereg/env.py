"""Procedural tabletop-analog scenes with instructions, expert trajectories and oracle gaze.

Objects are single-patch colored glyphs on a gray table. The instruction names the
target by color and shape, plus a spatial relation to a reference object. The expert
moves in a straight line from the proprioceptive start to the target patch center.
The oracle gaze fixates the reference early and shifts toward the target later in
the window, which is the anticipatory structure temporal aggregation is meant to keep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import DataConfig
from .numerics import InvalidInputError

BACKGROUND = 0.5

PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],  # red
        [0.15, 0.75, 0.20],  # green
        [0.20, 0.30, 0.95],  # blue
        [0.95, 0.85, 0.10],  # yellow
        [0.85, 0.20, 0.85],  # magenta
        [0.10, 0.85, 0.85],  # cyan
    ]
)

RELATIONS = ("left_of", "right_of", "above", "below")

# stream tags for seed derivation
TRAIN_STREAM = 0
EVAL_STREAM = 1


def episode_seed(global_seed: int, index: int, stream: int = TRAIN_STREAM) -> int:
    ss = np.random.SeedSequence([int(global_seed), int(stream), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def glyph_mask(shape_id: int, px: int) -> np.ndarray:
    """Binary px x px mask for a shape id."""
    r = np.arange(px)
    rr, cc = np.meshgrid(r, r, indexing="ij")
    edge = (rr == 0) | (cc == 0) | (rr == px - 1) | (cc == px - 1)
    mid = px // 2
    masks = [
        np.ones((px, px), dtype=bool),  # solid square
        edge,  # ring
        (rr == mid) | (cc == mid) | (rr == mid - 1) | (cc == mid - 1) if px > 2 else rr == cc,  # plus
        (rr == cc) | (rr + cc == px - 1),  # cross
        (rr == 0) | (rr == px - 1),  # horizontal bars
        rr + cc <= px - 1,  # triangle
    ]
    return masks[shape_id]


def vocab_layout(cfg: DataConfig) -> dict[str, int]:
    """Token id offsets: role-tagged attribute tokens so mean pooling keeps roles apart."""
    s, c = cfg.n_shapes, cfg.n_colors
    layout = {"move": 0, "to": 1}
    layout["target_color"] = 2
    layout["target_shape"] = 2 + c
    layout["relation"] = 2 + c + s
    layout["ref_color"] = layout["relation"] + len(RELATIONS)
    layout["ref_shape"] = layout["ref_color"] + c
    layout["size"] = layout["ref_shape"] + s
    return layout


@dataclass(frozen=True)
class SceneSpec:
    grid: int
    shapes: tuple[int, ...]
    colors: tuple[int, ...]
    cells: tuple[tuple[int, int], ...]  # (row, col) per object in view-1 patch coordinates
    target: int
    reference: int
    relation: int
    start: tuple[float, float]  # proprio start position (x, y) in [0, 1]^2
    seed: int

    def center(self, idx: int) -> np.ndarray:
        r, c = self.cells[idx]
        return np.array([(c + 0.5) / self.grid, (r + 0.5) / self.grid])

    @property
    def target_center(self) -> np.ndarray:
        return self.center(self.target)


@dataclass
class Observation:
    views: np.ndarray  # (n_views, H, W, 3) in [0, 1]
    tokens: np.ndarray  # (N_l,) int
    proprio: np.ndarray  # (2,)


@dataclass
class Episode:
    scene: SceneSpec
    obs: Observation
    actions: np.ndarray  # (h, 2)
    gaze: np.ndarray | None = field(default=None)  # (n_views, 2T+1, H, W)


def rotate_cell(cell: tuple[int, int], grid: int, k: int) -> tuple[int, int]:
    """Patch coordinates after k counter-clockwise quarter turns (np.rot90 convention)."""
    r, c = cell
    for _ in range(k % 4):
        r, c = grid - 1 - c, r
    return r, c


def relation_of(target: tuple[int, int], ref: tuple[int, int]) -> int:
    dr, dc = target[0] - ref[0], target[1] - ref[1]
    if abs(dc) >= abs(dr):
        return 0 if dc < 0 else 1
    return 2 if dr < 0 else 3


def generate_scene(seed: int, cfg: DataConfig) -> SceneSpec:
    capacity = cfg.grid * cfg.grid
    if cfg.n_objects > capacity:
        raise InvalidInputError(f"{cfg.n_objects} objects do not fit a {cfg.grid}x{cfg.grid} grid")
    rng = np.random.default_rng(seed)
    flat = rng.choice(capacity, size=cfg.n_objects, replace=False)
    cells = tuple((int(f) // cfg.grid, int(f) % cfg.grid) for f in flat)
    # target first, distractors are distinct (shape, color) combinations drawn at random
    t_shape = int(rng.integers(cfg.n_shapes))
    t_color = int(rng.integers(cfg.n_colors))
    combos = [(t_shape, t_color)]
    others = [(s, c) for s in range(cfg.n_shapes) for c in range(cfg.n_colors) if (s, c) != (t_shape, t_color)]
    extra = cfg.n_objects - 1
    if extra > 0:
        idx = rng.choice(len(others), size=extra, replace=False)
        combos += [others[int(i)] for i in idx]
    order = rng.permutation(cfg.n_objects)
    combos = [combos[int(i)] for i in order]
    target = int(np.flatnonzero(order == 0)[0])
    reference = int(rng.choice([i for i in range(cfg.n_objects) if i != target]))
    # stored as float32 in the dataset container, so keep it exactly representable there
    start = rng.uniform(0.0, 1.0, size=2).astype(np.float32).astype(np.float64)
    return SceneSpec(
        grid=cfg.grid,
        shapes=tuple(sc[0] for sc in combos),
        colors=tuple(sc[1] for sc in combos),
        cells=cells,
        target=target,
        reference=reference,
        relation=relation_of(cells[target], cells[reference]),
        start=(float(start[0]), float(start[1])),
        seed=int(seed),
    )


def instruction_tokens(scene: SceneSpec, cfg: DataConfig) -> np.ndarray:
    lay = vocab_layout(cfg)
    t, r = scene.target, scene.reference
    return np.array(
        [
            lay["move"],
            lay["to"],
            lay["target_color"] + scene.colors[t],
            lay["target_shape"] + scene.shapes[t],
            lay["relation"] + scene.relation,
            lay["ref_color"] + scene.colors[r],
            lay["ref_shape"] + scene.shapes[r],
        ],
        dtype=np.int64,
    )


def render_view(scene: SceneSpec, cfg: DataConfig, view: int) -> np.ndarray:
    px = cfg.patch_px
    img = np.full((cfg.image_size, cfg.image_size, 3), BACKGROUND)
    for shape, color, cell in zip(scene.shapes, scene.colors, scene.cells):
        r, c = rotate_cell(cell, cfg.grid, view)
        mask = glyph_mask(shape, px)
        block = img[r * px : (r + 1) * px, c * px : (c + 1) * px]
        block[mask] = PALETTE[color]
    return img


def render(scene: SceneSpec, cfg: DataConfig) -> Observation:
    views = np.stack([render_view(scene, cfg, v) for v in range(cfg.n_views)])
    return Observation(views=views, tokens=instruction_tokens(scene, cfg), proprio=np.array(scene.start))


def expert_actions(scene: SceneSpec, h: int, d_a: int = 2) -> np.ndarray:
    if h < 2:
        raise InvalidInputError(f"horizon must be >= 2, got {h}")
    start = np.asarray(scene.start, dtype=np.float64)
    goal = scene.target_center
    frac = np.arange(1, h + 1)[:, None] / h
    actions = start + frac * (goal - start)
    actions[-1] = goal
    return actions[:, :d_a]


def target_weight(delta: int, T: int) -> float:
    """Mixture weight on the target blob: 0.3 at -T rising linearly to 0.8 at +T."""
    if T == 0:
        return 0.55
    return 0.3 + 0.5 * (delta + T) / (2 * T)


def _blob(center_rc: tuple[float, float], size: int, sigma_px: float) -> np.ndarray:
    ys = np.arange(size)[:, None]
    xs = np.arange(size)[None, :]
    d2 = (ys - center_rc[0]) ** 2 + (xs - center_rc[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma_px**2))


def oracle_gaze(scene: SceneSpec, cfg: DataConfig, delta: int, T: int | None = None) -> np.ndarray:
    """Per-view heatmaps (n_views, H, W) for frame offset `delta` in [-T, T]."""
    T = cfg.window if T is None else T
    if abs(delta) > T:
        raise InvalidInputError(f"frame offset {delta} outside window [-{T}, {T}]")
    px = cfg.patch_px
    sigma_px = cfg.gaze_sigma * px
    wt = target_weight(delta, T)
    maps = []
    for v in range(cfg.n_views):
        blobs = []
        for idx in (scene.reference, scene.target):
            r, c = rotate_cell(scene.cells[idx], cfg.grid, v)
            blobs.append(_blob(((r + 0.5) * px - 0.5, (c + 0.5) * px - 0.5), cfg.image_size, sigma_px))
        h = (1.0 - wt) * blobs[0] + wt * blobs[1] + cfg.gaze_floor
        maps.append(np.maximum(h, 0.0))
    return np.stack(maps)


def gaze_window(scene: SceneSpec, cfg: DataConfig) -> np.ndarray:
    """All oracle heatmaps for the window, shape (n_views, 2T+1, H, W)."""
    T = cfg.window
    return np.stack([oracle_gaze(scene, cfg, d) for d in range(-T, T + 1)], axis=1)


def make_episode(seed: int, cfg: DataConfig, with_gaze: bool = True) -> Episode:
    scene = generate_scene(seed, cfg)
    return Episode(
        scene=scene,
        obs=render(scene, cfg),
        actions=expert_actions(scene, cfg.horizon),
        gaze=gaze_window(scene, cfg) if with_gaze else None,
    )


def _box_blur(img: np.ndarray) -> np.ndarray:
    out = img
    for _ in range(2):
        out = ndimage.uniform_filter(out, size=(3, 3, 1), mode="nearest")
    return out


def perturb(
    obs: Observation,
    kind: str,
    magnitude: float,
    seed: int,
    fovea_centers=None,
    fovea_radius: float = 6.0,
) -> Observation:
    """Visual corruption of every view.

    lighting: pixels scaled by (1 + m), m ~ U(-magnitude, magnitude) per view.
    camera_noise: additive N(0, magnitude^2) per pixel.
    foveate: periphery blended toward a twice-applied 3x3 box blur with weight
    min(magnitude, 1); `fovea_centers` gives one (row, col) pixel center per view and
    `fovea_radius` is in pixels.
    """
    if magnitude < 0:
        raise InvalidInputError("perturbation magnitude must be >= 0")
    views = obs.views
    if kind not in ("lighting", "camera_noise", "foveate"):
        raise InvalidInputError(f"unknown perturbation {kind!r}")
    if magnitude == 0:
        return Observation(views=views.copy(), tokens=obs.tokens.copy(), proprio=obs.proprio.copy())
    rng = np.random.default_rng(seed)
    if kind == "lighting":
        m = rng.uniform(-magnitude, magnitude, size=(views.shape[0], 1, 1, 1))
        out = np.clip(views * (1.0 + m), 0.0, 1.0)
    elif kind == "camera_noise":
        out = np.clip(views + rng.normal(0.0, magnitude, size=views.shape), 0.0, 1.0)
    else:
        if fovea_centers is None:
            raise InvalidInputError("foveate needs a gaze peak per view")
        weight = min(magnitude, 1.0)
        n, H, W, _ = views.shape
        ys, xs = np.mgrid[0:H, 0:W]
        out = views.copy()
        for v in range(n):
            cy, cx = fovea_centers[v]
            outside = ((ys - cy) ** 2 + (xs - cx) ** 2) > fovea_radius**2
            blurred = _box_blur(views[v])
            out[v][outside] = (1 - weight) * views[v][outside] + weight * blurred[outside]
    return Observation(views=out, tokens=obs.tokens.copy(), proprio=obs.proprio.copy())


def success(pred, scene: SceneSpec) -> bool:
    pred = np.asarray(pred, dtype=np.float64)
    dist = np.linalg.norm(pred[-1, :2] - scene.target_center)
    return bool(dist <= 0.5 / scene.grid)
