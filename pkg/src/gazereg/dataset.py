"""Episode datasets and the GZRL-DATA binary container.

Layout (all little-endian):

    magic       9 bytes  b"GZRL-DATA"
    version     u32
    config      u32 byte length, then UTF-8 JSON of the data config (sorted keys)
    flags       u32      bit 0 set when gaze heatmaps are present
    episodes    u64
    per episode:
        seed                    u64
        n_objects               u32
        objects                 n_objects x (shape, color, row, col) u32
        target, reference, rel  3 x u32
        instruction             u32 length, then u16 token ids
        proprio, images, expert actions[, gaze]   tensors

A tensor is u32 ndim, ndim x u32 dims, then float32 values in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, replace

import numpy as np

from .config import DataConfig
from .env import SceneSpec, episode_seed, make_episode

MAGIC = b"GZRL-DATA"
VERSION = 1
FLAG_GAZE = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    config: DataConfig
    scenes: list[SceneSpec]
    views: np.ndarray  # (E, n, H, W, 3) float32
    tokens: np.ndarray  # (E, N_l) int64
    proprio: np.ndarray  # (E, 2) float32
    actions: np.ndarray  # (E, h, 2) float32
    gaze: np.ndarray | None  # (E, n, 2T+1, H, W) float32

    def __len__(self) -> int:
        return len(self.scenes)

    @property
    def has_gaze(self) -> bool:
        return self.gaze is not None

    def strip_gaze(self) -> "Dataset":
        return replace(self, gaze=None)


def generate_dataset(cfg: DataConfig, with_gaze: bool = True) -> Dataset:
    episodes = [make_episode(episode_seed(cfg.seed, i), cfg, with_gaze) for i in range(cfg.episodes)]
    return Dataset(
        config=cfg,
        scenes=[e.scene for e in episodes],
        views=np.stack([e.obs.views for e in episodes]).astype(np.float32),
        tokens=np.stack([e.obs.tokens for e in episodes]).astype(np.int64),
        proprio=np.stack([e.obs.proprio for e in episodes]).astype(np.float32),
        actions=np.stack([e.actions for e in episodes]).astype(np.float32),
        gaze=np.stack([e.gaze for e in episodes]).astype(np.float32) if with_gaze else None,
    )


def _config_bytes(cfg: DataConfig) -> bytes:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True).encode("utf-8")


def _tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def encode_dataset(ds: Dataset) -> bytes:
    cfg_bytes = _config_bytes(ds.config)
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(cfg_bytes)),
        cfg_bytes,
        struct.pack("<I", FLAG_GAZE if ds.has_gaze else 0),
        struct.pack("<Q", len(ds)),
    ]
    for i, scene in enumerate(ds.scenes):
        parts.append(struct.pack("<QI", scene.seed, len(scene.cells)))
        for shape, color, (r, c) in zip(scene.shapes, scene.colors, scene.cells):
            parts.append(struct.pack("<4I", shape, color, r, c))
        parts.append(struct.pack("<3I", scene.target, scene.reference, scene.relation))
        toks = ds.tokens[i]
        parts.append(struct.pack("<I", toks.size) + np.asarray(toks, dtype="<u2").tobytes())
        parts.append(_tensor_bytes(ds.proprio[i]))
        parts.append(_tensor_bytes(ds.views[i]))
        parts.append(_tensor_bytes(ds.actions[i]))
        if ds.has_gaze:
            parts.append(_tensor_bytes(ds.gaze[i]))
    return b"".join(parts)


def encoded_size(cfg: DataConfig, episodes: int, with_gaze: bool = True, n_tokens: int = 7) -> int:
    """Byte size of a container, without building it; every episode has the same layout."""
    header = len(MAGIC) + 4 + 4 + len(_config_bytes(cfg)) + 4 + 8
    size = cfg.image_size

    def tensor(*shape):
        return 4 + 4 * len(shape) + 4 * int(np.prod(shape))

    per = 8 + 4 + 16 * cfg.n_objects + 12 + 4 + 2 * n_tokens
    per += tensor(2) + tensor(cfg.n_views, size, size, 3) + tensor(cfg.horizon, 2)
    if with_gaze:
        per += tensor(cfg.n_views, 2 * cfg.window + 1, size, size)
    return header + episodes * per


def atomic_write(path, payload: bytes | str) -> None:
    """Write to a temp file in the target directory, then rename over `path`."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    mode = "wb" if isinstance(payload, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(ds: Dataset, path) -> None:
    atomic_write(path, encode_dataset(ds))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: wanted {n} bytes", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def tensor(self) -> np.ndarray:
        start = self.pos
        (ndim,) = self.unpack("I")
        if ndim > 8:
            raise FormatError(f"implausible tensor rank {ndim}", start)
        shape = self.unpack(f"{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def _read_header(r: _Reader) -> dict:
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a GZRL-DATA file: bad magic", 0)
    (version,) = r.unpack("I")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", len(MAGIC))
    (n_cfg,) = r.unpack("I")
    at = r.pos
    try:
        config = json.loads(r.take(n_cfg).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config block: {exc}", at) from None
    (flags,) = r.unpack("I")
    (count,) = r.unpack("Q")
    return {"magic": MAGIC.decode(), "version": version, "config": config, "has_gaze": bool(flags & FLAG_GAZE), "episodes": count}


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(1 << 16)
    return _read_header(_Reader(head))


def decode_dataset(buf: bytes) -> Dataset:
    r = _Reader(buf)
    header = _read_header(r)
    cfg = DataConfig.model_validate(header["config"])
    scenes, views, tokens, proprio, actions, gaze = [], [], [], [], [], []
    for _ in range(header["episodes"]):
        seed, n_obj = r.unpack("QI")
        objs = [r.unpack("4I") for _ in range(n_obj)]
        target, reference, relation = r.unpack("3I")
        (n_tok,) = r.unpack("I")
        toks = np.frombuffer(r.take(2 * n_tok), dtype="<u2").astype(np.int64)
        p = r.tensor()
        scenes.append(
            SceneSpec(
                grid=cfg.grid,
                shapes=tuple(o[0] for o in objs),
                colors=tuple(o[1] for o in objs),
                cells=tuple((o[2], o[3]) for o in objs),
                target=target,
                reference=reference,
                relation=relation,
                start=(float(p[0]), float(p[1])),
                seed=seed,
            )
        )
        tokens.append(toks)
        proprio.append(p)
        views.append(r.tensor())
        actions.append(r.tensor())
        if header["has_gaze"]:
            gaze.append(r.tensor())
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last episode", r.pos)
    return Dataset(
        config=cfg,
        scenes=scenes,
        views=np.stack(views),
        tokens=np.stack(tokens),
        proprio=np.stack(proprio),
        actions=np.stack(actions),
        gaze=np.stack(gaze) if header["has_gaze"] else None,
    )


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
