import json
import os
import struct

import numpy as np
import pytest

from gazereg import dataset as dsmod
from gazereg.checkpoint import (
    decode_checkpoint,
    decode_checkpoint_full,
    encode_checkpoint,
    load_checkpoint_full,
    save_checkpoint,
)
from gazereg.config import DataConfig, ExperimentConfig
from gazereg.dataset import (
    FormatError,
    atomic_write,
    decode_dataset,
    encode_dataset,
    encoded_size,
    generate_dataset,
    read_dataset,
    read_header,
    write_dataset,
)
from gazereg.policy import PolicyDims, PolicyParams

SMALL = DataConfig(episodes=3, seed=4)


@pytest.fixture(scope="module")
def small():
    return generate_dataset(SMALL)


def test_dataset_round_trip_is_bit_exact(small):
    raw = encode_dataset(small)
    back = decode_dataset(raw)
    assert encode_dataset(back) == raw
    assert back.scenes == small.scenes
    for name in ("views", "tokens", "proprio", "actions", "gaze"):
        np.testing.assert_array_equal(getattr(back, name), getattr(small, name))


def test_generation_is_deterministic(small):
    assert encode_dataset(generate_dataset(SMALL)) == encode_dataset(small)
    assert encode_dataset(generate_dataset(SMALL.model_copy(update={"seed": 5}))) != encode_dataset(small)


def test_stripped_dataset_round_trip(small):
    raw = encode_dataset(small.strip_gaze())
    back = decode_dataset(raw)
    assert back.gaze is None and not back.has_gaze
    np.testing.assert_array_equal(back.views, small.views)


def test_header(tmp_path, small):
    path = tmp_path / "d.gzrl"
    write_dataset(small, path)
    head = read_header(path)
    assert head["magic"] == "GZRL-DATA" and head["version"] == 1
    assert head["episodes"] == 3 and head["has_gaze"]
    assert DataConfig.model_validate(head["config"]) == SMALL
    assert read_dataset(path).scenes == small.scenes


def test_size_matches_layout_for_small_files(small):
    assert len(encode_dataset(small)) == encoded_size(SMALL, 3)
    assert len(encode_dataset(small.strip_gaze())) == encoded_size(SMALL, 3, with_gaze=False)


def test_size_of_ten_thousand_episodes():
    cfg = DataConfig(episodes=10_000)
    cfg_len = len(json.dumps(cfg.model_dump(mode="json"), sort_keys=True).encode())
    header = 9 + 4 + 4 + cfg_len + 4 + 8
    scene = 8 + 4 + 4 * 16 + 12 + 4 + 7 * 2
    proprio = 4 + 4 + 2 * 4
    views = 4 + 4 * 4 + 2 * 32 * 32 * 3 * 4
    actions = 4 + 2 * 4 + 8 * 2 * 4
    gaze = 4 + 4 * 4 + 2 * 5 * 32 * 32 * 4
    expect = header + 10_000 * (scene + proprio + views + actions + gaze)
    assert encoded_size(cfg, 10_000) == expect


def test_format_errors_report_offsets(small):
    raw = encode_dataset(small)
    with pytest.raises(FormatError, match="bad magic") as exc:
        decode_dataset(b"GZRL-DATX" + raw[9:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError, match="version") as exc:
        decode_dataset(raw[:9] + struct.pack("<I", 9) + raw[13:])
    assert exc.value.offset == 9
    with pytest.raises(FormatError, match="truncated") as exc:
        decode_dataset(raw[:-5])
    assert exc.value.offset is not None and exc.value.offset < len(raw)
    with pytest.raises(FormatError, match="trailing") as exc:
        decode_dataset(raw + b"\0")
    assert exc.value.offset == len(raw)
    with pytest.raises(FormatError, match="offset"):
        decode_dataset(raw[:20])


def test_atomic_write_keeps_old_file_on_failure(tmp_path, monkeypatch):
    path = tmp_path / "out.bin"
    atomic_write(path, b"old")

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(dsmod.os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write(path, b"new contents")
    assert path.read_bytes() == b"old"
    assert os.listdir(tmp_path) == ["out.bin"]


def _params(seed=0):
    return PolicyParams.init(PolicyDims(layers=2, heads=2), seed)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = _params()
    snap = ExperimentConfig().snapshot()
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path, experiment=snap)
    back, exp = load_checkpoint_full(path)
    assert exp == snap
    assert back.dims == p.dims
    for name, t in p.rounded().items():
        np.testing.assert_array_equal(back[name], t)
    assert encode_checkpoint(back, snap) == path.read_bytes()


def test_checkpoint_without_experiment():
    raw = encode_checkpoint(_params(1))
    params, exp = decode_checkpoint_full(raw)
    assert exp is None
    assert decode_checkpoint(raw).dims == PolicyDims(layers=2, heads=2)


def test_checkpoint_format_errors():
    raw = encode_checkpoint(_params())
    with pytest.raises(FormatError, match="bad magic"):
        decode_checkpoint(b"GZRL-DATA" + raw[9:])
    with pytest.raises(FormatError, match="truncated"):
        decode_checkpoint(raw[:-1])
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(raw + b"x")
    # config block claims a different width than the stored tensors
    n_cfg = struct.unpack("<I", raw[13:17])[0]
    block = json.loads(raw[17 : 17 + n_cfg])
    block["dims"]["dim"] = 16
    cfg = json.dumps(block, sort_keys=True).encode()
    bad = raw[:13] + struct.pack("<I", len(cfg)) + cfg + raw[17 + n_cfg :]
    with pytest.raises(FormatError, match="shape"):
        decode_checkpoint(bad)
    with pytest.raises(FormatError, match="config block"):
        decode_checkpoint(raw[:17] + b"#" + raw[18:])
