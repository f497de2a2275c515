import json

import numpy as np
import pytest

from osdet.checkpoint import FORMAT_VERSION, MAGIC, CheckpointError, load_checkpoint, save_checkpoint


@pytest.fixture
def payload(rng):
    arrays = {
        "a/weights": rng.normal(size=(3, 4)),
        "b/bias": rng.normal(size=5),
        "ints": np.arange(4, dtype=np.int64),
    }
    meta = {"iteration": 7, "config": {"lr": 0.01, "name": "x"}}
    return arrays, meta


def test_round_trip(tmp_path, payload):
    arrays, meta = payload
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, arrays, meta)
    loaded, loaded_meta = load_checkpoint(path)
    assert loaded_meta == meta
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])
        assert loaded[k].dtype == arrays[k].dtype


def test_equal_states_are_byte_identical(tmp_path, payload):
    arrays, meta = payload
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, arrays, meta)
    save_checkpoint(p2, {k: v.copy() for k, v in arrays.items()}, dict(meta))
    assert p1.read_bytes() == p2.read_bytes()


def test_version_mismatch_rejected(tmp_path, payload):
    arrays, meta = payload
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, arrays, meta)
    raw = path.read_bytes()
    n = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 8], "little")
    header = json.loads(raw[len(MAGIC) + 8 : len(MAGIC) + 8 + n])
    header["format_version"] = FORMAT_VERSION + 1
    new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(
        MAGIC + len(new_header).to_bytes(8, "little") + new_header + raw[len(MAGIC) + 8 + n :]
    )
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_not_a_checkpoint_rejected(tmp_path):
    path = tmp_path / "garbage.ckpt"
    path.write_bytes(b"hello world")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_no_temp_files_left_behind(tmp_path, payload):
    arrays, meta = payload
    save_checkpoint(tmp_path / "state.ckpt", arrays, meta)
    save_checkpoint(tmp_path / "state.ckpt", arrays, meta)  # overwrite in place
    names = [p.name for p in tmp_path.iterdir()]
    assert names == ["state.ckpt"]


def test_overwrite_is_atomic_replacement(tmp_path, payload):
    arrays, meta = payload
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, arrays, meta)
    first = path.read_bytes()
    arrays2 = {k: v + 1.0 if v.dtype == np.float64 else v for k, v in arrays.items()}
    save_checkpoint(path, arrays2, meta)
    assert path.read_bytes() != first
    loaded, _ = load_checkpoint(path)
    assert np.array_equal(loaded["a/weights"], arrays2["a/weights"])
