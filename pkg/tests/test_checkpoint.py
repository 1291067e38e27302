import os

import numpy as np
import pytest

from core.checkpoint import (arrays_checksum, container_checksum, load_container, read_jsonl, save_container,
                             write_jsonl)
from core.errors import ConfigurationError


def test_container_round_trip_is_bit_exact(tmp_path, rng):
    arrays = {"w": rng.normal(size=(3, 4)), "scalar": np.array(1.0 / 3.0), "empty": np.zeros(0)}
    path = save_container(str(tmp_path / "c.npz"), {"kind": "test", "note": "a b c"}, arrays)
    header, loaded = load_container(path)
    assert header == {"kind": "test", "note": "a b c"}
    assert arrays_checksum(loaded) == arrays_checksum(arrays)
    assert np.array_equal(loaded["w"], arrays["w"])
    assert loaded["scalar"].shape == ()


def test_multiline_header_is_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        save_container(str(tmp_path / "c.npz"), {"kind": "two\nlines"}, {})


def test_content_checksum_tracks_content_only(tmp_path):
    arrays = {"x": np.arange(5.0)}
    a = save_container(str(tmp_path / "a.npz"), {"kind": "x"}, arrays)
    b = save_container(str(tmp_path / "b.npz"), {"kind": "x"}, arrays)
    assert container_checksum(a) == container_checksum(b)
    save_container(b, {"kind": "x"}, {"x": np.arange(5.0) + 1e-12})
    assert container_checksum(a) != container_checksum(b)


def test_jsonl_round_trip_and_bad_line(tmp_path):
    path = write_jsonl(str(tmp_path / "rows.jsonl"), [{"a": 1, "b": "ü"}, {"a": 2, "b": ""}])
    assert read_jsonl(path) == [{"a": 1, "b": "ü"}, {"a": 2, "b": ""}]
    with open(path, "a", encoding="utf-8") as f:
        f.write("{not json}\n")
    with pytest.raises(ConfigurationError):
        read_jsonl(path)
    with pytest.raises(FileNotFoundError):
        read_jsonl(os.path.join(str(tmp_path), "missing.jsonl"))
