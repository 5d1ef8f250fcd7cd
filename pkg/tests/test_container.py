import struct

import numpy as np
import pytest

from sidrec.container import ContainerError, load_container, save_container


def test_roundtrip_preserves_dtypes_and_meta(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float64).reshape(2, 3),
              "b": np.array([1, 2, 3], dtype=np.uint64),
              "flag": np.array([True, False]),
              "empty": np.zeros((0, 4), dtype=np.float32)}
    p = tmp_path / "m.sidc"
    save_container(p, "thing", arrays, {"x": 1, "names": ["q"]})
    kind, back, meta = load_container(p, "thing")
    assert kind == "thing"
    assert meta == {"x": 1, "names": ["q"]}
    assert sorted(back) == sorted(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_header_layout(tmp_path):
    p = tmp_path / "m.sidc"
    save_container(p, "k", {"z": np.array([0.5], dtype=np.float32)})
    buf = p.read_bytes()
    assert buf[:4] == b"SIDC"
    assert struct.unpack_from("<I", buf, 4) == (1,)
    assert buf[-4:] == struct.pack("<f", 0.5)


def test_wrong_kind_and_bad_magic(tmp_path):
    p = tmp_path / "m.sidc"
    save_container(p, "pca", {"a": np.zeros(2)})
    with pytest.raises(ContainerError):
        load_container(p, "esu")
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ContainerError):
        load_container(bad)


def test_truncated_file_rejected(tmp_path):
    p = tmp_path / "m.sidc"
    save_container(p, "k", {"a": np.arange(10.0)})
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ContainerError):
        load_container(p)
