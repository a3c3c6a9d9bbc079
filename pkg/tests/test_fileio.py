import numpy as np
import pytest

from comerge import fileio
from comerge.errors import ShapeError
from comerge.layout import LayoutDescriptor
from comerge.tensors import make_rng


class TestTensorDump:
    def test_roundtrip(self, tmp_path):
        arr = make_rng(0).normal(size=(2, 3, 4)).astype(np.float32)
        path = tmp_path / "t.come"
        fileio.write_tensor(path, arr)
        assert np.array_equal(fileio.read_tensor(path), arr)

    def test_header_layout(self, tmp_path):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = tmp_path / "t.come"
        fileio.write_tensor(path, arr)
        raw = path.read_bytes()
        assert raw[:4] == b"COME"
        header = np.frombuffer(raw[4:20], dtype="<u4")
        assert header.tolist() == [1, 2, 2, 3]  # version, rank, dims
        payload = np.frombuffer(raw[20:], dtype="<f4")
        assert np.array_equal(payload.reshape(2, 3), arr)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.come"
        path.write_bytes(b"EMOC" + b"\0" * 16)
        with pytest.raises(ShapeError):
            fileio.read_tensor(path)

    def test_truncated_rejected(self, tmp_path):
        arr = np.ones((4, 4), dtype=np.float32)
        path = tmp_path / "t.come"
        fileio.write_tensor(path, arr)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ShapeError):
            fileio.read_tensor(path)

    def test_scalar_rank_zero(self, tmp_path):
        path = tmp_path / "s.come"
        fileio.write_tensor(path, np.float32(2.5))
        got = fileio.read_tensor(path)
        assert got.shape == () and got == np.float32(2.5)


class TestTensorPack:
    def test_roundtrip_named_sections(self, tmp_path):
        rng = make_rng(1)
        sections = {
            "proj_w": rng.normal(size=(4, 8)).astype(np.float32),
            "bias": rng.normal(size=8).astype(np.float32),
            "scalar": np.float32(3.0).reshape(()),
        }
        path = tmp_path / "p.come"
        fileio.write_tensor_pack(path, sections)
        loaded = fileio.read_tensor_pack(path)
        assert list(loaded) == list(sections)
        for name in sections:
            assert np.array_equal(loaded[name], np.asarray(sections[name]))

    def test_pack_version_distinct_from_tensor(self, tmp_path):
        path = tmp_path / "p.come"
        fileio.write_tensor_pack(path, {"a": np.zeros(2, dtype=np.float32)})
        with pytest.raises(ShapeError):
            fileio.read_tensor(path)


class TestLayoutHeader:
    def test_roundtrip(self):
        layout = LayoutDescriptor(3, 2, 12, 4)
        text = fileio.layout_header(layout)
        assert text == "frames=3 special=2 patches=12 group=4"
        assert fileio.parse_layout_header(text) == layout

    def test_missing_field_rejected(self):
        with pytest.raises(ShapeError):
            fileio.parse_layout_header("frames=1 special=0 patches=4")


class TestMaskDump:
    def test_roundtrip(self):
        flags = np.array([[True, False, True], [False, False, True]])
        text = fileio.format_mask_flags(flags)
        assert text == "101\n001\n"
        assert np.array_equal(fileio.parse_mask_flags(text), flags)

    def test_ragged_rejected(self):
        with pytest.raises(ShapeError):
            fileio.parse_mask_flags("101\n01\n")


class TestXyz:
    def test_roundtrip(self, tmp_path):
        pts = make_rng(2).normal(size=(17, 3))
        path = tmp_path / "cloud.xyz"
        fileio.write_xyz(path, pts)
        assert np.allclose(fileio.read_xyz(path), pts, atol=0)

    def test_wrong_width_rejected(self, tmp_path):
        path = tmp_path / "cloud.xyz"
        path.write_text("1 2\n3 4\n")
        with pytest.raises(ShapeError):
            fileio.read_xyz(path)
