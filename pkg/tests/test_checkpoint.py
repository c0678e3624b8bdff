import numpy as np
import pytest

from intentrec.checkpoint import HEADER, load_tensors, save_tensors
from intentrec.errors import ValidationError


class TestRoundtrip:
    def test_exact_bits_survive(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "a": rng.normal(size=(3, 4)),
            "b": rng.normal(size=(7,)) * 1e-300,
            "scalar": np.array(np.pi),
            "empty": np.empty((0, 2)),
        }
        path = tmp_path / "ck.tsv"
        save_tensors(path, tensors, {"epoch": 3, "note": "x"})
        loaded, meta = load_tensors(path)
        assert meta == {"epoch": "3", "note": "x"}
        for name, arr in tensors.items():
            assert loaded[name].shape == arr.shape
            assert (loaded[name] == arr).all()

    def test_weird_values_roundtrip(self, tmp_path):
        vals = np.array([0.0, -0.0, 1e308, 5e-324, -1.5])
        path = tmp_path / "ck.tsv"
        save_tensors(path, {"v": vals})
        loaded, _ = load_tensors(path)
        assert (np.signbit(loaded["v"]) == np.signbit(vals)).all()
        assert (loaded["v"] == vals).all()

    def test_header_is_versioned(self, tmp_path):
        path = tmp_path / "ck.tsv"
        save_tensors(path, {"v": np.zeros(2)})
        assert path.read_text().splitlines()[0] == HEADER

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("something else\n")
        with pytest.raises(ValidationError):
            load_tensors(path)

    def test_rejects_truncated_tensor(self, tmp_path):
        path = tmp_path / "ck.tsv"
        save_tensors(path, {"v": np.zeros(4)})
        lines = path.read_text().splitlines()
        lines[-1] = "0x0.0p+0 0x0.0p+0"  # two of four values
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match="expected 4"):
            load_tensors(path)

    def test_rejects_whitespace_name(self, tmp_path):
        with pytest.raises(ValidationError):
            save_tensors(tmp_path / "ck.tsv", {"bad name": np.zeros(1)})

    def test_byte_identical_rewrites(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {"w": rng.normal(size=(5, 5))}
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        save_tensors(a, tensors, {"epoch": 1})
        save_tensors(b, tensors, {"epoch": 1})
        assert a.read_bytes() == b.read_bytes()
