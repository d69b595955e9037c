import struct

import numpy as np
import pytest

from sparseopt.bsr_kernels import bsr_to_dense, dense_to_bsr, random_block_sparse
from sparseopt.container import (
    CONFIG_PREFIX,
    FORMAT_VERSION,
    MAGIC,
    decode,
    dense_section,
    encode,
    load,
    save,
)
from sparseopt.exceptions import DimensionError, StructuralError


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class TestLayout:
    def test_header_and_dense_section(self):
        payload = encode({"w": np.array([[1.0, 2.0]])})
        assert payload[:4] == MAGIC
        assert struct.unpack("<I", payload[4:8])[0] == FORMAT_VERSION
        name_len = struct.unpack("<I", payload[8:12])[0]
        assert payload[12:12 + name_len] == b"w"
        rows, cols, r, c = struct.unpack("<IIII", payload[13:29])
        assert (rows, cols, r, c) == (1, 2, 1, 2)

    def test_dense_is_single_block(self):
        m = dense_section(np.ones((3, 4)))
        assert m.block_shape == (3, 4)
        np.testing.assert_array_equal(m.indptr, [0, 1])

    def test_one_d_stored_as_row(self):
        assert dense_section(np.arange(5.0)).shape == (1, 5)

    def test_empty_tensor_rejected(self):
        with pytest.raises(DimensionError):
            dense_section(np.zeros((0, 3)))


class TestRoundTrip:
    def test_random_checkpoints_bit_exact(self):
        rng = np.random.default_rng(0)
        for i in range(20):
            rows, cols = rng.integers(1, 40, size=2)
            r, c = int(rng.integers(1, 5)), int(rng.integers(1, 3))
            dense = f32(random_block_sparse(rows, cols, r, c, rng.uniform(0, 1), rng, pad=True))
            if i % 5 == 0:
                dense = np.zeros_like(dense)
            tensors = {"dense": dense, "bsr": dense_to_bsr(dense, r, c, pad=True)}
            back = decode(encode(tensors))
            np.testing.assert_array_equal(back.dense("dense"), dense)
            np.testing.assert_array_equal(bsr_to_dense(back.tensors["bsr"]), dense)

    def test_zero_tensor_has_no_blocks(self):
        back = decode(encode({"z": dense_to_bsr(np.zeros((4, 4)), 2, 1)}))
        assert back.tensors["z"].nnz_blocks == 0

    def test_config_embedded(self, tmp_path):
        path = save(tmp_path / "c.psbr", {"w": np.eye(2)}, {"seed": 7, "problem": "lasso"})
        back = load(path)
        assert back.config == {"seed": 7, "problem": "lasso"}
        assert list(back.tensors) == ["w"]

    def test_values_rounded_to_float32(self):
        back = decode(encode({"w": np.array([[0.1]])}))
        assert back.dense("w")[0, 0] == np.float32(0.1)

    def test_deterministic_bytes(self):
        tensors = {"a": np.eye(3), "b": dense_to_bsr(np.eye(4), 2, 2)}
        assert encode(tensors, {"x": 1}) == encode(tensors, {"x": 1})


class TestCorruption:
    def test_bad_magic(self):
        with pytest.raises(StructuralError):
            decode(b"NOPE" + encode({"w": np.eye(2)})[4:])

    def test_bad_version(self):
        payload = bytearray(encode({"w": np.eye(2)}))
        payload[4:8] = struct.pack("<I", 99)
        with pytest.raises(StructuralError):
            decode(bytes(payload))

    def test_truncated(self):
        payload = encode({"w": np.eye(4)})
        with pytest.raises(StructuralError):
            decode(payload[:-3])

    def test_broken_structure(self):
        payload = bytearray(encode({"w": dense_to_bsr(np.eye(4), 2, 2)}))
        # first indices entry follows: header, name, dims, indptr (len + 3 values), indices len
        offset = 8 + 4 + 1 + 16 + 8 + 12 + 8
        payload[offset:offset + 4] = struct.pack("<I", 7)
        with pytest.raises(StructuralError):
            decode(bytes(payload))

    def test_reserved_name(self):
        with pytest.raises(StructuralError):
            encode({CONFIG_PREFIX + "x": np.eye(2)})
