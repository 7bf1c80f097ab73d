import copy
import json
import struct

import numpy as np
import pytest

from conftest import tiny_config
from kvq.checkpoint import (
    ALIGN,
    MAGIC,
    load_model,
    read_container,
    save_model,
    write_container,
)
from kvq.errors import DataFormatError
from kvq.model import Model, model_forward, quantize_model_weights, spread_kv_channels
from kvq.quantizers import init_smoothing
from kvq.model import attach_kv_smoothing

IDS = np.arange(20) % 250


class TestContainer:
    def test_roundtrip(self, tmp_path):
        path = str(tmp_path / "t.kvq")
        rng = np.random.default_rng(0)
        tensors = {
            "a": rng.normal(size=(3, 4)).astype(np.float32),
            "b": rng.integers(-8, 8, (5,)).astype(np.int8),
            "c": rng.integers(0, 16, (2, 2)).astype(np.uint8),
            "d": np.arange(6, dtype=np.int32),
        }
        write_container(path, {"x": 1}, {"y": [1, 2]}, tensors)
        config, meta, out = read_container(path)
        assert config == {"x": 1} and meta == {"y": [1, 2]}
        for name, arr in tensors.items():
            assert np.array_equal(out[name], arr)
            assert out[name].dtype == arr.dtype

    def test_payload_alignment(self, tmp_path):
        path = str(tmp_path / "t.kvq")
        write_container(path, {}, {}, {"a": np.zeros(3, np.float32),
                                       "b": np.zeros(5, np.float32)})
        data = open(path, "rb").read()
        (hlen,) = struct.unpack("<Q", data[4:12])
        header = json.loads(data[12 : 12 + hlen])
        for ent in header["tensors"].values():
            assert ent["offset"] % ALIGN == 0

    def test_magic(self, tmp_path):
        path = str(tmp_path / "t.kvq")
        write_container(path, {}, {}, {})
        assert open(path, "rb").read(4) == MAGIC

    def test_write_deterministic(self, tmp_path):
        a, b = str(tmp_path / "a.kvq"), str(tmp_path / "b.kvq")
        tensors = {"x": np.arange(7, dtype=np.float32)}
        write_container(a, {"k": 1}, {}, tensors)
        write_container(b, {"k": 1}, {}, tensors)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(DataFormatError):
            write_container(str(tmp_path / "t.kvq"), {}, {}, {"x": np.zeros(2, np.float64)})


class TestMalformedFiles:
    def _write_good(self, path):
        write_container(path, {"v": 1}, {}, {"x": np.arange(4, dtype=np.float32)})
        return open(path, "rb").read()

    def test_bad_magic(self, tmp_path):
        p = str(tmp_path / "t.kvq")
        data = self._write_good(p)
        open(p, "wb").write(b"XXXX" + data[4:])
        with pytest.raises(DataFormatError, match="byte 0"):
            read_container(p)

    def test_header_length_past_eof(self, tmp_path):
        p = str(tmp_path / "t.kvq")
        data = self._write_good(p)
        open(p, "wb").write(data[:4] + struct.pack("<Q", 10**9) + data[12:])
        with pytest.raises(DataFormatError, match="header length"):
            read_container(p)

    def test_malformed_json(self, tmp_path):
        p = str(tmp_path / "t.kvq")
        data = self._write_good(p)
        (hlen,) = struct.unpack("<Q", data[4:12])
        open(p, "wb").write(data[:12] + b"{" * hlen + data[12 + hlen :])
        with pytest.raises(DataFormatError, match="JSON"):
            read_container(p)

    def test_tensor_past_eof(self, tmp_path):
        p = str(tmp_path / "t.kvq")
        data = self._write_good(p)
        open(p, "wb").write(data[:-8])
        with pytest.raises(DataFormatError, match="past end of file"):
            read_container(p)

    def test_overlapping_tensors(self, tmp_path):
        p = str(tmp_path / "t.kvq")
        write_container(p, {}, {}, {"x": np.arange(4, dtype=np.float32),
                                    "y": np.arange(4, dtype=np.float32)})
        data = open(p, "rb").read()
        (hlen,) = struct.unpack("<Q", data[4:12])
        header = json.loads(data[12 : 12 + hlen])
        header["tensors"]["y"]["offset"] = header["tensors"]["x"]["offset"] + 4
        hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        # same header length required for the payload offsets to stay valid
        hjson = hjson + b" " * (hlen - len(hjson))
        open(p, "wb").write(data[:12] + hjson + data[12 + hlen :])
        with pytest.raises(DataFormatError, match="overlap"):
            read_container(p)

    def test_truncated_file(self, tmp_path):
        p = str(tmp_path / "t.kvq")
        open(p, "wb").write(b"KVQ1\x05")
        with pytest.raises(DataFormatError):
            read_container(p)


class TestModelRoundtrip:
    def make(self, quantize=False, smooth=False):
        m = Model.random(tiny_config(), seed=0)
        if smooth:
            spread_kv_channels(m, 1.5, seed=0)
            per_layer = []
            for blk in m.blocks:
                x = m.embed[IDS]
                per_layer.append(
                    (init_smoothing(x @ blk.k.w + blk.k.b), init_smoothing(x @ blk.v.w + blk.v.b))
                )
            attach_kv_smoothing(m, per_layer)
        if quantize:
            quantize_model_weights(m)
            m.config.quant_mode = "weight_kv"
        return m

    def test_fp_roundtrip_bit_exact(self, tmp_path):
        m = self.make()
        p = str(tmp_path / "m.kvq")
        save_model(m, p)
        m2 = load_model(p)
        assert np.array_equal(model_forward(m, IDS).data, model_forward(m2, IDS).data)

    def test_quantized_roundtrip_preserves_everything(self, tmp_path):
        m = self.make(quantize=True, smooth=True)
        p = str(tmp_path / "m.kvq")
        save_model(m, p)
        m2 = load_model(p)
        assert m2.config.quant_mode == "weight_kv"
        for b1, b2 in zip(m.blocks, m2.blocks):
            assert np.array_equal(b1.q.wq.codes, b2.q.wq.codes)
            assert np.array_equal(b1.q.wq.h, b2.q.wq.h)
            assert np.array_equal(b1.v.smoothing.s, b2.v.smoothing.s)
            assert b2.v.smoothing.absorbed
        out1 = model_forward(m, IDS, mode="weight_kv").data
        out2 = model_forward(m2, IDS, mode="weight_kv").data
        assert np.array_equal(out1, out2)

    def test_clipping_roundtrip(self, tmp_path):
        m = self.make()
        gs = m.config.weight_group_size
        m.clipping = {
            (li, name): (np.full((-(-w.shape[0] // gs), w.shape[1]), 0.9, np.float32),
                         np.full((-(-w.shape[0] // gs), w.shape[1]), 0.8, np.float32))
            for li, blk in enumerate(m.blocks)
            for name, w in [(n, l.w) for n, l in blk.projections().items()]
        }
        quantize_model_weights(m, clipping=m.clipping)
        p = str(tmp_path / "m.kvq")
        save_model(m, p)
        m2 = load_model(p)
        assert set(m2.clipping) == set(m.clipping)
        g1, b1 = m.clipping[(0, "q")]
        g2, b2 = m2.clipping[(0, "q")]
        assert np.array_equal(g1, g2) and np.array_equal(b1, b2)

    def test_save_deterministic(self, tmp_path):
        m = self.make(quantize=True)
        a, b = str(tmp_path / "a.kvq"), str(tmp_path / "b.kvq")
        save_model(m, a)
        save_model(copy.deepcopy(m), b)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_bad_config_rejected(self, tmp_path):
        p = str(tmp_path / "m.kvq")
        write_container(p, {"bogus_field": 1}, {}, {})
        with pytest.raises(DataFormatError, match="config"):
            load_model(p)
