import json
import struct
import zlib

import numpy as np
import pytest

from cora import model_io, network as N
from cora.errors import FormatError
from cora.quantizer import ClipScheme, QuantSpec
from cora.search import finalize

from oracles import toy_conv_model


SPEC = QuantSpec(bits=4, clip=ClipScheme.normal(4.0), mode="asymmetric")


def _f32(model):
    """Snap all float parameters to float32 values (file precision)."""
    for k in model.weights:
        model.weights[k] = model.weights[k].astype(np.float32).astype(np.float64)
    for k in model.biases:
        model.biases[k] = model.biases[k].astype(np.float32).astype(np.float64)
    return model


class TestModelRoundtrip:
    def test_lossless_for_f32_values(self, rng, tmp_path):
        model = _f32(toy_conv_model(rng))
        path = tmp_path / "m.cora-model"
        model_io.save_model(path, model)
        back = model_io.load_model(path)
        assert len(back.layers) == len(model.layers)
        for i, w in model.weights.items():
            assert np.array_equal(back.weights[i], w)
        for i, b in model.biases.items():
            assert np.array_equal(back.biases[i], b)
        assert back.input_shape == model.input_shape
        assert back.class_count == model.class_count

    def test_forward_matches_after_roundtrip(self, rng, tmp_path):
        model = _f32(toy_conv_model(rng))
        path = tmp_path / "m.cora-model"
        model_io.save_model(path, model)
        back = model_io.load_model(path)
        x = rng.normal(size=(4, 1, 8, 8))
        assert np.array_equal(N.forward(model, x), N.forward(back, x))

    def test_two_loads_bitwise_identical(self, rng, tmp_path):
        model = toy_conv_model(rng)
        path = tmp_path / "m.cora-model"
        model_io.save_model(path, model)
        a = model_io.load_model(path)
        b = model_io.load_model(path)
        x = np.random.default_rng(0).normal(size=(3, 1, 8, 8))
        assert np.array_equal(N.forward(a, x), N.forward(b, x))


class TestContainerFailures:
    def _saved(self, rng, tmp_path):
        path = tmp_path / "m.cora-model"
        model_io.save_model(path, toy_conv_model(rng))
        return path

    def test_bad_magic(self, rng, tmp_path):
        path = self._saved(rng, tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as e:
            model_io.load_model(path)
        assert e.value.code == "bad_magic"

    def test_version_bump(self, rng, tmp_path):
        path = self._saved(rng, tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as e:
            model_io.load_model(path)
        assert e.value.code == "bad_version"

    def test_truncated(self, rng, tmp_path):
        path = self._saved(rng, tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            model_io.load_model(path)

    def test_very_short_file(self, tmp_path):
        path = tmp_path / "m.cora-model"
        path.write_bytes(b"CORA")
        with pytest.raises(FormatError) as e:
            model_io.load_model(path)
        assert e.value.code == "truncated"

    def test_bit_flip_fails_checksum(self, rng, tmp_path):
        path = self._saved(rng, tmp_path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x40
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as e:
            model_io.load_model(path)
        assert e.value.code in ("checksum", "bad_manifest")

    def test_wrong_kind(self, rng, tmp_path):
        path = self._saved(rng, tmp_path)
        with pytest.raises(FormatError) as e:
            model_io.load_dataset(path)
        assert e.value.code == "bad_kind"

    def test_crc_recomputed_after_tamper(self, rng, tmp_path):
        # flipping a blob byte AND fixing the crc still fails shape checks or
        # loads different values -- but never loads silently corrupted layout
        path = self._saved(rng, tmp_path)
        raw = bytearray(path.read_bytes())
        _, mlen = struct.unpack("<IQ", raw[4:16])
        body = raw[16:-4]
        body[mlen + 8] ^= 0xFF
        crc = zlib.crc32(bytes(body))
        path.write_bytes(bytes(raw[:16]) + bytes(body) + struct.pack("<I", crc))
        back = model_io.load_model(path)  # valid container, altered value
        assert isinstance(back, N.Model)


class TestDatasetRoundtrip:
    def test_roundtrip(self, rng, tmp_path):
        images = rng.normal(size=(10, 1, 8, 8)).astype(np.float32)
        labels = rng.integers(0, 5, size=10)
        path = tmp_path / "d.cora-data"
        model_io.save_dataset(path, images, labels, 5, "calibration")
        xi, yi, cc, split = model_io.load_dataset(path)
        assert np.array_equal(xi, images.astype(np.float64))
        assert np.array_equal(yi, labels)
        assert cc == 5 and split == "calibration"

    def test_label_range_check(self, rng, tmp_path):
        path = tmp_path / "d.cora-data"
        model_io.save_dataset(path, rng.normal(size=(4, 1, 2, 2)),
                              np.array([0, 1, 2, 9]), 5, "validation")
        with pytest.raises(FormatError) as e:
            model_io.load_dataset(path)
        assert e.value.code == "bad_labels"


class TestQuantizedRoundtrip:
    def test_hard_adapters_bitwise(self, rng, tmp_path):
        # file precision is float32, so start from f32-valued parameters to
        # get bitwise-identical logits between the in-memory and loaded model
        model = _f32(toy_conv_model(rng))
        qm = N.quantize_model(model, SPEC)
        finalize(qm, [2, 3, 4], adapter_bits=None)
        path = tmp_path / "q.cora-qmodel"
        model_io.save_quantized(path, qm)
        back = model_io.load_quantized(path)
        for i, q in qm.qweights.items():
            bq = back.qweights[i]
            assert np.array_equal(bq.codes, q.codes)
            assert bq.scale == q.scale and bq.zero == q.zero
            assert bq.alpha == q.alpha and bq.beta == q.beta
        assert np.array_equal(back.ranks, qm.ranks)
        for lid, ad in qm.hard_adapters.items():
            assert np.array_equal(back.hard_adapters[lid].A, ad.A)
            assert np.array_equal(back.hard_adapters[lid].B, ad.B)
        x = rng.normal(size=(4, 1, 8, 8))
        assert np.array_equal(N.forward(qm, x), N.forward(back, x))

    def test_quantized_adapters_roundtrip(self, rng, tmp_path):
        model = _f32(toy_conv_model(rng))
        qm = N.quantize_model(model, SPEC)
        finalize(qm, [2, 3, 4], adapter_bits=8)
        path = tmp_path / "q.cora-qmodel"
        model_io.save_quantized(path, qm)
        back = model_io.load_quantized(path)
        x = rng.normal(size=(4, 1, 8, 8))
        assert np.array_equal(N.forward(qm, x), N.forward(back, x))

    def test_plain_quantized_no_adapters(self, rng, tmp_path):
        model = _f32(toy_conv_model(rng))
        qm = N.quantize_model(model, SPEC, adapt=False)
        qm.adapter_mode = "none"
        path = tmp_path / "q.cora-qmodel"
        model_io.save_quantized(path, qm)
        back = model_io.load_quantized(path)
        assert back.adapter_mode == "none"
        assert back.hard_adapters == {}
        x = rng.normal(size=(4, 1, 8, 8))
        assert np.array_equal(N.forward(qm, x), N.forward(back, x))

    def test_soft_mode_refused(self, rng, tmp_path):
        qm = N.quantize_model(toy_conv_model(rng), SPEC)
        with pytest.raises(FormatError) as e:
            model_io.save_quantized(tmp_path / "q.cora-qmodel", qm)
        assert e.value.code == "bad_mode"

    def test_symmetric_codes_roundtrip(self, rng, tmp_path):
        model = toy_conv_model(rng)
        sym = QuantSpec(bits=4, clip=ClipScheme.minmax(), mode="symmetric")
        qm = N.quantize_model(model, sym)
        finalize(qm, [1, 1, 1], adapter_bits=None)
        path = tmp_path / "q.cora-qmodel"
        model_io.save_quantized(path, qm)
        back = model_io.load_quantized(path)
        for i, q in qm.qweights.items():
            assert np.array_equal(back.qweights[i].codes, q.codes)


class TestRunReport:
    def _report(self, budget=0.05, bits=4, abits=8):
        return model_io.make_report(
            quant_bits=bits, quant_clip={"kind": "normal", "k": 4.0},
            adapter_bits=abits, budget=budget,
            solution=[{"layer": 0, "max_rank": 4, "heuristic_rank": 1,
                       "optimal_rank": 1.25, "final_rank": 1}],
            accuracy={"float": 0.97, "quantized": 0.62},
            iterations=250, wall_time_s=1.5)

    def test_equivalent_bits_field(self, tmp_path):
        path = tmp_path / "r.json"
        model_io.write_report(path, self._report())
        doc = json.loads(path.read_text())
        assert doc["equivalent_bits"] == 4.4

    def test_zero_budget(self, tmp_path):
        path = tmp_path / "r.json"
        model_io.write_report(path, self._report(budget=0.0))
        doc = json.loads(path.read_text())
        assert doc["equivalent_bits"] == 4

    def test_parse_back_exact(self, tmp_path):
        rep = self._report()
        rep.accuracy["float"] = 1 / 3  # value needing all 17 digits
        rep.wall_time_s = 0.1 + 0.2    # classic non-representable sum
        path = tmp_path / "r.json"
        model_io.write_report(path, rep)
        doc = json.loads(path.read_text())
        assert doc["accuracy"]["float"] == 1 / 3
        assert doc["wall_time_s"] == 0.1 + 0.2
        assert doc["budget"] == rep.budget

    def test_stable_key_order(self, tmp_path):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        model_io.write_report(p1, self._report())
        model_io.write_report(p2, self._report())
        assert p1.read_bytes() == p2.read_bytes()
        keys = list(json.loads(p1.read_text()))
        assert keys == sorted(keys)
