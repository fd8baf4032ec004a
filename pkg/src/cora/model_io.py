"""File formats: `.cora-model`, `.cora-qmodel`, `.cora-data`, run reports.

Container layout (little-endian throughout):
    magic "CORA" | version u32 | manifest_len u64   (16-byte header)
    manifest JSON (UTF-8)
    raw binary blob
    crc32 u32 over manifest bytes + blob

The manifest records the container kind, blob length, and per-array offsets
and byte lengths inside the blob. Weight/image scalars are float32 in files.
"""
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .network import (AdaptedQuantModel, AvgPool, Conv, Dense, Flatten,
                      MaxPool, Model, ReLU, infer_shapes)
from .quantizer import ClipScheme, QuantSpec, QuantizedTensor

MAGIC = b"CORA"
VERSION = 1


# ---------------------------------------------------------------------------
# container plumbing

class _BlobWriter:
    def __init__(self):
        self.parts = []
        self.size = 0

    def add(self, raw):
        entry = {"offset": self.size, "bytes": len(raw)}
        self.parts.append(raw)
        self.size += len(raw)
        return entry

    def add_f32(self, arr):
        return self.add(np.asarray(arr, dtype="<f4").tobytes())

    def add_i32(self, arr):
        return self.add(np.asarray(arr, dtype="<i4").tobytes())

    def data(self):
        return b"".join(self.parts)


def _write_container(path, manifest, blob):
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    crc = zlib.crc32(mbytes)
    crc = zlib.crc32(blob, crc)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(mbytes)))
        fh.write(mbytes)
        fh.write(blob)
        fh.write(struct.pack("<I", crc))


def _read_container(path, expected_kind):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise FormatError("truncated", f"{path}: file too short for a container")
    if raw[:4] != MAGIC:
        raise FormatError("bad_magic", f"{path}: bad magic {raw[:4]!r}")
    version, mlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise FormatError("bad_version",
                          f"{path}: unsupported format version {version}")
    if len(raw) < 16 + mlen + 4:
        raise FormatError("truncated", f"{path}: manifest extends past end of file")
    mbytes = raw[16:16 + mlen]
    blob = raw[16 + mlen:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    actual = zlib.crc32(blob, zlib.crc32(mbytes))
    if actual != crc:
        raise FormatError("checksum", f"{path}: checksum mismatch")
    try:
        manifest = json.loads(mbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("bad_manifest", f"{path}: unreadable manifest: {exc}")
    if manifest.get("kind") != expected_kind:
        raise FormatError("bad_kind",
                          f"{path}: expected a {expected_kind} container, "
                          f"got {manifest.get('kind')!r}")
    if manifest.get("blob_bytes") != len(blob):
        raise FormatError("truncated",
                          f"{path}: blob length {len(blob)} does not match "
                          f"manifest {manifest.get('blob_bytes')}")
    return manifest, blob


def _slice(blob, entry, path):
    off, nbytes = entry["offset"], entry["bytes"]
    if off < 0 or off + nbytes > len(blob):
        raise FormatError("truncated", f"{path}: blob slice out of range")
    return blob[off:off + nbytes]


def _read_f32(blob, entry, shape, path):
    raw = _slice(blob, entry, path)
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise FormatError("bad_shape",
                          f"{path}: blob size does not match shape {shape}")
    return arr.astype(np.float64).reshape(shape)


def _check_offsets(entries, blob_len, path):
    spans = sorted((e["offset"], e["offset"] + e["bytes"]) for e in entries)
    prev_end = 0
    for start, end in spans:
        if start < prev_end or end > blob_len:
            raise FormatError("bad_offsets",
                              f"{path}: overlapping or out-of-range blob offsets")
        prev_end = end


# ---------------------------------------------------------------------------
# layer spec (de)serialization

def _layer_to_json(layer):
    if isinstance(layer, Conv):
        return {"type": "conv", "m": layer.m, "n": layer.n, "k1": layer.k1,
                "k2": layer.k2, "stride": list(layer.stride),
                "padding": list(layer.padding), "bias": layer.bias}
    if isinstance(layer, ReLU):
        return {"type": "relu"}
    if isinstance(layer, MaxPool):
        return {"type": "maxpool", "k": layer.k, "s": layer.s}
    if isinstance(layer, AvgPool):
        return {"type": "avgpool", "k": layer.k, "s": layer.s}
    if isinstance(layer, Flatten):
        return {"type": "flatten"}
    if isinstance(layer, Dense):
        return {"type": "dense", "out": layer.out, "inp": layer.inp,
                "bias": layer.bias}
    raise FormatError("bad_layer", f"unserializable layer {layer!r}")


def _layer_from_json(d, path):
    t = d.get("type")
    if t == "conv":
        return Conv(m=d["m"], n=d["n"], k1=d["k1"], k2=d["k2"],
                    stride=tuple(d["stride"]), padding=tuple(d["padding"]),
                    bias=d["bias"])
    if t == "relu":
        return ReLU()
    if t == "maxpool":
        return MaxPool(k=d["k"], s=d["s"])
    if t == "avgpool":
        return AvgPool(k=d["k"], s=d["s"])
    if t == "flatten":
        return Flatten()
    if t == "dense":
        return Dense(out=d["out"], inp=d["inp"], bias=d["bias"])
    raise FormatError("bad_layer", f"{path}: unknown layer type {t!r}")


def _weight_shape(layer):
    if isinstance(layer, Conv):
        return (layer.m, layer.n, layer.k1, layer.k2)
    return (layer.out, layer.inp)


# ---------------------------------------------------------------------------
# float model

def save_model(path, model):
    blob = _BlobWriter()
    layers = []
    for i, layer in enumerate(model.layers):
        d = _layer_to_json(layer)
        if isinstance(layer, (Conv, Dense)):
            d["weight"] = blob.add_f32(model.weights[i])
            if layer.bias:
                d["bias_blob"] = blob.add_f32(model.biases[i])
        layers.append(d)
    manifest = {
        "kind": "model",
        "format_version": VERSION,
        "provenance": model.provenance,
        "class_count": model.class_count,
        "input_shape": list(model.input_shape),
        "layers": layers,
        "blob_bytes": blob.size,
    }
    _write_container(path, manifest, blob.data())


def load_model(path):
    manifest, blob = _read_container(path, "model")
    layers = []
    weights = {}
    biases = {}
    entries = []
    for i, d in enumerate(manifest["layers"]):
        layer = _layer_from_json(d, path)
        layers.append(layer)
        if isinstance(layer, (Conv, Dense)):
            entries.append(d["weight"])
            weights[i] = _read_f32(blob, d["weight"], _weight_shape(layer), path)
            if layer.bias:
                entries.append(d["bias_blob"])
                out_ch = layer.m if isinstance(layer, Conv) else layer.out
                biases[i] = _read_f32(blob, d["bias_blob"], (out_ch,), path)
    _check_offsets(entries, len(blob), path)
    model = Model(layers=layers, weights=weights, biases=biases,
                  input_shape=tuple(manifest["input_shape"]),
                  class_count=int(manifest["class_count"]),
                  provenance=manifest.get("provenance", ""))
    shapes = infer_shapes(model.layers, model.input_shape)
    if shapes[-1] != (model.class_count,):
        raise FormatError("bad_shape",
                          f"{path}: model output {shapes[-1]} does not match "
                          f"class count {model.class_count}")
    return model


# ---------------------------------------------------------------------------
# datasets

def save_dataset(path, images, labels, class_count, split):
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    blob = _BlobWriter()
    img_entry = blob.add_f32(images)
    lab_entry = blob.add_i32(labels)
    manifest = {
        "kind": "dataset",
        "format_version": VERSION,
        "count": int(images.shape[0]),
        "image_shape": list(images.shape[1:]),
        "class_count": int(class_count),
        "split": split,
        "images": img_entry,
        "labels": lab_entry,
        "blob_bytes": blob.size,
    }
    _write_container(path, manifest, blob.data())


def load_dataset(path):
    manifest, blob = _read_container(path, "dataset")
    count = int(manifest["count"])
    shape = tuple(manifest["image_shape"])
    images = _read_f32(blob, manifest["images"], (count,) + shape, path)
    raw = _slice(blob, manifest["labels"], path)
    labels = np.frombuffer(raw, dtype="<i4").astype(np.int64)
    if labels.size != count:
        raise FormatError("bad_shape", f"{path}: label count mismatch")
    class_count = int(manifest["class_count"])
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise FormatError("bad_labels", f"{path}: labels out of range")
    return images, labels, class_count, manifest["split"]


# ---------------------------------------------------------------------------
# quantized model with adapters

def _qt_to_json(blob, q):
    codes = q.codes
    if q.spec.mode == "asymmetric":
        raw = codes.astype(np.uint8).tobytes()
    else:
        raw = codes.astype(np.int8).tobytes()
    return {
        "bits": q.spec.bits,
        "clip": {"kind": q.spec.clip.kind, "k": q.spec.clip.k},
        "mode": q.spec.mode,
        "scale": q.scale,
        "zero": q.zero,
        "alpha": q.alpha,
        "beta": q.beta,
        "shape": list(codes.shape),
        "codes": blob.add(raw),
    }


def _qt_from_json(blob, d, path):
    spec = QuantSpec(bits=int(d["bits"]),
                     clip=ClipScheme(d["clip"]["kind"], d["clip"]["k"]),
                     mode=d["mode"])
    raw = _slice(blob, d["codes"], path)
    dtype = np.uint8 if spec.mode == "asymmetric" else np.int8
    codes = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    shape = tuple(d["shape"])
    if codes.size != int(np.prod(shape)):
        raise FormatError("bad_shape", f"{path}: quantized codes size mismatch")
    return QuantizedTensor(codes=codes.reshape(shape), scale=float(d["scale"]),
                           zero=int(d["zero"]), alpha=float(d["alpha"]),
                           beta=float(d["beta"]), spec=spec)


def save_quantized(path, m):
    if m.adapter_mode == "soft":
        raise FormatError("bad_mode",
                          "finalize the model before saving (soft adapters are "
                          "a search-time construct)")
    blob = _BlobWriter()
    layers = []
    for i, layer in enumerate(m.base.layers):
        d = _layer_to_json(layer)
        if isinstance(layer, (Conv, Dense)):
            d["quantized"] = _qt_to_json(blob, m.qweights[i])
            if layer.bias:
                d["bias_blob"] = blob.add_f32(m.base.biases[i])
        layers.append(d)
    adapters = []
    if m.adapter_mode == "hard":
        for idx, lid in enumerate(m.conv_ids):
            ad = m.hard_adapters[lid]
            adapters.append({
                "layer": int(lid),
                "rank": int(ad.rank),
                "max_rank": int(m.facts[lid].max_rank) if lid in m.facts else None,
                "stride": list(ad.stride),
                "padding": list(ad.padding),
                "A": {"shape": list(ad.A.shape), **blob.add_f32(ad.A)},
                "B": {"shape": list(ad.B.shape), **blob.add_f32(ad.B)},
            })
    manifest = {
        "kind": "qmodel",
        "format_version": VERSION,
        "provenance": m.base.provenance,
        "class_count": m.base.class_count,
        "input_shape": list(m.base.input_shape),
        "layers": layers,
        "adapter_mode": m.adapter_mode,
        "adapter_order": m.order,
        "ranks": [float(x) for x in m.ranks] if len(m.conv_ids) else [],
        "conv_ids": [int(x) for x in m.conv_ids],
        "adapters": adapters,
        "blob_bytes": blob.size,
    }
    _write_container(path, manifest, blob.data())


def load_quantized(path):
    from .adapter import LowRankAdapter

    manifest, blob = _read_container(path, "qmodel")
    layers = []
    qweights = {}
    biases = {}
    for i, d in enumerate(manifest["layers"]):
        layer = _layer_from_json(d, path)
        layers.append(layer)
        if isinstance(layer, (Conv, Dense)):
            qweights[i] = _qt_from_json(blob, d["quantized"], path)
            if layer.bias:
                out_ch = layer.m if isinstance(layer, Conv) else layer.out
                biases[i] = _read_f32(blob, d["bias_blob"], (out_ch,), path)
    base = Model(layers=layers, weights={}, biases=biases,
                 input_shape=tuple(manifest["input_shape"]),
                 class_count=int(manifest["class_count"]),
                 provenance=manifest.get("provenance", ""))
    infer_shapes(base.layers, base.input_shape)
    hard = {}
    for d in manifest["adapters"]:
        a = _read_f32(blob, d["A"], tuple(d["A"]["shape"]), path)
        b = _read_f32(blob, d["B"], tuple(d["B"]["shape"]), path)
        hard[int(d["layer"])] = LowRankAdapter(
            A=a, B=b, rank=int(d["rank"]), stride=tuple(d["stride"]),
            padding=tuple(d["padding"]))
    conv_ids = [int(x) for x in manifest["conv_ids"]]
    ranks = np.asarray(manifest["ranks"], dtype=np.float64)
    return AdaptedQuantModel(base=base, qweights=qweights, facts={},
                             conv_ids=conv_ids, ranks=ranks,
                             order=int(manifest["adapter_order"]),
                             adapter_mode=manifest["adapter_mode"],
                             hard_adapters=hard)


# ---------------------------------------------------------------------------
# run reports

@dataclass
class RunReport:
    quant_bits: int
    quant_clip: dict
    adapter_bits: int
    budget: float
    equivalent_bits: float
    solution: list = field(default_factory=list)
    accuracy: dict = field(default_factory=dict)
    iterations: int = 0
    wall_time_s: float = 0.0

    def to_dict(self):
        return {
            "quant_bits": self.quant_bits,
            "quant_clip": self.quant_clip,
            "adapter_bits": self.adapter_bits,
            "budget": self.budget,
            "equivalent_bits": self.equivalent_bits,
            "solution": self.solution,
            "accuracy": self.accuracy,
            "iterations": self.iterations,
            "wall_time_s": self.wall_time_s,
        }


def _json_17g(obj, indent=0):
    pad = " " * indent
    inner = " " * (indent + 2)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}{json.dumps(str(k))}: {_json_17g(obj[k], indent + 2)}'
                 for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{inner}{_json_17g(v, indent + 2)}" for v in obj]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, float):
        return f"{obj:.17g}"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def write_report(path, report):
    """Serialize a RunReport as JSON with stable key order and floats at 17
    significant digits."""
    with open(path, "w") as fh:
        fh.write(_json_17g(report.to_dict()))
        fh.write("\n")


def make_report(quant_bits, quant_clip, adapter_bits, budget, solution,
                accuracy, iterations, wall_time_s):
    from .search import equivalent_bitwidth

    return RunReport(
        quant_bits=quant_bits,
        quant_clip=quant_clip,
        adapter_bits=adapter_bits,
        budget=float(budget),
        equivalent_bits=float(equivalent_bitwidth(quant_bits, adapter_bits, budget)),
        solution=solution,
        accuracy=accuracy,
        iterations=int(iterations),
        wall_time_s=float(wall_time_s),
    )
