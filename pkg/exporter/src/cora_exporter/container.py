"""Writer for the cora container formats (.cora-model, .cora-data).

Implemented independently from the consumer side so the formats themselves
are the only contract:

    magic "CORA" | version u32 | manifest_len u64   (16-byte header)
    manifest JSON (UTF-8, sorted keys)
    raw binary blob
    crc32 u32 over manifest bytes + blob

All multi-byte values are little-endian; array scalars are float32 (images,
weights) or int32 (labels).
"""
import json
import struct
import zlib

import numpy as np

MAGIC = b"CORA"
VERSION = 1


class BlobBuilder:
    """Accumulates raw arrays and hands back manifest offset entries."""

    def __init__(self):
        self._parts = []
        self.size = 0

    def add_f32(self, arr):
        return self._add(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def add_i32(self, arr):
        return self._add(np.ascontiguousarray(arr, dtype="<i4").tobytes())

    def _add(self, raw):
        entry = {"offset": self.size, "bytes": len(raw)}
        self._parts.append(raw)
        self.size += len(raw)
        return entry

    def data(self):
        return b"".join(self._parts)


def write_container(path, manifest, blob):
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    crc = zlib.crc32(blob, zlib.crc32(mbytes))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(mbytes)))
        fh.write(mbytes)
        fh.write(blob)
        fh.write(struct.pack("<I", crc))


def write_model(path, layers, weights, biases, input_shape, class_count,
                provenance):
    """Write a float model container.

    `layers` is a list of layer dicts in the manifest schema (type plus
    geometry fields); conv/dense entries reference `weights`/`biases` by
    layer index.
    """
    blob = BlobBuilder()
    out_layers = []
    for i, layer in enumerate(layers):
        d = dict(layer)
        if d["type"] in ("conv", "dense"):
            d["weight"] = blob.add_f32(weights[i])
            if d.get("bias"):
                d["bias_blob"] = blob.add_f32(biases[i])
        out_layers.append(d)
    manifest = {
        "kind": "model",
        "format_version": VERSION,
        "provenance": provenance,
        "class_count": int(class_count),
        "input_shape": [int(x) for x in input_shape],
        "layers": out_layers,
        "blob_bytes": blob.size,
    }
    write_container(path, manifest, blob.data())


def write_dataset(path, images, labels, class_count, split):
    images = np.asarray(images)
    labels = np.asarray(labels)
    blob = BlobBuilder()
    img_entry = blob.add_f32(images)
    lab_entry = blob.add_i32(labels)
    manifest = {
        "kind": "dataset",
        "format_version": VERSION,
        "count": int(images.shape[0]),
        "image_shape": [int(x) for x in images.shape[1:]],
        "class_count": int(class_count),
        "split": split,
        "images": img_entry,
        "labels": lab_entry,
        "blob_bytes": blob.size,
    }
    write_container(path, manifest, blob.data())
