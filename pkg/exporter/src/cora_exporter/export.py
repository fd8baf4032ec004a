"""Train the desk-scale ConvNet and export the full bundle:

    toy.cora-model     float model, normalization folded into conv weights
    calib.cora-data    1600-sample calibration split
    val.cora-data      validation split
    probe.cora-data    16 probe inputs (labels = model argmax)
    probe_logits.json  float32 logits recorded for the probe inputs
    metadata.json      seed, epochs, splits, reported validation accuracy
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import container, data
from .train import (CONV_CHANNELS, FoldedConvNet, accuracy, fold_batchnorm,
                    logits_of, train)

ACCURACY_THRESHOLD = 0.97
FOLD_TOLERANCE = 1e-4
PROBE_COUNT = 16


class ExportError(RuntimeError):
    pass


def _layer_specs():
    layers = []
    weights = {}
    for i, (m, n) in enumerate(CONV_CHANNELS):
        layers.append({"type": "conv", "m": m, "n": n, "k1": 3, "k2": 3,
                       "stride": [1, 1], "padding": [1, 1], "bias": True})
        layers.append({"type": "relu"})
        if i in (1, 3):
            layers.append({"type": "maxpool", "k": 2, "s": 2})
    layers.append({"type": "avgpool", "k": 4, "s": 4})
    layers.append({"type": "flatten"})
    layers.append({"type": "dense", "out": 10, "inp": 128, "bias": True})
    return layers


def export_bundle(out_dir, seed=0, epochs=6, finetune_epochs=2):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    splits = data.build_splits(seed)
    model, val_acc = train(splits, seed, epochs=epochs,
                           finetune_epochs=finetune_epochs)
    if val_acc < ACCURACY_THRESHOLD:
        raise ExportError(
            f"trained model reached {val_acc:.4f} validation accuracy, "
            f"below the {ACCURACY_THRESHOLD:.2f} export threshold")

    # fold-equivalence check on a held-out batch before anything is written
    folded = FoldedConvNet(model)
    probe_x = splits["val"][0][:PROBE_COUNT].astype(np.float32)
    with torch.no_grad():
        ref = model(torch.tensor(probe_x)).numpy()
        got = folded(torch.tensor(probe_x)).numpy()
    fold_err = float(np.max(np.abs(ref - got)))
    if fold_err > FOLD_TOLERANCE:
        raise ExportError(f"normalization folding error {fold_err:.2e} "
                          f"exceeds {FOLD_TOLERANCE:.0e}")

    layers = _layer_specs()
    folded_params = fold_batchnorm(model)
    weights = {}
    biases = {}
    conv_ids = [i for i, d in enumerate(layers) if d["type"] == "conv"]
    for lid, (w, b) in zip(conv_ids, folded_params):
        weights[lid] = w
        biases[lid] = b
    dense_id = len(layers) - 1
    weights[dense_id] = model.classifier.weight.detach().numpy().astype(np.float32)
    biases[dense_id] = model.classifier.bias.detach().numpy().astype(np.float32)

    container.write_model(out / "toy.cora-model", layers, weights, biases,
                          input_shape=(1, 16, 16), class_count=10,
                          provenance=f"cora-exporter seed={seed} epochs={epochs}")
    container.write_dataset(out / "calib.cora-data", *splits["calib"],
                            class_count=10, split="calibration")
    container.write_dataset(out / "val.cora-data", *splits["val"],
                            class_count=10, split="validation")

    # probe: recorded float32 logits of the folded model on fixed inputs
    probe_logits = logits_of(folded, probe_x)
    probe_labels = probe_logits.argmax(axis=1).astype(np.int64)
    container.write_dataset(out / "probe.cora-data", probe_x, probe_labels,
                            class_count=10, split="validation")
    with open(out / "probe_logits.json", "w") as fh:
        json.dump({"logits": [[float(v) for v in row] for row in probe_logits]},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")

    metadata = {
        "seed": seed,
        "epochs": epochs,
        "finetune_epochs": finetune_epochs,
        "val_accuracy": float(val_acc),
        "folded_val_accuracy": float(accuracy(folded, *splits["val"])),
        "fold_max_error": fold_err,
        "split_sizes": {k: int(len(v[1])) for k, v in splits.items()},
        "class_count": 10,
    }
    with open(out / "metadata.json", "w") as fh:
        json.dump(metadata, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return metadata


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="cora-export",
        description="Train the desk ConvNet and export model + data splits.")
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=6)
    parser.add_argument("--finetune-epochs", type=int, default=2)
    args = parser.parse_args(argv)
    try:
        meta = export_bundle(args.out, seed=args.seed, epochs=args.epochs,
                             finetune_epochs=args.finetune_epochs)
    except ExportError as exc:
        print(f"cora-export: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(meta, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
