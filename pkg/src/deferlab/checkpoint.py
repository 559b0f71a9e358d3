"""Versioned checkpoints for a trained classifier/rejector pair.

Weights are stored as raw float64 arrays in an ``.npz``-compatible archive
written with fixed zip timestamps, so a save/load round trip is bit-exact
and re-saving identical networks produces byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .nets import DenseNet, Layer, TrainConfig

FORMAT_VERSION = 1


def _write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def _net_arrays(prefix: str, net: DenseNet) -> dict[str, np.ndarray]:
    arrays = {}
    for i, layer in enumerate(net.layers):
        arrays[f"{prefix}_w{i}"] = layer.weights
        arrays[f"{prefix}_b{i}"] = layer.bias
    return arrays


def save_checkpoint(path, classifier: DenseNet, rejector: DenseNet, cfg: TrainConfig) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "classifier_activations": [l.activation for l in classifier.layers],
        "rejector_activations": [l.activation for l in rejector.layers],
        "train_config": {
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "epochs": cfg.epochs,
            "weight_decay": cfg.weight_decay,
            "seed": cfg.seed,
        },
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    arrays.update(_net_arrays("clf", classifier))
    arrays.update(_net_arrays("rej", rejector))
    _write_arrays(path, arrays)


def _load_net(data, prefix: str, activations: list[str]) -> DenseNet:
    layers = []
    for i, act in enumerate(activations):
        layers.append(Layer(data[f"{prefix}_w{i}"], data[f"{prefix}_b{i}"], act))
    return DenseNet(layers)


def load_checkpoint(path) -> tuple[DenseNet, DenseNet, TrainConfig]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        classifier = _load_net(data, "clf", meta["classifier_activations"])
        rejector = _load_net(data, "rej", meta["rejector_activations"])
        cfg = TrainConfig(**meta["train_config"])
    return classifier, rejector, cfg
