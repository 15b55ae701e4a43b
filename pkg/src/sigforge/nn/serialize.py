"""Model files: a JSON manifest next to a raw little-endian float64 parameter blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .network import LayerSpec, Network

FORMAT_VERSION = "sigforge-model-v1"


class ModelFormatError(ValueError):
    pass


def save_network(net: Network, path, **metadata) -> Path:
    """Write ``<path>.json`` and ``<path>.f64``; returns the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".f64")
    blob.write_bytes(np.asarray(net.params, dtype="<f8").tobytes())
    manifest = {
        "version": FORMAT_VERSION,
        "layers": [spec.to_dict() for spec in net.layers],
        "n_params": net.n_params,
        "seed": net.seed,
        "params_file": blob.name,
        "metadata": metadata,
    }
    manifest_path = path.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def load_network(path) -> tuple[Network, dict]:
    manifest_path = Path(path).with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{manifest_path}: unsupported model version {manifest.get('version')!r}")
    raw = (manifest_path.parent / manifest["params_file"]).read_bytes()
    if len(raw) != 8 * manifest["n_params"]:
        raise ModelFormatError(f"{manifest_path}: parameter blob holds {len(raw) // 8} values, expected {manifest['n_params']}")
    params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    return Network(tuple(layers), params, None, manifest.get("seed")), manifest.get("metadata", {})
