"""Checkpoint container: named floating-point arrays plus a text descriptor.

One .npz file per checkpoint. The descriptor is a JSON document stored
under the reserved key ``__descriptor__`` and always carries a ``format``
version string which loaders verify.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import MissingArtifactError, LatentMatteError

FORMAT_VERSION = "latentmatte-ckpt-1"

_DESCRIPTOR_KEY = "__descriptor__"


def save_checkpoint(path: str, arrays: dict, descriptor: dict) -> None:
    meta = dict(descriptor)
    meta["format"] = FORMAT_VERSION
    payload = {_DESCRIPTOR_KEY: np.array(json.dumps(meta, sort_keys=True))}
    payload.update(arrays)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path: str):
    """Returns (arrays, descriptor); refuses unknown format versions."""
    if not os.path.isfile(path):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if _DESCRIPTOR_KEY not in z.files:
            raise LatentMatteError(f"{path}: not a latentmatte checkpoint (no descriptor)")
        descriptor = json.loads(str(z[_DESCRIPTOR_KEY].item()))
        if descriptor.get("format") != FORMAT_VERSION:
            raise LatentMatteError(
                f"{path}: unsupported checkpoint format {descriptor.get('format')!r}")
        arrays = {k: z[k] for k in z.files if k != _DESCRIPTOR_KEY}
    return arrays, descriptor
