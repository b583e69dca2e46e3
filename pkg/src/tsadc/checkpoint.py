"""Named-parameter checkpoints: one .npz with a JSON shape manifest."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError

FORMAT_VERSION = 1
_MANIFEST = "__manifest__"

# keys that change parameter shapes or model structure
ARCH_KEYS = (
    "diffusion.T", "diffusion.blocks", "diffusion.channels", "diffusion.bidirectional",
    "s4.state_size", "s4.layers", "s4.width",
    "graph.gin_layers", "graph.gin_hidden", "graph.embed_dim",
)


def save_checkpoint(path, modules: dict, config: dict, extra=None):
    arrays = {}
    shapes = {}
    for prefix, module in modules.items():
        for name, p in module.named_parameters():
            key = f"{prefix}/{name}"
            arrays[key] = p.data
            shapes[key] = list(p.data.shape)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": dict(config),
        "shapes": shapes,
        "extra": extra or {},
    }
    arrays[_MANIFEST] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns (manifest, arrays)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        raise FormatError(f"{path}: not a readable checkpoint ({exc})") from None
    if _MANIFEST not in arrays:
        raise FormatError(f"{path}: checkpoint has no manifest")
    manifest = json.loads(arrays.pop(_MANIFEST).tobytes().decode())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint format {version}, expected {FORMAT_VERSION}")
    return manifest, arrays


def check_compatible(manifest, config):
    stored = manifest["config"]
    diffs = [k for k in ARCH_KEYS if k in stored and stored[k] != config.get(k)]
    if diffs:
        detail = ", ".join(f"{k}: checkpoint {stored[k]!r} vs config {config.get(k)!r}" for k in diffs)
        raise VersionError(f"checkpoint does not match the configuration ({detail})")


def restore(modules: dict, arrays):
    """Copy stored arrays into the modules' parameters, checking names and shapes."""
    expected = set()
    for prefix, module in modules.items():
        for name, p in module.named_parameters():
            key = f"{prefix}/{name}"
            expected.add(key)
            if key not in arrays:
                raise VersionError(f"checkpoint lacks parameter {key}")
            if arrays[key].shape != p.data.shape:
                raise VersionError(
                    f"parameter {key}: checkpoint shape {arrays[key].shape} != model {p.data.shape}")
            p.data[...] = arrays[key]
    unknown = sorted(set(arrays) - expected)
    if unknown:
        raise VersionError(f"checkpoint has unexpected parameters: {unknown[:5]}")
