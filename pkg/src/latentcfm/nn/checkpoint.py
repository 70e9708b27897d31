"""Checkpoint files: named float64 tensors plus a JSON metadata block."""
from __future__ import annotations

from ..io import load_container, save_container

CHECKPOINT_VERSION = "lcfm-ckpt/1"


def save_checkpoint(path, modules: dict, meta=None, extra_arrays=None):
    """Write every parameter of each module under ``<module key>/<param name>``."""
    arrays = {}
    for key, module in modules.items():
        if module is None:
            continue
        for name, arr in module.state_dict().items():
            arrays[f"{key}/{name}"] = arr
    for name, arr in (extra_arrays or {}).items():
        arrays[f"extra/{name}"] = arr
    save_container(path, {"checkpoint_version": CHECKPOINT_VERSION, **(meta or {})}, arrays)


def load_checkpoint(path, modules: dict | None = None):
    """Read a checkpoint; optionally load parameters into ``modules`` in place.

    Returns ``(meta, arrays)`` where arrays are still keyed by full name.
    """
    meta, arrays = load_container(path)
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('checkpoint_version')!r}")
    for key, module in (modules or {}).items():
        if module is None:
            continue
        prefix = key + "/"
        module.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
    return meta, arrays
