"""Single-file checkpoint archive.

Layout::

    b"RISCKPT0"                      8-byte magic
    <uint64 little-endian>           manifest length in bytes
    <UTF-8 JSON manifest>
    <blob>                           little-endian tensors, row-major, back to back

The manifest carries ``format_version``, the full run config, the token
table, a tensor table (name -> shape, dtype, offset, length), a training
state summary and a SHA-256 checksum of the blob.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
from torch import Tensor

from .backbone import Vocabulary
from .config import RunConfig, config_hash, from_dict, to_dict
from .errors import CheckpointError
from .model import RISCLIP

log = logging.getLogger(__name__)

MAGIC = b"RISCKPT0"
FORMAT_VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


@dataclass
class Archive:
    manifest: dict
    tensors: dict[str, np.ndarray]


def write_archive(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray],
                  manifest_extra: Optional[dict] = None, dtype: str = "float32") -> dict:
    """Write tensors with a manifest; the file appears atomically.

    Checkpoints always use float32. ``dtype="float64"`` exists only to produce
    external archives for ``import_named_tensors``.
    """
    np_dtype = _DTYPES[dtype]
    table, chunks, offset = {}, [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, Tensor) else np.asarray(t)
        data = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
        table[name] = {"shape": list(arr.shape), "dtype": dtype, "offset": offset, "length": len(data)}
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = {"format_version": FORMAT_VERSION, **(manifest_extra or {}), "tensors": table,
                "checksum": "sha256:" + hashlib.sha256(blob).hexdigest()}
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return manifest


def read_archive(path: str | Path) -> Archive:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unknown format_version {manifest.get('format_version')!r}")
    blob = raw[16 + n :]
    digest = "sha256:" + hashlib.sha256(blob).hexdigest()
    if digest != manifest.get("checksum"):
        raise CheckpointError(f"{path}: checksum mismatch (blob is {len(blob)} bytes; corrupted or truncated)")
    spans = []
    tensors = {}
    for name, info in manifest.get("tensors", {}).items():
        dtype = _DTYPES.get(info.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"{path}: tensor {name} has unsupported dtype {info.get('dtype')!r}")
        off, length, shape = info["offset"], info["length"], tuple(info["shape"])
        if off < 0 or off + length > len(blob):
            raise CheckpointError(f"{path}: tensor {name} lies outside the blob")
        if length != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{path}: tensor {name} length {length} does not match shape {list(shape)}")
        spans.append((off, off + length, name))
        tensors[name] = np.frombuffer(blob, dtype=dtype, count=length // dtype.itemsize, offset=off).reshape(shape)
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"{path}: tensors {an} and {bn} overlap")
    return Archive(manifest, tensors)


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------


def model_tensors(model: RISCLIP) -> dict[str, Tensor]:
    return {k: v for k, v in model.state_dict().items()}


def save_checkpoint(
    path: str | Path,
    model: RISCLIP,
    cfg: RunConfig,
    vocab: Vocabulary,
    training_state: Optional[dict] = None,
    extra_tensors: Optional[Mapping[str, Tensor]] = None,
) -> dict:
    cfg_dict = to_dict(cfg)
    cfg_dict["model"] = to_dict(model.cfg)
    tensors = dict(model_tensors(model))
    if extra_tensors:
        tensors.update(extra_tensors)
    return write_archive(
        path,
        tensors,
        {
            "config": cfg_dict,
            "config_hash": config_hash(model.cfg),
            "vocab": vocab.tokens(),
            "training_state": training_state or {},
        },
    )


@dataclass
class LoadedCheckpoint:
    model: RISCLIP
    config: RunConfig
    vocab: Vocabulary
    training_state: dict
    extra_tensors: dict[str, Tensor]
    manifest: dict


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    archive = read_archive(path)
    man = archive.manifest
    try:
        cfg = from_dict(RunConfig, man["config"])
        cfg.validate()
    except KeyError as exc:
        raise CheckpointError(f"{path}: manifest lacks {exc}") from exc
    if man.get("config_hash") != config_hash(cfg.model):
        raise CheckpointError(f"{path}: config hash mismatch")
    model = RISCLIP(cfg.model)
    expected = model.state_dict()
    missing = [k for k in expected if k not in archive.tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    extra = {k: v for k, v in archive.tensors.items() if k not in expected}
    unknown = [k for k in extra if not k.startswith("optim.")]
    if unknown:
        raise CheckpointError(f"{path}: tensors {unknown} do not belong to this model config")
    state = {}
    for k, ref in expected.items():
        arr = archive.tensors[k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"{path}: tensor {k} has shape {list(arr.shape)} but the config expects {list(ref.shape)}"
            )
        state[k] = torch.from_numpy(arr.copy()).to(ref.dtype)
    model.load_state_dict(state)
    return LoadedCheckpoint(
        model=model,
        config=cfg,
        vocab=Vocabulary(man.get("vocab", [])),
        training_state=man.get("training_state", {}),
        extra_tensors={k: torch.from_numpy(v.copy()) for k, v in extra.items()},
        manifest=man,
    )


# ---------------------------------------------------------------------------
# external backbone weights
# ---------------------------------------------------------------------------


def import_named_tensors(archive_path: str | Path, mapping: Mapping[str, str], model: RISCLIP) -> dict[str, Tensor]:
    """Read backbone weights from an archive, renaming external -> internal names.

    Internal names are relative to the backbone (``text.layer3.ln1.gain``).
    Every backbone tensor must be covered by the mapping; only backbone
    tensors are imported.
    """
    archive = read_archive(archive_path)
    expected = model.backbone.state_dict()
    by_internal: dict[str, str] = {}
    for ext, internal in mapping.items():
        if internal not in expected:
            raise CheckpointError(f"mapping target {internal!r} is not a backbone tensor")
        by_internal[internal] = ext
    unmapped = sorted(k for k in expected if k not in by_internal)
    if unmapped:
        raise CheckpointError(f"backbone tensors without a mapping: {unmapped}")
    out = {}
    for internal, ext in by_internal.items():
        if ext not in archive.tensors:
            raise CheckpointError(f"archive lacks tensor {ext!r} (mapped to {internal!r})")
        arr = archive.tensors[ext]
        ref = expected[internal]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"tensor {ext!r} -> {internal!r}: archive shape {list(arr.shape)} vs expected {list(ref.shape)}"
            )
        if arr.dtype.itemsize > 4:
            log.warning("tensor %s stored as %s; converting to float32", ext, arr.dtype)
        out[internal] = torch.from_numpy(np.array(arr, dtype=np.float32))
    return out


def apply_backbone_tensors(model: RISCLIP, tensors: Mapping[str, Tensor]) -> None:
    model.backbone.load_state_dict(dict(tensors))
    model.backbone.requires_grad_(False)


def load_mapping(path: str | Path) -> dict[str, str]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in data.items()):
        raise CheckpointError("mapping table must be a JSON object of external -> internal names")
    return data
