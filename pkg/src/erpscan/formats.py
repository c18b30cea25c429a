"""On-disk formats: the binary image dataset and JSON-headed checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .labels import N_SLOTS, LabelVector
from .scan import ARCH_SCAN, ScanCheckpoint, ScanConfig
from .scan import build_store as build_scan_store
from .vae import ARCH_AE, ARCH_BVAE, Checkpoint, TrainConfig, build_store

DATASET_MAGIC = b"EEGD"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"EEGCKPT\n"
CHECKPOINT_VERSION = 1
SOURCE_TAGS = {"ERP": 0, "SMPL": 1}
_RECORD = struct.Struct("<I12sB")
_PIXELS = 6 * 256


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DigestMismatchError(FormatError):
    pass


class SchemaError(FormatError):
    pass


@dataclass
class Dataset:
    ids: np.ndarray        # (n,) uint32
    labels: np.ndarray     # (n, 12) uint8 multi-one-hot
    sources: np.ndarray    # (n,) uint8, 0=ERP 1=SMPL
    images: np.ndarray     # (n, 6, 256) float32

    def __len__(self) -> int:
        return len(self.ids)

    def label_vectors(self) -> list[LabelVector]:
        return [LabelVector.decode(row) for row in self.labels]

    def factor(self, index: int) -> np.ndarray:
        """Class index per record for one factor (0..4)."""
        return np.array([lv.as_tuple()[index] for lv in self.label_vectors()])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.ids[idx], self.labels[idx], self.sources[idx], self.images[idx])


def write_dataset(path: Union[str, Path], ds: Dataset) -> None:
    images = np.asarray(ds.images, dtype="<f4").reshape(len(ds), _PIXELS)
    if np.any(images < 0) or np.any(images > 1):
        raise SchemaError("dataset images must lie in [0, 1]")
    parts = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(ds))]
    for i in range(len(ds)):
        lab = np.asarray(ds.labels[i], dtype=np.uint8).tobytes()
        parts.append(_RECORD.pack(int(ds.ids[i]), lab, int(ds.sources[i])))
        parts.append(images[i].tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path: Union[str, Path]) -> Dataset:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    if raw[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: not an EEGD dataset (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
    rec = _RECORD.size + 4 * _PIXELS
    if len(raw) != 12 + count * rec:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, expected {12 + count * rec} for {count} records")
    dt = np.dtype([("id", "<u4"), ("label", "u1", (N_SLOTS,)), ("source", "u1"), ("img", "<f4", (_PIXELS,))])
    arr = np.frombuffer(raw, dtype=dt, count=count, offset=12)
    return Dataset(arr["id"].copy(), arr["label"].copy(), arr["source"].copy(),
                   arr["img"].reshape(count, 6, 256).copy())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

AnyCheckpoint = Union[Checkpoint, ScanCheckpoint]


def _header(ckpt: AnyCheckpoint, blob: bytes) -> dict:
    cfg = ckpt.meta()
    return dict(version=CHECKPOINT_VERSION, arch=ckpt.arch, mode=ckpt.mode,
                beta=getattr(ckpt, "beta", None), seed=ckpt.seed, step=ckpt.step,
                blob_bytes=len(blob), digest=hashlib.sha256(blob).hexdigest(),
                config=cfg, trace=ckpt.trace)


def write_checkpoint(path: Union[str, Path], ckpt: AnyCheckpoint) -> None:
    blob = ckpt.params.to_blob()
    head = json.dumps(_header(ckpt, blob), sort_keys=True).encode()
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + blob)


def read_checkpoint(path: Union[str, Path]) -> AnyCheckpoint:
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 4:
        raise TruncatedFileError(f"{path}: header truncated")
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + hlen:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        head = json.loads(raw[off:off + hlen])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: header is not valid JSON") from exc
    if head.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {head.get('version')}")
    blob = raw[off + hlen:]
    if len(blob) != head["blob_bytes"]:
        raise TruncatedFileError(f"{path}: parameter blob is {len(blob)} bytes, header says {head['blob_bytes']}")
    if hashlib.sha256(blob).hexdigest() != head["digest"]:
        raise DigestMismatchError(f"{path}: parameter digest mismatch")
    cfg = dict(head["config"])
    arch = head["arch"]
    if arch in (ARCH_BVAE, ARCH_AE):
        tc = TrainConfig(**{k: cfg[k] for k in TrainConfig.__dataclass_fields__})
        store = build_store(tc.mode, dtype=np.dtype(tc.dtype))
        ckpt = Checkpoint(arch, tc, store, head["step"], head["trace"])
    elif arch == ARCH_SCAN:
        sc = ScanConfig(**{k: cfg[k] for k in ScanConfig.__dataclass_fields__})
        store = build_scan_store(np.dtype(sc.dtype))
        ckpt = ScanCheckpoint(arch, sc, store, head["step"], head["trace"],
                              cfg.get("grounding_arch", ""), cfg.get("grounding_digest", ""))
    else:
        raise SchemaError(f"{path}: unknown architecture {arch!r}")
    if len(blob) != 4 * len(store):
        raise SchemaError(f"{path}: blob holds {len(blob) // 4} values, {arch} needs {len(store)}")
    store.load_blob(blob)
    return ckpt
