"""On-disk formats: embedding files, dataset directories, run records.

Embedding file layout (little-endian throughout):

    offset  size  field
    0       4     magic "UCEB"
    4       4     format version (unsigned, currently 1)
    8       8     N: number of samples (unsigned)
    16      4     D: feature dimension (unsigned)
    20      4     L: modality-name length in bytes (unsigned)
    24      L     modality name, UTF-8
    24+L    ...   N records of { id: 8-byte unsigned, view_id: 4-byte
                  unsigned, D float32 values }

Features are float32 on disk and float64 in memory; the write-side
conversion is the only lossy step and is documented here. Everything
else round-trips exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, ShapeError
from .pipeline import RunRecord, config_dict, config_hash
from .synthdata import (
    SPLIT_GALLERY,
    SPLIT_QUERY,
    SPLIT_TRAIN,
    MultimodalDataset,
    SynthConfig,
)

EMBEDDING_MAGIC = b"UCEB"
EMBEDDING_VERSION = 1

_SPLIT_CODES = {SPLIT_TRAIN: "T", SPLIT_QUERY: "Q", SPLIT_GALLERY: "G"}
_SPLIT_FROM_CODE = {v: k for k, v in _SPLIT_CODES.items()}


@dataclass
class EmbeddingRecord:
    """In-memory form of one embedding file."""

    name: str
    features: np.ndarray  # (n, d) float64 (float32 precision)
    ids: np.ndarray  # (n,) int64
    view_ids: np.ndarray  # (n,) int64


def write_embedding_file(path, name: str, features, ids, view_ids) -> None:
    features = np.asarray(features, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    view_ids = np.asarray(view_ids, dtype=np.int64)
    if features.ndim != 2:
        raise ShapeError(f"features must be 2-D, got {features.shape}")
    n, d = features.shape
    if ids.shape != (n,) or view_ids.shape != (n,):
        raise ShapeError(
            f"ids {ids.shape} / view_ids {view_ids.shape} misaligned with {n} samples"
        )
    if n and (ids.min() < 0 or view_ids.min() < 0):
        raise DataError("ids and view_ids must be non-negative for serialization")
    name_bytes = str(name).encode("utf-8")
    payload = np.empty(
        n, dtype=np.dtype([("id", "<u8"), ("view", "<u4"), ("feat", "<f4", (d,))])
    )
    payload["id"] = ids.astype(np.uint64)
    payload["view"] = view_ids.astype(np.uint32)
    payload["feat"] = features.astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<I", EMBEDDING_VERSION))
        fh.write(struct.pack("<Q", n))
        fh.write(struct.pack("<I", d))
        fh.write(struct.pack("<I", len(name_bytes)))
        fh.write(name_bytes)
        fh.write(payload.tobytes())


def read_embedding_file(path) -> EmbeddingRecord:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:4] != EMBEDDING_MAGIC:
        raise DataError(f"{path}: not an embedding file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != EMBEDDING_VERSION:
        raise DataError(f"{path}: unsupported embedding file version {version}")
    (n,) = struct.unpack_from("<Q", blob, 8)
    (d,) = struct.unpack_from("<I", blob, 16)
    (name_len,) = struct.unpack_from("<I", blob, 20)
    offset = 24 + name_len
    if len(blob) < offset:
        raise DataError(f"{path}: truncated before modality name ends")
    try:
        name = blob[24:offset].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: modality name is not valid UTF-8: {exc}") from None
    record_size = 8 + 4 + 4 * d
    expected = offset + n * record_size
    if len(blob) != expected:
        raise DataError(
            f"{path}: file length {len(blob)} does not match header "
            f"(expected {expected} for N={n}, D={d})"
        )
    payload = np.frombuffer(
        blob, dtype=np.dtype([("id", "<u8"), ("view", "<u4"), ("feat", "<f4", (d,))]),
        count=n, offset=offset,
    )
    ids = payload["id"].astype(np.int64)
    view_ids = payload["view"].astype(np.int64)
    features = payload["feat"].astype(np.float64).reshape(n, d)
    if not np.all(np.isfinite(features)):
        raise DataError(f"{path}: embeddings contain non-finite values")
    return EmbeddingRecord(name=name, features=features, ids=ids, view_ids=view_ids)


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def synth_config_dict(cfg: SynthConfig) -> dict:
    return {
        "num_modalities": cfg.num_modalities,
        "latent_dim": cfg.latent_dim,
        "obs_dim": list(cfg.obs_dim),
        "ids_train": cfg.ids_train,
        "ids_test": cfg.ids_test,
        "views_per_id": cfg.views_per_id,
        "signal_scale": list(cfg.signal_scale),
        "view_jitter": cfg.view_jitter,
        "noise_sigma": list(cfg.noise_sigma),
        "spurious_dim": list(cfg.spurious_dim),
        "spurious_strength": list(cfg.spurious_strength),
        "seed": cfg.seed,
    }


def write_dataset(ds: MultimodalDataset, outdir, cfg: Optional[SynthConfig] = None) -> None:
    """Dataset directory: one embedding file per modality + manifest.json."""
    ds.validate()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    modalities = []
    for i, name in enumerate(ds.modality_names):
        fname = f"modality_{i}.uceb"
        write_embedding_file(outdir / fname, name, ds.features[i], ds.ids, ds.view_ids)
        modalities.append({"name": name, "file": fname, "dim": int(ds.features[i].shape[1])})
    cfg_dict = None if cfg is None else synth_config_dict(cfg)
    manifest = {
        "format": "reidlab-dataset",
        "version": 1,
        "num_samples": ds.num_samples,
        "modalities": modalities,
        "split": "".join(_SPLIT_CODES[int(s)] for s in ds.split),
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict) if cfg_dict is not None else None,
    }
    dump_json(manifest, outdir / "manifest.json")


def read_dataset(path) -> tuple[MultimodalDataset, dict]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{path}: no manifest.json; not a dataset directory")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: corrupt manifest: {exc}") from None
    if manifest.get("format") != "reidlab-dataset" or manifest.get("version") != 1:
        raise DataError(f"{manifest_path}: unsupported dataset manifest")
    features = []
    names = []
    ids = None
    view_ids = None
    for entry in manifest["modalities"]:
        rec = read_embedding_file(path / entry["file"])
        if rec.name != entry["name"]:
            raise DataError(
                f"{entry['file']}: modality name {rec.name!r} does not match manifest {entry['name']!r}"
            )
        if ids is None:
            ids, view_ids = rec.ids, rec.view_ids
        elif not (np.array_equal(ids, rec.ids) and np.array_equal(view_ids, rec.view_ids)):
            raise DataError(f"{entry['file']}: ids/view_ids differ across modality files")
        features.append(rec.features)
        names.append(rec.name)
    split_str = manifest["split"]
    if ids is None or len(split_str) != ids.shape[0]:
        raise DataError(f"{manifest_path}: split string does not match sample count")
    try:
        split = np.array([_SPLIT_FROM_CODE[c] for c in split_str], dtype=np.int8)
    except KeyError as exc:
        raise DataError(f"{manifest_path}: bad split code {exc}") from None
    ds = MultimodalDataset(
        features=features, ids=ids, view_ids=view_ids, split=split, modality_names=names
    )
    ds.validate()
    return ds, manifest


def loss_curve_csv(rec: RunRecord) -> str:
    lines = ["epoch,loss,lr"]
    for e, (loss, lr) in enumerate(zip(rec.epoch_losses, rec.epoch_lrs)):
        lines.append(f"{e},{float(loss)!r},{float(lr)!r}")
    return "\n".join(lines) + "\n"


def write_run_record(rec: RunRecord, outdir, extra: Optional[dict] = None) -> None:
    """Run directory: config snapshot, loss curve CSV, checkpoint blob."""
    from .model import save_checkpoint  # local import to keep fileio light

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "config": config_dict(rec.config),
        "config_hash": rec.config_hash,
        "seed": rec.seed,
    }
    if extra:
        snapshot.update(extra)
    dump_json(snapshot, outdir / "config.json")
    (outdir / "loss_curve.csv").write_text(loss_curve_csv(rec), encoding="utf-8")
    save_checkpoint(rec.model, outdir / "checkpoint.bin")
