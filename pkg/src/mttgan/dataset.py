"""X-ray corpus ingestion, normalization, soft-crop augmentation and splits.

Records hold grayscale pixels in [0, 1]. Records produced by ingestion are
lazy: they carry a file path and decode on access, so a full-resolution corpus
never has to sit in memory. Everything derived from them (resized copies,
augmented children, generated images) carries in-memory pixels quantized to
the 16-bit grid used by the on-disk image cache, which makes a save/load
round trip exact.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from ._rng import derive_rng

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpeg", ".jpg", ".png", ".bmp", ".tif", ".tiff"}
MANIFEST_FORMAT = "mttgan-manifest"
MANIFEST_VERSION = 1
_QMAX = 65535


class Label(str, Enum):
    COVID = "covid"
    NORMAL = "normal"
    BACTERIAL = "bacterial"
    VIRAL = "viral"


class Origin(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


class Source(str, Enum):
    KAGGLE = "kaggle"
    COVID_REPO = "covid_repo"
    GENERATOR = "generator"


class DatasetError(Exception):
    """Fatal configuration or data-contract violation."""


class LeakageError(DatasetError):
    """A training record is a test record or descends from one."""


# --------------------------------------------------------------------------- #
# pixel helpers


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap float pixels onto the 16-bit cache grid (float32, [0, 1])."""
    q = np.round(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * _QMAX)
    return from_uint16(q.astype(np.uint16))


def from_uint16(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / np.float32(_QMAX)).astype(np.float32)


def to_uint16(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels.astype(np.float64), 0.0, 1.0) * _QMAX).astype(np.uint16)


def load_grayscale(path: str | os.PathLike) -> np.ndarray:
    """Decode an image file to a float32 H×W array in [0, 1].

    Color sources are reduced to luminance (ITU-R 601 weights).
    """
    with Image.open(path) as img:
        img.load()
        mode = img.mode
        if mode in ("I;16", "I;16B", "I;16L"):
            return from_uint16(np.array(img, dtype=np.uint16))
        if mode == "I":
            arr = np.array(img, dtype=np.int64)
            return from_uint16(np.clip(arr, 0, _QMAX).astype(np.uint16))
        if mode == "F":
            return np.clip(np.array(img, dtype=np.float32), 0.0, 1.0)
        if mode == "L":
            return np.array(img, dtype=np.float32) / np.float32(255)
        if mode == "LA":
            return np.array(img.getchannel("L"), dtype=np.float32) / np.float32(255)
        rgb = np.array(img.convert("RGB"), dtype=np.float64) / 255.0
    lum = rgb @ np.array([0.299, 0.587, 0.114])
    return np.clip(lum, 0.0, 1.0).astype(np.float32)


def save_grayscale(pixels: np.ndarray, path: str | os.PathLike) -> None:
    """Write pixels as a lossless 16-bit grayscale PNG."""
    Image.fromarray(to_uint16(pixels)).save(path, format="PNG")


def _bilinear(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    img = Image.fromarray(np.ascontiguousarray(pixels, dtype=np.float32), mode="F")
    out = img.resize((width, height), resample=Image.Resampling.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0)


# --------------------------------------------------------------------------- #
# records and manifests


@dataclass(frozen=True, eq=False)
class ImageRecord:
    id: str
    label: Label
    origin: Origin = Origin.REAL
    source: Source = Source.KAGGLE
    parent_id: str | None = None
    view: str | None = None
    path: Path | None = None
    crop_box: tuple[int, int, int, int] | None = None  # (top, bottom, left, right) pixels removed
    data: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "origin", Origin(self.origin))
        object.__setattr__(self, "source", Source(self.source))
        if self.data is None and self.path is None:
            raise DatasetError(f"record {self.id!r} has neither pixels nor a path")
        if self.data is not None:
            arr = self.data
            if arr.ndim != 2:
                raise DatasetError(f"record {self.id!r}: pixels must be 2-D, got {arr.shape}")
            if arr.size and (float(arr.min()) < 0.0 or float(arr.max()) > 1.0):
                raise DatasetError(f"record {self.id!r}: pixel values outside [0, 1]")

    @property
    def pixels(self) -> np.ndarray:
        if self.data is not None:
            return self.data
        return load_grayscale(self.path)

    def with_pixels(self, pixels: np.ndarray, **changes) -> "ImageRecord":
        return replace(self, data=pixels, **changes)

    def materialize(self) -> "ImageRecord":
        return self if self.data is not None else replace(self, data=self.pixels)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    provenance_note: str = ""
    counts_by_label: dict = field(init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise DatasetError(f"duplicate record id {rec.id!r} in manifest")
            seen.add(rec.id)
        counts = Counter(rec.label for rec in self.records)
        object.__setattr__(self, "counts_by_label", {lab: counts[lab] for lab in Label if counts[lab]})

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> set[str]:
        return {rec.id for rec in self.records}

    def by_label(self, label: Label | str) -> "DatasetManifest":
        label = Label(label)
        return DatasetManifest(tuple(r for r in self.records if r.label is label), self.provenance_note)

    def materialize(self) -> "DatasetManifest":
        return DatasetManifest(tuple(r.materialize() for r in self.records), self.provenance_note)

    def stack(self) -> np.ndarray:
        """Pixels of all records as an (N, H, W) float32 array."""
        if not self.records:
            raise DatasetError("cannot stack an empty manifest")
        return np.stack([r.pixels for r in self.records]).astype(np.float32, copy=False)


def concat(manifests: Iterable[DatasetManifest], note: str = "") -> DatasetManifest:
    records = [r for m in manifests for r in m.records]
    return DatasetManifest(tuple(records), note)


@dataclass(frozen=True)
class AugmentConfig:
    factor: int
    max_crop_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("augmentation factor must be >= 1")
        if not 0.0 <= self.max_crop_frac <= 0.5:
            raise ValueError("max_crop_frac must lie in [0, 0.5]")


@dataclass(frozen=True)
class SplitSpec:
    holdout_per_class: int = 68
    seed: int = 0


# --------------------------------------------------------------------------- #
# ingestion

DEFAULT_KAGGLE_TOKENS = {"bacteria": Label.BACTERIAL, "virus": Label.VIRAL, "normal": Label.NORMAL}


def load_label_map(path: str | os.PathLike) -> dict[str, Label]:
    """Read a JSON ``{"token": "label"}`` override for Kaggle label inference."""
    with open(path) as fh:
        raw = json.load(fh)
    return {str(k).lower(): Label(v) for k, v in raw.items()}


def _kaggle_label(rel: Path, tokens: Mapping[str, Label]) -> Label | None:
    # filename tokens win over directory names (PNEUMONIA/ holds both kinds)
    parts = [rel.stem.lower()] + [p.lower() for p in reversed(rel.parts[:-1])]
    for part in parts:
        for token, label in tokens.items():
            if token in part:
                return label
    return None


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.load()
        return True
    except Exception:  # PIL raises a zoo of exception types on bad files
        return False


def ingest_kaggle(root: str | os.PathLike, label_map: Mapping[str, Label] | None = None) -> DatasetManifest:
    """Index a Kaggle-layout pneumonia corpus (class folders, token filenames)."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"Kaggle root {root} is not a directory")
    tokens = dict(label_map) if label_map is not None else DEFAULT_KAGGLE_TOKENS
    records, skipped_corrupt, skipped_unlabeled = [], 0, 0
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES):
        rel = path.relative_to(root)
        label = _kaggle_label(rel, tokens)
        if label is None:
            log.warning("no label token in %s; skipped", rel)
            skipped_unlabeled += 1
            continue
        if not _readable(path):
            log.warning("unreadable image %s; skipped", rel)
            skipped_corrupt += 1
            continue
        rid = "kaggle/" + rel.with_suffix("").as_posix()
        records.append(ImageRecord(rid, label, Origin.REAL, Source.KAGGLE, path=path))
    note = f"kaggle root={root.name} admitted={len(records)} corrupt={skipped_corrupt} unlabeled={skipped_unlabeled}"
    return DatasetManifest(tuple(records), note)


def _is_lateral(view: str) -> bool:
    v = view.strip().upper()
    return v == "L" or v.startswith("LATERAL")


def ingest_covid(root: str | os.PathLike, metadata: str | os.PathLike) -> DatasetManifest:
    """Index the COVID corpus, keeping COVID-positive non-lateral X-rays only.

    ``metadata`` is a delimited table with at least ``filename``, ``finding``
    and ``view`` columns. When a ``modality`` column is present, rows whose
    modality is not an X-ray are dropped as well (the public repository also
    ships CT slices).
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"COVID root {root} is not a directory")
    try:
        with open(metadata, newline="") as fh:
            sample = fh.read(4096)
            fh.seek(0)
            dialect = csv.Sniffer().sniff(sample, delimiters=",\t;")
            reader = csv.DictReader(fh, dialect=dialect)
            rows = list(reader)
            header = {h.strip().lower(): h for h in (reader.fieldnames or [])}
    except (OSError, csv.Error, UnicodeDecodeError) as exc:
        raise DatasetError(f"malformed metadata {metadata}: {exc}") from exc
    missing = {"filename", "finding", "view"} - header.keys()
    if missing:
        raise DatasetError(f"metadata {metadata} lacks columns {sorted(missing)}")
    col = {k: header[k] for k in ("filename", "finding", "view")}
    modality_col = header.get("modality")

    records, seen = [], set()
    n_missing = n_lateral = n_other = 0
    for row in rows:
        if any(row.get(c) is None for c in col.values()):
            raise DatasetError(f"malformed metadata row in {metadata}: {row}")
        fname = row[col["filename"]].strip()
        finding = row[col["finding"]].strip()
        view = row[col["view"]].strip()
        if "covid-19" not in finding.lower().replace("covid19", "covid-19"):
            n_other += 1
            continue
        if modality_col and row.get(modality_col, "").strip().lower() not in ("", "x-ray", "xray"):
            n_other += 1
            continue
        if _is_lateral(view):
            n_lateral += 1
            continue
        path = next((p for p in (root / fname, root / "images" / fname) if p.is_file()), None)
        if path is None or not _readable(path):
            log.warning("metadata references missing or unreadable file %s; skipped", fname)
            n_missing += 1
            continue
        rid = "covid/" + Path(fname).with_suffix("").as_posix()
        if rid in seen:
            continue
        seen.add(rid)
        records.append(ImageRecord(rid, Label.COVID, Origin.REAL, Source.COVID_REPO, view=view or None, path=path))
    note = (f"covid root={root.name} admitted={len(records)} lateral={n_lateral} "
            f"non_covid={n_other} missing={n_missing}")
    return DatasetManifest(tuple(records), note)


# --------------------------------------------------------------------------- #
# transforms


def resize_to(record: ImageRecord, size: int) -> ImageRecord:
    """Bilinear resample to ``size``×``size``; an already-sized image passes through."""
    if size < 1:
        raise ValueError("size must be >= 1")
    pixels = record.pixels
    if pixels.shape == (size, size):
        return record.with_pixels(pixels)
    return record.with_pixels(quantize(_bilinear(pixels, size, size)))


def soft_crop_augment(record: ImageRecord, cfg: AugmentConfig, size: int | None = None) -> list[ImageRecord]:
    """Produce ``cfg.factor`` soft-cropped children of ``record``.

    Each child removes an independent, uniformly drawn fraction in
    ``[0, max_crop_frac]`` from each of the four sides of the source image,
    then is resized to ``size`` (default: the source resolution). The random
    stream of child ``i`` is derived from ``(cfg.seed, record.id, i)``.
    No mirroring of any kind is applied.
    """
    pixels = record.pixels
    h, w = pixels.shape
    out_h, out_w = (size, size) if size is not None else (h, w)
    children = []
    for i in range(cfg.factor):
        rng = derive_rng(cfg.seed, "soft-crop", record.id, i)
        top, bottom, left, right = rng.uniform(0.0, cfg.max_crop_frac, size=4)
        box = (int(np.floor(top * h)), int(np.floor(bottom * h)), int(np.floor(left * w)), int(np.floor(right * w)))
        region = pixels[box[0]:h - box[1], box[2]:w - box[3]]
        if region.shape != (out_h, out_w):
            region = _bilinear(region, out_h, out_w)
        children.append(ImageRecord(
            id=f"{record.id}~aug{i:03d}", label=record.label, origin=record.origin, source=record.source,
            parent_id=record.id, view=record.view, crop_box=box, data=quantize(region),
        ))
    return children


def normalize_manifest(manifest: DatasetManifest, size: int) -> DatasetManifest:
    return DatasetManifest(tuple(resize_to(r, size) for r in manifest), manifest.provenance_note)


def augment_manifest(manifest: DatasetManifest, cfg: AugmentConfig, size: int) -> DatasetManifest:
    """Replace each record by its ``cfg.factor`` soft-crop children at ``size``."""
    children = [c for rec in manifest for c in soft_crop_augment(rec, cfg, size)]
    return DatasetManifest(tuple(children), f"{manifest.provenance_note} | soft-crop x{cfg.factor}")


def subsample_per_class(manifest: DatasetManifest, cap: int | None, seed: int) -> DatasetManifest:
    """Keep at most ``cap`` records per label (seeded, manifest order preserved)."""
    if cap is None:
        return manifest
    keep = set()
    for label in Label:
        ids = [r.id for r in manifest if r.label is label]
        if len(ids) > cap:
            rng = derive_rng(seed, "subsample", label.value)
            ids = [ids[j] for j in sorted(rng.choice(len(ids), size=cap, replace=False))]
        keep.update(ids)
    records = tuple(r for r in manifest if r.id in keep)
    return DatasetManifest(records, f"{manifest.provenance_note} | cap {cap}/class")


# --------------------------------------------------------------------------- #
# splits and compositions


def split_holdout(manifest: DatasetManifest, spec: SplitSpec) -> tuple[DatasetManifest, DatasetManifest]:
    if any(r.origin is not Origin.REAL or r.parent_id is not None for r in manifest):
        raise DatasetError("holdout split must precede augmentation and synthesis")
    test_ids = set()
    for label, count in manifest.counts_by_label.items():
        if count < spec.holdout_per_class:
            raise DatasetError(f"class {label.value} has {count} records, fewer than holdout {spec.holdout_per_class}")
        ids = [r.id for r in manifest if r.label is label]
        rng = derive_rng(spec.seed, "holdout", label.value)
        test_ids.update(ids[j] for j in rng.choice(len(ids), size=spec.holdout_per_class, replace=False))
    note = manifest.provenance_note
    train = DatasetManifest(tuple(r for r in manifest if r.id not in test_ids), f"{note} | train split")
    test = DatasetManifest(tuple(r for r in manifest if r.id in test_ids), f"{note} | test split")
    return train, test


def lineage_root(record: ImageRecord, registry: Mapping[str, ImageRecord] | None = None) -> str:
    """Follow ``parent_id`` links to the originating real record id."""
    current, seen = record, set()
    while current.parent_id is not None:
        if current.parent_id in seen:
            raise DatasetError(f"lineage cycle at {current.id!r}")
        seen.add(current.parent_id)
        parent = registry.get(current.parent_id) if registry else None
        if parent is None:
            return current.parent_id
        current = parent
    return current.id


def check_leakage(records: Iterable[ImageRecord], test: DatasetManifest | Iterable[str],
                  registry: Mapping[str, ImageRecord] | None = None) -> None:
    test_ids = test.ids if isinstance(test, DatasetManifest) else set(test)
    for rec in records:
        if rec.id in test_ids:
            raise LeakageError(f"record {rec.id!r} belongs to the test split")
        current = rec
        while current.parent_id is not None:
            if current.parent_id in test_ids:
                raise LeakageError(f"record {rec.id!r} descends from test record {current.parent_id!r}")
            parent = registry.get(current.parent_id) if registry else None
            if parent is None:
                break
            current = parent


def build_training_set(per_class: int, sources: Mapping[Label | str, Sequence[tuple[DatasetManifest, int]]],
                       test: DatasetManifest | Iterable[str] = (), seed: int = 0) -> DatasetManifest:
    """Compose a class-balanced training manifest.

    ``sources`` maps each label to ``(manifest, count)`` pairs whose counts sum
    to ``per_class``. Records are drawn (seeded, without replacement) from each
    manifest; a manifest offering exactly ``count`` records is taken whole.
    """
    records, parts = [], []
    for label, composition in sources.items():
        label = Label(label)
        total = sum(count for _, count in composition)
        if total != per_class:
            raise DatasetError(f"composition for {label.value} sums to {total}, expected {per_class}")
        for j, (source, count) in enumerate(composition):
            pool = [r for r in source if r.label is label]
            if len(pool) < count:
                raise DatasetError(f"{label.value}: source {j} offers {len(pool)} records, {count} requested")
            if len(pool) > count:
                rng = derive_rng(seed, "compose", label.value, j)
                pool = [pool[k] for k in sorted(rng.choice(len(pool), size=count, replace=False))]
            check_leakage(pool, test)
            records.extend(pool)
            parts.append(f"{label.value}:{count}{'r' if all(r.origin is Origin.REAL for r in pool) else 's'}")
    return DatasetManifest(tuple(records), "composed " + " ".join(parts))


# --------------------------------------------------------------------------- #
# persistence

_SAFE = re.compile(r"[^A-Za-z0-9._-]+")


def _cache_name(rid: str) -> str:
    return _SAFE.sub("_", rid) + ".png"


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike, cache_dir: str | os.PathLike | None = None) -> Path:
    """Persist a manifest as JSON lines (header line, then one record per line).

    Records with in-memory pixels are written to ``cache_dir`` (default: an
    ``images`` directory beside the manifest) as 16-bit PNGs. Paths are stored
    relative to the manifest's directory when possible.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cache = Path(cache_dir) if cache_dir is not None else path.parent / "images"
    header = {
        "format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
        "provenance_note": manifest.provenance_note,
        "counts_by_label": {k.value: v for k, v in manifest.counts_by_label.items()},
    }
    lines = [json.dumps(header, sort_keys=True)]
    for rec in manifest:
        if rec.data is not None:
            cache.mkdir(parents=True, exist_ok=True)
            file = cache / _cache_name(rec.id)
            save_grayscale(rec.data, file)
        else:
            file = Path(rec.path)
        try:
            rel = os.path.relpath(file.resolve(), path.parent.resolve())
        except ValueError:
            rel = str(file.resolve())
        lines.append(json.dumps({
            "id": rec.id, "path": Path(rel).as_posix(), "label": rec.label.value, "origin": rec.origin.value,
            "source": rec.source.value, "parent_id": rec.parent_id, "view": rec.view,
            "crop_box": list(rec.crop_box) if rec.crop_box else None,
        }, sort_keys=True))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(path: str | os.PathLike, materialize: bool = False) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DatasetError(f"empty manifest file {path}")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{path} is not a manifest file")
    records = []
    for line in lines[1:]:
        d = json.loads(line)
        rec = ImageRecord(
            id=d["id"], label=d["label"], origin=d["origin"], source=d["source"], parent_id=d["parent_id"],
            view=d["view"], path=(path.parent / d["path"]),
            crop_box=tuple(d["crop_box"]) if d.get("crop_box") else None,
        )
        records.append(rec.materialize() if materialize else rec)
    return DatasetManifest(tuple(records), header.get("provenance_note", ""))
