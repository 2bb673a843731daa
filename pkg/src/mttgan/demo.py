"""Procedural stand-in corpora laid out like the public X-ray datasets.

Used for smoke runs and tests when the real corpora are not available. The
images are not X-rays; they only mimic the folder/metadata layout and carry a
class-dependent texture so a classifier has something to learn.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from ._rng import derive_rng


def _chest(rng: np.random.Generator, kind: str, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= height
    xx /= width
    img = 0.75 + 0.05 * rng.standard_normal()
    img = img - 0.25 * ((xx - 0.5) ** 2 + (yy - 0.45) ** 2)
    # heart on the patient's left (image right), never mirrored
    lungs = np.zeros_like(xx)
    for cx in (0.32 + 0.02 * rng.standard_normal(), 0.68 + 0.02 * rng.standard_normal()):
        lungs += np.exp(-(((xx - cx) / 0.14) ** 2 + ((yy - 0.48) / 0.26) ** 2) ** 2)
    heart = np.exp(-(((xx - 0.58) / 0.09) ** 2 + ((yy - 0.62) / 0.1) ** 2))
    img = img - 0.45 * np.clip(lungs, 0, 1) + 0.25 * heart
    if kind == "covid":
        # diffuse bilateral haze
        img += 0.18 * np.exp(-((yy - 0.65) / 0.2) ** 2) * np.clip(lungs, 0, 1)
    elif kind == "bacterial":
        cx, cy = rng.uniform(0.25, 0.75), rng.uniform(0.35, 0.7)
        img += 0.3 * np.exp(-(((xx - cx) / 0.07) ** 2 + ((yy - cy) / 0.07) ** 2))
    elif kind == "viral":
        img += 0.08 * (np.sin(40 * xx + rng.uniform(0, 6)) * np.clip(lungs, 0, 1) > 0.3)
    img += 0.03 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _save8(img: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


def write_kaggle_corpus(root: str | Path, per_class: int = 210, size: tuple[int, int] = (72, 64), seed: int = 0) -> Path:
    """``chest_xray/{train,test}/{NORMAL,PNEUMONIA}`` with bacteria/virus filename tokens."""
    root = Path(root)
    h, w = size
    for i in range(per_class):
        split = "test" if i % 10 == 0 else "train"
        _save8(_chest(derive_rng(seed, "normal", i), "normal", h, w), root / split / "NORMAL" / f"IM-{i:04d}-0001.jpeg")
        _save8(_chest(derive_rng(seed, "bac", i), "bacterial", h, w),
               root / split / "PNEUMONIA" / f"person{i}_bacteria_{i}.jpeg")
        _save8(_chest(derive_rng(seed, "vir", i), "viral", h, w),
               root / split / "PNEUMONIA" / f"person{i}_virus_{i}.jpeg")
    return root


def write_covid_corpus(root: str | Path, n_covid: int = 220, n_lateral: int = 10, n_other: int = 10,
                       size: tuple[int, int] = (72, 64), seed: int = 0) -> tuple[Path, Path]:
    """``images/`` plus ``metadata.csv`` with filename/finding/view columns."""
    root = Path(root)
    rows = []
    views = ("PA", "AP", "AP Supine")
    for i in range(n_covid):
        name = f"covid-{i:04d}.png"
        _save8(_chest(derive_rng(seed, "covid", i), "covid", *size), root / "images" / name)
        rows.append((name, "Pneumonia/Viral/COVID-19", views[i % 3]))
    for i in range(n_lateral):
        name = f"covid-lat-{i:03d}.png"
        _save8(_chest(derive_rng(seed, "lat", i), "covid", *size), root / "images" / name)
        rows.append((name, "Pneumonia/Viral/COVID-19", "L"))
    for i in range(n_other):
        name = f"sars-{i:03d}.png"
        _save8(_chest(derive_rng(seed, "other", i), "viral", *size), root / "images" / name)
        rows.append((name, "Pneumonia/Viral/SARS", "PA"))
    meta = root / "metadata.csv"
    with open(meta, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patientid", "finding", "view", "modality", "filename"])
        for i, (name, finding, view) in enumerate(rows):
            writer.writerow([i, finding, view, "X-ray", name])
    return root, meta
