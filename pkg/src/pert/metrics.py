"""Image-Eval metrics: PSNR, MSSIM, MSE, AGE, pEPs, pCEPs.

Images are H x W x C float arrays in [0, 1]. AGE, pEPs and pCEPs work on
BT.601 grayscale at 8-bit scale; MSSIM is SSIM on that luminance, x100.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import DimensionError
from .losses import ssim

SCHEMA_VERSION = 1
GRAY_WEIGHTS = (0.299, 0.587, 0.114)
PSNR_CAP = 100.0
ERROR_THRESHOLD = 20.0
METRIC_NAMES = ("psnr", "mssim", "mse", "age", "peps", "pceps")


@dataclass
class MetricsReport:
    psnr: float
    mssim: float
    mse: float
    age: float
    peps: float
    pceps: float
    n_images: int = 1

    def as_dict(self) -> dict:
        return asdict(self)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img[..., :3] @ np.asarray(GRAY_WEIGHTS)


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    err = mse(a, b)
    if err == 0:
        return cap
    return min(cap, 10 * math.log10(1.0 / err))


def mssim(a, b) -> float:
    a, b = _check_pair(a, b)
    ga = torch.from_numpy(to_gray(a))[None, None]
    gb = torch.from_numpy(to_gray(b))[None, None]
    return float(ssim(ga, gb)) * 100


def age_peps_pceps(a, b, threshold: float = ERROR_THRESHOLD) -> tuple[float, float, float]:
    """AGE, fraction of error pixels and fraction of clustered error pixels.

    A pixel is an error pixel when its gray difference exceeds ``threshold``;
    it is clustered when all of its existing 4-neighbours are error pixels too.
    """
    a, b = _check_pair(a, b)
    diff = np.abs(to_gray(a) - to_gray(b)) * 255.0
    err = diff > threshold
    clustered = err.copy()
    clustered[1:, :] &= err[:-1, :]
    clustered[:-1, :] &= err[1:, :]
    clustered[:, 1:] &= err[:, :-1]
    clustered[:, :-1] &= err[:, 1:]
    return float(diff.mean()), float(err.mean()), float(clustered.mean())


def evaluate_pair(a, b, threshold: float = ERROR_THRESHOLD, psnr_cap: float = PSNR_CAP) -> MetricsReport:
    age, peps, pceps = age_peps_pceps(a, b, threshold)
    return MetricsReport(psnr(a, b, psnr_cap), mssim(a, b), mse(a, b), age, peps, pceps, 1)


def aggregate(reports) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    return MetricsReport(**means, n_images=len(reports))


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _image_files(directory: Path) -> dict:
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    return {p.name: p for p in sorted(directory.iterdir()) if p.suffix.lower() in exts}


class MissingPairsError(FileNotFoundError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"{len(self.missing)} prediction(s) without ground truth: {self.missing[:10]}")


def evaluate_dataset(
    pred_dir,
    gt_dir,
    report_dir=None,
    allow_missing: bool = False,
    threshold: float = ERROR_THRESHOLD,
) -> tuple[MetricsReport, list]:
    """Evaluate every prediction against the same-named ground truth.

    Writes ``per_image.csv`` and ``aggregate.json`` to ``report_dir`` when given.
    Returns the aggregate and the per-image ``(name, report)`` rows.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _image_files(pred_dir), _image_files(gt_dir)
    missing = sorted(set(preds) ^ set(gts))
    if missing and not allow_missing:
        raise MissingPairsError(missing)
    names = sorted(set(preds) & set(gts))
    if not names:
        raise MissingPairsError(missing or ["<no images>"])
    rows = [(n, evaluate_pair(load_image(preds[n]), load_image(gts[n]), threshold)) for n in names]
    agg = aggregate(r for _, r in rows)
    if report_dir is not None:
        write_report(report_dir, rows, agg, missing, threshold)
    return agg, rows


def write_report(report_dir, rows, agg: MetricsReport, missing=(), threshold: float = ERROR_THRESHOLD) -> None:
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    with open(report_dir / "per_image.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["schema_version", "filename", *METRIC_NAMES])
        for name, r in rows:
            writer.writerow([SCHEMA_VERSION, name, *(repr(getattr(r, k)) for k in METRIC_NAMES)])
    payload = {
        "schema_version": SCHEMA_VERSION,
        "gray_weights": list(GRAY_WEIGHTS),
        "error_threshold": threshold,
        "connectivity": 4,
        "psnr_cap": PSNR_CAP,
        "aggregate": agg.as_dict(),
        "missing": list(missing),
    }
    (report_dir / "aggregate.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


REPORT_JSON_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "gray_weights", "aggregate", "missing"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "gray_weights": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "aggregate": {
            "type": "object",
            "required": [*METRIC_NAMES, "n_images"],
            "properties": {
                **{k: {"type": "number"} for k in METRIC_NAMES},
                "n_images": {"type": "integer", "minimum": 1},
            },
        },
        "missing": {"type": "array", "items": {"type": "string"}},
    },
}


def report_from_json(path) -> Optional[MetricsReport]:
    data = json.loads(Path(path).read_text())
    return MetricsReport(**data["aggregate"])
