"""Registration, image-quality and change-detection metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from morphalign.flowcore import FlowField, to_gray

PSNR_TEXT_CAP = 99.0


def _flow_mask(F: FlowField, G: FlowField, mask, full_frame: bool) -> np.ndarray:
    if F.shape != G.shape:
        raise ValueError(f"flow dimension mismatch {F.shape} vs {G.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != F.shape:
            raise ValueError("mask must match flow dimensions")
    elif full_frame:
        m = np.ones(F.shape, dtype=bool)
    else:
        m = F.valid & G.valid
    if not m.any():
        raise ValueError("EPE mask selects no pixels")
    return m


def epe(F: FlowField, G: FlowField, mask=None, full_frame: bool = False) -> float:
    """Mean end-point error ``||F(x) - G(x)||`` over the mask.

    Without an explicit ``mask`` the intersection of both validity masks
    is used (or every pixel when ``full_frame`` is set).
    """
    m = _flow_mask(F, G, mask, full_frame)
    d = F.vectors[m] - G.vectors[m]
    return float(np.mean(np.hypot(d[:, 0], d[:, 1])))


def interior_mask(shape, border: int) -> np.ndarray:
    h, w = shape[:2]
    m = np.zeros((h, w), dtype=bool)
    if 2 * border < h and 2 * border < w:
        m[border:h - border, border:w - border] = True
    return m


def ecc(img1, img2, mask=None, per_channel: bool = False) -> float:
    """``1 - cos`` between the mean-removed masked intensities of two images.

    Grayscale (luma) by default; with ``per_channel`` the channels are
    flattened together after removing each channel's own mean.
    """
    a = np.asarray(img1, dtype=np.float64)
    b = np.asarray(img2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimension mismatch {a.shape} vs {b.shape}")
    if per_channel and a.ndim == 3:
        chans_a = [a[:, :, k] for k in range(a.shape[2])]
        chans_b = [b[:, :, k] for k in range(b.shape[2])]
    else:
        chans_a, chans_b = [to_gray(a)], [to_gray(b)]
    m = np.ones(chans_a[0].shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    u = np.concatenate([c[m] - c[m].mean() for c in chans_a])
    v = np.concatenate([c[m] - c[m].mean() for c in chans_b])
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if u.size == 0 or nu == 0 or nv == 0:
        raise ValueError("ECC undefined for zero-variance content")
    cos = float(np.dot(u, v) / (nu * nv))
    return float(min(max(1.0 - cos, 0.0), 2.0))


def psnr(img1, img2, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a = np.asarray(img1, dtype=np.float64)
    b = np.asarray(img2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimension mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _ssim_gray(a: np.ndarray, b: np.ndarray, g: np.ndarray, c1: float, c2: float) -> float:
    def blur(x):
        x = ndimage.correlate1d(x, g, axis=0, mode="reflect")
        return ndimage.correlate1d(x, g, axis=1, mode="reflect")

    mu1, mu2 = blur(a), blur(b)
    s11 = blur(a * a) - mu1 * mu1
    s22 = blur(b * b) - mu2 * mu2
    s12 = blur(a * b) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def ssim(img1, img2, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean structural similarity with Gaussian-weighted local statistics.

    Borders are handled by symmetric (half-sample) reflection.  Colour
    images score the mean over channels.
    """
    a = np.asarray(img1, dtype=np.float64)
    b = np.asarray(img2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimension mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[1]}x{a.shape[0]} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    return float(np.mean([_ssim_gray(a[:, :, k], b[:, :, k], g, c1, c2) for k in range(a.shape[2])]))


# ---------------------------------------------------------------------------
# Change detection
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Pixel counts with change as the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError("change masks must be binary {0, 1}")
    return arr.astype(bool)


def confusion(pred, gt) -> ConfusionMatrix:
    p, g = as_mask(pred), as_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask dimension mismatch {p.shape} vs {g.shape}")
    return ConfusionMatrix(int(np.sum(p & g)), int(np.sum(p & ~g)),
                           int(np.sum(~p & g)), int(np.sum(~p & ~g)))


def _ratio(num: int, den: int, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def cd_scores(cm: ConfusionMatrix) -> dict:
    """F1 (change / no-change), mF1, IoU per class, mIoU and OA.

    Classes with a zero denominator score 0 and are listed under
    ``"undefined"``.
    """
    flags: list = []
    f1_c = _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, "f1_change", flags)
    f1_nc = _ratio(2 * cm.tn, 2 * cm.tn + cm.fn + cm.fp, "f1_nochange", flags)
    iou_c = _ratio(cm.tp, cm.tp + cm.fp + cm.fn, "iou_change", flags)
    iou_nc = _ratio(cm.tn, cm.tn + cm.fn + cm.fp, "iou_nochange", flags)
    oa = _ratio(cm.tp + cm.tn, cm.total, "oa", flags)
    return {
        "f1_change": f1_c,
        "f1_nochange": f1_nc,
        "mf1": (f1_c + f1_nc) / 2,
        "iou_change": iou_c,
        "iou_nochange": iou_nc,
        "miou": (iou_c + iou_nc) / 2,
        "oa": oa,
        "undefined": flags,
    }


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REG_KEYS = ("epe", "ecc", "psnr", "ssim")
CD_KEYS = ("f1_change", "f1_nochange", "mf1", "miou", "oa")


@dataclass
class EvalReport:
    """Per-pair metric records grouped by alignment variant.

    Registration metrics aggregate as per-pair means; change-detection
    scores aggregate from summed confusion counts.
    """

    pairs: list = field(default_factory=list)
    config: Optional[dict] = None
    missing: dict = field(default_factory=dict)

    def add(self, pair_id: str, variant: str, metrics: dict,
            cm: Optional[ConfusionMatrix] = None) -> None:
        rec = {"id": pair_id, "variant": variant}
        rec.update({k: metrics.get(k) for k in REG_KEYS})
        if cm is not None:
            rec.update({"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn})
            s = cd_scores(cm)
            rec.update({k: s[k] for k in CD_KEYS})
        self.pairs.append(rec)

    def variants(self) -> list:
        seen = []
        for r in self.pairs:
            if r["variant"] not in seen:
                seen.append(r["variant"])
        return seen

    def aggregate(self) -> dict:
        out = {}
        for v in self.variants():
            rows = [r for r in self.pairs if r["variant"] == v]
            agg = {"n": len(rows)}
            for k in REG_KEYS:
                vals = [r[k] for r in rows if r.get(k) is not None]
                agg[k] = float(np.mean(vals)) if vals else None
            cms = [ConfusionMatrix(r["tp"], r["fp"], r["fn"], r["tn"]) for r in rows if "tp" in r]
            if cms:
                total = sum(cms, ConfusionMatrix())
                s = cd_scores(total)
                agg.update({k: s[k] for k in CD_KEYS})
                agg.update({"tp": total.tp, "fp": total.fp, "fn": total.fn, "tn": total.tn})
            out[v] = agg
        return out

    def to_json(self) -> str:
        doc = {"config": self.config, "missing": self.missing, "pairs": [_jsonable(r) for r in self.pairs],
               "aggregate": {k: _jsonable(v) for k, v in self.aggregate().items()}}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self, delimiter: str = ",") -> str:
        cols = ["id", "variant", *REG_KEYS, *CD_KEYS]
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(cols)
        for r in self.pairs:
            w.writerow([_fmt(r.get(c)) for c in cols])
        for v, agg in self.aggregate().items():
            w.writerow([_fmt(agg.get(c)) if c not in ("id", "variant") else ("ALL" if c == "id" else v)
                        for c in cols])
        return buf.getvalue()


def _jsonable(rec: dict) -> dict:
    out = {}
    for k, v in rec.items():
        if isinstance(v, float) and math.isinf(v):
            out[k] = PSNR_TEXT_CAP
        else:
            out[k] = v
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            v = PSNR_TEXT_CAP
        return f"{v:.6f}"
    return str(v)
