"""Aggregate tables and figures from evaluation results."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from morphalign.evalmetrics import CD_KEYS, PSNR_TEXT_CAP, REG_KEYS  # noqa: E402
from morphalign.flowcore import read_flo  # noqa: E402
from morphalign.pipeline.stages import VARIANTS, RunManifest, StageError, Workspace  # noqa: E402
from morphalign.synthmotion import sha256_file, write_json  # noqa: E402

# fixed PNG metadata keeps figures byte-stable across runs
PNG_META = {"Software": None}
COLORS = {"unaligned": "#9e9e9e", "direct": "#d95f02", "composed": "#1b9e77", "refined": "#7570b3", "gt": "#444444"}


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(direction="out", length=3)


def summary_table(doc: dict, delimiter: str = ",") -> str:
    agg = doc["aggregate"]
    has_cd = any(agg[v].get("mf1") is not None for v in agg)
    cols = ["variant", "n", *REG_KEYS] + (list(CD_KEYS) if has_cd else [])
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(cols)
    for v in [v for v in VARIANTS if v in agg]:
        row = [v]
        for c in cols[1:]:
            val = agg[v].get(c)
            row.append("" if val is None else (f"{val:.6f}" if isinstance(val, float) else str(val)))
        w.writerow(row)
    return buf.getvalue()


def _per_variant(doc: dict, key: str) -> dict:
    out = {}
    for r in doc["pairs"]:
        if r.get(key) is not None:
            out.setdefault(r["variant"], []).append(float(r[key]))
    return out


def plot_epe(doc: dict, path: Path) -> None:
    vals = _per_variant(doc, "epe")
    names = [v for v in VARIANTS if v in vals and v != "gt"]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    x = np.arange(len(names))
    ax.bar(x, [np.mean(vals[n]) for n in names], color=[COLORS[n] for n in names], alpha=0.8, width=0.6)
    for i, n in enumerate(names):
        jitter = np.linspace(-0.15, 0.15, len(vals[n])) if len(vals[n]) > 1 else [0.0]
        ax.scatter(i + np.asarray(jitter), vals[n], s=8, color="k", zorder=3)
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("EPE [px]")
    ax.set_title("End-point error per alignment variant", fontsize=10)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def plot_quality(doc: dict, path: Path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.0))
    for ax, key, label in zip(axes, ("ecc", "psnr", "ssim"), ("ECC (lower is better)", "PSNR [dB]", "SSIM")):
        vals = _per_variant(doc, key)
        names = [v for v in VARIANTS if v in vals]
        means = [min(np.mean(vals[n]), PSNR_TEXT_CAP) for n in names]
        ax.bar(np.arange(len(names)), means, color=[COLORS[n] for n in names], width=0.6)
        ax.set_xticks(np.arange(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_title(label, fontsize=9)
        _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def plot_flows(ws: Workspace, rec: dict, path: Path) -> None:
    """Error magnitude maps of the estimated flows of one pair against ground truth."""
    gt = read_flo(ws.dataset / rec["gt_flow"])
    panels = [("gt |F|", gt.magnitude())]
    for v in ("direct", "composed", "refined"):
        p = ws.flow_dir(rec["id"]) / f"{v}.flo"
        if p.exists():
            F = read_flo(p)
            panels.append((f"{v} error", np.linalg.norm(F.vectors - gt.vectors, axis=2)))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.8))
    axes = np.atleast_1d(axes)
    vmax = max(float(np.percentile(m, 99)) for _, m in panels[1:]) if len(panels) > 1 else None
    for i, (ax, (title, m)) in enumerate(zip(axes, panels)):
        im = ax.imshow(m, cmap="magma", vmin=0, vmax=None if i == 0 else vmax)
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.03)
    fig.suptitle(f"pair {rec['id']}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def cmd_report(cfg, split: Optional[str] = None, delimiter: str = ",", pair: Optional[str] = None) -> dict:
    ws = Workspace(cfg)
    tag = pair or split or cfg.eval_split
    src = ws.reports / f"eval_{tag}.json"
    if not src.exists():
        raise StageError("no_eval", f"{src} not found; run `morphalign eval` first")
    doc = json.loads(src.read_text())
    fig_dir = ws.reports / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    ext = "tsv" if delimiter == "\t" else "csv"
    outputs = {
        "summary_table": ws.reports / f"summary_{tag}.{ext}",
        "summary_json": ws.reports / f"summary_{tag}.json",
        "fig_epe": fig_dir / f"{tag}_epe.png",
        "fig_quality": fig_dir / f"{tag}_quality.png",
    }
    outputs["summary_table"].write_text(summary_table(doc, delimiter))
    write_json({"split": tag, "aggregate": doc["aggregate"], "missing": doc.get("missing", {}),
                "pairs": len({r["id"] for r in doc["pairs"]})}, outputs["summary_json"])
    plot_epe(doc, outputs["fig_epe"])
    plot_quality(doc, outputs["fig_quality"])
    ids = sorted({r["id"] for r in doc["pairs"]})
    if ids:
        rec = ws.pairs(pair=ids[0])[0]
        outputs["fig_flows"] = fig_dir / f"{tag}_flows_{ids[0]}.png"
        plot_flows(ws, rec, outputs["fig_flows"])
    rm = RunManifest(ws)
    rm.stage(f"report_{tag}", {k: {"path": ws.rel(p), "sha256": sha256_file(p)} for k, p in outputs.items()})
    rm.save()
    return {k: str(p) for k, p in outputs.items()}
