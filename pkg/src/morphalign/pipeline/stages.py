"""Pipeline stages.  Every stage reads and writes files under ``work_dir``
and records what it produced, with hashes, in the run manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from morphalign import __version__
from morphalign.evalmetrics import EvalReport, as_mask, confusion, ecc, epe, interior_mask, psnr, ssim
from morphalign.flowcore import FlowField, compose_chain, read_flo, read_image, warp_image, write_flo, write_image
from morphalign.pipeline.config import FlowSource, MaskPolicy, PipelineConfig, dump_config
from morphalign.refiner.checkpoint import load_checkpoint
from morphalign.refiner.model import RefinerConfig
from morphalign.refiner.trainer import SampleSet, crop_pair, refine_tiled, resume_state, train
from morphalign.stepflow import estimate_chain, estimate_flow, load_external_flows, step_flow_name
from morphalign.synthmotion import (
    AffineTransform,
    AppearanceRamp,
    generate_dataset,
    make_morph_chain,
    max_displacement,
    sha256_file,
    write_json,
)

log = logging.getLogger(__name__)

VARIANTS = ("unaligned", "direct", "composed", "refined", "gt")


class StageError(RuntimeError):
    """A stage cannot run; ``code`` is a short machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Workspace and run manifest
# ---------------------------------------------------------------------------

class Workspace:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.work_dir)
        self.dataset = self.root / "dataset"
        self.models = self.root / "models"
        self.reports = self.root / "reports"
        self.manifest_path = self.root / "run_manifest.json"

    def chain_dir(self, pid: str) -> Path:
        return self.root / "chains" / pid

    def flow_dir(self, pid: str) -> Path:
        return self.root / "flows" / pid

    def rel(self, p: Path) -> str:
        return Path(p).relative_to(self.root).as_posix()

    def dataset_manifest(self) -> dict:
        p = self.dataset / "manifest.json"
        if not p.exists():
            raise StageError("no_dataset", f"{p} not found; run `morphalign perturb` first")
        return json.loads(p.read_text())

    def pairs(self, split: Optional[str] = None, pair: Optional[str] = None) -> list:
        recs = [r for r in self.dataset_manifest()["pairs"] if not r.get("error")]
        if pair is not None:
            recs = [r for r in recs if r["id"] == pair]
            if not recs:
                raise StageError("unknown_pair", f"pair {pair!r} is not in the dataset manifest")
            return recs
        if split is not None and split != "all":
            recs = [r for r in recs if r["split"] == split]
        return recs


def config_digest(cfg: PipelineConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


class RunManifest:
    """Single-writer record of every artifact a run produced."""

    def __init__(self, ws: Workspace):
        self.ws = ws
        self.data = {"run_id": config_digest(ws.cfg)[:16], "tool_version": __version__,
                     "config": ws.cfg.to_dict(), "stages": {}, "pairs": {}}
        if ws.manifest_path.exists():
            old = json.loads(ws.manifest_path.read_text())
            if old.get("run_id") == self.data["run_id"]:
                self.data["stages"] = old.get("stages", {})
                self.data["pairs"] = old.get("pairs", {})

    def artifact(self, pid: str, name: str, path: Path, extra: Optional[dict] = None) -> None:
        entry = {"path": self.ws.rel(path), "sha256": sha256_file(path)}
        if extra:
            entry.update(extra)
        self.data["pairs"].setdefault(pid, {})[name] = entry

    def verified(self, pid: str, names) -> bool:
        rec = self.data["pairs"].get(pid, {})
        for n in names:
            e = rec.get(n)
            if e is None:
                return False
            p = self.ws.root / e["path"]
            if not p.exists() or sha256_file(p) != e["sha256"]:
                return False
        return True

    def stage(self, name: str, info: dict) -> None:
        self.data["stages"][name] = info

    def save(self) -> None:
        self.ws.root.mkdir(parents=True, exist_ok=True)
        write_json(self.data, self.ws.manifest_path)


def _map(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# perturb
# ---------------------------------------------------------------------------

def cmd_perturb(cfg: PipelineConfig) -> dict:
    cfg.validate(need_dataset=True)
    ws = Workspace(cfg)
    existing = {}
    mpath = ws.dataset / "manifest.json"
    if mpath.exists():
        existing = {r["id"]: r for r in json.loads(mpath.read_text())["pairs"]}
    try:
        manifest = generate_dataset(cfg.dataset_root, ws.dataset, cfg.bounds, cfg.K, cfg.seed,
                                    cfg.split_fractions, cfg.corruption, existing)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        raise StageError("perturb_failed", str(exc)) from exc
    rm = RunManifest(ws)
    for r in manifest["pairs"]:
        if r.get("error"):
            continue
        for key in ("image_A", "image_B_perturbed", "gt_flow", "corrupted_flow"):
            rm.artifact(r["id"], key, ws.dataset / r[key])
    counts = {}
    for r in manifest["pairs"]:
        counts[r["split"]] = counts.get(r["split"], 0) + 1
    rm.stage("perturb", {"pairs": len(manifest["pairs"]), "splits": counts})
    rm.save()
    return counts


# ---------------------------------------------------------------------------
# chain
# ---------------------------------------------------------------------------

def _chain_one(args) -> dict:
    cfg, rec = args
    ws = Workspace(cfg)
    pid = rec["id"]
    a = read_image(ws.dataset / rec["image_A"])
    b = read_image(ws.dataset / rec["image_B_perturbed"])
    h, w = a.shape[:2]
    M = AffineTransform.from_dict(rec["transform"])
    target = None
    src_b = rec.get("image_B_source")
    if src_b and src_b != rec.get("source") and Path(src_b).exists():
        target = read_image(src_b)
    rng = np.random.default_rng(np.random.SeedSequence([int(rec["seed"]), 0xC4A1]))
    chain = make_morph_chain(a, M, cfg.K, AppearanceRamp(target, cfg.appearance_strength), rng)
    frames = [a] + [_quantize(f) for f in chain.frames[1:-1]] + [b]
    cdir = ws.chain_dir(pid)
    cdir.mkdir(parents=True, exist_ok=True)
    frame_paths = []
    for t, fr in enumerate(frames):
        p = cdir / f"frame_{t:03d}.png"
        write_image(fr, p)
        frame_paths.append(p)
    direct = None
    src = cfg.flow_source
    if src is FlowSource.BUILTIN_ESTIMATOR:
        steps = estimate_chain(frames, cfg.estimator)
        direct = estimate_flow(a, b, cfg.estimator)
    elif src is FlowSource.ANALYTIC_GT:
        steps = chain.step_flows
        direct = chain.direct_flow
    elif src is FlowSource.EXTERNAL_FLO_DIR:
        ext = Path(cfg.external_flow_dir) / pid
        steps = load_external_flows(ext, cfg.K, w, h)
        if (ext / "direct.flo").exists():
            direct = read_flo(ext / "direct.flo")
    else:  # corrupted ground truth stands in for a drifting composed estimate
        steps = [read_flo(ws.dataset / rec["corrupted_flow"])]
        direct = steps[0]
    step_paths = []
    for k, F in enumerate(steps):
        p = cdir / step_flow_name(k)
        write_flo(F, p)
        step_paths.append(p)
    out = {"frames": frame_paths, "steps": step_paths}
    if direct is not None:
        fdir = ws.flow_dir(pid)
        fdir.mkdir(parents=True, exist_ok=True)
        write_flo(direct, fdir / "direct.flo")
        out["direct"] = fdir / "direct.flo"
    return out


def cmd_chain(cfg: PipelineConfig, split: Optional[str] = None, pair: Optional[str] = None) -> int:
    cfg.validate()
    ws = Workspace(cfg)
    rm = RunManifest(ws)
    todo = []
    for rec in ws.pairs(split or "all", pair):
        n_steps = 1 if cfg.flow_source is FlowSource.CORRUPTED_GT else cfg.K
        names = [f"frame_{t:03d}" for t in range(cfg.K + 1)] + [f"step_{k:03d}" for k in range(n_steps)]
        if rm.verified(rec["id"], names):
            continue
        todo.append(rec)
    try:
        results = _map(_chain_one, [(cfg, r) for r in todo], cfg.jobs)
    except (FileNotFoundError, ValueError) as exc:
        raise StageError("chain_failed", str(exc)) from exc
    for rec, res in zip(todo, results):
        for t, p in enumerate(res["frames"]):
            rm.artifact(rec["id"], f"frame_{t:03d}", p)
        for k, p in enumerate(res["steps"]):
            rm.artifact(rec["id"], f"step_{k:03d}", p)
        if "direct" in res:
            rm.artifact(rec["id"], "direct", res["direct"])
    rm.stage("chain", {"flow_source": cfg.flow_source.value, "K": cfg.K})
    rm.save()
    return len(todo)


# ---------------------------------------------------------------------------
# compose
# ---------------------------------------------------------------------------

def cmd_compose(cfg: PipelineConfig, split: Optional[str] = None, pair: Optional[str] = None) -> int:
    ws = Workspace(cfg)
    rm = RunManifest(ws)
    done = 0
    for rec in ws.pairs(split or "all", pair):
        pid = rec["id"]
        cdir = ws.chain_dir(pid)
        steps = sorted(cdir.glob("step_*.flo")) if cdir.exists() else []
        if not steps:
            raise StageError("missing_steps", f"no step flows for pair {pid} in {cdir}; run `morphalign chain` first")
        flows = [read_flo(p) for p in steps]
        shapes = {f.shape for f in flows}
        if len(shapes) != 1:
            raise StageError("shape_mismatch", f"pair {pid}: step flows have differing sizes {sorted(shapes)}")
        F = compose_chain(flows)
        fdir = ws.flow_dir(pid)
        fdir.mkdir(parents=True, exist_ok=True)
        write_flo(F, fdir / "composed.flo")
        rm.artifact(pid, "composed", fdir / "composed.flo", {"coverage": float(F.valid.mean())})
        done += 1
    rm.stage("compose", {"pairs": done})
    rm.save()
    return done


# ---------------------------------------------------------------------------
# train / refine
# ---------------------------------------------------------------------------

def build_training_set(cfg: PipelineConfig, ws: Workspace, split: str, seed_offset: int) -> SampleSet:
    """Crops of manifest pairs; input flows mix corrupted and composed flows."""
    opts = cfg.training
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x7A1, seed_offset]))
    A, B, Fin, G, V, src = [], [], [], [], [], []
    for rec in ws.pairs(split):
        a = read_image(ws.dataset / rec["image_A"])
        b = read_image(ws.dataset / rec["image_B_perturbed"])
        gt = read_flo(ws.dataset / rec["gt_flow"])
        composed_path = ws.flow_dir(rec["id"]) / "composed.flo"
        use_composed = bool(rng.random() < opts.composed_fraction) and composed_path.exists()
        fin = read_flo(composed_path if use_composed else ws.dataset / rec["corrupted_flow"])
        h, w = gt.shape
        size = opts.crop_size
        if h < size or w < size:
            raise StageError("too_small", f"pair {rec['id']} is smaller than the {size}px training crop")
        for x0, y0 in zip(rng.integers(0, w - size + 1, opts.crops_per_pair),
                          rng.integers(0, h - size + 1, opts.crops_per_pair)):
            ca, cb, cf, cg, cv = crop_pair(a, b, fin, gt, int(x0), int(y0), size)
            A.append(ca)
            B.append(cb)
            Fin.append(cf)
            G.append(cg)
            V.append(cv)
            src.append("composed" if use_composed else "corrupted")
    if not A:
        raise StageError("empty_split", f"split {split!r} has no pairs to train on")
    return SampleSet.from_lists(A, B, Fin, G, V, src)


def cmd_train(cfg: PipelineConfig, resume: bool = False) -> dict:
    ws = Workspace(cfg)
    train_set = build_training_set(cfg, ws, cfg.train_split, 0)
    val_set = build_training_set(cfg, ws, cfg.val_split, 1) if ws.pairs(cfg.val_split) else None
    state = None
    last = ws.models / "last.ckpt"
    if resume and last.exists():
        state = resume_state(last)
    rm = RunManifest(ws)
    try:
        state = train(cfg.refiner, train_set, val_set, out_dir=ws.models, state=state)
    except RuntimeError as exc:
        raise StageError("train_failed", str(exc)) from exc
    info = {"epochs": state.epoch, "best_epoch": state.best_epoch,
            "best_val_epe": None if math.isinf(state.best_val_epe) else state.best_val_epe,
            "samples": len(train_set), "best": ws.rel(ws.models / "best.ckpt"),
            "best_sha256": sha256_file(ws.models / "best.ckpt")}
    rm.stage("train", info)
    rm.save()
    return info


def checkpoint_path(ws: Workspace) -> Path:
    p = ws.models / "best.ckpt"
    if not p.exists():
        raise StageError("no_checkpoint",
                         f"no refiner checkpoint at {p}; run `morphalign train` first "
                         f"(or copy a trained best.ckpt there)")
    return p


def cmd_refine(cfg: PipelineConfig, split: Optional[str] = None, pair: Optional[str] = None) -> int:
    ws = Workspace(cfg)
    ckpt = checkpoint_path(ws)
    model, _, _ = load_checkpoint(ckpt)
    rm = RunManifest(ws)
    done = 0
    for rec in ws.pairs(split or cfg.eval_split, pair):
        pid = rec["id"]
        fdir = ws.flow_dir(pid)
        src = fdir / "composed.flo"
        if not src.exists():
            raise StageError("missing_composed", f"no composed flow for pair {pid}; run `morphalign compose` first")
        a = read_image(ws.dataset / rec["image_A"])
        b = read_image(ws.dataset / rec["image_B_perturbed"])
        F_hat = refine_tiled(model, a, b, read_flo(src), tile=cfg.training.crop_size)
        write_flo(F_hat, fdir / "refined.flo")
        rm.artifact(pid, "refined", fdir / "refined.flo")
        done += 1
    rm.stage("refine", {"checkpoint_sha256": sha256_file(ckpt), "pairs": done})
    rm.save()
    return done


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _variant_flow(ws: Workspace, rec: dict, variant: str, gt: FlowField) -> Optional[FlowField]:
    if variant == "unaligned":
        return FlowField.zeros(gt.width, gt.height)
    if variant == "gt":
        return gt
    p = ws.flow_dir(rec["id"]) / f"{variant}.flo"
    return read_flo(p) if p.exists() else None


def _metric_mask(policy: MaskPolicy, F: FlowField, inside: np.ndarray, border: int) -> np.ndarray:
    if policy is MaskPolicy.FULL:
        return np.ones(F.shape, dtype=bool)
    m = inside & F.valid
    if policy is MaskPolicy.INTERIOR:
        m &= interior_mask(F.shape, border)
    return m


def evaluate_pair(cfg: PipelineConfig, ws: Workspace, rec: dict) -> list:
    """Rows ``(variant, metrics, confusion or None)`` for the available variants."""
    a = read_image(ws.dataset / rec["image_A"])
    b = read_image(ws.dataset / rec["image_B_perturbed"])
    gt = read_flo(ws.dataset / rec["gt_flow"])
    M = AffineTransform.from_dict(rec["transform"])
    border = int(math.ceil(max_displacement(M, gt.width, gt.height)))
    label = None
    if cfg.cd_pred_dir and rec.get("change_mask") and Path(rec["change_mask"]).exists():
        label = as_mask(read_image(rec["change_mask"]))
    rows = []
    for variant in VARIANTS:
        F = _variant_flow(ws, rec, variant, gt)
        if F is None:
            continue
        warped, inside = warp_image(b, F)
        mask = _metric_mask(cfg.mask_policy, F, inside, border)
        if not mask.any():
            rows.append((variant, {"epe": None, "ecc": None, "psnr": None, "ssim": None}, None))
            continue
        ys, xs = np.nonzero(mask)
        box = np.s_[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
        metrics = {
            "epe": epe(F, gt, mask, full_frame=cfg.mask_policy is MaskPolicy.FULL),
            "ecc": ecc(warped, a, mask),
            "psnr": psnr(warped[mask], a[mask]),
            "ssim": ssim(warped[box], a[box]) if min(warped[box].shape[:2]) >= 11 else None,
        }
        cm = None
        if label is not None:
            pred = Path(cfg.cd_pred_dir) / variant / rec["id"]
            for suffix in (".png", ".pgm", ".ppm"):
                cand = pred.with_suffix(suffix)
                if cand.exists():
                    cm = confusion(as_mask(read_image(cand)), label)
                    break
        rows.append((variant, metrics, cm))
    return rows


def _eval_one(args):
    cfg, rec = args
    return evaluate_pair(cfg, Workspace(cfg), rec)


def cmd_eval(cfg: PipelineConfig, split: Optional[str] = None, pair: Optional[str] = None) -> EvalReport:
    ws = Workspace(cfg)
    split = split or cfg.eval_split
    recs = ws.pairs(split, pair)
    if not recs:
        raise StageError("empty_split", f"split {split!r} has no pairs to evaluate")
    echo = cfg.to_dict()
    echo.pop("work_dir")  # output location, not a parameter of the results
    report = EvalReport(config=echo)
    missing = {}
    for rec, rows in zip(recs, _map(_eval_one, [(cfg, r) for r in recs], cfg.jobs)):
        have = {v for v, _, _ in rows}
        for v in VARIANTS:
            if v not in have:
                missing.setdefault(v, []).append(rec["id"])
        for variant, metrics, cm in rows:
            report.add(rec["id"], variant, metrics, cm)
    report.missing = missing
    ws.reports.mkdir(parents=True, exist_ok=True)
    tag = pair or split
    jpath, cpath = ws.reports / f"eval_{tag}.json", ws.reports / f"eval_{tag}.csv"
    jpath.write_text(report.to_json())
    cpath.write_text(report.to_csv(","))
    rm = RunManifest(ws)
    rm.stage(f"eval_{tag}", {"json": ws.rel(jpath), "csv": ws.rel(cpath), "json_sha256": sha256_file(jpath),
                             "csv_sha256": sha256_file(cpath), "missing": missing})
    rm.save()
    return report
