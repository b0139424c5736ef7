"""Supervised training of the refiner on synthetic ground-truth flows."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from morphalign.flowcore import FlowField, compose_chain, warp_image
from morphalign.refiner.checkpoint import load_checkpoint, save_checkpoint
from morphalign.refiner.model import RefinerConfig, ResidualRefinerNet, build_model, smooth_l1_tensor
from morphalign.stepflow import EstimatorConfig, estimate_chain
from morphalign.synthmotion import (
    AppearanceRamp,
    PerturbBounds,
    affine_flow,
    apply_affine,
    corrupt_flow,
    make_morph_chain,
    sample_affine,
    synthetic_scene,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class SampleSet:
    """Stacked training tensors: images ``(N,3,H,W)``, flows ``(N,2,H,W)``, valid ``(N,H,W)``."""

    img_a: np.ndarray
    img_b: np.ndarray
    flow_in: np.ndarray
    gt: np.ndarray
    valid: np.ndarray
    source: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.img_a.shape[0]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.img_a[idx], self.img_b[idx], self.flow_in[idx], self.gt[idx],
                         self.valid[idx], [self.source[i] for i in idx] if self.source else [])

    @classmethod
    def from_lists(cls, a, b, f, g, v, src) -> "SampleSet":
        chw = lambda x: np.ascontiguousarray(np.stack(x).transpose(0, 3, 1, 2), dtype=np.float32)  # noqa: E731
        return cls(chw([_rgb(i) for i in a]), chw([_rgb(i) for i in b]), chw(f), chw(g),
                   np.stack(v).astype(bool), list(src))


def _rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    return np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img


def scene_pair(rng: np.random.Generator, size: int = 256, bounds: Optional[PerturbBounds] = None,
               corruption: Optional[dict] = None, composed: bool = False, K: int = 5,
               estimator: Optional[EstimatorConfig] = None, appearance: Optional[AppearanceRamp] = None):
    """One full-resolution synthetic pair: ``(A, B, input flow, gt flow, kind)``."""
    bounds = bounds or PerturbBounds()
    scene = synthetic_scene(rng, size, size)
    M = sample_affine(rng, bounds, size, size)
    gt = affine_flow(M, size, size)
    if composed:
        chain = make_morph_chain(scene, M, K, appearance, rng)
        fin = compose_chain(estimate_chain(chain.frames, estimator or EstimatorConfig()))
        return scene, chain.frames[-1], fin, gt, "composed"
    fin = corrupt_flow(gt, rng, **(corruption or {}))
    return scene, apply_affine(scene, M), fin, gt, "corrupted"


def crop_pair(a, b, fin: FlowField, gt: FlowField, x0: int, y0: int, size: int):
    """Cut a ``size`` crop at ``(x0, y0)`` of A and a matching crop of B.

    B is cut at an integer offset equal to the rounded mean input flow
    (clipped to the frame) so that the content it points at stays inside
    the crop; the offset is subtracted from both flows, which is exact.
    """
    H, W = fin.shape
    sl = np.s_[y0:y0 + size, x0:x0 + size]
    mean = fin.vectors[sl].reshape(-1, 2).mean(axis=0)
    bx = int(np.clip(x0 + np.rint(mean[0]), 0, W - size))
    by = int(np.clip(y0 + np.rint(mean[1]), 0, H - size))
    off = np.array([bx - x0, by - y0], dtype=np.float64)
    return (a[sl], b[by:by + size, bx:bx + size], fin.vectors[sl] - off, gt.vectors[sl] - off,
            fin.valid[sl] & gt.valid[sl])


def make_synthetic_set(n_scenes: int, crops_per_scene: int = 16, size: int = 64, seed: int = 0,
                       scene_size: int = 256, bounds: Optional[PerturbBounds] = None,
                       corruption: Optional[dict] = None, composed_fraction: float = 0.5, K: int = 5,
                       estimator: Optional[EstimatorConfig] = None) -> SampleSet:
    """Random crops of full-resolution synthetic pairs with exact affine ground truth.

    Each scene's input flow is either ``corrupt_flow(gt)`` or a chain-composed
    estimate, chosen with probability ``composed_fraction``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0FFEE]))
    A, B, Fin, G, V, src = [], [], [], [], [], []
    for _ in range(n_scenes):
        composed = bool(rng.random() < composed_fraction)
        a, b, fin, gt, kind = scene_pair(rng, scene_size, bounds, corruption, composed, K, estimator)
        for x0, y0 in rng.integers(0, scene_size - size + 1, size=(crops_per_scene, 2)):
            ca, cb, cf, cg, cv = crop_pair(a, b, fin, gt, int(x0), int(y0), size)
            A.append(ca)
            B.append(cb)
            Fin.append(cf)
            G.append(cg)
            V.append(cv)
            src.append(kind)
    return SampleSet.from_lists(A, B, Fin, G, V, src)


def _batch(ds: SampleSet, idx, dtype=torch.float32):
    t = lambda x: torch.from_numpy(np.ascontiguousarray(x[idx])).to(dtype)  # noqa: E731
    return t(ds.img_a), t(ds.img_b), t(ds.flow_in), t(ds.gt), torch.from_numpy(ds.valid[idx])


def predict(model: ResidualRefinerNet, ds: SampleSet, batch_size: int = 16) -> np.ndarray:
    """Refined flows ``(N, 2, H, W)`` as float64 (``F + dF``)."""
    out = []
    model.eval()
    with torch.no_grad():
        for s in range(0, len(ds), batch_size):
            idx = np.arange(s, min(s + batch_size, len(ds)))
            a, b, f, _, _ = _batch(ds, idx)
            delta, _ = model(a, b, f)
            out.append(ds.flow_in[idx].astype(np.float64) + delta.to(torch.float64).numpy())
    return np.concatenate(out)


def mean_epe(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float:
    d = np.sqrt(((pred - gt) ** 2).sum(axis=1))
    return float(d[valid].mean())


@dataclass
class TrainState:
    model: ResidualRefinerNet
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    best_val_epe: float = math.inf
    best_epoch: int = -1
    history: list = field(default_factory=list)

    def meta(self) -> dict:
        return {"epoch": self.epoch, "best_val_epe": None if math.isinf(self.best_val_epe) else self.best_val_epe,
                "best_epoch": self.best_epoch, "history": self.history}


def new_state(config: RefinerConfig) -> TrainState:
    model = build_model(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    return TrainState(model, opt)


def resume_state(path) -> TrainState:
    model, opt, meta = load_checkpoint(path, with_optimizer=True)
    meta = meta or {}
    best = meta.get("best_val_epe")
    return TrainState(model, opt, int(meta.get("epoch", 0)), math.inf if best is None else float(best),
                      int(meta.get("best_epoch", -1)), list(meta.get("history", [])))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 0xE90C])).permutation(n)


def train(config: RefinerConfig, train_set: SampleSet, val_set: Optional[SampleSet] = None,
          out_dir=None, state: Optional[TrainState] = None, stop_after: Optional[int] = None,
          progress: Optional[Callable[[dict], None]] = None,
          max_seconds: Optional[float] = None) -> TrainState:
    """Mini-batch Adam on Smooth-L1 with per-epoch validation EPE.

    ``out_dir`` receives ``last.ckpt`` (full training state, written every
    epoch) and ``best.ckpt`` (lowest validation EPE).  Passing a resumed
    ``state`` continues from its epoch; ``stop_after`` ends the run early
    after that many epochs in total.  ``max_seconds`` stops before an epoch
    that would overrun the wall-clock budget (judged by the slowest epoch so
    far).
    """
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    if config.input_size != train_set.img_a.shape[-1] or train_set.img_a.shape[-1] != train_set.img_a.shape[-2]:
        log.info("training on %s crops (config input_size %d)", train_set.img_a.shape[-2:], config.input_size)
    torch.use_deterministic_algorithms(True)
    state = state or new_state(config)
    model, opt = state.model, state.optimizer
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    n = len(train_set)
    t_start, slowest = time.perf_counter(), 0.0
    while state.epoch < last_epoch:
        elapsed = time.perf_counter() - t_start
        if max_seconds is not None and elapsed + slowest > max_seconds:
            log.warning("stopping after %d epochs: time budget of %.0f s reached", state.epoch, max_seconds)
            break
        t_epoch = time.perf_counter()
        model.train()
        order = epoch_order(config.seed, state.epoch, n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            a, b, f, g, v = _batch(train_set, idx)
            _, refined = model(a, b, f)
            loss = smooth_l1_tensor(refined, g, v)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {state.epoch}, batch {s // config.batch_size}; "
                                    "last good checkpoint retained")
            opt.zero_grad(set_to_none=False)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        rec = {"epoch": state.epoch, "train_loss": float(np.mean(losses))}
        if val_set is not None and len(val_set):
            rec["val_epe"] = mean_epe(predict(model, val_set), val_set.gt.astype(np.float64), val_set.valid)
            improved = rec["val_epe"] < state.best_val_epe
        else:
            improved = True
        state.history.append(rec)
        state.epoch += 1
        slowest = max(slowest, time.perf_counter() - t_epoch)
        if improved:
            state.best_val_epe = rec.get("val_epe", math.inf)
            state.best_epoch = rec["epoch"]
            if out is not None:
                save_checkpoint(out / "best.ckpt", model, train_state=state.meta())
        if out is not None:
            save_checkpoint(out / "last.ckpt", model, opt, state.meta())
        if progress is not None:
            progress(rec)
        log.info("epoch %d loss %.5f val_epe %s", rec["epoch"], rec["train_loss"], rec.get("val_epe"))
    return state


def ecc_improvement(ds: SampleSet, refined: np.ndarray) -> np.ndarray:
    """Per-sample booleans: ECC after warping with the refined flow <= ECC with the input flow."""
    from morphalign.evalmetrics import ecc

    ok = []
    for i in range(len(ds)):
        a = ds.img_a[i].transpose(1, 2, 0).astype(np.float64)
        b = ds.img_b[i].transpose(1, 2, 0).astype(np.float64)
        w_in, m_in = warp_image(b, FlowField(ds.flow_in[i].transpose(1, 2, 0).astype(np.float64)))
        w_rf, m_rf = warp_image(b, FlowField(refined[i].transpose(1, 2, 0)))
        m = m_in & m_rf
        ok.append(ecc(w_rf, a, m) <= ecc(w_in, a, m))
    return np.array(ok)


def _tile_starts(n: int, tile: int) -> list:
    if n < tile:
        raise ValueError(f"image side {n} is smaller than the refinement tile {tile}")
    starts = list(range(0, n - tile + 1, tile // 2))
    if starts[-1] != n - tile:
        starts.append(n - tile)
    return starts


def refine_tiled(model: ResidualRefinerNet, img_a, img_b, F: FlowField, tile: int = 64,
                 batch_size: int = 16) -> FlowField:
    """Refine a full-size flow with half-overlapping tiles.

    Each tile is processed exactly like a training crop (B cut at the tile's
    rounded mean flow), and the tile residuals are blended with a tent window.
    An all-zero residual therefore returns ``F`` unchanged.
    """
    a, b = _rgb(img_a), _rgb(img_b)
    H, W = F.shape
    if a.shape[:2] != (H, W) or b.shape[:2] != (H, W):
        raise ValueError("images and flow must share dimensions")
    ramp = lambda n: np.minimum(np.arange(n) + 0.5, n - np.arange(n) - 0.5)  # noqa: E731
    weight = np.outer(ramp(tile), ramp(tile))
    acc = np.zeros((H, W, 2))
    wsum = np.zeros((H, W))
    boxes = [(x0, y0) for y0 in _tile_starts(H, tile) for x0 in _tile_starts(W, tile)]
    dummy = FlowField.zeros(W, H)
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        for s in range(0, len(boxes), batch_size):
            chunk = boxes[s:s + batch_size]
            crops = [crop_pair(a, b, F, dummy, x0, y0, tile) for x0, y0 in chunk]
            ta = torch.from_numpy(np.stack([c[0].transpose(2, 0, 1) for c in crops])).to(dtype)
            tb = torch.from_numpy(np.stack([c[1].transpose(2, 0, 1) for c in crops])).to(dtype)
            tf = torch.from_numpy(np.stack([c[2].transpose(2, 0, 1) for c in crops])).to(dtype)
            delta, _ = model(ta, tb, tf)
            delta = delta.to(torch.float64).numpy().transpose(0, 2, 3, 1)
            for (x0, y0), d in zip(chunk, delta):
                acc[y0:y0 + tile, x0:x0 + tile] += d * weight[:, :, None]
                wsum[y0:y0 + tile, x0:x0 + tile] += weight
    return FlowField(F.vectors + acc / wsum[:, :, None], F.valid.copy())
