"""Short-range dense flow between consecutive chain frames.

The built-in estimator is a pyramidal, iterated local least-squares solver
under brightness constancy.  Externally computed flows (any dense matcher)
plug in through a directory of ``step_XXX.flo`` files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from morphalign.flowcore import (
    FloError,
    FlowField,
    bilinear_sample,
    pixel_grid,
    read_flo,
    resample_flow,
    to_gray,
)


@dataclass(frozen=True)
class EstimatorConfig:
    levels: int = 2
    iterations: int = 5
    window_radius: int = 3
    min_eigenvalue: float = 1e-6
    min_size: int = 16
    max_step: float = 1.0
    median_size: int = 5

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if self.min_size < 16:
            raise ValueError("coarsest level must be at least 16x16")


def _pyramid(img: np.ndarray, levels: int, min_size: int) -> list:
    pyr = [img]
    while len(pyr) < levels:
        cur = pyr[-1]
        h, w = cur.shape
        if h // 2 < min_size or w // 2 < min_size:
            break
        blurred = ndimage.gaussian_filter(cur, 1.0, mode="nearest")
        pyr.append(0.25 * (blurred[0:2 * (h // 2):2, 0:2 * (w // 2):2]
                           + blurred[1:2 * (h // 2):2, 0:2 * (w // 2):2]
                           + blurred[0:2 * (h // 2):2, 1:2 * (w // 2):2]
                           + blurred[1:2 * (h // 2):2, 1:2 * (w // 2):2]))
    return pyr


def _gradients(img: np.ndarray):
    gx = ndimage.correlate1d(img, [-0.5, 0.0, 0.5], axis=1, mode="nearest")
    gy = ndimage.correlate1d(img, [-0.5, 0.0, 0.5], axis=0, mode="nearest")
    return gx, gy


def _refine_level(src: np.ndarray, dst: np.ndarray, flow: np.ndarray, cfg: EstimatorConfig):
    h, w = src.shape
    xs, ys = pixel_grid(w, h)
    size = 2 * cfg.window_radius + 1
    box = lambda a: ndimage.uniform_filter(a, size, mode="nearest")  # noqa: E731
    sgx, sgy = _gradients(src)
    confident = np.ones((h, w), dtype=bool)
    for _ in range(cfg.iterations):
        warped, _ = bilinear_sample(dst, xs + flow[:, :, 0], ys + flow[:, :, 1])
        warped = warped[:, :, 0]
        wgx, wgy = _gradients(warped)
        gx = 0.5 * (sgx + wgx)
        gy = 0.5 * (sgy + wgy)
        it = warped - src
        a = box(gx * gx)
        b = box(gx * gy)
        c = box(gy * gy)
        bx = -box(gx * it)
        by = -box(gy * it)
        tr_half = 0.5 * (a + c)
        disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
        confident = (tr_half - disc) >= cfg.min_eigenvalue
        det = a * c - b * b
        safe = np.where(confident, det, 1.0)
        du = np.where(confident, (c * bx - b * by) / safe, 0.0)
        dv = np.where(confident, (a * by - b * bx) / safe, 0.0)
        step = np.stack([du, dv], axis=-1)
        norm = np.hypot(du, dv)[..., None]
        step *= np.minimum(1.0, cfg.max_step / np.maximum(norm, 1e-12))
        flow = flow + step
        if cfg.median_size > 1:
            flow = np.stack([ndimage.median_filter(flow[:, :, k], cfg.median_size, mode="nearest")
                             for k in range(2)], axis=-1)
    return flow, confident


def estimate_flow(src: np.ndarray, dst: np.ndarray, cfg: EstimatorConfig = EstimatorConfig()) -> FlowField:
    """Dense flow on ``src``'s grid such that ``dst(x + F(x)) ~ src(x)``.

    Pixels whose final structure tensor was gated (minimum eigenvalue of
    the window-averaged gradient products below the threshold) are marked
    invalid.
    """
    cfg.validate()
    a = to_gray(src)
    b = to_gray(dst)
    if a.shape != b.shape:
        raise ValueError(f"estimate_flow: dimension mismatch {a.shape} vs {b.shape}")
    pa = _pyramid(a, cfg.levels, cfg.min_size)
    pb = _pyramid(b, cfg.levels, cfg.min_size)
    flow = None
    confident = None
    for la, lb in zip(reversed(pa), reversed(pb)):
        h, w = la.shape
        if flow is None:
            init = np.zeros((h, w, 2))
        else:
            init = resample_flow(FlowField(flow), w, h).vectors
        flow, confident = _refine_level(la, lb, init, cfg)
    if not np.all(np.isfinite(flow)):
        flow = np.nan_to_num(flow, nan=0.0, posinf=0.0, neginf=0.0)
        confident &= False
    return FlowField(flow, confident)


def estimate_chain(frames, cfg: EstimatorConfig = EstimatorConfig()) -> list:
    """``flows[t] = estimate_flow(frames[t], frames[t + 1])`` for every consecutive pair."""
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("a chain needs at least two frames")
    flows = []
    for t in range(len(frames) - 1):
        try:
            flows.append(estimate_flow(frames[t], frames[t + 1], cfg))
        except ValueError as exc:
            raise ValueError(f"frame pair {t}->{t + 1}: {exc}") from exc
    return flows


def step_flow_name(index: int) -> str:
    return f"step_{index:03d}.flo"


def load_external_flows(directory, expected_count: int, width: int, height: int) -> list:
    """Read ``step_000.flo .. step_{K-1}.flo`` from ``directory`` in index order."""
    d = Path(directory)
    flows = []
    for k in range(expected_count):
        p = d / step_flow_name(k)
        if not p.exists():
            raise FileNotFoundError(f"missing external flow {p}")
        try:
            f = read_flo(p)
        except FloError as exc:
            raise FloError(f"cannot parse {p}: {exc}") from exc
        if f.shape != (height, width):
            raise ValueError(f"{p}: flow is {f.width}x{f.height}, expected {width}x{height}")
        flows.append(f)
    return flows
