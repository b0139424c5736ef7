"""Synthetic misalignment: affine perturbations with exact ground-truth flows.

An :class:`AffineTransform` maps *output* pixel coordinates to the
coordinates sampled in the input image, i.e. ``apply_affine(I, M)(x) =
I(M x)``.  The flow that restores ``I`` from the perturbed image is then
``F(x) = M^-1(x) - x`` (backward lookup, see :mod:`morphalign.flowcore`).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from morphalign.flowcore import (
    BorderPolicy,
    FlowField,
    as_image,
    bilinear_sample,
    pixel_grid,
    read_image,
    write_flo,
    write_image,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def item_seed(master: int, index: int) -> int:
    """Per-item seed derived from the master seed; independent of scheduling."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineTransform:
    """Rotation and anisotropic scaling about ``(cx, cy)`` followed by translation.

    ``M = T(t) . T(c) . R(theta) . S(sx, sy) . T(-c)`` in homogeneous pixel
    coordinates.
    """

    theta: float = 0.0
    sx: float = 1.0
    sy: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if not abs(self.theta) < math.pi / 2:
            raise ValueError(f"|theta| must be below pi/2, got {self.theta}")
        for s in (self.sx, self.sy):
            if not 0.5 < s < 2.0:
                raise ValueError(f"scale factors must lie in (0.5, 2), got {s}")

    @classmethod
    def identity(cls, width: int, height: int) -> "AffineTransform":
        return cls(cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        lin = np.array([[c * self.sx, -s * self.sy], [s * self.sx, c * self.sy]])
        ctr = np.array([self.cx, self.cy])
        m = np.eye(3)
        m[:2, :2] = lin
        m[:2, 2] = ctr - lin @ ctr + np.array([self.tx, self.ty])
        return m

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AffineTransform":
        return cls(**{k: float(d[k]) for k in ("theta", "sx", "sy", "tx", "ty", "cx", "cy")})


def as_matrix(M) -> np.ndarray:
    """Homogeneous 3x3 matrix for an :class:`AffineTransform`, 2x3 or 3x3 array."""
    if isinstance(M, AffineTransform):
        return M.matrix()
    m = np.asarray(M, dtype=np.float64)
    if m.shape == (2, 3):
        m = np.vstack([m, [0.0, 0.0, 1.0]])
    if m.shape != (3, 3):
        raise ValueError(f"expected a 2x3 or 3x3 affine matrix, got {m.shape}")
    return m


def _invert(m: np.ndarray) -> np.ndarray:
    det = np.linalg.det(m[:2, :2])
    if not np.isfinite(det) or abs(det) < 1e-12:
        raise ValueError("affine transform is not invertible")
    return np.linalg.inv(m)


@dataclass(frozen=True)
class PerturbBounds:
    """Uniform sampling ranges for random affine perturbations."""

    max_rotation: float = math.radians(5.0)
    scale_range: tuple = (0.95, 1.05)
    max_translation: float = 0.05  # fraction of image width

    def validate(self) -> None:
        lo, hi = self.scale_range
        if not (0 <= self.max_rotation < math.pi / 2):
            raise ValueError("max_rotation must lie in [0, pi/2)")
        if not (0.5 < lo <= hi < 2.0):
            raise ValueError(f"scale_range must satisfy 0.5 < lo <= hi < 2, got {self.scale_range}")
        if not (0 <= self.max_translation < 1):
            raise ValueError("max_translation must be a fraction in [0, 1)")

    def scaled(self, factor: float) -> "PerturbBounds":
        """Bounds with rotation, log-scale and translation magnitudes multiplied by ``factor``."""
        lo, hi = self.scale_range
        return PerturbBounds(
            self.max_rotation * factor,
            (math.exp(math.log(lo) * factor), math.exp(math.log(hi) * factor)),
            self.max_translation * factor,
        )

    def to_dict(self) -> dict:
        return {"max_rotation": self.max_rotation, "scale_range": list(self.scale_range),
                "max_translation": self.max_translation}

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbBounds":
        return cls(float(d.get("max_rotation", math.radians(5.0))),
                   tuple(float(v) for v in d.get("scale_range", (0.95, 1.05))),
                   float(d.get("max_translation", 0.05)))


def sample_affine(seed, bounds: PerturbBounds, width: int, height: int) -> AffineTransform:
    """Draw rotation, per-axis scale and translation uniformly within ``bounds``."""
    bounds.validate()
    rng = make_rng(seed)
    lo, hi = bounds.scale_range
    tmax = bounds.max_translation * width
    theta = rng.uniform(-bounds.max_rotation, bounds.max_rotation)
    sx, sy = rng.uniform(lo, hi, size=2)
    tx, ty = rng.uniform(-tmax, tmax, size=2)
    return AffineTransform(float(theta), float(sx), float(sy), float(tx), float(ty),
                           (width - 1) / 2.0, (height - 1) / 2.0)


def affine_flow(M, width: int, height: int) -> FlowField:
    """Exact flow ``F(x) = M^-1(x) - x`` that undoes ``apply_affine(., M)``."""
    inv = _invert(as_matrix(M))
    xs, ys = pixel_grid(width, height)
    v = np.empty((height, width, 2))
    v[:, :, 0] = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2] - xs
    v[:, :, 1] = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2] - ys
    return FlowField(v)


def max_displacement(M, width: int, height: int) -> float:
    """Largest ground-truth flow magnitude over the grid (attained at a corner)."""
    inv = _invert(as_matrix(M))
    corners = np.array([[0, 0, 1], [width - 1, 0, 1], [0, height - 1, 1],
                        [width - 1, height - 1, 1]], dtype=np.float64).T
    d = (inv @ corners)[:2] - corners[:2]
    return float(np.max(np.hypot(d[0], d[1])))


def apply_affine(img: np.ndarray, M) -> np.ndarray:
    """Resample ``img`` so that ``out(x) = img(M x)`` (bilinear, clamp to edge)."""
    img = as_image(img)
    m = as_matrix(M)
    h, w = img.shape[:2]
    xs, ys = pixel_grid(w, h)
    px = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    py = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    out, _ = bilinear_sample(img, px, py, BorderPolicy.CLAMP_TO_EDGE)
    return out


def fractional_affine(M: AffineTransform, alpha: float) -> AffineTransform:
    """Interpolate ``M`` from the identity: angle, log-scales and translation scale with ``alpha``."""
    return AffineTransform(
        M.theta * alpha,
        math.exp(math.log(M.sx) * alpha),
        math.exp(math.log(M.sy) * alpha),
        M.tx * alpha,
        M.ty * alpha,
        M.cx,
        M.cy,
    )


def step_transform(M: AffineTransform, k: int, K: int) -> np.ndarray:
    """Matrix taking chain frame ``k`` to frame ``k+1``.

    Frame ``t`` is ``apply_affine(base, M_{t/K})`` so frame ``k+1`` equals
    ``apply_affine(frame_k, M_{k/K}^-1 M_{(k+1)/K})``; the product over all
    steps telescopes to ``M``.
    """
    a = fractional_affine(M, k / K).matrix()
    b = fractional_affine(M, (k + 1) / K).matrix()
    return _invert(a) @ b


# ---------------------------------------------------------------------------
# Interpolation and appearance
# ---------------------------------------------------------------------------

def slerp(u, v, alpha: float) -> np.ndarray:
    """Spherical interpolation between ``u`` and ``v`` (any shape, treated as flat vectors).

    Falls back to linear interpolation when the angle between them is below 1e-6.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError("slerp endpoints must share a shape")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("slerp endpoints must be nonzero")
    cos_phi = float(np.clip(np.vdot(u, v) / (nu * nv), -1.0, 1.0))
    phi = math.acos(cos_phi)
    if phi < 1e-6:
        return (1.0 - alpha) * u + alpha * v
    s = math.sin(phi)
    return (math.sin((1.0 - alpha) * phi) / s) * u + (math.sin(alpha * phi) / s) * v


def smooth_field(rng: np.random.Generator, width: int, height: int, cells: int,
                 channels: int = 1, amplitude: float = 1.0) -> np.ndarray:
    """Coarse ``cells x cells`` uniform noise in ``+-amplitude`` upsampled bilinearly to ``(H, W, channels)``."""
    cells = max(int(cells), 1)
    coarse = rng.uniform(-amplitude, amplitude, size=(cells, cells, channels))
    if cells == 1:
        return np.broadcast_to(coarse, (height, width, channels)).copy()
    xs, ys = pixel_grid(width, height)
    gx = xs * (cells - 1) / max(width - 1, 1)
    gy = ys * (cells - 1) / max(height - 1, 1)
    vals, _ = bilinear_sample(coarse, gx, gy)
    return vals


@dataclass
class AppearanceRamp:
    """Appearance change applied along a morph chain.

    ``target`` (optional, co-registered with the base) is cross-dissolved in
    linearly; ``strength`` adds a smooth intensity perturbation that follows
    a slerp path between two random fields and vanishes at both chain ends.
    """

    target: Optional[np.ndarray] = None
    strength: float = 0.0
    cells: int = 4


def appearance_offset(rng: np.random.Generator, shape: tuple, ramp: AppearanceRamp,
                      alphas: Sequence[float]) -> list:
    h, w, c = shape
    if ramp.strength == 0:
        return [np.zeros(shape) for _ in alphas]
    u = smooth_field(rng, w, h, ramp.cells, c)
    v = smooth_field(rng, w, h, ramp.cells, c)
    u /= np.sqrt(np.mean(u ** 2))
    v /= np.sqrt(np.mean(v ** 2))
    return [ramp.strength * 4.0 * a * (1.0 - a) * slerp(u, v, a) for a in alphas]


@dataclass
class MorphChain:
    frames: list
    step_flows: list
    direct_flow: FlowField
    transform: AffineTransform


def make_morph_chain(base: np.ndarray, M: AffineTransform, K: int = 5,
                     appearance: Optional[AppearanceRamp] = None, rng=None) -> MorphChain:
    """Geometric morph chain ``I_0 .. I_K`` with analytic step flows.

    Frame ``t`` is ``base`` (cross-dissolved toward ``appearance.target``)
    warped by ``M_{t/K}``; ``I_0`` is the base and ``I_K`` the fully
    perturbed image.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    base = as_image(base)
    appearance = appearance or AppearanceRamp()
    rng = make_rng(rng if rng is not None else 0)
    h, w = base.shape[:2]
    target = None if appearance.target is None else as_image(appearance.target)
    if target is not None and target.shape != base.shape:
        raise ValueError("appearance target must match the base image shape")
    alphas = [t / K for t in range(K + 1)]
    offsets = appearance_offset(rng, base.shape, appearance, alphas)
    frames = []
    for t, a in enumerate(alphas):
        src = base if target is None else (1.0 - a) * base + a * target
        if t == 0:
            frames.append(base.copy())
            continue
        fr = apply_affine(np.clip(src, 0, 1), fractional_affine(M, a)) + offsets[t]
        frames.append(np.clip(fr, 0.0, 1.0))
    steps = [affine_flow(step_transform(M, k, K), w, h) for k in range(K)]
    return MorphChain(frames, steps, affine_flow(M, w, h), M)


# ---------------------------------------------------------------------------
# Flow corruption
# ---------------------------------------------------------------------------

def corrupt_flow(F: FlowField, rng=None, amplitude: float = 4.0, grid: int = 8,
                 drift=2.0) -> FlowField:
    """Add low-frequency noise and a global drift to ``F``.

    The noise is a ``grid x grid`` field with components uniform in
    ``+-amplitude`` upsampled bilinearly; ``drift`` is either a bound ``d``
    (each component uniform in ``+-d``) or explicit per-component ranges
    ``((lo_x, hi_x), (lo_y, hi_y))``.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    rng = make_rng(rng if rng is not None else 0)
    if np.ndim(drift) == 0:
        if drift < 0:
            raise ValueError("drift must be non-negative")
        ranges = ((-drift, drift), (-drift, drift))
    else:
        ranges = tuple(tuple(r) for r in drift)
    out = F.vectors.copy()
    if amplitude > 0:
        out += smooth_field(rng, F.width, F.height, grid, 2, amplitude)
    d = [rng.uniform(lo, hi) if hi > lo else lo for lo, hi in ranges]
    if d[0] != 0 or d[1] != 0:
        out[:, :, 0] += d[0]
        out[:, :, 1] += d[1]
    return FlowField(out, F.valid.copy())


# ---------------------------------------------------------------------------
# Procedural scenes
# ---------------------------------------------------------------------------

def synthetic_scene(seed, width: int = 256, height: int = 256, color: bool = True) -> np.ndarray:
    """Aerial-looking test scene: multi-octave terrain, blocks and roads."""
    rng = make_rng(seed)
    c = 3 if color else 1
    img = np.zeros((height, width, c))
    for octave, amp in ((4, 0.35), (12, 0.2), (40, 0.12), (96, 0.06)):
        cells = max(2, int(octave * max(width, height) / 256))
        img += smooth_field(rng, width, height, cells, 1, amp)
    img = 0.5 + img
    if c == 3:
        img = img * rng.uniform(0.8, 1.2, size=3)
    ys, xs = np.mgrid[0:height, 0:width]
    n_blocks = int(rng.integers(8, 16) * width * height / 65536) + 2
    for _ in range(n_blocks):
        bw, bh = rng.integers(max(3, width // 40), max(4, width // 8), size=2)
        x0, y0 = rng.integers(0, width - bw), rng.integers(0, height - bh)
        tone = rng.uniform(0.1, 0.95, size=c)
        img[y0:y0 + bh, x0:x0 + bw] = tone
    for _ in range(int(rng.integers(1, 4))):
        ang = rng.uniform(0, np.pi)
        off = rng.uniform(-0.3, 0.3) * width
        dist = np.abs((xs - width / 2) * np.sin(ang) - (ys - height / 2) * np.cos(ang) - off)
        img[dist < max(1.5, width / 100)] = rng.uniform(0.2, 0.4)
    img += rng.normal(0, 0.01, size=img.shape)
    img = ndimage.gaussian_filter(img, sigma=(0.7, 0.7, 0))
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

@dataclass
class PairSample:
    id: str
    image_A: str
    image_B_perturbed: str
    gt_flow: str
    corrupted_flow: str
    transform: dict
    split: str
    seed: int
    source: str
    change_mask: Optional[str] = None
    image_B_source: Optional[str] = None
    hashes: dict = field(default_factory=dict)
    error: Optional[str] = None


def list_images(d: Path) -> list:
    return sorted(p for p in Path(d).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def discover_sources(images_dir) -> list:
    """Return ``(id, path_A, path_B, label)`` tuples for a flat or A/B/label layout."""
    root = Path(images_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if (root / "A").is_dir() and (root / "B").is_dir():
        out = []
        for pa in list_images(root / "A"):
            pb = root / "B" / pa.name
            lab = root / "label" / pa.name
            out.append((pa.stem, pa, pb, lab if lab.exists() else None))
        return out
    return [(p.stem, p, p, None) for p in list_images(root)]


def split_ids(ids: Sequence[str], seed: int, fractions=(0.8, 0.1, 0.1)) -> dict:
    """Seeded shuffle, then train/val/test cut at the rounded fractions."""
    ids = sorted(ids)
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED])).permutation(len(ids))
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tags = {}
    for rank, idx in enumerate(order):
        tags[ids[idx]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return tags


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_pair(idx: int, pid: str, path_a: Path, path_b: Path, label, out_dir: Path,
                  bounds: PerturbBounds, seed: int, corruption: dict) -> PairSample:
    """Perturb one source pair and write its images and flows under ``out_dir/pairs/<id>``."""
    s = item_seed(seed, idx)
    rng = np.random.default_rng(s)
    pdir = out_dir / "pairs" / pid
    rel = lambda p: p.relative_to(out_dir).as_posix()  # noqa: E731
    rec = PairSample(pid, rel(pdir / "A.png"), rel(pdir / "B_perturbed.png"),
                     rel(pdir / "gt.flo"), rel(pdir / "corrupted.flo"), {}, "", s,
                     str(path_a), change_mask=str(label) if label else None,
                     image_B_source=str(path_b))
    try:
        img_a = read_image(path_a)
        img_b = img_a if path_b == path_a else read_image(path_b)
        if img_a.shape != img_b.shape:
            raise ValueError(f"A/B shape mismatch {img_a.shape} vs {img_b.shape}")
    except Exception as exc:  # recorded per item, generation continues
        rec.error = f"{type(exc).__name__}: {exc}"
        log.warning("skipping %s: %s", pid, rec.error)
        return rec
    h, w = img_a.shape[:2]
    M = sample_affine(rng, bounds, w, h)
    gt = affine_flow(M, w, h)
    corrupted = corrupt_flow(gt, rng, **corruption)
    pdir.mkdir(parents=True, exist_ok=True)
    write_image(img_a, pdir / "A.png")
    write_image(apply_affine(img_b, M), pdir / "B_perturbed.png")
    write_flo(gt, pdir / "gt.flo")
    write_flo(corrupted, pdir / "corrupted.flo")
    rec.transform = M.to_dict()
    rec.hashes = {k: sha256_file(out_dir / getattr(rec, k))
                  for k in ("image_A", "image_B_perturbed", "gt_flow", "corrupted_flow")}
    return rec


def generate_dataset(images_dir, out_dir, bounds: Optional[PerturbBounds] = None, K: int = 5,
                     seed: int = 0, fractions=(0.8, 0.1, 0.1), corruption: Optional[dict] = None,
                     existing: Optional[dict] = None) -> dict:
    """Perturb every source image and write a split manifest.

    ``existing`` maps pair ids to previously written records; a pair whose
    recorded output hashes still verify is kept instead of regenerated.
    Returns the manifest dictionary (also written to ``out_dir/manifest.json``).
    """
    bounds = bounds or PerturbBounds()
    bounds.validate()
    corruption = dict(corruption or {"amplitude": 4.0, "grid": 8, "drift": 2.0})
    sources = discover_sources(images_dir)
    if not sources:
        raise ValueError(f"no source images found in {images_dir}")
    if len(sources) < 10:
        raise ValueError(f"need at least 10 source images, found {len(sources)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    existing = existing or {}
    records = []
    for idx, (pid, pa, pb, lab) in enumerate(sources):
        old = existing.get(pid)
        if old is not None and _verify_record(old, out_dir):
            records.append(PairSample(**old))
            continue
        records.append(generate_pair(idx, pid, pa, pb, lab, out_dir, bounds, seed, corruption))
    good = [r.id for r in records if r.error is None]
    if not good:
        raise RuntimeError("dataset generation produced no pairs")
    tags = split_ids(good, seed, fractions)
    for r in records:
        r.split = tags.get(r.id, "error")
    manifest = {
        "kind": "morphalign-dataset",
        "seed": int(seed),
        "K": int(K),
        "bounds": bounds.to_dict(),
        "corruption": corruption,
        "fractions": list(fractions),
        "pairs": [asdict(r) for r in records],
    }
    write_json(manifest, out_dir / "manifest.json")
    return manifest


def _verify_record(rec: dict, out_dir: Path) -> bool:
    if rec.get("error") or not rec.get("hashes"):
        return False
    for key, digest in rec["hashes"].items():
        p = out_dir / rec[key]
        if not p.exists() or sha256_file(p) != digest:
            return False
    return True


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
