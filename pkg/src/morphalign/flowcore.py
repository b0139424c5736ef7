"""Flow fields, bilinear sampling, backward warping, composition and `.flo` I/O.

Conventions used throughout the package:

* Images are ``float64`` arrays of shape ``(H, W, C)`` with ``C`` in ``{1, 3}``
  and intensities in ``[0, 1]``.
* A flow lives on the *reference* grid and stores, for every reference pixel
  ``x``, the displacement to its lookup point in the *target* image.  Warping
  the target with the flow therefore aligns it to the reference in a single
  sampling pass: ``out(x) = target(x + F(x))``.
* Coordinates are ``(x, y) = (column, row)`` in pixels.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

FLO_TAG = b"PIEH"


class BorderPolicy(str, enum.Enum):
    """How samples that fall outside the grid are handled."""

    CLAMP_TO_EDGE = "clamp_to_edge"
    MARK_INVALID = "mark_invalid"


class FloError(ValueError):
    """Base class for malformed `.flo` payloads."""


class BadMagicError(FloError):
    pass


class TruncatedFloError(FloError):
    pass


class NonFiniteFlowError(FloError):
    pass


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def as_image(data, copy: bool = False) -> np.ndarray:
    """Validate ``data`` as an image and return it as ``(H, W, C)`` float64."""
    img = np.array(data, dtype=np.float64, copy=copy)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must be HxW, HxWx1 or HxWx3, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be non-empty")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite intensities")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return img


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luma conversion (0.299, 0.587, 0.114); returns an ``(H, W)`` array."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img[:, :, 0] * 0.299 + img[:, :, 1] * 0.587 + img[:, :, 2] * 0.114


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG/PGM/PPM file into a ``[0, 1]`` image."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.uint8)
    return as_image(arr.astype(np.float64) / 255.0)


def write_image(img: np.ndarray, path) -> None:
    """Write an image as 8-bit PNG/PGM/PPM (format chosen by extension)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(q).save(path)


# ---------------------------------------------------------------------------
# Flow fields
# ---------------------------------------------------------------------------

@dataclass
class FlowField:
    """Dense per-pixel displacements ``(dx, dy)`` plus a validity mask.

    ``vectors`` has shape ``(H, W, 2)``; ``valid`` has shape ``(H, W)``.
    """

    vectors: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise ValueError(f"flow vectors must be HxWx2, got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("flow vectors must be finite")
        if self.valid is None:
            self.valid = np.ones(self.vectors.shape[:2], dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.vectors.shape[:2]:
                raise ValueError("valid mask must match flow dimensions")

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)))

    @classmethod
    def constant(cls, dx: float, dy: float, width: int, height: int) -> "FlowField":
        v = np.empty((height, width, 2))
        v[:, :, 0] = dx
        v[:, :, 1] = dy
        return cls(v)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vectors[:, :, 0], self.vectors[:, :, 1])

    def copy(self) -> "FlowField":
        return FlowField(self.vectors.copy(), self.valid.copy())


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(xs, ys)`` coordinate arrays of shape ``(H, W)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def _bilinear(arr: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Clamp-to-edge bilinear lookup of an ``(H, W, C)`` array.

    Returns ``(values, in_bounds)``; values have shape ``x.shape + (C,)``.
    """
    h, w = arr.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    v00 = arr[y0, x0]
    v01 = arr[y0, x1]
    v10 = arr[y1, x0]
    v11 = arr[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bottom = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bottom * fy, inside


def bilinear_sample(img: np.ndarray, x, y, policy=BorderPolicy.CLAMP_TO_EDGE):
    """Sample ``img`` at real-valued ``(x, y)``.

    ``x`` and ``y`` may be scalars or arrays of equal shape.  Returns the
    per-channel values (shape ``x.shape + (C,)``) and the in-bounds flag.
    Under ``MARK_INVALID`` the values of out-of-grid points are zero.
    """
    policy = BorderPolicy(policy)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.size == 0:
        raise ValueError("cannot sample an empty image")
    vals, inside = _bilinear(img, x, y)
    if policy is BorderPolicy.MARK_INVALID:
        vals = np.where(inside[..., None], vals, 0.0)
    return vals, inside


def _check_same_shape(a: tuple, b: tuple, what: str) -> None:
    if tuple(a) != tuple(b):
        raise ValueError(f"{what}: dimension mismatch {tuple(a)} vs {tuple(b)}")


def warp_image(target: np.ndarray, flow: FlowField, policy=BorderPolicy.CLAMP_TO_EDGE):
    """Backward-warp ``target`` onto the flow's reference grid.

    Returns ``(warped, valid)`` where ``valid`` marks pixels whose lookup was
    inside the target and whose flow vector was valid.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 2:
        target = target[:, :, None]
    _check_same_shape(target.shape[:2], flow.shape, "warp_image")
    xs, ys = pixel_grid(flow.width, flow.height)
    vals, inside = bilinear_sample(
        target, xs + flow.vectors[:, :, 0], ys + flow.vectors[:, :, 1], policy
    )
    return vals, inside & flow.valid


def compose_flows(F: FlowField, G: FlowField) -> FlowField:
    """Chain two flows: ``(F (+) G)(x) = F(x) + G(x + F(x))``.

    ``G`` is sampled bilinearly (clamped at the border).  A result pixel is
    valid when ``F`` is valid there, the lookup stays on the grid, and every
    ``G`` sample contributing to the blend is valid.
    """
    _check_same_shape(F.shape, G.shape, "compose_flows")
    xs, ys = pixel_grid(F.width, F.height)
    lx = xs + F.vectors[:, :, 0]
    ly = ys + F.vectors[:, :, 1]
    g, inside = _bilinear(G.vectors, lx, ly)
    if G.valid.all():
        g_ok = np.ones(F.shape, dtype=bool)
    else:
        gv, _ = _bilinear(G.valid.astype(np.float64)[:, :, None], lx, ly)
        g_ok = gv[:, :, 0] >= 1.0 - 1e-9
    return FlowField(F.vectors + g, F.valid & inside & g_ok)


def compose_chain(flows) -> FlowField:
    """Left fold of :func:`compose_flows` over a morph-chain's step flows."""
    flows = list(flows)
    if not flows:
        raise ValueError("compose_chain needs at least one flow")
    out = flows[0]
    for g in flows[1:]:
        out = compose_flows(out, g)
    return out


def resample_flow(F: FlowField, new_width: int, new_height: int) -> FlowField:
    """Bilinearly resample ``F`` to a new grid, keeping pixel units.

    Pixel centres are aligned (``src = (dst + 0.5) * W / newW - 0.5``) and
    the displacement components are multiplied by ``newW / W`` and
    ``newH / H`` respectively.
    """
    if new_width < 1 or new_height < 1:
        raise ValueError("target size must be at least 1x1")
    if (new_width, new_height) == (F.width, F.height):
        return F.copy()
    sx = F.width / new_width
    sy = F.height / new_height
    xs, ys = pixel_grid(new_width, new_height)
    src_x = (xs + 0.5) * sx - 0.5
    src_y = (ys + 0.5) * sy - 0.5
    vals, _ = _bilinear(F.vectors, src_x, src_y)
    vals[:, :, 0] *= new_width / F.width
    vals[:, :, 1] *= new_height / F.height
    if F.valid.all():
        valid = None
    else:
        vm, _ = _bilinear(F.valid.astype(np.float64)[:, :, None], src_x, src_y)
        valid = vm[:, :, 0] >= 1.0 - 1e-9
    return FlowField(vals, valid)


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def flo_bytes(F: FlowField) -> bytes:
    """Serialize ``F`` in Middlebury `.flo` layout (validity is not stored)."""
    data = F.vectors.astype("<f4")
    if not np.all(np.isfinite(data)):
        raise NonFiniteFlowError("flow does not fit in finite float32 values")
    return FLO_TAG + struct.pack("<ii", F.width, F.height) + data.tobytes(order="C")


def parse_flo(buf: bytes, name: str = "<bytes>") -> FlowField:
    if len(buf) < 12:
        raise TruncatedFloError(f"{name}: header shorter than 12 bytes")
    if buf[:4] != FLO_TAG:
        raise BadMagicError(f"{name}: bad magic {buf[:4]!r}, expected {FLO_TAG!r}")
    w, h = struct.unpack("<ii", buf[4:12])
    if w < 1 or h < 1:
        raise FloError(f"{name}: invalid dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(buf) < expected:
        raise TruncatedFloError(f"{name}: payload has {len(buf) - 12} bytes, expected {8 * w * h}")
    if len(buf) > expected:
        raise FloError(f"{name}: {len(buf) - expected} trailing bytes")
    data = np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2)
    if not np.all(np.isfinite(data)):
        raise NonFiniteFlowError(f"{name}: non-finite flow values")
    return FlowField(data.astype(np.float64))


def write_flo(F: FlowField, path) -> None:
    Path(path).write_bytes(flo_bytes(F))


def read_flo(path) -> FlowField:
    return parse_flo(Path(path).read_bytes(), name=str(path))
