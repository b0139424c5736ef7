"""Residual flow refinement network.

A six-stage U-Net over ``concat(I_A, I_B, F)`` whose bottleneck is fused
with a 1x1 projection of the (downsampled) input flow and gated by a
squeeze-and-excitation block.  A zero-initialised 3x3 head predicts the
residual ``dF``; the refined flow is ``F + dF``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as nnf

from morphalign.flowcore import FlowField

DESK_CHANNELS = (16, 32, 64, 128, 256, 512)
FULL_CHANNELS = (64, 128, 256, 512, 1024, 2048)
TINY_CHANNELS = (2, 2, 2, 2, 2, 4)
STRIDE = 32


@dataclass
class RefinerConfig:
    channels: tuple = DESK_CHANNELS
    se_ratio: int = 16
    input_size: int = 64
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    zero_init_head: bool = True
    # flows enter and leave the network divided by flow_scale
    flow_scale: float = 8.0
    init: str = "he"  # "he" or "default" (torch's own)
    # per-sample joint contrast normalisation of the two images
    normalize_images: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.lr, self.flow_scale = float(self.lr), float(self.flow_scale)
        self.batch_size, self.epochs, self.seed = int(self.batch_size), int(self.epochs), int(self.seed)
        if len(self.channels) != 6:
            raise ValueError("the encoder has exactly 6 stages")
        if any(c < 1 for c in self.channels):
            raise ValueError("channel widths must be positive")
        if self.input_size % STRIDE:
            raise ValueError(f"input_size must be divisible by {STRIDE}")
        if self.se_ratio < 1:
            raise ValueError("se_ratio must be >= 1")
        if self.init not in ("he", "default"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.flow_scale <= 0:
            raise ValueError("flow_scale must be positive")

    @classmethod
    def preset(cls, name: str, **kw) -> "RefinerConfig":
        chans = {"desk": DESK_CHANNELS, "full": FULL_CHANNELS, "tiny": TINY_CHANNELS}[name]
        return cls(channels=chans, **kw)

    def architecture(self) -> dict:
        """Fields that determine the parameter layout."""
        return {"channels": list(self.channels), "se_ratio": self.se_ratio, "flow_scale": self.flow_scale}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RefinerConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def _double_conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.ReLU(inplace=False),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=False),
    )


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, ratio: int):
        super().__init__()
        hidden = max(1, channels // ratio)
        self.squeeze = nn.Linear(channels, hidden)
        self.act = nn.ReLU()
        self.excite = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.excite(self.act(self.squeeze(s))))
        return x * s[:, :, None, None]


def downsample_flow(flow: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Bilinear resize of an ``(N, 2, H, W)`` flow keeping pixel units."""
    H, W = flow.shape[-2:]
    out = nnf.interpolate(flow, size=(h, w), mode="bilinear", align_corners=False)
    scale = torch.tensor([w / W, h / H], dtype=flow.dtype, device=flow.device)
    return out * scale[None, :, None, None]


class ResidualRefinerNet(nn.Module):
    def __init__(self, config: Optional[RefinerConfig] = None):
        super().__init__()
        self.config = config or RefinerConfig()
        c = self.config.channels
        self.encoders = nn.ModuleList(
            [_double_conv(8, c[0], 1)] + [_double_conv(c[i - 1], c[i], 2) for i in range(1, 6)]
        )
        self.flow_proj = nn.Conv2d(2, c[5], 1)
        self.se = SqueezeExcite(c[5], self.config.se_ratio)
        # decoders[i] produces the stride-2**i feature (D_{i+1})
        self.decoders = nn.ModuleList([_double_conv(c[i + 1] + c[i], c[i]) for i in range(5)])
        self.head = nn.Conv2d(c[0], 2, 3, padding=1)
        if self.config.init == "he":
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                    nn.init.zeros_(m.bias)
        if self.config.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, img_a: torch.Tensor, img_b: torch.Tensor, flow: torch.Tensor):
        """Return ``(delta, refined)``; all tensors are ``(N, C, H, W)``."""
        h, w = flow.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"spatial size {w}x{h} must be divisible by {STRIDE}")
        fs = self.config.flow_scale
        if self.config.normalize_images:
            both = torch.cat([img_a, img_b], dim=1)
            mu = both.mean(dim=(1, 2, 3), keepdim=True)
            sd = both.std(dim=(1, 2, 3), keepdim=True) + 1e-3
            img_a, img_b = (img_a - mu) / sd, (img_b - mu) / sd
        else:
            img_a, img_b = img_a - 0.5, img_b - 0.5
        x = torch.cat([img_a, img_b, flow / fs], dim=1)
        if x.shape[1] != 8:
            raise ValueError(f"expected 3+3+2 input channels, got {x.shape[1]}")
        feats = []
        for enc in self.encoders:
            x = enc(x)
            feats.append(x)
        bott = feats[5]
        fl = downsample_flow(flow, bott.shape[-2], bott.shape[-1]) / fs
        z = self.se(bott + self.flow_proj(fl))
        y = z
        for i in range(4, -1, -1):
            skip = feats[i]
            y = nnf.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = self.decoders[i](torch.cat([y, skip], dim=1))
        delta = self.head(y) * fs
        return delta, flow + delta

    def feature_strides(self, size: int = 64) -> list:
        """Strides of the encoder outputs for a ``size x size`` input."""
        x = torch.zeros(1, 8, size, size, dtype=self.head.weight.dtype)
        out = []
        with torch.no_grad():
            for enc in self.encoders:
                x = enc(x)
                out.append(size // x.shape[-1])
        return out


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.state_dict().values())


def build_model(config: RefinerConfig, dtype=torch.float32) -> ResidualRefinerNet:
    """Seeded construction; the parameter values depend only on ``config``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(config.seed)
    try:
        model = ResidualRefinerNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


# ---------------------------------------------------------------------------
# numpy-facing helpers
# ---------------------------------------------------------------------------

def image_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(H, W[, C])`` image to a ``(1, 3, H, W)`` tensor (gray is replicated)."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.shape[2] == 1:
        a = np.repeat(a, 3, axis=2)
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).to(dtype)[None]


def flow_tensor(F: FlowField, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(F.vectors.transpose(2, 0, 1))).to(dtype)[None]


def tensor_to_flow(t: torch.Tensor, valid=None) -> FlowField:
    return FlowField(t.detach()[0].permute(1, 2, 0).to(torch.float64).numpy().copy(), valid)


def _param_versions(model: nn.Module) -> tuple:
    return tuple(p._version for p in model.parameters())


@dataclass
class ForwardCache:
    """Autograd state of one forward pass, consumed by :func:`backward`."""

    delta: torch.Tensor
    refined: torch.Tensor
    versions: tuple
    model_id: int
    used: bool = field(default=False)


def _model_dtype(model: nn.Module):
    return next(model.parameters()).dtype


def forward(model: ResidualRefinerNet, img_a, img_b, F: FlowField):
    """Run the refiner on numpy inputs.

    Returns ``(dF, F_hat, cache)``.  ``F_hat`` is formed in float64 as
    ``F + dF`` so that a zero residual reproduces ``F`` exactly.
    """
    a, b = np.asarray(img_a), np.asarray(img_b)
    if a.shape[:2] != F.shape or b.shape[:2] != F.shape:
        raise ValueError("images and flow must share dimensions")
    dtype = _model_dtype(model)
    delta, refined = model(image_tensor(a, dtype), image_tensor(b, dtype), flow_tensor(F, dtype))
    dF = tensor_to_flow(delta)
    F_hat = FlowField(F.vectors + dF.vectors, F.valid.copy())
    cache = ForwardCache(delta, refined, _param_versions(model), id(model))
    return dF, F_hat, cache


def smooth_l1_tensor(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean Smooth-L1 over valid pixels and both flow components.

    ``pred``/``gt`` are ``(N, 2, H, W)``; ``valid`` is ``(N, H, W)`` boolean.
    """
    e = (pred - gt).abs()
    per = torch.where(e < 1.0, 0.5 * e * e, e - 0.5)
    m = valid[:, None].to(per.dtype).expand_as(per)
    n = m.sum()
    if n == 0:
        raise ValueError("Smooth-L1 over an empty valid set")
    return (per * m).sum() / n


def smooth_l1(pred: FlowField, gt: FlowField, valid=None) -> float:
    """Smooth-L1 (0.5 e^2 below 1, |e| - 0.5 above) averaged over valid pixels and components."""
    if pred.shape != gt.shape:
        raise ValueError("flow dimension mismatch")
    m = (pred.valid & gt.valid) if valid is None else np.asarray(valid, dtype=bool)
    if not m.any():
        raise ValueError("Smooth-L1 over an empty valid set")
    e = np.abs(pred.vectors[m] - gt.vectors[m])
    return float(np.mean(np.where(e < 1.0, 0.5 * e * e, e - 0.5)))


def backward(model: ResidualRefinerNet, cache: ForwardCache, gt: FlowField, valid=None) -> dict:
    """Reverse-mode gradients of the Smooth-L1 loss of ``cache`` against ``gt``.

    Returns ``{"loss": float, "grads": {name: ndarray}}``.  A cache is
    single-use and becomes stale once any parameter is modified.
    """
    if cache.used or cache.model_id != id(model) or cache.versions != _param_versions(model):
        raise RuntimeError("stale forward cache: parameters changed or cache already consumed")
    dtype = cache.refined.dtype
    gt_t = flow_tensor(gt, dtype)
    m = gt.valid if valid is None else np.asarray(valid, dtype=bool)
    loss = smooth_l1_tensor(cache.refined, gt_t, torch.from_numpy(m)[None])
    model.zero_grad(set_to_none=False)
    loss.backward()
    cache.used = True
    grads = {name: p.grad.detach().to(torch.float64).numpy().copy()
             for name, p in model.named_parameters()}
    return {"loss": float(loss.detach()), "grads": grads}


def refine(model: ResidualRefinerNet, img_a, img_b, F: FlowField) -> FlowField:
    """Inference-only refinement ``F + dF``."""
    with torch.no_grad():
        _, F_hat, _ = forward(model, img_a, img_b, F)
    return F_hat
