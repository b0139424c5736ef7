"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic          8 bytes   b"MARFCKPT"
    version        uint32    FORMAT_VERSION
    header_len     uint32
    header         JSON (UTF-8, sorted keys): config echo, parameter count,
                   tensor table [[name, shape], ...] in traversal order,
                   optional training state
    parameters     float32 LE, each tensor flattened row-major, in
                   ``state_dict()`` order (encoders.0 .. encoders.5,
                   flow_proj, se, decoders.0 .. decoders.4, head;
                   weight before bias)
    optimizer      (only when header["optimizer"] is set) for every
                   parameter in the same order: exp_avg then exp_avg_sq,
                   float32 LE
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from morphalign.refiner.model import RefinerConfig, ResidualRefinerNet, build_model, parameter_count

MAGIC = b"MARFCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()


def save_checkpoint(path, model: ResidualRefinerNet, optimizer: Optional[torch.optim.Optimizer] = None,
                    train_state: Optional[dict] = None) -> None:
    sd = model.state_dict()
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "parameter_count": parameter_count(model),
        "tensors": [[name, list(t.shape)] for name, t in sd.items()],
        "train_state": train_state,
        "optimizer": None,
    }
    payload = [_tensor_bytes(t) for t in sd.values()]
    if optimizer is not None:
        params = list(model.parameters())
        names = [n for n, _ in model.named_parameters()]
        if list(sd.keys()) != names:
            raise CheckpointError("state_dict contains buffers; optimizer layout is ambiguous")
        steps = []
        for p in params:
            st = optimizer.state.get(p, {})
            if st:
                payload.append(_tensor_bytes(st["exp_avg"]))
                payload.append(_tensor_bytes(st["exp_avg_sq"]))
                steps.append(int(st["step"]))
            else:
                z = torch.zeros_like(p)
                payload.extend([_tensor_bytes(z), _tensor_bytes(z)])
                steps.append(0)
        group = optimizer.param_groups[0]
        header["optimizer"] = {"kind": "adam", "lr": group["lr"], "betas": list(group["betas"]),
                               "eps": group["eps"], "steps": steps}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes)
        for chunk in payload:
            fh.write(chunk)
    tmp.replace(path)


def read_header(path) -> tuple:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a refiner checkpoint")
    version, hlen = struct.unpack("<II", buf[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    return header, buf, 16 + hlen


def load_checkpoint(path, expected: Optional[RefinerConfig] = None, with_optimizer: bool = False):
    """Restore a model (and optionally its Adam optimizer) from ``path``.

    Returns ``(model, optimizer_or_None, train_state_or_None)``.  Raises
    :class:`CheckpointError` on version, layout or config mismatch.
    """
    header, buf, off = read_header(path)
    config = RefinerConfig.from_dict(header["config"])
    if expected is not None and expected.architecture() != config.architecture():
        raise CheckpointError(
            f"{path}: checkpoint architecture {config.architecture()} "
            f"does not match requested {expected.architecture()}")
    model = build_model(config)
    sd = model.state_dict()
    table = [[n, list(t.shape)] for n, t in sd.items()]
    if table != header["tensors"] or parameter_count(model) != header["parameter_count"]:
        raise CheckpointError(f"{path}: tensor layout does not match the configuration")
    new_sd = {}
    for name, t in sd.items():
        n = t.numel()
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(t.shape)
        new_sd[name] = torch.from_numpy(arr.astype(np.float32))
        off += 4 * n
    model.load_state_dict(new_sd)
    optimizer = None
    if with_optimizer:
        opt_h = header.get("optimizer")
        if not opt_h:
            raise CheckpointError(f"{path}: no optimizer state stored")
        optimizer = torch.optim.Adam(model.parameters(), lr=opt_h["lr"], betas=tuple(opt_h["betas"]),
                                     eps=opt_h["eps"])
        for p, step in zip(model.parameters(), opt_h["steps"]):
            n = p.numel()
            m1 = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(p.shape)
            off += 4 * n
            m2 = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(p.shape)
            off += 4 * n
            if step > 0:
                optimizer.state[p] = {
                    "step": torch.tensor(float(step)),
                    "exp_avg": torch.from_numpy(m1.astype(np.float32)),
                    "exp_avg_sq": torch.from_numpy(m2.astype(np.float32)),
                }
    elif header.get("optimizer"):
        off += 8 * sum(p.numel() for p in model.parameters())
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} unexpected trailing bytes")
    return model, optimizer, header.get("train_state")
