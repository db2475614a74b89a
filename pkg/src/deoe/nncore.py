"""Numerical core: layers, losses primitives, optimizer, gradient checking, checkpoints.

Tensors and reverse-mode differentiation come from PyTorch (CPU). Training runs in
float32; float64 is used for finite-difference gradient checks.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BCE_EPS = 1e-7
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
OBJ_BIAS_INIT = -2.0

CKPT_MAGIC = b"DEOECKPT"
CKPT_VERSION = 1


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation of an (N, C, H, W) input with a (C_out, C, k, k) kernel."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.dim() != 4 or kernel.dim() != 4:
        raise ValueError(f"expected 4-D input and kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def init_conv_(conv: nn.Conv2d, generator: torch.Generator) -> None:
    """Centered uniform init scaled by fan-in; zero bias."""
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = math.sqrt(3.0 / fan_in)
    with torch.no_grad():
        conv.weight.copy_((torch.rand(conv.weight.shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound)
        if conv.bias is not None:
            conv.bias.zero_()


class ConvGRUCell(nn.Module):
    """Convolutional gated recurrent unit.

    z = σ(W_z∗[x,h]), r = σ(W_r∗[x,h]), h̃ = tanh(W_h∗[x, r⊙h]), h' = (1−z)⊙h + z⊙h̃
    """

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        pad = kernel_size // 2
        self.gates = nn.Conv2d(in_channels + hidden_channels, 2 * hidden_channels, kernel_size, padding=pad)
        self.candidate = nn.Conv2d(in_channels + hidden_channels, hidden_channels, kernel_size, padding=pad)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return recurrent_cell_step(self, x, h)


def recurrent_cell_step(cell: ConvGRUCell, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    if x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
        raise ValueError(f"input {tuple(x.shape)} and hidden {tuple(h.shape)} disagree")
    if x.shape[1] != cell.in_channels or h.shape[1] != cell.hidden_channels:
        raise ValueError("channel count mismatch in recurrent cell")
    zr = torch.sigmoid(cell.gates(torch.cat([x, h], dim=1)))
    z, r = zr.chunk(2, dim=1)
    h_tilde = torch.tanh(cell.candidate(torch.cat([x, r * h], dim=1)))
    return (1 - z) * h + z * h_tilde


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def dropout_apply(x: torch.Tensor, rate: float, training: bool,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout with an explicit generator so masks are reproducible."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return x * keep / (1.0 - rate)


def bce(p: torch.Tensor, y) -> torch.Tensor:
    """Elementwise binary cross-entropy with ``p`` clamped to [1e-7, 1 - 1e-7]."""
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def make_adam(params: Iterable[torch.Tensor], lr: float) -> torch.optim.Adam:
    """The optimizer state object (moments and step count live inside it)."""
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_step(optimizer: torch.optim.Adam, lr: float | None = None) -> None:
    """Apply one bias-corrected Adam update from the gradients stored on the parameters."""
    if lr is not None:
        for g in optimizer.param_groups:
            g["lr"] = lr
    optimizer.step()


def grad_check(fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor,
               step: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x = point.detach().to(torch.float64).clone().requires_grad_(True)
    out = fn(x)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)
    base = x.detach().reshape(-1)
    numeric = torch.empty_like(base)
    with torch.no_grad():
        for i in range(base.numel()):
            xp = base.clone()
            xp[i] += step
            xm = base.clone()
            xm[i] -= step
            fp = fn(xp.reshape(point.shape)).item()
            fm = fn(xm.reshape(point.shape)).item()
            numeric[i] = (fp - fm) / (2 * step)
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(floor, dtype=torch.float64))
    return float(((analytic - numeric).abs() / denom).max()) if base.numel() else 0.0


def model_grad_check(loss_fn: Callable[[], torch.Tensor], params: list[torch.Tensor],
                     step: float = 1e-5, floor: float = 1e-6, max_coords: int | None = None,
                     seed: int = 0) -> float:
    """grad_check over model parameters in place (optionally on a random coordinate subset)."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        coords = [coords[i] for i in sorted(rng.choice(len(coords), max_coords, replace=False))]
    worst = 0.0
    with torch.no_grad():
        for pi, j in coords:
            flat = params[pi].view(-1)
            orig = flat[j].item()
            flat[j] = orig + step
            fp = loss_fn().item()
            flat[j] = orig - step
            fm = loss_fn().item()
            flat[j] = orig
            num = (fp - fm) / (2 * step)
            g = grads[pi]
            a = 0.0 if g is None else g.reshape(-1)[j].item()
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, model: nn.Module, optimizer: torch.optim.Adam | None,
                    iteration: int, config: dict) -> None:
    """Binary checkpoint: magic, version, JSON header, then raw little-endian arrays.

    Arrays follow header order: each parameter, then (if present) its Adam
    first and second moments.
    """
    named = list(model.named_parameters())
    blobs = []
    entries = []
    state = optimizer.state if optimizer is not None else {}
    for name, p in named:
        arr = p.detach().cpu().numpy()
        entry = {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>=|")}
        blobs.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
        st = state.get(p)
        if st:
            entry["adam_step"] = int(st["step"])
            blobs.append(st["exp_avg"].detach().cpu().numpy().astype(arr.dtype.newbyteorder("<")).tobytes())
            blobs.append(st["exp_avg_sq"].detach().cpu().numpy().astype(arr.dtype.newbyteorder("<")).tobytes())
        entries.append(entry)
    header = {
        "iteration": iteration,
        "config": config,
        "config_hash": config_hash(config),
        "params": entries,
        "lr": optimizer.param_groups[0]["lr"] if optimizer is not None else None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with tmp.open("wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict[str, tuple]]:
    """Return (header, parameter arrays, Adam state per name as (step, m, v))."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    off = 16 + hlen
    params: dict[str, np.ndarray] = {}
    adam: dict[str, tuple] = {}
    for e in header["params"]:
        dt = np.dtype("<" + e["dtype"])
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        nbytes = n * dt.itemsize

        def take():
            nonlocal off
            a = np.frombuffer(raw, dt, count=n, offset=off).reshape(e["shape"]).copy()
            off += nbytes
            return a

        params[e["name"]] = take()
        if "adam_step" in e:
            m = take()
            v = take()
            adam[e["name"]] = (e["adam_step"], m, v)
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return header, params, adam


def load_checkpoint(path: str | Path, model: nn.Module,
                    optimizer: torch.optim.Adam | None = None) -> dict:
    header, params, adam = read_checkpoint(path)
    named = dict(model.named_parameters())
    missing = set(named) - set(params)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
    with torch.no_grad():
        for name, p in named.items():
            arr = params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{path}: shape mismatch for {name}: {arr.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    if optimizer is not None:
        for name, p in named.items():
            if name in adam:
                step, m, v = adam[name]
                optimizer.state[p] = {
                    "step": torch.tensor(float(step)),
                    "exp_avg": torch.from_numpy(m).to(p.dtype),
                    "exp_avg_sq": torch.from_numpy(v).to(p.dtype),
                }
        if header.get("lr") is not None:
            for g in optimizer.param_groups:
                g["lr"] = header["lr"]
    return header
