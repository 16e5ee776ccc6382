"""Tensor primitives, parameter storage, Adam, gradient checking and checkpoints.

Reverse-mode differentiation is provided by torch; this module pins down the
small set of primitives the networks use, the numeric precision switch, and
the on-disk checkpoint layout::

    b"KSPU" | u32 version | u64 header length | UTF-8 JSON header | tensor data

All integers and tensor payloads are little-endian. The header lists
``{name, shape, dtype, byte_offset}`` for every tensor (offsets relative to
the start of the data section) plus free-form ``meta``.
"""

from __future__ import annotations

import contextlib
import json
import math
import os
import struct
from collections.abc import Callable, Iterator
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, MissingGradient, ShapeMismatch

MAGIC = b"KSPU"
VERSION = 1
_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}


def set_precision(name: str) -> None:
    """Switch the global default dtype: "float32" for training, "float64" for verification."""
    torch.set_default_dtype(_DTYPES[name][0])


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = torch.get_default_dtype()
    set_precision(name)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def configure_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# primitives


def _same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def add(a, b):
    _same_shape(a, b, "add")
    return a + b


def multiply(a, b):
    _same_shape(a, b, "multiply")
    return a * b


def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def conv2d(x, weight, bias=None):
    """Stride-1 convolution with zero padding that preserves the spatial size."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d: input {tuple(x.shape)} vs kernel {tuple(weight.shape)}")
    if weight.shape[-1] % 2 == 0 or weight.shape[-1] != weight.shape[-2]:
        raise ShapeMismatch("conv2d: kernel must be square with odd size")
    return F.conv2d(x, weight, bias, padding=weight.shape[-1] // 2)


relu = torch.relu
sigmoid = torch.sigmoid


def softplus(x):
    return F.softplus(x)


def concat_channels(tensors):
    if len({(t.shape[0], *t.shape[2:]) for t in tensors}) != 1:
        raise ShapeMismatch(f"concat_channels: incompatible shapes {[tuple(t.shape) for t in tensors]}")
    return torch.cat(tensors, dim=1)


def avg_pool2(x):
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeMismatch(f"avg_pool2: spatial size {tuple(x.shape[-2:])} must be even")
    return F.avg_pool2d(x, 2)


def upsample2(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


def broadcast_spatial(z, height: int, width: int):
    """Tile a ``(B, C)`` vector over every pixel: ``(B, C, H, W)``."""
    if z.ndim != 2:
        raise ShapeMismatch(f"broadcast_spatial expects (B, C), got {tuple(z.shape)}")
    return z[:, :, None, None].expand(-1, -1, height, width)


def reduce_mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim=dim)


def bce_with_logits(logits, target):
    """Pixel-mean binary cross-entropy."""
    _same_shape(logits, target, "bce_with_logits")
    return F.binary_cross_entropy_with_logits(logits, target)


# ---------------------------------------------------------------------------
# parameters and optimisation


class ParameterStore:
    """Named parameters in sorted-name order plus per-parameter Adam state."""

    def __init__(self, params: dict[str, torch.Tensor]):
        self.params = {k: params[k] for k in sorted(params)}
        self.state: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        self.step_count = 0

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> ParameterStore:
        return cls(dict(module.named_parameters()))

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def __getitem__(self, name):
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_step(store: ParameterStore, grads: dict[str, torch.Tensor] | None = None, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    """One bias-corrected Adam update, applied in place.

    Gradients come from ``grads`` when given, otherwise from each parameter's
    ``.grad``. A missing gradient for any parameter is an error.
    """
    store.step_count += 1
    t = store.step_count
    with torch.no_grad():
        for name, p in store:
            g = grads[name] if grads is not None and name in grads else p.grad
            if g is None:
                raise MissingGradient(f"no gradient for parameter {name!r}")
            m, v = store.state.get(name, (torch.zeros_like(p), torch.zeros_like(p)))
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            store.state[name] = (m, v)
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            p -= lr * m_hat / (torch.sqrt(v_hat) + eps)
    return store


def grad_check(fn: Callable[[], torch.Tensor], store: ParameterStore, step: float = 1e-5,
               floor: float = 1e-6) -> tuple[float, str]:
    """Compare autodiff gradients of ``fn()`` with central differences.

    Every coordinate of every parameter is perturbed. The per-coordinate error
    is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, floor)``; the worst one is
    returned with a ``"name[index]"`` label. Run in float64 mode.
    """
    store.zero_grad()
    for _, p in store:
        p.requires_grad_(True)
    fn().backward()
    auto = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for k, p in store}
    worst, where = 0.0, ""
    with torch.no_grad():
        for name, p in store:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = fn().item()
                flat[i] = orig - step
                lo = fn().item()
                flat[i] = orig
                fd = (hi - lo) / (2 * step)
                a = auto[name].view(-1)[i].item()
                err = abs(a - fd) / max(abs(a), abs(fd), floor)
                if err > worst:
                    worst, where = err, f"{name}[{i}]"
    return worst, where


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write tensors atomically (temporary file, then rename)."""
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        dtype = {torch.float32: "float32", torch.float64: "float64"}.get(t.dtype)
        if dtype is None:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name!r}")
        raw = t.numpy().astype(_DTYPES[dtype][1]).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": dtype, "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":"))
    hbytes = header.encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes)
        for c in chunks:
            fh.write(c)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    data = raw[16 + hlen :]
    out = {}
    for e in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[e["dtype"]]
        n = math.prod(e["shape"])
        nbytes = n * np.dtype(np_dtype).itemsize
        chunk = data[e["byte_offset"] : e["byte_offset"] + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated data for {e['name']!r}")
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(e["shape"])
        out[e["name"]] = torch.tensor(arr.astype(np_dtype[1:]), dtype=torch_dtype)  # native byte order
    return out, header.get("meta", {})
