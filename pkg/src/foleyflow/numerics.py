"""Dense tensor helpers: seeded RNG, tensor files, RoPE, adaLN, attention and a
finite-difference gradient oracle.

Arrays are plain ``torch.Tensor`` / ``numpy.ndarray`` objects in row-major
layout. Every stochastic routine in the package takes a ``numpy.random.Generator``
backed by PCG64, created through :func:`make_rng`.
"""

from __future__ import annotations

import math
from typing import BinaryIO, Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import DimensionError, NumericError

ROPE_BASE = 10000.0
LN_EPS = 1e-6


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """PCG64 generator. A sequence seed (e.g. ``[seed, step]``) derives an
    independent, reproducible sub-stream."""
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------------------
# tensor files: one text header line ``dims: d1 d2 ...`` then little-endian f8
# --------------------------------------------------------------------------

def write_tensor(fh: BinaryIO, array) -> None:
    arr = _as_numpy(array)
    header = "dims:" + "".join(f" {d}" for d in arr.shape) + "\n"
    fh.write(header.encode("ascii"))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    line = fh.readline().decode("ascii")
    if not line.startswith("dims:"):
        raise DimensionError(f"expected a 'dims:' header, got {line!r}")
    shape = tuple(int(tok) for tok in line[5:].split())
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise DimensionError(f"truncated tensor data for shape {shape}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def _as_numpy(array) -> np.ndarray:
    if isinstance(array, torch.Tensor):
        return array.detach().cpu().double().numpy()
    return np.asarray(array, dtype=np.float64)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def rope_apply(x: torch.Tensor, positions, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotate consecutive feature pairs of ``x`` by position-dependent angles.

    ``x`` has shape ``[..., t, heads, head_dim]`` and ``positions`` holds one
    integer position per ``t``. Pair ``(2i, 2i+1)`` at position ``p`` is rotated
    by ``p * base ** (-2i / head_dim)``.
    """
    head_dim = x.shape[-1]
    if head_dim % 2:
        raise DimensionError(f"rope needs an even head_dim, got {head_dim}")
    pos = torch.as_tensor(positions, dtype=x.dtype, device=x.device)
    if pos.ndim != 1 or pos.shape[0] != x.shape[-3]:
        raise DimensionError(f"got {tuple(pos.shape)} positions for sequence length {x.shape[-3]}")
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=x.dtype, device=x.device) / head_dim)
    angles = pos[:, None] * inv_freq[None, :]          # [t, head_dim/2]
    cos = torch.cos(angles)[:, None, :]
    sin = torch.sin(angles)[:, None, :]
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out_even = x_even * cos - x_odd * sin
    out_odd = x_even * sin + x_odd * cos
    return torch.stack((out_even, out_odd), dim=-1).flatten(-2)


def layer_norm(x: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    return torch.nn.functional.layer_norm(x, x.shape[-1:], eps=eps)


def adaln_modulate(x: torch.Tensor, cond: torch.Tensor):
    """Layer-normalise ``x [..., t, d]`` and modulate it per row.

    ``cond [..., t, 2d or 3d]`` holds ``(scale, shift[, gate])``. Returns the
    modulated rows and the gate (``None`` for a 2d condition).
    """
    d = x.shape[-1]
    if cond.shape[-2] != x.shape[-2]:
        raise DimensionError(f"condition has {cond.shape[-2]} rows, input has {x.shape[-2]}")
    if cond.shape[-1] not in (2 * d, 3 * d):
        raise DimensionError(f"condition width {cond.shape[-1]} is not 2*{d} or 3*{d}")
    chunks = cond.split(d, dim=-1)
    scale, shift = chunks[0], chunks[1]
    gate = chunks[2] if len(chunks) == 3 else None
    return layer_norm(x) * (1 + scale) + shift, gate


def softmax(scores: torch.Tensor) -> torch.Tensor:
    return torch.softmax(scores, dim=-1)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Softmax attention weights ``[b, heads, t_q, t_k]`` for ``[b, t, heads, hd]`` inputs."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    return softmax((q.transpose(-3, -2) @ k.transpose(-3, -2).transpose(-1, -2)) * scale)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Multi-head attention over ``[batch, t, heads, head_dim]`` tensors.

    Uses the fused kernel; :func:`attention_weights` is the explicit reference.
    """
    q, k, v = (z.transpose(-3, -2) for z in (q, k, v))  # [b, heads, t, hd]
    return torch.nn.functional.scaled_dot_product_attention(q, k, v).transpose(-3, -2)


# --------------------------------------------------------------------------
# gradient oracle
# --------------------------------------------------------------------------

def finite_diff_grad(
    f: Callable[[], float] | Callable[[Mapping[str, torch.Tensor]], float],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    coords: Mapping[str, Sequence[int]] | None = None,
) -> dict[str, torch.Tensor]:
    """Central-difference gradient of the scalar ``f(params)``.

    Each coordinate of each tensor in ``params`` is perturbed in place by
    ``+-eps`` and restored afterwards. ``coords`` restricts the estimate to the
    listed flat indices per tensor; other entries come back as zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate() -> float:
        value = float(f(params))
        if not math.isfinite(value):
            raise NumericError(f"objective returned {value}")
        return value

    grads: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, tensor in params.items():
            flat = tensor.view(-1)
            grad = torch.zeros_like(flat)
            indices = range(flat.numel()) if coords is None else coords.get(name, ())
            for idx in indices:
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = evaluate()
                flat[idx] = orig - eps
                down = evaluate()
                flat[idx] = orig
                grad[idx] = (up - down) / (2 * eps)
            grads[name] = grad.view_as(tensor)
    return grads


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    a = analytic.detach().double().reshape(-1)
    n = numeric.detach().double().reshape(-1)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0
