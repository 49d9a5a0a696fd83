"""Dense tensor helpers and gradient checking.

Tensors are plain ``torch.Tensor`` values and trainable state lives in
``torch.nn.Parameter`` objects; ``requires_grad`` doubles as the trainable
flag.  Reverse-mode differentiation is torch autograd.  The finite
difference routine below is the independent oracle for it.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where a finite value is required."""


def resolve_dtype(name: str | torch.dtype) -> torch.dtype:
    if isinstance(name, torch.dtype):
        return name
    try:
        return DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(DTYPES)}") from None


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{what} contains non-finite values")
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (torch subtracts the running max internally)."""
    if v.dim() == 0:
        raise ShapeError("softmax needs at least one axis")
    if v.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {tuple(v.shape)}")
    return torch.softmax(v, dim=axis)


def l2_normalize(v: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """Scale ``v`` to unit norm along ``axis``.

    Vectors with norm <= eps are divided by ``norm + eps`` instead, so a zero
    vector maps to zero rather than NaN.
    """
    norm = torch.linalg.vector_norm(v, dim=axis, keepdim=True)
    denom = torch.where(norm > eps, norm, norm + eps)
    return v / denom


def cosine(u: Tensor, w: Tensor, eps: float = 1e-12) -> Tensor:
    return (l2_normalize(u, eps) * l2_normalize(w, eps)).sum(-1)


def entropy(p: Tensor, axis: int = -1) -> Tensor:
    """Shannon entropy in nats along ``axis``; 0 ln 0 counts as 0."""
    if bool((p < 0).any()):
        raise ValueError("entropy: probabilities must be nonnegative")
    total = p.sum(axis)
    if bool(((total - 1).abs() > 1e-6).any()):
        raise ValueError("entropy: probabilities must sum to 1 (tolerance 1e-6)")
    return -torch.special.xlogy(p, p).sum(axis)


def bilinear_resize(grid: Tensor, height: int, width: int) -> Tensor:
    """Resize a C x h x w grid channel-wise with corner-aligned bilinear sampling."""
    if grid.dim() != 3:
        raise ShapeError(f"expected C x h x w grid, got shape {tuple(grid.shape)}")
    if height < 1 or width < 1:
        raise ValueError(f"target extents must be positive, got {height}x{width}")
    if grid.shape[1] < 1 or grid.shape[2] < 1:
        raise ShapeError(f"source grid is empty: {tuple(grid.shape)}")
    if (height, width) == tuple(grid.shape[1:]):
        return grid
    return F.interpolate(grid[None], size=(height, width), mode="bilinear", align_corners=True)[0]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every trainable leaf."""
    if loss.numel() != 1 or loss.dim() != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.backward()


def finite_diff_grad(
    f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5
) -> list[Tensor]:
    """Central-difference gradient of the scalar ``f()`` w.r.t. each tensor in ``params``.

    ``f`` must read the parameters' current values; each coordinate is nudged
    in place and restored afterwards.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(f())
                flat[i] = orig - eps
                down = float(f())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def max_relative_error(a: Iterable[Tensor], b: Iterable[Tensor], floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor) over all coordinates."""
    worst = 0.0
    for x, y in zip(a, b):
        x, y = x.detach().double(), y.detach().double()
        denom = torch.maximum(torch.maximum(x.abs(), y.abs()), torch.full_like(x, floor))
        if x.numel():
            worst = max(worst, float(((x - y).abs() / denom).max()))
    return worst


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
        p.grad = None
    return module


def tensor_sha256(t: Tensor) -> str:
    data = t.detach().contiguous().cpu()
    h = hashlib.sha256(str(data.dtype).encode())
    h.update(str(tuple(data.shape)).encode())
    h.update(data.numpy().tobytes())
    return h.hexdigest()


def state_hashes(module: torch.nn.Module) -> dict[str, str]:
    return {name: tensor_sha256(t) for name, t in module.state_dict().items()}
