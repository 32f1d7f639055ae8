"""Double-precision tensor primitives, reverse-mode gradients and stability helpers.

Tensors are ``torch.Tensor`` objects in float64; torch's autograd records the
graph. The wrappers here add the shape diagnostics, the layer-norm epsilon
convention and the finite-difference checker used throughout the test suite.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
LN_EPS = 1e-5

torch.set_default_dtype(DTYPE)


class ShapeError(ValueError):
    pass


class Rng:
    """Seeded random stream; identical seeds give identical draws within a build."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.np = np.random.default_rng(self.seed)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from ``(seed, key)``."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child.np = np.random.default_rng([self.seed, int(key)])
        return child

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        return self.np.normal(0.0, std, size=size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in the closed range ``[low, high]``."""
        return self.np.integers(low, high + 1, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.np.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.np.permutation(n)

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self.np.integers(0, 2**62)))
        return g


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


def _broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}") from None


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() == 0 or b.dim() == 0 or a.shape[-1] != (b.shape[-2] if b.dim() > 1 else b.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("mul", a, b)
    return a * b


def layer_norm(x: torch.Tensor, weight: torch.Tensor | None = None, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Normalize the last axis with ``sqrt(var + 1e-5)``; a constant row maps to zeros."""
    d = x.shape[-1]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None and tuple(p.shape) != (d,):
            raise ShapeError(f"layer_norm: {name} shape {tuple(p.shape)} does not match {tuple(x.shape)}")
    return F.layer_norm(x, (d,), weight, bias, eps=LN_EPS)


def softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=-1)


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(x, dim=-1)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    ref = tensors[0]
    axis = dim % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(t.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {tuple(ref.shape)} and {tuple(t.shape)}")
    return torch.cat(list(tensors), dim=dim)


def slice_time(x: torch.Tensor, start: int, stop: int) -> torch.Tensor:
    """Frames ``[start, stop)`` of a ``(..., T, D)`` tensor."""
    return x[..., start:stop, :]


def gather_time(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Select frames ``index`` (1-D, long) from a ``(T, D)`` tensor."""
    if x.dim() != 2:
        raise ShapeError(f"gather_time: expected (T, D), got {tuple(x.shape)}")
    return x.index_select(0, index)


def scatter_time(base: torch.Tensor, index: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Copy of ``base`` with rows ``index`` replaced by ``values``."""
    if values.shape[0] != index.shape[0] or values.shape[1:] != base.shape[1:]:
        raise ShapeError(f"scatter_time: incompatible shapes {tuple(base.shape)} and {tuple(values.shape)}")
    return base.index_copy(0, index, values)


def mean(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def total(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def backward(root: torch.Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``."""
    if root.numel() != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {tuple(root.shape)}")
    root.reshape(()).backward()


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        p.grad = None


def logsumexp(values: Sequence[float]) -> float:
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("logsumexp: empty input")
    m = max(vals)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(v - m) for v in vals))


def grad_check(fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor, eps: float = 1e-4) -> float:
    """Largest relative gap between autograd and central differences.

    The gap per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"grad_check: eps must lie in (0, 1e-2], got {eps}")
    x = point.detach().clone().to(DTYPE).requires_grad_(True)
    out = fn(x)
    if not torch.isfinite(out).all():
        raise FloatingPointError("grad_check: non-finite function value")
    (analytic,) = torch.autograd.grad(out.reshape(()), x)
    analytic = analytic.detach().reshape(-1)

    base = point.detach().clone().to(DTYPE).reshape(-1)
    numeric = torch.empty_like(base)
    with torch.no_grad():
        for i in range(base.numel()):
            orig = base[i].item()
            base[i] = orig + eps
            f_plus = fn(base.reshape(point.shape)).item()
            base[i] = orig - eps
            f_minus = fn(base.reshape(point.shape)).item()
            base[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError(f"grad_check: non-finite value at coordinate {i}")
            numeric[i] = (f_plus - f_minus) / (2 * eps)
    if not torch.isfinite(analytic).all():
        raise FloatingPointError("grad_check: non-finite analytic gradient")
    denom = torch.maximum(torch.ones_like(analytic), torch.maximum(analytic.abs(), numeric.abs()))
    return float(((analytic - numeric).abs() / denom).max())
