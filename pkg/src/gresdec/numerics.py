"""Dense-array substrate: forward ops, small learnable layers and a
finite-difference gradient oracle.

Tensors are ``torch.Tensor``; analytic gradients come from autograd. The
oracle in :func:`finite_diff_grad` only ever evaluates forward passes under
``torch.no_grad`` so it stays independent of the backward path it checks.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def check_finite(x: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"{name} contains NaN or Inf")
    return x


def tensor(data, dtype=torch.float64, checked: bool = True) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=dtype)
    if checked:
        check_finite(t)
    return t


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def glorot_(w: torch.Tensor, fan_in: int, fan_out: int, generator: torch.Generator | None) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        w.uniform_(-bound, bound, generator=generator)
    return w


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] == 0:
        raise ShapeError("softmax_rows: empty row")
    z = x - x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


class Linear(nn.Module):
    """Affine map ``x @ weight + bias`` with ``weight`` stored as [in, out]."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True,
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = nn.Parameter(glorot_(torch.empty(in_dim, out_dim, dtype=dtype), in_dim, out_dim, generator))
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear: expected last dim {self.in_dim}, got {x.shape[-1]}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


_ACTIVATIONS = {"relu": F.relu, "gelu": F.gelu}


class Mlp(nn.Module):
    """Chain of :class:`Linear` layers with an activation between them (not after the last)."""

    def __init__(self, dims: Sequence[int], activation: str = "relu",
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("Mlp needs at least one layer")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.layers = nn.ModuleList(
            Linear(a, b, generator=generator, dtype=dtype) for a, b in zip(dims[:-1], dims[1:])
        )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self, x)


def mlp_forward(m: Mlp, x: torch.Tensor) -> torch.Tensor:
    act = _ACTIVATIONS[m.activation]
    for i, layer in enumerate(m.layers):
        x = layer(x)
        if i < len(m.layers) - 1:
            x = act(x)
    return x


def finite_diff_grad(f: Callable[[torch.Tensor], torch.Tensor | float], x: torch.Tensor,
                     h: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    ``x`` is never mutated; each probe evaluates ``f`` on a perturbed copy.
    """
    base = x.detach().clone()
    flat = base.reshape(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f(base.clone()))
            flat[i] = orig - h
            fm = float(f(base.clone()))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite function value probing coordinate {i}")
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def finite_diff_param_grads(loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor],
                            h: float = 1e-5) -> dict[str, torch.Tensor]:
    """Finite-difference gradients of ``loss_fn()`` with respect to named tensors
    that ``loss_fn`` closes over (typically module parameters), perturbed in place."""
    out = {}
    for name, p in params.items():
        saved = p.detach().clone()

        def f(v, p=p):
            with torch.no_grad():
                p.copy_(v)
            return loss_fn()

        try:
            out[name] = finite_diff_grad(f, saved, h)
        finally:
            with torch.no_grad():
                p.copy_(saved)
    return out


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    num = torch.linalg.vector_norm(a - b).item()
    den = max(torch.linalg.vector_norm(a).item(), torch.linalg.vector_norm(b).item(), floor)
    return num / den
