"""Dense float64 tensor ops with shape checks, plus a finite-difference gradient oracle.

Everything here is a thin, validated layer over torch. Tensors are plain
``torch.Tensor`` objects in double precision; gradients come from torch's tape.
The finite-difference checker is independent of that tape and is what the test
suite uses to hold it honest.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


def tensor(data, shape: Sequence[int] | None = None) -> torch.Tensor:
    """Build a float64 tensor from nested data or a flat buffer plus a shape."""
    t = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != t.numel():
            raise ShapeError(f"buffer of {t.numel()} elements cannot fill shape {shape}")
        t = t.reshape(shape)
    return t


def _pad_arg(padding, kernel_spatial: Sequence[int], name: str):
    if padding == "same":
        if any(k % 2 == 0 for k in kernel_spatial):
            raise ShapeError(f"{name}: 'same' padding needs odd kernel extents, got {tuple(kernel_spatial)}")
        return tuple(k // 2 for k in kernel_spatial)
    if padding == "valid":
        return 0
    return padding


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           stride=1, padding="same", groups: int = 1) -> torch.Tensor:
    """Cross-correlation over the last two axes.

    ``x`` is [C_in, H, W] or a batch [N, C_in, H, W]; ``kernel`` is
    [C_out, C_in // groups, kh, kw]. ``groups == C_in`` gives a depthwise conv.
    """
    if x.dim() not in (3, 4):
        raise ShapeError(f"conv2d: input must be rank 3 or 4, got shape {tuple(x.shape)}")
    if kernel.dim() != 4:
        raise ShapeError(f"conv2d: kernel must be rank 4, got shape {tuple(kernel.shape)}")
    c_in = x.shape[-3]
    if c_in % groups or kernel.shape[1] * groups != c_in:
        raise ShapeError(
            f"conv2d: input has {c_in} channels but kernel expects {kernel.shape[1]} x {groups} groups")
    if kernel.shape[0] % groups:
        raise ShapeError(f"conv2d: kernel output channels {kernel.shape[0]} not divisible by groups={groups}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} != ({kernel.shape[0]},)")
    pad = _pad_arg(padding, kernel.shape[2:], "conv2d")
    squeeze = x.dim() == 3
    out = F.conv2d(x.unsqueeze(0) if squeeze else x, kernel, bias, stride=stride, padding=pad, groups=groups)
    return out.squeeze(0) if squeeze else out


def conv3d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           stride=1, padding="same", groups: int = 1) -> torch.Tensor:
    """Cross-correlation over (T, H, W) of a [C_in, T, H, W] tensor.

    Zero padding, so "same" mode shrinks the contribution at boundary frames.
    """
    if x.dim() != 4:
        raise ShapeError(f"conv3d: input must be [C, T, H, W], got shape {tuple(x.shape)}")
    if kernel.dim() != 5:
        raise ShapeError(f"conv3d: kernel must be rank 5, got shape {tuple(kernel.shape)}")
    c_in = x.shape[0]
    if c_in % groups or kernel.shape[1] * groups != c_in:
        raise ShapeError(
            f"conv3d: input has {c_in} channels but kernel expects {kernel.shape[1]} x {groups} groups")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv3d: bias shape {tuple(bias.shape)} != ({kernel.shape[0]},)")
    pad = _pad_arg(padding, kernel.shape[2:], "conv3d")
    return F.conv3d(x.unsqueeze(0), kernel, bias, stride=stride, padding=pad, groups=groups).squeeze(0)


def layernorm(x: torch.Tensor, dims: int | Sequence[int], eps: float = 1e-5) -> torch.Tensor:
    """Normalize to zero mean / unit variance over ``dims`` (no affine terms)."""
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    dims = (dims,) if isinstance(dims, int) else tuple(dims)
    if math.prod(x.shape[d] for d in dims) == 0:
        raise ShapeError(f"layernorm: empty normalization group over dims {dims} of {tuple(x.shape)}")
    mu = x.mean(dim=dims, keepdim=True)
    var = x.var(dim=dims, keepdim=True, unbiased=False)
    return (x - mu) / torch.sqrt(var + eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise ValueError("softmax: non-finite input")
    return torch.softmax(x, dim=dim)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)  # exact erf form


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def leaky_relu(x: torch.Tensor, slope: float = 0.1) -> torch.Tensor:
    return F.leaky_relu(x, slope)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def fft2d(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """2D DFT over the last two axes, returned as a (real, imag) pair."""
    if x.dim() < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"fft2d: need at least a 1x1 trailing plane, got {tuple(x.shape)}")
    spec = torch.fft.fft2(x.to(DTYPE))
    return spec.real, spec.imag


def grad(loss: torch.Tensor, params: Mapping[str, torch.Tensor],
         retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar ``loss`` w.r.t. each named parameter.

    Parameters the loss does not reach get a zero tensor and a warning.
    """
    if loss.numel() != 1:
        raise ShapeError(f"grad: loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True,
                                retain_graph=retain_graph)
    out = {}
    for name, g in zip(names, grads):
        if g is None:
            log.warning("parameter %s is not reachable from the loss; gradient set to zero", name)
            g = torch.zeros_like(params[name])
        out[name] = g
    return out


@dataclass
class GradCheckResult:
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked: int = 0

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def check_gradients(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
                    h: float = 1e-5, max_coords: int | None = None, floor: float = 1e-8,
                    seed: int = 0) -> GradCheckResult:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` re-evaluates the scalar loss from the current contents of
    ``params`` (which are perturbed in place). At most ``max_coords`` randomly
    chosen coordinates per parameter are probed. Relative error per coordinate
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    loss = loss_fn()
    analytic = grad(loss, params)
    gen = torch.Generator().manual_seed(seed)
    result = GradCheckResult(max_rel_err=0.0)
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            n = flat.numel()
            if max_coords is not None and n > max_coords:
                idx = torch.randperm(n, generator=gen)[:max_coords].tolist()
            else:
                idx = range(n)
            worst = 0.0
            a_flat = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                a = a_flat[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
                result.checked += 1
            result.per_param[name] = worst
            result.max_rel_err = max(result.max_rel_err, worst)
    return result
