"""Reverse-mode differentiable array ops, gradient checking and parameter bookkeeping.

Arrays are ``torch.Tensor`` objects; torch's autograd tape records the backward
rules. What lives here is the layer the rest of the package relies on:
shape-checked op wrappers with readable errors, a central finite-difference
checker that never touches autograd, the frozen/trainable parameter table and
the checkpoint archive format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

DiffArray = torch.Tensor

CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


def _shape_error(op: str, a: torch.Tensor, b: torch.Tensor, why: str = "incompatible shapes") -> ShapeError:
    return ShapeError(f"{op}: {why} {tuple(a.shape)} and {tuple(b.shape)}")


def _broadcastable(a: torch.Tensor, b: torch.Tensor) -> bool:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        return False
    return True


# --------------------------------------------------------------------------
# forward ops
# --------------------------------------------------------------------------

def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _shape_error("matmul", a, b)
    return a @ b


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    if not _broadcastable(a, b):
        raise _shape_error("add", a, b)
    return a + b


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    if not _broadcastable(a, b):
        raise _shape_error("mul", a, b)
    return a * b


def reshape(a: DiffArray, shape: tuple[int, ...]) -> DiffArray:
    if math.prod(shape) != a.numel() and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {tuple(a.shape)} as {tuple(shape)}")
    return a.reshape(shape)


def transpose(a: DiffArray, dim0: int = -2, dim1: int = -1) -> DiffArray:
    return a.transpose(dim0, dim1)


def concat(arrays: list[DiffArray], axis: int = -1) -> DiffArray:
    ref = arrays[0]
    for other in arrays[1:]:
        if other.dim() != ref.dim():
            raise _shape_error("concat", ref, other, "rank mismatch")
        ax = axis % ref.dim()
        if any(s != o for i, (s, o) in enumerate(zip(ref.shape, other.shape)) if i != ax):
            raise _shape_error("concat", ref, other)
    return torch.cat(arrays, dim=axis)


def softmax(a: DiffArray, axis: int = -1) -> DiffArray:
    return torch.softmax(a, dim=axis)


def sigmoid(a: DiffArray) -> DiffArray:
    return torch.sigmoid(a)


def gelu(a: DiffArray) -> DiffArray:
    return F.gelu(a)


def layer_norm(a: DiffArray, weight: DiffArray | None = None, bias: DiffArray | None = None,
               eps: float = 1e-6) -> DiffArray:
    if weight is not None and weight.shape != a.shape[-1:]:
        raise _shape_error("layer_norm", a, weight)
    return F.layer_norm(a, a.shape[-1:], weight, bias, eps)


def mean(a: DiffArray, axis=None, keepdim: bool = False) -> DiffArray:
    return a.mean() if axis is None else a.mean(dim=axis, keepdim=keepdim)


def log(a: DiffArray) -> DiffArray:
    return torch.log(a)


def exp(a: DiffArray) -> DiffArray:
    return torch.exp(a)


def conv2d_depthwise(x: DiffArray, weight: DiffArray, bias: DiffArray | None = None) -> DiffArray:
    """(C, H, W) or (B, C, H, W) input, (C, k, k) kernel with odd k, zero same-padding."""
    squeeze = x.dim() == 3
    xb = x.unsqueeze(0) if squeeze else x
    if xb.dim() != 4 or weight.dim() != 3 or weight.shape[0] != xb.shape[1]:
        raise _shape_error("conv2d_depthwise", x, weight)
    k = weight.shape[-1]
    if weight.shape[-2] != k or k % 2 == 0:
        raise _shape_error("conv2d_depthwise", x, weight, "kernel must be square and odd:")
    out = F.conv2d(xb, weight.unsqueeze(1), bias, padding=k // 2, groups=xb.shape[1])
    return out.squeeze(0) if squeeze else out


def conv2d_pointwise(x: DiffArray, weight: DiffArray, bias: DiffArray | None = None) -> DiffArray:
    """1x1 convolution: (C_in, H, W) or (B, C_in, H, W) with (C_out, C_in) weights."""
    squeeze = x.dim() == 3
    xb = x.unsqueeze(0) if squeeze else x
    if xb.dim() != 4 or weight.dim() != 2 or weight.shape[1] != xb.shape[1]:
        raise _shape_error("conv2d_pointwise", x, weight)
    out = F.conv2d(xb, weight[:, :, None, None], bias)
    return out.squeeze(0) if squeeze else out


def l1(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.shape != b.shape:
        raise _shape_error("l1", a, b)
    return (a - b).abs().mean()


def mse(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.shape != b.shape:
        if not (b.dim() == 0 or b.numel() == 1):
            raise _shape_error("mse", a, b)
    return ((a - b) ** 2).mean()


# name -> (callable taking random inputs, input shapes). Used by the gradient suite.
OPS: dict[str, tuple[Callable[..., DiffArray], list[tuple[int, ...]]]] = {
    "matmul": (matmul, [(3, 4), (4, 2)]),
    "add": (add, [(3, 4), (4,)]),
    "mul": (mul, [(3, 4), (3, 4)]),
    "reshape": (lambda a: reshape(a, (4, 3)), [(3, 4)]),
    "transpose": (transpose, [(3, 4)]),
    "concat": (lambda a, b: concat([a, b], axis=0), [(2, 3), (4, 3)]),
    "softmax": (lambda a: softmax(a, axis=-1), [(3, 5)]),
    "sigmoid": (sigmoid, [(3, 4)]),
    "gelu": (gelu, [(3, 4)]),
    "layer_norm": (layer_norm, [(3, 6), (6,), (6,)]),
    "mean": (lambda a: mean(a, axis=1), [(3, 4)]),
    "log": (lambda a: log(a.abs() + 0.5), [(3, 4)]),
    "exp": (exp, [(3, 4)]),
    "conv2d_depthwise": (conv2d_depthwise, [(2, 5, 5), (2, 3, 3), (2,)]),
    "conv2d_pointwise": (conv2d_pointwise, [(3, 4, 4), (2, 3), (2,)]),
    "l1": (l1, [(3, 4), (3, 4)]),
    "mse": (mse, [(3, 4), (3, 4)]),
}


# --------------------------------------------------------------------------
# backward and gradient checking
# --------------------------------------------------------------------------

def backward(loss: DiffArray) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable trainable leaf."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ValueError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def finite_difference_check(f: Callable[[DiffArray], DiffArray], x: DiffArray, eps: float = 1e-5,
                            skip: Callable[[int], bool] | None = None) -> float:
    """Max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|).

    The analytic gradient comes from autograd; the numeric one from central
    differences with step ``eps`` evaluated under ``torch.no_grad``. ``skip(i)``
    may exclude flat indices where f is known to be non-differentiable.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = x.detach().clone()
    xa = x0.clone().requires_grad_(True)
    out = f(xa)
    if out.numel() != 1:
        raise ValueError("finite_difference_check needs a scalar-valued f")
    (analytic,) = torch.autograd.grad(out.reshape(()), xa, allow_unused=True)
    analytic = torch.zeros_like(x0) if analytic is None else analytic
    analytic = analytic.reshape(-1)

    worst = 0.0
    flat = x0.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            if skip is not None and skip(i):
                continue
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += eps
            xm[i] -= eps
            fp = float(f(xp.reshape(x0.shape)))
            fm = float(f(xm.reshape(x0.shape)))
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


def check_module_gradients(loss_fn: Callable[[], DiffArray], params: list[torch.Tensor],
                           eps: float = 1e-5, max_elems: int | None = None,
                           seed: int = 0) -> float:
    """Finite-difference check of a scalar closure w.r.t. tensors it closes over.

    Each tensor in ``params`` is perturbed in place. With ``max_elems`` only a
    seeded random subset of elements per tensor is probed.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_elems is not None and flat.numel() > max_elems:
                idx = rng.choice(flat.numel(), size=max_elems, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(loss_fn())
                flat[i] = orig - eps
                fm = float(loss_fn())
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                a = float(g.view(-1)[i])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


# --------------------------------------------------------------------------
# parameters, freezing, checkpoints
# --------------------------------------------------------------------------

@dataclass
class Parameter:
    name: str
    array: torch.nn.Parameter

    @property
    def frozen(self) -> bool:
        return not self.array.requires_grad


def parameter_table(module: torch.nn.Module) -> list[Parameter]:
    return [Parameter(name, p) for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0])]


def set_frozen(module: torch.nn.Module, frozen: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(not frozen)
        if frozen:
            p.grad = None


def zero_grads(module: torch.nn.Module) -> None:
    for p in module.parameters():
        p.grad = None


def save_checkpoint(module: torch.nn.Module, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``<path>.npz`` (flat name -> array) and ``<path>.json`` (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = parameter_table(module)
    arrays = {p.name: p.array.detach().cpu().numpy() for p in table}
    np.savez(path.with_suffix(".npz"), **arrays)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "parameters": {p.name: {"shape": list(p.array.shape), "frozen": p.frozen,
                                "dtype": str(p.array.dtype).replace("torch.", "")} for p in table},
        "extra": extra or {},
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path.with_suffix(".json")


def read_manifest(path: str | Path) -> dict:
    manifest = json.loads(Path(path).with_suffix(".json").read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    return manifest


def load_checkpoint(module: torch.nn.Module, path: str | Path) -> dict:
    """Load arrays and frozen flags into ``module``; returns the manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    arrays = np.load(path.with_suffix(".npz"))
    params = dict(module.named_parameters())
    missing = set(params) - set(arrays.files)
    unexpected = set(arrays.files) - set(params)
    if missing or unexpected:
        raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    with torch.no_grad():
        for name, p in params.items():
            src = torch.from_numpy(arrays[name])
            if tuple(src.shape) != tuple(p.shape):
                raise ValueError(f"{name}: checkpoint shape {tuple(src.shape)} vs model {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))
            p.requires_grad_(not manifest["parameters"][name]["frozen"])
    return manifest
