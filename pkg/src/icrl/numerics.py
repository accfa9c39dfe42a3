"""Dense tensor primitives, ALiBi biases, Adam and a finite-difference gradient checker.

Tensors are ``torch.Tensor``; reverse-mode differentiation goes through
``torch.autograd``. Everything the transformer needs is expressed through the
primitives below so shapes are checked in one place and a debug flag can trap
non-finite values after every call.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

_DEBUG = False


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """Trap NaN/Inf after every primitive when enabled."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def precision(dtype: torch.dtype | str):
    """Temporarily switch the default float dtype (``float32`` or ``float64``)."""
    if isinstance(dtype, str):
        dtype = {"float32": torch.float32, "float64": torch.float64}[dtype]
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def _check(out: Tensor, name: str) -> Tensor:
    if _DEBUG and not torch.isfinite(out).all():
        raise NonFiniteError(f"non-finite values produced by {name}")
    return out


def _mismatch(name: str, a: Tensor, b: Tensor) -> ShapeError:
    return ShapeError(f"{name}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _mismatch("matmul", a, b)
    return _check(a @ b, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _mismatch("add", a, b) from None
    return _check(a + b, "add")


def scale(a: Tensor, factor: float) -> Tensor:
    return _check(a * factor, "scale")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def concat(parts: Sequence[Tensor]) -> Tensor:
    lead = {tuple(p.shape[:-1]) for p in parts}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ: {[tuple(p.shape) for p in parts]}")
    return torch.cat(list(parts), dim=-1)


def split(x: Tensor, sizes: Sequence[int]) -> tuple[Tensor, ...]:
    if sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to last dim of {tuple(x.shape)}")
    return torch.split(x, list(sizes), dim=-1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise _mismatch("layer_norm", x, gain)
    return _check(F.layer_norm(x, x.shape[-1:], gain, bias, eps), "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    return _check(F.gelu(x), "gelu")


def softmax(x: Tensor) -> Tensor:
    return _check(torch.softmax(x, dim=-1), "softmax")


def _check_attention_shapes(q, k, v, bias):
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"causal_attention: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    expected = (q.shape[-3], q.shape[-2], k.shape[-2])
    if tuple(bias.shape) != expected:
        raise ShapeError(f"causal_attention: bias shape {tuple(bias.shape)}, expected {expected}")


def causal_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor) -> Tensor:
    """Scaled dot-product attention over ``[..., heads, len, head_dim]`` inputs.

    ``bias`` is ``[heads, q_len, k_len]`` and carries ``-inf`` on masked
    (future) keys, as produced by :func:`alibi_bias`.
    """
    _check_attention_shapes(q, k, v, bias)
    return _check(F.scaled_dot_product_attention(q, k, v, attn_mask=bias), "causal_attention")


# Reference formulas, kept independent of the library kernels above for testing.

def layer_norm_reference(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def gelu_reference(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def softmax_reference(x: Tensor) -> Tensor:
    e = torch.exp(x - x.amax(dim=-1, keepdim=True))
    return e / e.sum(dim=-1, keepdim=True)


def causal_attention_reference(q: Tensor, k: Tensor, v: Tensor, bias: Tensor) -> Tensor:
    _check_attention_shapes(q, k, v, bias)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1]) + bias
    return softmax_reference(scores) @ v


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise _mismatch("mse", pred, target)
    return ((pred - target) ** 2).mean()


def alibi_slopes(num_heads: int) -> list[float]:
    """Geometric slopes ``2^(-8h/H)`` for ``h = 1..H``; ``H`` must be a power of two."""
    if num_heads < 1 or num_heads & (num_heads - 1):
        raise ValueError(f"num_heads must be a power of two, got {num_heads}")
    return [2.0 ** (-8.0 * h / num_heads) for h in range(1, num_heads + 1)]


def alibi_bias(num_heads: int, q_positions, k_positions, dtype: torch.dtype | None = None) -> Tensor:
    """``bias[h, i, j] = -m_h (q_i - k_j)`` for ``k_j <= q_i``, else ``-inf``."""
    dtype = dtype or torch.get_default_dtype()
    qp = torch.as_tensor(q_positions, dtype=torch.int64)
    kp = torch.as_tensor(k_positions, dtype=torch.int64)
    dist = (qp[:, None] - kp[None, :]).to(dtype)
    slopes = torch.tensor(alibi_slopes(num_heads), dtype=dtype)
    bias = -slopes[:, None, None] * dist
    return bias.masked_fill(dist < 0, float("-inf"))


def backward(loss: Tensor, params: Sequence[Tensor], accumulate: bool = True) -> list[Tensor]:
    """Reverse-mode gradients of a scalar loss; unused parameters get zeros.

    With ``accumulate`` the gradients are also added into each parameter's
    ``.grad`` slot.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    out = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    if accumulate:
        for p, g in zip(params, out):
            p.grad = g.detach().clone() if p.grad is None else p.grad + g.detach()
    return out


@dataclass
class AdamState:
    step: int = 0
    m: list[Tensor] = field(default_factory=list)
    v: list[Tensor] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamState,
              lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.99,
              eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if p.shape != g.shape:
                raise _mismatch("adam_step", p, g)
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


@dataclass
class GradCheckResult:
    max_rel_err: float
    n_coords: int
    worst: tuple[int, int] | None = None

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], n_coords: int = 200,
              seed: int = 0, h: float = 1e-3) -> GradCheckResult:
    """Compare autograd gradients against finite differences on random coordinates.

    Uses the five-point stencil ``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h``
    (truncation error O(h^4)), so a comparatively large ``h`` keeps
    cancellation error small even for tiny gradient entries. ``loss_fn`` is
    re-evaluated with each probed entry nudged; run it under
    ``precision("float64")``.
    """
    params = list(params)
    analytic = backward(loss_fn(), params, accumulate=False)
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, worst_at = 0.0, None
    with torch.no_grad():
        for idx in flat_idx:
            pi = int(np.searchsorted(offsets, idx, side="right") - 1)
            j = int(idx - offsets[pi])
            flat = params[pi].view(-1)
            orig = flat[j].item()
            f = {}
            for k in (-2, -1, 1, 2):
                flat[j] = orig + k * h
                f[k] = loss_fn().item()
            flat[j] = orig
            numeric = (-f[2] + 8 * f[1] - 8 * f[-1] + f[-2]) / (12 * h)
            err = relative_error(analytic[pi].view(-1)[j].item(), numeric)
            if err > worst:
                worst, worst_at = err, (pi, j)
    return GradCheckResult(worst, len(flat_idx), worst_at)
