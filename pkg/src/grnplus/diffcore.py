"""Differentiable primitives, gradient plumbing, a finite-difference oracle and Adam.

Reverse-mode accumulation is delegated to torch autograd; everything the two
backbones need goes through the primitive functions below so shapes are
checked in one place and nonsmooth points (ReLU sign changes, max-pool
switches) can be traced during gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class DimensionError(ValueError):
    pass


class GradientError(RuntimeError):
    """Backward could not produce the requested gradients."""


class MissingGradientError(GradientError):
    pass


class OracleError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# nonsmooth-point tracing

_trace: list[list[Tensor]] = []


@contextlib.contextmanager
def trace_kinks():
    """Record the ReLU sign patterns and max-pool argmax maps of every forward inside."""
    record: list[Tensor] = []
    _trace.append(record)
    try:
        yield record
    finally:
        _trace.pop()


def _tracing() -> bool:
    return bool(_trace)


def _note(t: Tensor) -> None:
    _trace[-1].append(t.detach().clone())


# ---------------------------------------------------------------------------
# forward primitives


def _check_4d(name: str, x: Tensor) -> None:
    if x.dim() != 4:
        raise DimensionError(f"{name}: expected (N, C, H, W) input, got shape {tuple(x.shape)}")


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv_transpose_out_size(size: int, k: int, stride: int, pad: int, output_pad: int = 0) -> int:
    return (size - 1) * stride - 2 * pad + k + output_pad


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding. kernel: (C_out, C_in, k, k)."""
    _check_4d("conv2d", x)
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if kernel.dim() != 4 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv2d: input {tuple(x.shape)} incompatible with kernel {tuple(kernel.shape)} (C_in mismatch)"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv2d: bias {tuple(bias.shape)} does not match kernel {tuple(kernel.shape)}")
    kh, kw = kernel.shape[2:]
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise DimensionError(f"conv2d: kernel {tuple(kernel.shape)} larger than padded input {tuple(x.shape)}")
    return F.conv2d(x, kernel, bias, stride=stride, padding=pad)


def conv_transpose2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    output_pad: int = 0,
) -> Tensor:
    """Transposed convolution. kernel: (C_in, C_out, k, k)."""
    _check_4d("conv_transpose2d", x)
    if stride < 1 or pad < 0 or not 0 <= output_pad < stride:
        raise ValueError(
            f"conv_transpose2d: need stride >= 1, pad >= 0, 0 <= output_pad < stride; "
            f"got stride={stride} pad={pad} output_pad={output_pad}"
        )
    if kernel.dim() != 4 or kernel.shape[0] != x.shape[1]:
        raise DimensionError(
            f"conv_transpose2d: input {tuple(x.shape)} incompatible with kernel {tuple(kernel.shape)} (C_in mismatch)"
        )
    if bias is not None and bias.shape != (kernel.shape[1],):
        raise DimensionError(f"conv_transpose2d: bias {tuple(bias.shape)} does not match kernel {tuple(kernel.shape)}")
    return F.conv_transpose2d(x, kernel, bias, stride=stride, padding=pad, output_padding=output_pad)


def relu(x: Tensor) -> Tensor:
    if _tracing():
        _note(x > 0)
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def max_pool2(x: Tensor) -> Tensor:
    _check_4d("max_pool2", x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"max_pool2: spatial dims must be even, got {tuple(x.shape)}")
    if not _tracing():
        return F.max_pool2d(x, 2)
    out, idx = F.max_pool2d(x, 2, return_indices=True)
    _note(idx)
    return out


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over H, W followed by an affine map."""
    _check_4d("instance_norm", x)
    if scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError(
            f"instance_norm: scale {tuple(scale.shape)} / shift {tuple(shift.shape)} "
            f"do not match channels of {tuple(x.shape)}"
        )
    return F.instance_norm(x, weight=scale, bias=shift, eps=eps)


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Batch-statistics normalisation (no running averages)."""
    _check_4d("batch_norm", x)
    if scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError(
            f"batch_norm: scale {tuple(scale.shape)} / shift {tuple(shift.shape)} "
            f"do not match channels of {tuple(x.shape)}"
        )
    return F.batch_norm(x, None, None, weight=scale, bias=shift, training=True, eps=eps)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d("concat_channels", a)
    _check_4d("concat_channels", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.cat([a, b], dim=1)


def softmax_channels(x: Tensor) -> Tensor:
    if x.dim() < 2:
        raise DimensionError(f"softmax_channels: need a channel axis, got shape {tuple(x.shape)}")
    return torch.softmax(x, dim=1)


# ---------------------------------------------------------------------------
# gradients


def backward(
    loss: Tensor,
    params: Mapping[str, Tensor],
    require: Iterable[str] = (),
) -> None:
    """Set ``p.grad = d loss / d p`` for every named parameter.

    Parameters off the loss path get an all-zero gradient. Names listed in
    ``require`` must lie on the path; if one does not, the graph was cut by a
    detach somewhere and an error naming it is raised.
    """
    if loss.numel() != 1 or loss.dim() > 1:
        raise GradientError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    require = set(require)
    unknown = require - set(names)
    if unknown:
        raise KeyError(f"required parameters not in the set: {sorted(unknown)}")
    if not loss.requires_grad:
        if require:
            raise GradientError(f"loss is detached from the graph; no gradient reaches {sorted(require)}")
        for p in params.values():
            p.grad = torch.zeros_like(p)
        return
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    for name, g in zip(names, grads):
        if g is None and name in require:
            raise GradientError(f"parameter {name!r} is not connected to the loss (detached tensor on its path)")
        p = params[name]
        p.grad = torch.zeros_like(p) if g is None else g.detach()


def grad_norm(params: Mapping[str, Tensor]) -> float:
    """Global L2 norm of the populated gradients (missing gradients count as zero)."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(torch.sum(p.grad.double() ** 2))
    return math.sqrt(total)


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    norm = grad_norm(params)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad.mul_(factor)
    return norm


_STENCILS = {
    # offsets (in units of eps) and weights of the central difference, divided by eps
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def finite_diff_grad(
    f: Callable[[], float | Tensor], param: Tensor, index: int, eps: float = 1e-3, order: int = 2
) -> float:
    """Central difference of ``f`` along flat coordinate ``index`` of ``param``.

    order 2: (f(p + eps) - f(p - eps)) / (2 eps); order 4 adds the +-2 eps
    points and cancels the eps^2 truncation term. ``f`` is re-evaluated with
    ``param`` perturbed in place; the original value is restored afterwards.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}, got {order}")
    if param.dtype != torch.float64:
        raise OracleError(f"finite differences need float64 parameters, got {param.dtype}")
    offsets, weights = _STENCILS[order]
    flat = param.data.view(-1)
    orig = flat[index].item()
    values = []
    try:
        for k in offsets:
            flat[index] = orig + k * eps
            values.append(float(f()))
    finally:
        flat[index] = orig
    if not all(math.isfinite(v) for v in values):
        raise OracleError(f"non-finite evaluation at index {index}: {values}")
    return sum(w * v for w, v in zip(weights, values)) / eps


# Finite-difference roundoff grows like 1/step, so gradients smaller than
# NOISE_SCALE / step are compared on that absolute scale instead (structural
# zeros such as conv biases ahead of instance norm carry only roundoff).
NOISE_SCALE = 1e-9


@dataclass
class GradCheckSample:
    name: str
    index: int
    analytic: float
    numeric: float
    step: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), NOISE_SCALE / self.step)


@dataclass
class GradCheckResult:
    samples: list[GradCheckSample]
    skipped_nonsmooth: int
    eps: float = 1e-3

    @property
    def worst(self) -> GradCheckSample:
        return max(self.samples, key=lambda s: s.rel_error)

    @property
    def max_rel_error(self) -> float:
        return self.worst.rel_error if self.samples else 0.0

    @property
    def reduced_steps(self) -> int:
        return sum(1 for s in self.samples if s.step < self.eps)

    def tensors_covered(self) -> set[str]:
        return {s.name for s in self.samples}


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    n_samples: int = 100,
    eps: float = 1e-3,
    generator: torch.Generator | None = None,
    max_tries: int | None = None,
    shrink: Sequence[float] = (1.0, 0.1, 0.01, 0.001),
    order: int = 4,
) -> GradCheckResult:
    """Compare autograd gradients with central differences at sampled coordinates.

    Tensors are visited round robin until each has a sample, after that
    the tensor is drawn uniformly. Central differences are only meaningful
    when the ReLU/max-pool pattern is the same at p - h, p and p + h, so per
    coordinate the step h is the largest of ``eps * shrink`` that keeps the
    pattern at every stencil point; if none does, the coordinate is skipped
    and another drawn.
    """
    names = list(params)
    loss = loss_fn()
    backward(loss, params)
    analytic = {n: params[n].grad.detach().clone().view(-1) for n in names}
    for n in names:
        params[n].grad = None

    def pattern() -> list[Tensor]:
        with trace_kinks() as rec, torch.no_grad():
            loss_fn()
        return rec

    base = pattern()

    def smooth_at(name: str, index: int, h: float) -> bool:
        flat = params[name].data.view(-1)
        orig = flat[index].item()
        try:
            for k in _STENCILS[order][0]:
                flat[index] = orig + k * h
                other = pattern()
                if len(other) != len(base) or any(not torch.equal(a, b) for a, b in zip(base, other)):
                    return False
        finally:
            flat[index] = orig
        return True

    def evaluate() -> float:
        with torch.no_grad():
            return float(loss_fn())

    samples: list[GradCheckSample] = []
    uncovered = list(names)
    skipped = 0
    tries = 0
    max_tries = max_tries if max_tries is not None else 20 * n_samples
    while len(samples) < n_samples or uncovered:
        if tries >= max_tries:
            raise OracleError(
                f"only {len(samples)} smooth coordinates found in {tries} draws"
                + (f"; never covered: {', '.join(uncovered)}" if uncovered else "")
            )
        if uncovered:
            name = uncovered[tries % len(uncovered)]
        else:
            name = names[int(torch.randint(len(names), (1,), generator=generator))]
        tries += 1
        index = int(torch.randint(params[name].numel(), (1,), generator=generator))
        step = next((eps * f for f in shrink if smooth_at(name, index, eps * f)), None)
        if step is None:
            skipped += 1
            continue
        numeric = finite_diff_grad(evaluate, params[name], index, step, order)
        samples.append(GradCheckSample(name, index, float(analytic[name][index]), numeric, step))
        if name in uncovered:
            uncovered.remove(name)
    return GradCheckResult(samples, skipped, eps)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update in place; gradients are cleared afterwards."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    missing = [n for n, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for parameters: {', '.join(missing)}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            step = (m / c1) / (torch.sqrt(v / c2) + eps)
            p.sub_(lr * step)
            p.grad = None
    return state
