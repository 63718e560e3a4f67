"""Differentiable primitives, the multiply-accumulate counter, and the finite-difference gradient checker.

The primitives are thin wrappers over torch so that every matmul in the model
passes through :func:`matmul` and can be counted.
"""

from __future__ import annotations

import builtins
import math
import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .core import NumericError, ParamStore


class ShapeError(ValueError):
    pass


REQUIRED_OPS = (
    "matmul",
    "add",
    "mul",
    "silu",
    "exp",
    "masked_softmax",
    "rms_norm",
    "layer_norm",
    "gather_rows",
    "scatter_rows",
    "mean",
    "sum",
    "cross_entropy",
    "mse",
)


def required_ops() -> tuple[str, ...]:
    return REQUIRED_OPS


# ---------------------------------------------------------------------------
# MAC counting


class MacCounter:
    def __init__(self):
        self.by_tag: dict[str, int] = defaultdict(int)

    def add(self, tag: str, macs: int) -> None:
        self.by_tag[tag] += int(macs)

    @property
    def total(self) -> int:
        return builtins.sum(self.by_tag.values())

    def excluding(self, *tags: str) -> int:
        return builtins.sum(v for k, v in self.by_tag.items() if k not in tags)


_local = threading.local()


@contextmanager
def mac_counter() -> Iterator[MacCounter]:
    """Count multiply-accumulates of every :func:`matmul` inside the block (thread-local)."""
    prev = getattr(_local, "counter", None)
    counter = MacCounter()
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


# ---------------------------------------------------------------------------
# Ops


def _check_broadcast(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}") from None


def matmul(a: torch.Tensor, b: torch.Tensor, tag: str = "other") -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    counter = getattr(_local, "counter", None)
    if counter is not None:
        try:
            batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except RuntimeError:
            raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}") from None
        m = a.shape[-2] if a.dim() >= 2 else 1
        counter.add(tag, math.prod(batch) * m * a.shape[-1] * b.shape[-1])
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast(a, b, "add")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast(a, b, "mul")
    return a * b


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


NEG_INF = -1e30


def additive_mask(allowed: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    zero = torch.zeros((), dtype=dtype)
    return torch.where(allowed, zero, torch.tensor(NEG_INF, dtype=dtype))


def masked_softmax(scores: torch.Tensor, allowed: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis with disallowed entries pushed to -1e30.

    Rows with no allowed entry come out as all zeros.
    """
    if allowed is None:
        return torch.softmax(scores, dim=-1)
    _check_broadcast(scores, allowed, "masked_softmax")
    w = torch.softmax(scores + additive_mask(allowed, scores.dtype), dim=-1)
    if not bool(allowed.any(dim=-1).all()):
        w = w * allowed.to(w.dtype)
    return w


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    _check_broadcast(x, gain, "rms_norm")
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * gain


def layer_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    # gain only: keeps the 2D-per-layer normalization count exact
    _check_broadcast(x, gain, "layer_norm")
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    return xc * torch.rsqrt(xc.pow(2).mean(dim=-1, keepdim=True) + eps) * gain


def normalize(kind: str, x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if kind == "rmsnorm":
        return rms_norm(x, gain, eps)
    if kind == "layernorm":
        return layer_norm(x, gain, eps)
    raise ValueError(f"unknown norm {kind!r}")


def gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return x.index_select(0, idx)


def scatter_rows(base: torch.Tensor, idx: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Out-of-place ``base[idx] = values`` (rows)."""
    if values.shape[1:] != base.shape[1:] or values.shape[0] != idx.numel():
        raise ShapeError(f"scatter_rows: shape mismatch {tuple(base.shape)} vs {tuple(values.shape)}")
    return base.index_copy(0, idx, values)


def mean(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def sum(x: torch.Tensor, dim=None) -> torch.Tensor:  # noqa: A001
    return x.sum() if dim is None else x.sum(dim=dim)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-row negative log-likelihood of integer targets."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: shape mismatch {tuple(logits.shape)} vs {tuple(targets.shape)}")
    lse = torch.logsumexp(logits, dim=-1)
    return lse - logits.gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).mean()


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradReport:
    param_name: str
    max_rel_err: float
    max_abs_err: float
    n_probed: int
    max_excess_err: float = 0.0  # relative error left after discounting the finite-difference rounding floor

    def ok(self, tol_rel: float) -> bool:
        return self.max_rel_err < tol_rel

    def ok_above_floor(self, tol_rel: float) -> bool:
        return self.max_excess_err < tol_rel


def analytic_grads(loss_fn: Callable[[ParamStore], torch.Tensor], params: ParamStore) -> dict[str, torch.Tensor]:
    params.zero_grad()
    loss = loss_fn(params)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss.detach())} at unperturbed parameters")
    loss.backward()
    grads = {}
    for name, t in params.items():
        grads[name] = torch.zeros_like(t) if t.grad is None else t.grad.detach().clone()
    params.zero_grad()
    return grads


def check_gradients(
    loss_fn: Callable[[ParamStore], torch.Tensor],
    params: ParamStore,
    h: float = 1e-4,
    tol_rel: float = 1e-5,
    probes_per_tensor: int = 8,
    seed: int = 0,
    roundoff_ulps: float = 0.0,
) -> list[GradReport]:
    """Compare autograd gradients with central differences at random coordinates.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-12)``. ``tol_rel`` is not
    enforced here; callers read it off the reports.

    Each loss value is rounded to within about one ulp, so the central
    difference carries an absolute error near ``ulp(L) / h``. With
    ``roundoff_ulps > 0`` the reports also carry ``max_excess_err``, the
    relative error after subtracting ``roundoff_ulps * ulp(L) / (2h)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    with torch.no_grad():
        base = float(loss_fn(params))
    floor = roundoff_ulps * math.ulp(base) / (2 * h) if math.isfinite(base) else 0.0
    grads = analytic_grads(loss_fn, params)
    rng = np.random.default_rng(seed)
    reports = []
    with torch.no_grad():
        for name, t in params.items():
            flat = t.view(-1)
            n = flat.numel()
            coords = rng.choice(n, size=min(probes_per_tensor, n), replace=False)
            g = grads[name].view(-1)
            max_rel = max_abs = max_excess = 0.0
            for j in coords:
                j = int(j)
                orig = flat[j].item()
                flat[j] = orig + h
                fp = float(loss_fn(params))
                flat[j] = orig - h
                fm = float(loss_fn(params))
                flat[j] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"non-finite loss while perturbing {name}[{j}]")
                num = (fp - fm) / (2 * h)
                ana = float(g[j])
                abs_err = abs(ana - num)
                scale = max(abs(ana), abs(num), 1e-12)
                max_abs = max(max_abs, abs_err)
                max_rel = max(max_rel, abs_err / scale)
                max_excess = max(max_excess, max(abs_err - floor, 0.0) / scale)
            reports.append(GradReport(name, max_rel, max_abs, len(coords), max_excess))
    return reports
