"""Transformer layers: dense, Mixture-of-Transformers (with partial untying) and expert-choice MoE FFNs."""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .attention import AttnMask, attention_core
from .core import ConfigError, Sparsity, TowerMap
from .numerics import matmul, normalize, silu

Params = Mapping[str, torch.Tensor]


@dataclass(frozen=True)
class LayerVariant:
    kind: str = "dense"
    untie_ffn: bool = False
    untie_qkv: bool = False
    untie_o: bool = False
    untie_ln: bool = False
    moe_towers: tuple[int, ...] = ()

    @property
    def ffn_impl(self) -> str:
        return "moe_ec" if self.moe_towers else "swiglu_single"

    def role_tower(self, role: str, tower: int) -> int:
        untied = {
            "wq": self.untie_qkv, "wk": self.untie_qkv, "wv": self.untie_qkv,
            "wo": self.untie_o, "ln_attn": self.untie_ln, "ln_ffn": self.untie_ln,
            "ffn": self.untie_ffn,
        }[role]
        return tower if untied else 0


def variant_for(sparsity: Sparsity | str, moe_towers: Sequence[int] = ()) -> LayerVariant:
    s = Sparsity(sparsity)
    if s is Sparsity.DENSE:
        return LayerVariant("dense")
    if s is Sparsity.MOE:
        return LayerVariant("dense", moe_towers=(0,))
    if s is Sparsity.MOT_FULL:
        return LayerVariant("mot", True, True, True, True)
    if s is Sparsity.MOT_FFN_ONLY:
        return LayerVariant("mot", untie_ffn=True)
    if s is Sparsity.MOT_FFN_QKV:
        return LayerVariant("mot", untie_ffn=True, untie_qkv=True)
    if s is Sparsity.HYBRID:
        return LayerVariant("mot", True, True, True, True, moe_towers=tuple(moe_towers))
    raise ConfigError(f"unknown sparsity {sparsity!r}")


# ---------------------------------------------------------------------------
# FFNs


def swiglu_ffn(h: torch.Tensor, w1: torch.Tensor, w3: torch.Tensor, w2: torch.Tensor) -> torch.Tensor:
    return matmul(silu(matmul(h, w1, "ffn")) * matmul(h, w3, "ffn"), w2, "ffn")


@dataclass
class RoutingRecord:
    """Expert-choice routing for one group of n tokens."""

    selected: np.ndarray  # (E, k) token indices, best first
    gates: np.ndarray  # (E, k) softmax-over-experts scores of the chosen tokens
    n_tokens: int

    @property
    def k(self) -> int:
        return self.selected.shape[1]

    @property
    def token_experts(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(self.n_tokens)]
        for e, row in enumerate(self.selected):
            for i in row:
                out[int(i)].add(e)
        return out


def ec_capacity(n: int, n_experts: int, capacity_factor: float) -> int:
    k = int(math.floor(capacity_factor * n / n_experts))
    if k < 1:
        raise ConfigError(
            f"expert-choice capacity floor({capacity_factor}*{n}/{n_experts}) = 0; need more tokens per group"
        )
    return k


class RoutingTape:
    """Records expert choices on the first pass and replays them on later passes.

    Selection is piecewise constant in the parameters; replaying it keeps a
    finite-difference probe on the same smooth piece as the analytic gradient.
    """

    def __init__(self):
        self.choices: list[torch.Tensor] = []
        self.recorded = False
        self._i = 0

    @contextmanager
    def use(self):
        prev = getattr(_TAPE, "tape", None)
        _TAPE.tape = self
        self._i = 0
        try:
            yield self
        finally:
            _TAPE.tape = prev
            self.recorded = True

    def step(self, chosen: torch.Tensor) -> torch.Tensor:
        if not self.recorded:
            self.choices.append(chosen)
            return chosen
        out = self.choices[self._i]
        self._i += 1
        return out


_TAPE = threading.local()


def ec_route(h: torch.Tensor, router: torch.Tensor, capacity_factor: float):
    """Scores (G, n, E) and per-expert choices (G, k, E); ties go to the lower token index."""
    G, n, _ = h.shape
    E = router.shape[1]
    k = ec_capacity(n, E, capacity_factor)
    scores = torch.softmax(matmul(h, router, "router"), dim=-1)
    order = torch.sort(scores.detach(), dim=1, descending=True, stable=True).indices
    chosen = order[:, :k, :]
    tape = getattr(_TAPE, "tape", None)
    return scores, chosen if tape is None else tape.step(chosen)


def moe_ec_mix(
    h: torch.Tensor,
    router: torch.Tensor,
    experts: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
    capacity_factor: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Expert mixture only, without the residual; ``h`` is (G, n, D).

    Returns (mix, scores, chosen).
    """
    G, n, D = h.shape
    scores, chosen = ec_route(h, router, capacity_factor)
    mix = torch.zeros_like(h)
    for e, (w1, w3, w2) in enumerate(experts):
        sel = chosen[:, :, e]
        sel_d = sel.unsqueeze(-1).expand(-1, -1, D)
        out_e = swiglu_ffn(h.gather(1, sel_d), w1, w3, w2)
        gate = scores[:, :, e].gather(1, sel).unsqueeze(-1)
        mix = mix.scatter_add(1, sel_d, out_e * gate)
    return mix, scores, chosen


def moe_ec_ffn(
    h: torch.Tensor,
    router: torch.Tensor,
    experts: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
    capacity_factor: float = 1.0,
) -> tuple[torch.Tensor, RoutingRecord]:
    """``h[i] + sum over experts that chose i of score[i, e] * expert_e(h[i])`` for h of shape (n, D)."""
    mix, scores, chosen = moe_ec_mix(h.unsqueeze(0), router, experts, capacity_factor)
    sel = chosen[0].T.numpy().copy()
    s = scores[0].detach().numpy()
    gates = np.stack([s[sel[e], e] for e in range(sel.shape[0])])
    return h + mix[0], RoutingRecord(sel, gates, h.shape[0])


def _experts(params: Params, prefix: str) -> list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    out = []
    e = 0
    while f"{prefix}expert.{e}.ffn_w1" in params:
        p = f"{prefix}expert.{e}."
        out.append((params[p + "ffn_w1"], params[p + "ffn_w3"], params[p + "ffn_w2"]))
        e += 1
    return out


def moe_over_rows(rows: torch.Tensor, seq_of_row: torch.Tensor, params: Params, prefix: str,
                  capacity_factor: float) -> torch.Tensor:
    """Route each sequence's rows separately. ``rows`` must be grouped by sequence in order."""
    router = params[prefix + "router"]
    experts = _experts(params, prefix)
    counts = torch.bincount(seq_of_row)
    counts = counts[counts > 0]
    if bool((counts == counts[0]).all()):
        g = rows.view(counts.numel(), int(counts[0]), rows.shape[-1])
        return moe_ec_mix(g, router, experts, capacity_factor)[0].reshape(rows.shape)
    parts = []
    for chunk in torch.split(rows, counts.tolist()):
        parts.append(moe_ec_mix(chunk.unsqueeze(0), router, experts, capacity_factor)[0][0])
    return torch.cat(parts)


# ---------------------------------------------------------------------------
# Grouping


@dataclass
class TowerGroups:
    """Flat token indices per tower and the permutation that restores token order."""

    index: list[torch.Tensor]
    inverse: torch.Tensor
    seq_len: int

    @property
    def n_towers(self) -> int:
        return len(self.index)


def tower_groups(tower_of: torch.Tensor, n_towers: int) -> TowerGroups:
    """``tower_of`` is (B, n) or (n,)."""
    n = tower_of.shape[-1]
    flat = tower_of.reshape(-1)
    index = [torch.nonzero(flat == t).flatten() for t in range(n_towers)]
    perm = torch.cat(index)
    inverse = torch.empty_like(perm)
    inverse[perm] = torch.arange(perm.numel())
    return TowerGroups(index, inverse, n)


def _grouped(groups: TowerGroups, fn: Callable, *inputs: torch.Tensor):
    """Apply ``fn(tower, idx, *rows)`` to each non-empty tower group and restore token order."""
    outs = []
    for t, idx in enumerate(groups.index):
        if idx.numel() == 0:
            continue
        res = fn(t, idx, *(x.index_select(0, idx) for x in inputs))
        outs.append(res if isinstance(res, tuple) else (res,))
    restored = tuple(torch.cat(parts)[groups.inverse] for parts in zip(*outs))
    return restored if len(restored) > 1 else restored[0]


# ---------------------------------------------------------------------------
# Layers


def _allowed(mask: AttnMask | torch.Tensor) -> torch.Tensor:
    return mask.tensor() if isinstance(mask, AttnMask) else mask


def dense_layer_forward(
    x: torch.Tensor,
    params: Params,
    mask: AttnMask | torch.Tensor,
    *,
    n_heads: int,
    norm: str = "rmsnorm",
    norm_order: str = "post",
    norm_eps: float = 1e-6,
    capacity_factor: float = 1.0,
) -> torch.Tensor:
    """One dense layer on (n, D) or (B, n, D); an expert-choice FFN is used when ``params`` has a router."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    B, n, D = x.shape
    p = lambda role: params[f"tower.0.{role}"]  # noqa: E731
    flat = x.reshape(B * n, D)
    a_in = normalize(norm, flat, p("ln_attn"), norm_eps) if norm_order == "pre" else flat
    q = matmul(a_in, p("wq"), "attn_proj")
    k = matmul(a_in, p("wk"), "attn_proj")
    v = matmul(a_in, p("wv"), "attn_proj")
    a = attention_core(q.view(B, n, D), k.view(B, n, D), v.view(B, n, D), _allowed(mask), n_heads)
    o = matmul(a.reshape(B * n, D), p("wo"), "attn_proj")
    if norm_order == "post":
        h = flat + normalize(norm, o, p("ln_attn"), norm_eps)
        f_in = h
    else:
        h = flat + o
        f_in = normalize(norm, h, p("ln_ffn"), norm_eps)
    if "router" in params:
        f = moe_ec_mix(f_in.view(B, n, D), params["router"], _experts(params, ""), capacity_factor)[0]
        f = f.reshape(B * n, D)
    else:
        f = swiglu_ffn(f_in, p("ffn_w1"), p("ffn_w3"), p("ffn_w2"))
    out = h + normalize(norm, f, p("ln_ffn"), norm_eps) if norm_order == "post" else h + f
    out = out.view(B, n, D)
    return out[0] if squeeze else out


def mot_layer_forward(
    x: torch.Tensor,
    modality_of: torch.Tensor | np.ndarray,
    tower_map: TowerMap,
    params: Params,
    mask: AttnMask | torch.Tensor,
    variant: LayerVariant,
    *,
    n_heads: int,
    norm: str = "rmsnorm",
    norm_order: str = "post",
    norm_eps: float = 1e-6,
    capacity_factor: float = 1.0,
    groups: TowerGroups | None = None,
) -> torch.Tensor:
    """MoT layer: tokens grouped by tower for every untied role, one global attention over all tokens.

    Tied roles use the single ``tower.0`` tensor. Output order matches input order.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    B, n, D = x.shape
    if groups is None:
        mod = torch.as_tensor(np.asarray(modality_of)).reshape(B, n) if not torch.is_tensor(modality_of) \
            else modality_of.reshape(B, n)
        groups = tower_groups(tower_map.lookup(mod), tower_map.n_towers)
    flat = x.reshape(B * n, D)
    seq_of_flat = torch.arange(B * n) // n

    def w(role: str, t: int) -> torch.Tensor:
        return params[f"tower.{variant.role_tower(role, t)}.{role}"]

    def nrm(role: str, t: int, rows: torch.Tensor) -> torch.Tensor:
        return normalize(norm, rows, w(role, t), norm_eps)

    # attention input (pre-norm order normalizes here)
    if norm_order == "pre":
        if variant.untie_ln:
            a_in = _grouped(groups, lambda t, idx, rows: nrm("ln_attn", t, rows), flat)
        else:
            a_in = nrm("ln_attn", 0, flat)
    else:
        a_in = flat

    def qkv(t, idx, rows):
        return (matmul(rows, w("wq", t), "attn_proj"),
                matmul(rows, w("wk", t), "attn_proj"),
                matmul(rows, w("wv", t), "attn_proj"))

    if variant.untie_qkv:
        q, k, v = _grouped(groups, qkv, a_in)
    else:
        q, k, v = qkv(0, None, a_in)
    a = attention_core(q.view(B, n, D), k.view(B, n, D), v.view(B, n, D), _allowed(mask), n_heads)
    a = a.reshape(B * n, D)

    def ffn(t: int, idx, rows: torch.Tensor) -> torch.Tensor:
        ft = variant.role_tower("ffn", t)
        if ft in variant.moe_towers:
            prefix = "" if variant.kind == "dense" else f"tower.{ft}."
            seq = seq_of_flat if idx is None else seq_of_flat[idx]
            return moe_over_rows(rows, seq, params, prefix, capacity_factor)
        p = f"tower.{ft}."
        return swiglu_ffn(rows, params[p + "ffn_w1"], params[p + "ffn_w3"], params[p + "ffn_w2"])

    def block(t, idx, x_rows, a_rows):
        o = matmul(a_rows, w("wo", t), "attn_proj")
        if norm_order == "post":
            h = x_rows + nrm("ln_attn", t, o)
            return h + nrm("ln_ffn", t, ffn(t, idx, h))
        h = x_rows + o
        return h + ffn(t, idx, nrm("ln_ffn", t, h))

    if variant.untie_o or variant.untie_ln or variant.untie_ffn:
        out = _grouped(groups, block, flat, a)
    else:
        out = block(0, None, flat, a)
    out = out.view(B, n, D)
    return out[0] if squeeze else out
