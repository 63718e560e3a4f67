"""Attention masks (causal / hybrid) and multi-head global self-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import AttentionMode, MixedSequence
from .numerics import ShapeError, masked_softmax, matmul


@dataclass(frozen=True)
class AttnMask:
    """``allowed[i, j]``: query i may attend key j."""

    allowed: np.ndarray

    @property
    def n(self) -> int:
        return self.allowed.shape[0]

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.allowed)


def causal_allowed(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _check_spans(n: int, spans: Sequence[Sequence[int]]) -> list[tuple[int, int]]:
    out = sorted((int(s[0]), int(s[1])) for s in spans)
    prev_end = 0
    for start, end in out:
        if not 0 <= start < end <= n:
            raise ValueError(f"image span ({start}, {end}) out of range for n={n}")
        if start < prev_end:
            raise ValueError(f"overlapping image spans near ({start}, {end})")
        prev_end = end
    return out


def mask_from_spans(mode: AttentionMode | str, n: int, spans: Sequence[Sequence[int]] = ()) -> AttnMask:
    mode = AttentionMode(mode)
    allowed = causal_allowed(n)
    if mode is AttentionMode.HYBRID:
        for start, end in _check_spans(n, spans):
            allowed[start:end, start:end] = True
    return AttnMask(allowed)


def build_mask(mode: AttentionMode | str, seq: MixedSequence) -> AttnMask:
    """Causal everywhere; in hybrid mode additionally bidirectional inside each image span."""
    return mask_from_spans(mode, seq.length, seq.image_spans)


def split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    B, n, D = x.shape
    return x.view(B, n, n_heads, D // n_heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    B, h, n, dk = x.shape
    return x.transpose(1, 2).reshape(B, n, h * dk)


def attention_core(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, allowed: torch.Tensor, n_heads: int) -> torch.Tensor:
    """Batched path: q, k, v of shape (B, n, D), ``allowed`` (B, n, n) or (n, n)."""
    D = q.shape[-1]
    dk = D // n_heads
    qh, kh, vh = (split_heads(t, n_heads) for t in (q, k, v))
    scores = matmul(qh, kh.transpose(-1, -2), tag="attn_core") / math.sqrt(dk)
    if allowed.dim() == 3:
        allowed = allowed.unsqueeze(1)
    w = masked_softmax(scores, allowed)
    return merge_heads(matmul(w, vh, tag="attn_core"))


def global_attention(q, k, v, mask: AttnMask | torch.Tensor, n_heads: int) -> torch.Tensor:
    """softmax(QK^T / sqrt(d_k)) V per head, heads concatenated.

    Accepts (n, D) or (B, n, D) inputs. Each softmax row normalizes over every
    attendable key irrespective of its modality.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"global_attention: shape mismatch {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    D = q.shape[-1]
    if D % n_heads:
        raise ShapeError(f"global_attention: n_heads={n_heads} does not divide D={D}")
    allowed = mask.tensor() if isinstance(mask, AttnMask) else mask
    squeeze = q.dim() == 2
    if squeeze:
        q, k, v = q.unsqueeze(0), k.unsqueeze(0), v.unsqueeze(0)
    if allowed.shape[-1] != q.shape[1]:
        raise ShapeError(f"global_attention: mask {tuple(allowed.shape)} vs sequence {tuple(q.shape)}")
    out = attention_core(q, k, v, allowed, n_heads)
    return out.squeeze(0) if squeeze else out
