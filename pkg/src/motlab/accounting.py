"""Parameter counts (closed form and by enumeration), instrumented MAC counts and parameter-to-FLOPs ratios."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .core import MixedSequence, ModelConfig, ObjectiveMode, Sparsity, check_config, param_shapes
from .numerics import mac_counter

GROUPS = ("embed", "pos_embed", "patch_proj", "time_embed", "attn", "norm", "ffn", "router", "head")


@dataclass
class CostReport:
    params_total: int
    params_by_group: dict[str, int]
    macs_forward: int
    n: int
    macs_forward_per_token: int | float
    macs_by_tag: dict[str, int]
    ppf: float
    deltas: dict[str, int] = field(default_factory=dict)
    label: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CostReport":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# Closed form


def _untied(s: Sparsity) -> tuple[bool, bool, bool, bool]:
    """(qkv, o, ln, ffn) untied per tower."""
    full = s in (Sparsity.MOT_FULL, Sparsity.HYBRID)
    return (
        full or s is Sparsity.MOT_FFN_QKV,
        full,
        full,
        full or s in (Sparsity.MOT_FFN_ONLY, Sparsity.MOT_FFN_QKV),
    )


def base_layer_params(D: int, H: int, include_norms: bool = True) -> int:
    return 4 * D * D + 3 * D * H + (2 * D if include_norms else 0)


def mot_delta_per_layer(D: int, H: int, K: int, sparsity: Sparsity | str, include_norms: bool = True) -> int:
    """Extra parameters per layer from untying over K towers."""
    s = Sparsity(sparsity)
    if s in (Sparsity.MOT_FULL, Sparsity.HYBRID):
        return (K - 1) * base_layer_params(D, H, include_norms)
    if s is Sparsity.MOT_FFN_ONLY:
        return (K - 1) * 3 * D * H
    if s is Sparsity.MOT_FFN_QKV:
        return (K - 1) * (3 * D * H + 3 * D * D)
    return 0


def moe_delta_per_layer(D: int, H: int, E: int) -> int:
    """Extra parameters per layer when one FFN becomes E experts plus a router."""
    return (E - 1) * 3 * D * H + D * E


def _outer_groups(cfg: ModelConfig) -> dict[str, int]:
    D = cfg.D
    g = dict.fromkeys(GROUPS, 0)
    g["embed"] = sum(cfg.vocab_sizes[m.id] * D for m in cfg.discrete_modalities)
    g["pos_embed"] = cfg.seq_len * D
    if cfg.objective_mode is ObjectiveMode.TRANSFUSION:
        g["patch_proj"] = 2 * cfg.latent_dim * D
        g["time_embed"] = D * D
    g["norm"] = D  # final norm
    g["head"] = len(cfg.discrete_modalities) * D * cfg.total_vocab
    return g


def count_params(cfg: ModelConfig) -> dict:
    """Closed-form counts: ``{"params_total", "params_by_group", "deltas"}``."""
    check_config(cfg)
    D, H, K, E, L = cfg.D, cfg.H, cfg.K, cfg.moe_experts, cfg.n_layers
    s = cfg.sparsity
    qkv, o, ln, ffn = _untied(s)
    kq, ko, kl, kf = (K if u else 1 for u in (qkv, o, ln, ffn))
    g = _outer_groups(cfg)
    g["attn"] = L * (3 * kq + ko) * D * D
    g["norm"] += L * 2 * D * kl
    g["ffn"] = L * kf * 3 * D * H
    moe = s in (Sparsity.MOE, Sparsity.HYBRID)
    if moe:
        g["ffn"] += L * (E - 1) * 3 * D * H
        g["router"] = L * D * E
    deltas = {
        "mot_added": L * mot_delta_per_layer(D, H, K, s),
        "moe_added": L * moe_delta_per_layer(D, H, E) if moe else 0,
    }
    total = sum(g.values())
    assert total == sum(_outer_groups(cfg).values()) + L * base_layer_params(D, H) + sum(deltas.values())
    return {"params_total": total, "params_by_group": g, "deltas": deltas}


def group_of(name: str) -> str:
    if name.startswith("embed."):
        return "embed"
    if name.startswith("head."):
        return "head"
    if name in ("pos_embed", "time_embed"):
        return name
    if name.startswith("patch_proj"):
        return "patch_proj"
    if name == "final_norm" or name.endswith(("ln_attn", "ln_ffn")):
        return "norm"
    if name.endswith(("wq", "wk", "wv", "wo")):
        return "attn"
    if name.endswith("router"):
        return "router"
    if ".ffn_" in name:
        return "ffn"
    raise KeyError(f"no parameter group for {name!r}")


def enumerate_params(cfg: ModelConfig) -> dict[str, int]:
    """Groups counted tensor by tensor from the canonical shape table."""
    g = dict.fromkeys(GROUPS, 0)
    for name, shape in param_shapes(cfg).items():
        g[group_of(name)] += int(np.prod(shape))
    return g


# ---------------------------------------------------------------------------
# Instrumented MACs


def probe_sequence(cfg: ModelConfig, n: int) -> MixedSequence:
    """Contiguous per-modality blocks, text first; the text block length is a multiple of the
    expert count so expert-choice capacity covers every text token."""
    M = len(cfg.modalities)
    sizes = [n // M] * M
    sizes[0] += n - sum(sizes)
    text = cfg.modality("text").id
    order = [text] + [m.id for m in cfg.modalities if m.id != text]
    E = cfg.moe_experts
    if M > 1 and cfg.sparsity in (Sparsity.MOE, Sparsity.HYBRID):
        spill = sizes[0] % E
        sizes[0] -= spill
        sizes[1] += spill
    modality = np.concatenate([np.full(sz, mid, dtype=np.int64) for mid, sz in zip(order, sizes)])
    offsets = cfg.vocab_offsets
    ids = np.array([offsets.get(int(m), -1) for m in modality], dtype=np.int64)
    spans: list[tuple[int, int, int, int]] = []
    latents = None
    cont = cfg.continuous_modality
    if cont is not None:
        idx = np.nonzero(modality == cont.id)[0]
        if len(idx):
            start, end = int(idx[0]), int(idx[-1]) + 1
            spans.append((start, end, start - 1, end))
        latents = np.zeros((n, cfg.latent_dim))
    return MixedSequence(modality, ids, latents, tuple(spans), np.ones(n, dtype=bool))


def mac_breakdown(cfg: ModelConfig, n: int | None = None, seed: int = 0) -> dict[str, int]:
    """MACs per tag for one forward pass over a probe sequence of length ``n``."""
    from .model import ModelState, collate, forward

    n = cfg.seq_len if n is None else n
    if n > cfg.seq_len:
        cfg = cfg.with_(seq_len=n)
    state = ModelState.create(cfg, seed)
    batch = collate([probe_sequence(cfg, n)], cfg)
    t_pos = batch.is_latent.long() if state.transfusion else None
    with torch.no_grad(), mac_counter() as c:
        forward(batch, state, batch.latents, t_pos)
    return dict(c.by_tag)


def count_macs(cfg: ModelConfig, n: int | None = None) -> int:
    return sum(mac_breakdown(cfg, n).values())


def cost_report(cfg: ModelConfig, n: int | None = None, label: str = "") -> CostReport:
    n = cfg.seq_len if n is None else n
    p = count_params(cfg)
    tags = mac_breakdown(cfg, n)
    total = sum(tags.values())
    per_tok = total // n if total % n == 0 else total / n
    return CostReport(
        params_total=p["params_total"],
        params_by_group=p["params_by_group"],
        macs_forward=total,
        n=n,
        macs_forward_per_token=per_tok,
        macs_by_tag=tags,
        ppf=p["params_total"] / per_tok,
        deltas=p["deltas"],
        label=label or cfg.sparsity.value,
    )


@dataclass
class PpfTable:
    reports: list[CostReport]

    def rows(self) -> list[dict]:
        return [
            {"label": r.label, "params_total": r.params_total, "macs_per_token": r.macs_forward_per_token,
             "ppf": r.ppf, **r.deltas}
            for r in self.reports
        ]

    def lowest_ppf(self) -> CostReport:
        return min(self.reports, key=lambda r: r.ppf)

    def compare(self, a: int, b: int) -> float:
        """Sign tells which report has the lower PpF: negative means ``a`` is lower."""
        return self.reports[a].ppf - self.reports[b].ppf


def ppf_compare(cfgs: Sequence[ModelConfig], n: int | None = None,
                labels: Sequence[str] | None = None) -> PpfTable:
    if len(cfgs) < 2:
        raise ValueError("ppf_compare needs at least two configs")
    labels = list(labels) if labels else [""] * len(cfgs)
    return PpfTable([cost_report(c, n, lab) for c, lab in zip(cfgs, labels)])
