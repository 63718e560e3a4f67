"""Shared domain types: modalities, tower maps, configs, sequences and parameter stores."""

from __future__ import annotations

import enum
import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch


class ConfigError(ValueError):
    """Raised for invalid configurations (CLI exit code 2)."""


class NumericError(RuntimeError):
    """Raised for non-finite losses or gradients (CLI exit code 3)."""


class ModalityKind(str, enum.Enum):
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


class Sparsity(str, enum.Enum):
    DENSE = "dense"
    MOT_FULL = "mot_full"
    MOT_FFN_ONLY = "mot_ffn_only"
    MOT_FFN_QKV = "mot_ffn_qkv"
    MOE = "moe"
    HYBRID = "hybrid_mot_text_moe"


class ObjectiveMode(str, enum.Enum):
    CHAMELEON = "chameleon"
    TRANSFUSION = "transfusion"


class AttentionMode(str, enum.Enum):
    CAUSAL = "causal"
    HYBRID = "hybrid"


# Reserved ids at the top of the text vocabulary, counted down from V-1.
N_TEXT_SPECIALS = 4


def text_specials(text_vocab: int) -> dict[str, int]:
    return {
        "null": text_vocab - 4,
        "pad": text_vocab - 3,
        "boi": text_vocab - 2,
        "eoi": text_vocab - 1,
    }


@dataclass(frozen=True)
class Modality:
    id: int
    name: str
    kind: ModalityKind = ModalityKind.DISCRETE

    @property
    def discrete(self) -> bool:
        return self.kind is ModalityKind.DISCRETE


def make_modalities(names: Sequence[str], continuous: Iterable[str] = ()) -> tuple[Modality, ...]:
    cont = set(continuous)
    return tuple(
        Modality(i, name, ModalityKind.CONTINUOUS if name in cont else ModalityKind.DISCRETE)
        for i, name in enumerate(names)
    )


@dataclass(frozen=True)
class TowerMap:
    """Assignment of modality ids to tower ids; ``assignment[m]`` is the tower of modality m."""

    assignment: tuple[int, ...]

    @property
    def n_towers(self) -> int:
        return max(self.assignment) + 1 if self.assignment else 0

    def tower_of(self, modality_id: int) -> int:
        if not 0 <= modality_id < len(self.assignment):
            raise ConfigError(f"modality id {modality_id} not in tower map {self.assignment}")
        return self.assignment[modality_id]

    def lookup(self, modality_of: torch.Tensor) -> torch.Tensor:
        """Vectorised tower lookup for a tensor of modality ids."""
        if modality_of.numel() and (
            int(modality_of.min()) < 0 or int(modality_of.max()) >= len(self.assignment)
        ):
            bad = int(modality_of.max()) if int(modality_of.max()) >= len(self.assignment) else int(modality_of.min())
            raise ConfigError(f"modality id {bad} not in tower map {self.assignment}")
        table = torch.tensor(self.assignment, dtype=torch.long)
        return table[modality_of]

    def members(self, tower: int) -> list[int]:
        return [m for m, t in enumerate(self.assignment) if t == tower]

    def violations(self, n_modalities: int) -> list[str]:
        out = []
        if len(self.assignment) != n_modalities:
            out.append(f"tower map covers {len(self.assignment)} modalities, config has {n_modalities}")
        if self.assignment:
            used = set(self.assignment)
            if used != set(range(self.n_towers)):
                out.append(f"tower map {self.assignment} is not surjective onto 0..K-1")
        else:
            out.append("tower map is empty")
        return out


TOWER_MODES = ("dense", "full_mot", "loo_image", "loo_text", "loo_speech")


def build_tower_map(mode: str, modalities: Sequence[Modality]) -> TowerMap:
    """Tower assignment for the dense, full-MoT and leave-one-out layouts.

    ``loo_<name>`` isolates the named modality in tower 0 and merges the other two
    into tower 1; it needs exactly three modalities.
    """
    if not modalities:
        raise ConfigError("build_tower_map needs at least one modality")
    n = len(modalities)
    if mode == "dense":
        return TowerMap((0,) * n)
    if mode == "full_mot":
        return TowerMap(tuple(range(n)))
    if mode.startswith("loo_") and mode in TOWER_MODES:
        target = mode[len("loo_"):]
        names = [m.name for m in modalities]
        if target not in names:
            raise ConfigError(f"{mode}: modality {target!r} not among {names}")
        if n != 3:
            raise ConfigError(f"{mode} requires exactly 3 modalities, got {n}")
        return TowerMap(tuple(0 if m.name == target else 1 for m in modalities))
    raise ConfigError(f"unknown tower map mode {mode!r}")


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    schedule: str = "cosine"
    s_offset: float = 0.008
    sigma_mode: str = "ddpm_beta"
    lambda_coeff: float = 5.0
    cfg_scale: float = 0.0
    inference_steps: int = 250

    def violations(self) -> list[str]:
        out = []
        if self.T < 1:
            out.append("diffusion T must be >= 1")
        if self.lambda_coeff < 0:
            out.append("diffusion lambda must be >= 0")
        if self.schedule != "cosine":
            out.append(f"unknown noise schedule {self.schedule!r}")
        if self.sigma_mode not in ("ddpm_beta", "zero"):
            out.append(f"unknown sigma_mode {self.sigma_mode!r}")
        if self.cfg_scale < 0:
            out.append("cfg_scale must be >= 0")
        if self.inference_steps < 1:
            out.append("inference_steps must be >= 1")
        if self.s_offset <= 0:
            out.append("s_offset must be > 0")
        return out


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    modalities: tuple[Modality, ...]
    vocab_sizes: Mapping[int, int]
    tower_map: TowerMap
    ffn_hidden: int | None = None
    latent_dim: int = 4
    seq_len: int = 64
    sparsity: Sparsity = Sparsity.DENSE
    moe_experts: int = 4
    moe_capacity_factor: float = 1.0
    objective_mode: ObjectiveMode = ObjectiveMode.CHAMELEON
    attention_mode: AttentionMode = AttentionMode.CAUSAL
    diffusion: DiffusionConfig | None = None
    seed: int = 0
    norm: str = "rmsnorm"
    norm_order: str = "post"
    norm_eps: float = 1e-6
    init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "sparsity", Sparsity(self.sparsity))
        object.__setattr__(self, "objective_mode", ObjectiveMode(self.objective_mode))
        object.__setattr__(self, "attention_mode", AttentionMode(self.attention_mode))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "vocab_sizes", {int(k): int(v) for k, v in dict(self.vocab_sizes).items()})

    @property
    def D(self) -> int:
        return self.d_model

    @property
    def H(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else self.d_model

    @property
    def K(self) -> int:
        return self.tower_map.n_towers

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    @property
    def discrete_modalities(self) -> list[Modality]:
        return [m for m in self.modalities if m.discrete]

    @property
    def continuous_modality(self) -> Modality | None:
        cont = [m for m in self.modalities if not m.discrete]
        return cont[0] if cont else None

    def modality(self, name: str) -> Modality:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ConfigError(f"no modality named {name!r}")

    def has_modality(self, name: str) -> bool:
        return any(m.name == name for m in self.modalities)

    @property
    def vocab_offsets(self) -> dict[int, int]:
        """Start of each discrete modality's range in the global id space."""
        offsets, start = {}, 0
        for m in self.discrete_modalities:
            offsets[m.id] = start
            start += self.vocab_sizes[m.id]
        return offsets

    @property
    def total_vocab(self) -> int:
        return sum(self.vocab_sizes[m.id] for m in self.discrete_modalities)

    @property
    def text_vocab(self) -> int:
        return self.vocab_sizes[self.modality("text").id]

    @property
    def specials(self) -> dict[str, int]:
        return text_specials(self.text_vocab)

    @property
    def moe_tower_ids(self) -> tuple[int, ...]:
        """Towers whose FFN slot is an expert-choice MoE."""
        if self.sparsity is Sparsity.MOE:
            return (0,)
        if self.sparsity is Sparsity.HYBRID:
            return (self.tower_map.tower_of(self.modality("text").id),)
        return ()

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def validate_config(cfg: ModelConfig) -> list[str]:
    """Return every invariant violation of ``cfg``; an empty list means valid."""
    v: list[str] = []
    mods = cfg.modalities
    if not mods:
        return ["config has no modalities"]
    if [m.id for m in mods] != list(range(len(mods))):
        v.append("modality ids must be dense 0..M-1 in order")
    names = [m.name for m in mods]
    if len(set(names)) != len(names):
        v.append(f"modality names not unique: {names}")
    for label, val in (("d_model", cfg.d_model), ("n_layers", cfg.n_layers), ("n_heads", cfg.n_heads),
                       ("ffn_hidden", cfg.H), ("seq_len", cfg.seq_len)):
        if val < 1:
            v.append(f"{label} must be positive, got {val}")
    if cfg.n_heads >= 1 and cfg.d_model % cfg.n_heads:
        v.append(f"n_heads {cfg.n_heads} does not divide d_model {cfg.d_model}")
    v.extend(cfg.tower_map.violations(len(mods)))
    for m in mods:
        if m.discrete and cfg.vocab_sizes.get(m.id, 0) < 1:
            v.append(f"discrete modality {m.name!r} has no vocab size")
    if not cfg.has_modality("text"):
        v.append("a 'text' modality is required (it owns the BOI/EOI ids)")
    elif cfg.vocab_sizes.get(cfg.modality("text").id, 0) <= N_TEXT_SPECIALS:
        v.append(f"text vocab must exceed the {N_TEXT_SPECIALS} reserved ids")
    if cfg.sparsity is Sparsity.DENSE and cfg.K != 1:
        v.append("dense requires K=1")
    if cfg.sparsity is Sparsity.MOE and cfg.K != 1:
        v.append("moe requires K=1")
    if cfg.sparsity in (Sparsity.MOE, Sparsity.HYBRID):
        if cfg.moe_experts < 2:
            v.append("moe_experts must be >= 2")
        if cfg.moe_capacity_factor <= 0:
            v.append("moe_capacity_factor must be positive")
    if cfg.sparsity is Sparsity.HYBRID and not cfg.has_modality("text"):
        v.append("hybrid_mot_text_moe needs a text modality")
    n_cont = sum(not m.discrete for m in mods)
    if cfg.objective_mode is ObjectiveMode.TRANSFUSION:
        if n_cont != 1:
            v.append(f"transfusion requires exactly one continuous modality, found {n_cont}")
        if cfg.attention_mode is not AttentionMode.HYBRID:
            v.append("transfusion requires attention_mode=hybrid")
        if cfg.diffusion is None:
            v.append("transfusion requires a diffusion config")
        else:
            v.extend(cfg.diffusion.violations())
        if cfg.latent_dim < 1:
            v.append("latent_dim must be positive")
    else:
        if n_cont:
            v.append("chameleon requires all modalities discrete")
        if cfg.attention_mode is not AttentionMode.CAUSAL:
            v.append("chameleon requires attention_mode=causal")
    if cfg.norm not in ("rmsnorm", "layernorm"):
        v.append(f"unknown norm {cfg.norm!r}")
    if cfg.norm_order not in ("post", "pre"):
        v.append(f"unknown norm_order {cfg.norm_order!r}")
    if cfg.dtype not in ("float64", "float32"):
        v.append(f"unknown dtype {cfg.dtype!r}")
    return v


def check_config(cfg: ModelConfig) -> ModelConfig:
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


# ---------------------------------------------------------------------------
# Sequences


@dataclass(frozen=True)
class MixedSequence:
    """One interleaved token stream.

    ``discrete_ids[i]`` is a global token id, or -1 where position i carries a
    latent patch. ``latents`` has shape (n, latent_dim) and is zero wherever
    ``discrete_ids`` is populated. ``image_spans`` holds (start, end, boi, eoi)
    with ``end`` exclusive.
    """

    modality_of: np.ndarray
    discrete_ids: np.ndarray
    latents: np.ndarray | None = None
    image_spans: tuple[tuple[int, int, int, int], ...] = ()
    loss_mask: np.ndarray | None = None
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "modality_of", np.asarray(self.modality_of, dtype=np.int64))
        object.__setattr__(self, "discrete_ids", np.asarray(self.discrete_ids, dtype=np.int64))
        if self.loss_mask is None:
            object.__setattr__(self, "loss_mask", np.ones(len(self.modality_of), dtype=bool))
        else:
            object.__setattr__(self, "loss_mask", np.asarray(self.loss_mask, dtype=bool))
        if self.latents is not None:
            object.__setattr__(self, "latents", np.asarray(self.latents, dtype=np.float64))
        object.__setattr__(self, "image_spans", tuple(tuple(int(x) for x in s) for s in self.image_spans))

    @property
    def length(self) -> int:
        return len(self.modality_of)

    def __len__(self) -> int:
        return self.length

    @property
    def is_latent(self) -> np.ndarray:
        return self.discrete_ids < 0


def validate_sequence(seq: MixedSequence, cfg: ModelConfig) -> list[str]:
    v = []
    n = seq.length
    if len(seq.discrete_ids) != n or len(seq.loss_mask) != n:
        v.append("array lengths disagree")
        return v
    kinds = {m.id: m for m in cfg.modalities}
    for i in range(n):
        m = kinds.get(int(seq.modality_of[i]))
        if m is None:
            v.append(f"position {i}: unknown modality {seq.modality_of[i]}")
            continue
        if m.discrete == (seq.discrete_ids[i] < 0):
            v.append(f"position {i}: payload does not match {m.kind.value} modality {m.name!r}")
    if seq.is_latent.any():
        if seq.latents is None or seq.latents.shape != (n, cfg.latent_dim):
            v.append("latent positions present but latents array missing or misshapen")
    sp = cfg.specials if cfg.has_modality("text") else {}
    last_end = -1
    covered = np.zeros(n, dtype=bool)
    for s in sorted(seq.image_spans):
        start, end, boi, eoi = s
        if not (0 <= start < end <= n):
            v.append(f"span {s}: out of range")
            continue
        if start <= last_end - 1 or start < last_end:
            v.append(f"span {s}: overlaps previous span")
        last_end = end
        covered[start:end] = True
        if boi != start - 1 or eoi != end:
            v.append(f"span {s}: BOI/EOI must bracket the span")
        elif sp:
            if boi < 0 or seq.discrete_ids[boi] != sp["boi"]:
                v.append(f"span {s}: position {boi} is not BOI")
            if eoi >= n or seq.discrete_ids[eoi] != sp["eoi"]:
                v.append(f"span {s}: position {eoi} is not EOI")
        if len(set(seq.modality_of[start:end].tolist())) != 1:
            v.append(f"span {s}: modality not constant")
        if not seq.is_latent[start:end].all():
            v.append(f"span {s}: contains discrete positions")
    if (seq.is_latent & ~covered).any():
        v.append("latent positions outside any image span")
    return v


# ---------------------------------------------------------------------------
# Parameters


class ParamStore:
    """Ordered map of parameter name -> tensor.

    Names follow ``layer.<l>.tower.<k>.<role>``, ``layer.<l>.expert.<e>.ffn_*``,
    ``layer.<l>.router`` plus the shared ``embed.*``, ``head.*``, ``pos_embed``,
    ``final_norm``, ``patch_proj.*`` and ``time_embed`` entries.
    """

    def __init__(self, tensors: Mapping[str, torch.Tensor] | None = None):
        self.tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict(tensors or {})

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: torch.Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def layer(self, l: int) -> dict[str, torch.Tensor]:
        """The slice for layer ``l`` with the ``layer.<l>.`` prefix stripped."""
        prefix = f"layer.{l}."
        return {k[len(prefix):]: t for k, t in self.tensors.items() if k.startswith(prefix)}

    def clone(self, requires_grad: bool | None = None) -> "ParamStore":
        out = ParamStore()
        for k, t in self.tensors.items():
            c = t.detach().clone()
            c.requires_grad_(t.requires_grad if requires_grad is None else requires_grad)
            out[k] = c
        return out

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            torch.equal(self[k], other[k]) for k in self.tensors
        )


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Name -> shape for every tensor the config owns, in canonical order."""
    D, H, K, E = cfg.D, cfg.H, cfg.K, cfg.moe_experts
    shapes: "OrderedDict[str, tuple[int, ...]]" = OrderedDict()
    for m in cfg.discrete_modalities:
        shapes[f"embed.{m.name}"] = (cfg.vocab_sizes[m.id], D)
    shapes["pos_embed"] = (cfg.seq_len, D)
    if cfg.objective_mode is ObjectiveMode.TRANSFUSION:
        shapes["patch_proj.in"] = (cfg.latent_dim, D)
        shapes["patch_proj.out"] = (D, cfg.latent_dim)
        shapes["time_embed"] = (D, D)

    s = cfg.sparsity
    untie_qkv = s in (Sparsity.MOT_FULL, Sparsity.MOT_FFN_QKV, Sparsity.HYBRID)
    untie_o = untie_ln = s in (Sparsity.MOT_FULL, Sparsity.HYBRID)
    untie_ffn = s in (Sparsity.MOT_FULL, Sparsity.MOT_FFN_ONLY, Sparsity.MOT_FFN_QKV, Sparsity.HYBRID)
    moe_towers = cfg.moe_tower_ids

    for l in range(cfg.n_layers):
        def towers(untied: bool) -> range:
            return range(K if untied else 1)

        for role in ("wq", "wk", "wv"):
            for k in towers(untie_qkv):
                shapes[f"layer.{l}.tower.{k}.{role}"] = (D, D)
        for k in towers(untie_o):
            shapes[f"layer.{l}.tower.{k}.wo"] = (D, D)
        for k in towers(untie_ln):
            shapes[f"layer.{l}.tower.{k}.ln_attn"] = (D,)
            shapes[f"layer.{l}.tower.{k}.ln_ffn"] = (D,)
        for k in towers(untie_ffn):
            if k in moe_towers:
                prefix = f"layer.{l}." if s is Sparsity.MOE else f"layer.{l}.tower.{k}."
                for e in range(E):
                    shapes[f"{prefix}expert.{e}.ffn_w1"] = (D, H)
                    shapes[f"{prefix}expert.{e}.ffn_w2"] = (H, D)
                    shapes[f"{prefix}expert.{e}.ffn_w3"] = (D, H)
                shapes[f"{prefix}router"] = (D, E)
            else:
                shapes[f"layer.{l}.tower.{k}.ffn_w1"] = (D, H)
                shapes[f"layer.{l}.tower.{k}.ffn_w2"] = (H, D)
                shapes[f"layer.{l}.tower.{k}.ffn_w3"] = (D, H)

    shapes["final_norm"] = (D,)
    V = cfg.total_vocab
    for m in cfg.discrete_modalities:
        shapes[f"head.{m.name}"] = (D, V)
    return shapes


def is_gain(name: str) -> bool:
    return name.endswith(("ln_attn", "ln_ffn")) or name == "final_norm"


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def init_params(cfg: ModelConfig, seed: int | None = None) -> ParamStore:
    """Truncated-normal init (std ``cfg.init_std``, cut at 2 std); norm gains start at 1.

    Every tensor draws from its own generator keyed by (seed, name), so a
    tensor's values do not depend on which other tensors exist.
    """
    check_config(cfg)
    seed = cfg.seed if seed is None else seed
    store = ParamStore()
    std = cfg.init_std
    for name, shape in param_shapes(cfg).items():
        t = torch.empty(shape, dtype=cfg.torch_dtype)
        if is_gain(name):
            t.fill_(1.0)
        else:
            gen = torch.Generator().manual_seed(derive_seed(seed, name))
            torch.nn.init.trunc_normal_(t, 0.0, std, -2 * std, 2 * std, generator=gen)
        t.requires_grad_(True)
        store[name] = t
    return store
