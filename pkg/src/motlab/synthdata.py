"""Deterministic synthetic multi-modal corpora.

Every draw comes from numpy's Philox counter-based generator keyed by a 64-bit
integer, so corpora are reproducible across runs and platforms. Each caption
opens with a class token; image (and speech) content is conditioned on that
class, so the modalities share information the model has to carry across
positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .core import (
    N_TEXT_SPECIALS,
    AttentionMode,
    ConfigError,
    DiffusionConfig,
    MixedSequence,
    ModelConfig,
    ObjectiveMode,
    Sparsity,
    build_tower_map,
    derive_seed,
    make_modalities,
    text_specials,
)


def make_rng(seed: int, stream: str | int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, f"stream:{stream}")))


@dataclass(frozen=True)
class SynthSpec:
    modalities: tuple[str, ...] = ("text", "image")
    text_vocab: int = 128
    image_vocab: int = 128
    speech_vocab: int = 128
    markov_order: int = 1
    caption_first_prob: float = 0.8
    modality_token_ratio: tuple[tuple[str, float], ...] | Mapping[str, float] | None = None
    image_patches: int = 16
    latent_classes: int = 8
    latent_dim: int = 4
    latent_noise_std: float = 0.1
    latent_scale: float = 1.0
    concentration: float = 0.1
    uncond_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        ratio = self.modality_token_ratio
        if ratio is None:
            ratio = {m: 1.0 for m in self.modalities}
        if isinstance(ratio, Mapping):
            ratio = tuple((k, float(v)) for k, v in ratio.items())
        object.__setattr__(self, "modality_token_ratio", tuple((str(k), float(v)) for k, v in ratio))
        problems = self.violations()
        if problems:
            raise ConfigError("; ".join(problems))

    def ratio(self, name: str) -> float:
        return dict(self.modality_token_ratio).get(name, 1.0)

    def violations(self) -> list[str]:
        v = []
        if "text" not in self.modalities or "image" not in self.modalities:
            v.append("synthetic corpora need text and image modalities")
        if set(self.modalities) - {"text", "image", "speech"}:
            v.append(f"unknown modality in {self.modalities}")
        for p in ("caption_first_prob", "uncond_prob"):
            if not 0.0 <= getattr(self, p) <= 1.0:
                v.append(f"{p} must be in [0, 1]")
        if any(w <= 0 for _, w in self.modality_token_ratio):
            v.append("modality ratios must be positive")
        if self.markov_order != 1:
            v.append("only markov_order=1 is supported")
        if self.text_vocab < self.latent_classes + N_TEXT_SPECIALS + 2:
            v.append("text_vocab too small for class tokens, specials and words")
        if self.latent_noise_std < 0:
            v.append("latent_noise_std must be >= 0")
        if self.image_patches < 1 or self.latent_classes < 1 or self.latent_dim < 1:
            v.append("image_patches, latent_classes and latent_dim must be positive")
        return v

    # -- derived layout

    def vocab_of(self, name: str) -> int:
        return {"text": self.text_vocab, "image": self.image_vocab, "speech": self.speech_vocab}[name]

    @property
    def caption_len(self) -> int:
        """Caption tokens (class token included); BOI/EOI count as text toward the ratio."""
        return max(1, int(round(self.image_patches * self.ratio("text") / self.ratio("image"))) - 2)

    @property
    def speech_len(self) -> int:
        return max(1, int(round(self.image_patches * self.ratio("speech") / self.ratio("image"))))

    @property
    def doc_len(self) -> int:
        n = self.caption_len + 2 + self.image_patches
        if "speech" in self.modalities:
            n += self.speech_len
        return n

    @property
    def n_words(self) -> int:
        return self.text_vocab - self.latent_classes - N_TEXT_SPECIALS


@dataclass(frozen=True)
class SynthSource:
    """Fixed tables drawn once from ``spec.seed``."""

    spec: SynthSpec
    text_trans: np.ndarray  # (C + W, W): rows for class tokens then words
    token_probs: dict  # name -> (C, V) class-conditioned categorical
    means: np.ndarray  # (C, latent_dim)
    offsets: dict  # modality name -> global id offset
    cdfs: dict = field(default_factory=dict)

    @property
    def specials(self) -> dict[str, int]:
        return text_specials(self.spec.text_vocab)

    def modality_id(self, name: str) -> int:
        return self.spec.modalities.index(name)

    def word_stationary(self) -> np.ndarray:
        P = self.text_trans[self.spec.latent_classes:]
        vals, vecs = np.linalg.eig(P.T)
        v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        v = np.abs(v)
        return v / v.sum()

    def unigram_entropy(self) -> float:
        """Entropy (nats) of the word chain's stationary distribution."""
        pi = self.word_stationary()
        pi = pi[pi > 0]
        return float(-(pi * np.log(pi)).sum())

    def nearest_class(self, patches: np.ndarray) -> np.ndarray:
        d = ((patches[:, None, :] - self.means[None, :, :]) ** 2).sum(-1)
        return d.argmin(axis=1)


def _class_means(C: int, dim: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    if C <= 2 * dim:
        verts = np.concatenate([np.eye(dim), -np.eye(dim)])[:C]
    else:
        verts = []
        while len(verts) < C:
            p = rng.standard_normal(dim)
            p /= np.linalg.norm(p)
            if all(np.linalg.norm(p - q) > 0.5 for q in verts):
                verts.append(p)
        verts = np.array(verts)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    return scale * verts[rng.permutation(C)] @ q.T


@lru_cache(maxsize=32)
def build_source(spec: SynthSpec) -> SynthSource:
    rng = make_rng(spec.seed, "tables")
    C, W = spec.latent_classes, spec.n_words
    alpha = spec.concentration
    text_trans = rng.dirichlet(np.full(W, alpha), size=C + W)
    probs = {}
    for name in spec.modalities:
        if name == "text":
            continue
        probs[name] = rng.dirichlet(np.full(spec.vocab_of(name), alpha), size=C)
    means = _class_means(C, spec.latent_dim, spec.latent_scale, rng)
    offsets, start = {}, 0
    for name in spec.modalities:
        offsets[name] = start
        start += spec.vocab_of(name)
    cdfs = {"text": np.cumsum(text_trans, axis=-1)}
    for name in probs:
        cdfs[name] = np.cumsum(probs[name], axis=-1)
    return SynthSource(spec, text_trans, probs, means, offsets, cdfs)


# ---------------------------------------------------------------------------
# Documents and packing


def _draw(cdf: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


def _caption(src: SynthSource, c: int, rng: np.random.Generator) -> list[int]:
    spec = src.spec
    C = spec.latent_classes
    cdf = src.cdfs["text"]
    out = [c]
    state = c
    for u in rng.random(spec.caption_len - 1):
        state = C + _draw(cdf[state], u)
        out.append(state)
    return out


def _block(src: SynthSource, name: str, c: int, length: int, rng: np.random.Generator) -> list[int]:
    off = src.offsets[name]
    cdf = src.cdfs[name][c]
    return [off + _draw(cdf, u) for u in rng.random(length)]


Entry = tuple  # (modality id, token id or -1, latent vector or None)


def _chameleon_doc(src: SynthSource, rng: np.random.Generator) -> list[Entry]:
    spec = src.spec
    sp = src.specials
    c = int(rng.integers(spec.latent_classes))
    t_id, i_id = src.modality_id("text"), src.modality_id("image")
    caption = [(t_id, tok, None) for tok in _caption(src, c, rng)]
    image = [(t_id, sp["boi"], None)]
    image += [(i_id, tok, None) for tok in _block(src, "image", c, spec.image_patches, rng)]
    image.append((t_id, sp["eoi"], None))
    media = image
    if "speech" in spec.modalities:
        s_id = src.modality_id("speech")
        media = media + [(s_id, tok, None) for tok in _block(src, "speech", c, spec.speech_len, rng)]
    if rng.random() < spec.caption_first_prob:
        return caption + media
    return media + caption


def _transfusion_doc(src: SynthSource, rng: np.random.Generator) -> list[Entry]:
    spec = src.spec
    sp = src.specials
    c = int(rng.integers(spec.latent_classes))
    t_id, i_id = src.modality_id("text"), src.modality_id("image")
    caption = [(t_id, tok, None) for tok in _caption(src, c, rng)]
    noise = rng.standard_normal((spec.image_patches, spec.latent_dim)) * spec.latent_noise_std
    patches = src.means[c] + noise
    image = [(t_id, sp["boi"], None)] + [(i_id, -1, p) for p in patches] + [(t_id, sp["eoi"], None)]
    if rng.random() < spec.caption_first_prob:
        if rng.random() < spec.uncond_prob:
            caption = [(t_id, sp["null"], None)]
        return caption + image
    return image + caption


def _pack(src: SynthSource, seq_len: int, rng: np.random.Generator, make_doc, latent_dim: int | None) -> MixedSequence:
    entries: list[Entry] = []
    while True:
        doc = make_doc(src, rng)
        if len(entries) + len(doc) > seq_len:
            break
        entries.extend(doc)
    n_real = len(entries)
    if n_real == 0:
        raise ConfigError(f"seq_len {seq_len} cannot fit one document of length {src.spec.doc_len}")
    t_id = src.modality_id("text")
    entries.extend([(t_id, src.specials["pad"], None)] * (seq_len - n_real))
    modality = np.array([e[0] for e in entries], dtype=np.int64)
    ids = np.array([e[1] for e in entries], dtype=np.int64)
    latents = None
    spans = []
    if latent_dim is not None:
        latents = np.zeros((seq_len, latent_dim))
        i = 0
        while i < seq_len:
            if ids[i] < 0:
                j = i
                while j < seq_len and ids[j] < 0:
                    latents[j] = entries[j][2]
                    j += 1
                spans.append((i, j, i - 1, j))
                i = j
            else:
                i += 1
    loss_mask = np.arange(seq_len) < n_real
    return MixedSequence(modality, ids, latents, tuple(spans), loss_mask)


def _check_fit(spec: SynthSpec, seq_len: int) -> None:
    if seq_len < spec.doc_len:
        raise ConfigError(f"seq_len {seq_len} too small for one caption+image document ({spec.doc_len})")


def gen_chameleon_batch(spec: SynthSpec, batch: int, seq_len: int, rng: np.random.Generator) -> list[MixedSequence]:
    """All-discrete sequences: packed caption / image [/ speech] documents, right-padded."""
    _check_fit(spec, seq_len)
    src = build_source(spec)
    return [_pack(src, seq_len, rng, _chameleon_doc, None) for _ in range(batch)]


def gen_transfusion_batch(spec: SynthSpec, batch: int, seq_len: int, rng: np.random.Generator) -> list[MixedSequence]:
    """Text tokens plus BOI / continuous patches / EOI spans, right-padded."""
    if "speech" in spec.modalities:
        raise ConfigError("transfusion corpora have exactly one continuous modality (image) and text")
    _check_fit(spec, seq_len)
    src = build_source(spec)
    return [_pack(src, seq_len, rng, _transfusion_doc, spec.latent_dim) for _ in range(batch)]


def gen_batch(spec: SynthSpec, mode: ObjectiveMode | str, batch: int, seq_len: int,
              rng: np.random.Generator) -> list[MixedSequence]:
    if ObjectiveMode(mode) is ObjectiveMode.TRANSFUSION:
        return gen_transfusion_batch(spec, batch, seq_len, rng)
    return gen_chameleon_batch(spec, batch, seq_len, rng)


def model_config_for(spec: SynthSpec, mode: ObjectiveMode | str = "chameleon", *,
                     sparsity: Sparsity | str = "dense", tower_mode: str | None = None,
                     diffusion: DiffusionConfig | None = None, **overrides) -> ModelConfig:
    """A ModelConfig whose vocabularies and modalities match ``spec``."""
    mode = ObjectiveMode(mode)
    sparsity = Sparsity(sparsity)
    cont = ("image",) if mode is ObjectiveMode.TRANSFUSION else ()
    mods = make_modalities(spec.modalities, cont)
    if tower_mode is None:
        tower_mode = "dense" if sparsity in (Sparsity.DENSE, Sparsity.MOE) else "full_mot"
    vocab = {m.id: spec.vocab_of(m.name) for m in mods if m.discrete}
    kw = dict(
        d_model=64, n_layers=2, n_heads=4, seq_len=64, latent_dim=spec.latent_dim,
        objective_mode=mode,
        attention_mode=AttentionMode.HYBRID if mode is ObjectiveMode.TRANSFUSION else AttentionMode.CAUSAL,
        diffusion=(diffusion or DiffusionConfig()) if mode is ObjectiveMode.TRANSFUSION else None,
        sparsity=sparsity,
    )
    kw.update(overrides)
    return ModelConfig(modalities=mods, vocab_sizes=vocab, tower_map=build_tower_map(tower_mode, mods), **kw)
