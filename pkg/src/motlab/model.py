"""Model assembly: embeddings, the layer stack, output heads, losses, training step and generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .attention import mask_from_spans
from .core import (
    ConfigError,
    MixedSequence,
    ModelConfig,
    NumericError,
    ObjectiveMode,
    ParamStore,
    check_config,
    init_params,
)
from .layers import TowerGroups, _grouped, mot_layer_forward, tower_groups, variant_for
from .numerics import cross_entropy, matmul, normalize
from .objectives import (
    NoiseSchedule,
    cfg_combine,
    combined_loss,
    forward_noise,
    respace,
    reverse_step,
    schedule_for,
    timestep_embedding,
)


@dataclass
class ModelState:
    cfg: ModelConfig
    params: ParamStore
    sched: NoiseSchedule | None = None

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int | None = None) -> "ModelState":
        check_config(cfg)
        sched = schedule_for(cfg.diffusion) if cfg.objective_mode is ObjectiveMode.TRANSFUSION else None
        return cls(cfg, init_params(cfg, seed), sched)

    @property
    def transfusion(self) -> bool:
        return self.cfg.objective_mode is ObjectiveMode.TRANSFUSION


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    ids: torch.Tensor  # (B, n) global ids, -1 at latent positions
    modality: torch.Tensor  # (B, n)
    is_latent: torch.Tensor  # (B, n) bool
    loss_mask: torch.Tensor  # (B, n) bool
    allowed: torch.Tensor  # (B, n, n) bool
    latents: torch.Tensor | None  # (B, n, latent_dim) clean latents, zeros elsewhere
    spans: list[tuple[tuple[int, int, int, int], ...]]

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.ids.shape)

    def span_index(self) -> torch.Tensor:
        """(B, n) running image index over the batch, -1 outside images."""
        out = torch.full(self.ids.shape, -1, dtype=torch.long)
        j = 0
        for b, spans in enumerate(self.spans):
            for s in spans:
                out[b, s[0]:s[1]] = j
                j += 1
        return out

    @property
    def n_images(self) -> int:
        return sum(len(s) for s in self.spans)


def collate(seqs: Sequence[MixedSequence], cfg: ModelConfig) -> Batch:
    if not seqs:
        raise ConfigError("empty batch")
    n = seqs[0].length
    if any(s.length != n for s in seqs):
        raise ConfigError("batch sequences must share one length")
    if n > cfg.seq_len:
        raise ConfigError(f"sequence length {n} exceeds seq_len {cfg.seq_len}")
    ids = torch.from_numpy(np.stack([s.discrete_ids for s in seqs]))
    V = cfg.total_vocab
    bad = (ids >= V) | (ids < -1)
    if bool(bad.any()):
        b, i = (int(x) for x in torch.nonzero(bad)[0])
        raise ConfigError(f"token id {int(ids[b, i])} out of range at sequence {b}, position {i}")
    modality = torch.from_numpy(np.stack([s.modality_of for s in seqs]))
    allowed = torch.from_numpy(np.stack([
        mask_from_spans(cfg.attention_mode, n, s.image_spans).allowed for s in seqs
    ]))
    latents = None
    if cfg.objective_mode is ObjectiveMode.TRANSFUSION:
        lat = np.zeros((len(seqs), n, cfg.latent_dim))
        for b, s in enumerate(seqs):
            if s.latents is not None:
                lat[b] = np.where(s.is_latent[:, None], s.latents, 0.0)
        latents = torch.from_numpy(lat).to(cfg.torch_dtype)
    return Batch(
        ids=ids,
        modality=modality,
        is_latent=ids < 0,
        loss_mask=torch.from_numpy(np.stack([s.loss_mask for s in seqs])),
        allowed=allowed,
        latents=latents,
        spans=[s.image_spans for s in seqs],
    )


def as_batch(x, cfg: ModelConfig) -> Batch:
    if isinstance(x, Batch):
        return x
    if isinstance(x, MixedSequence):
        return collate([x], cfg)
    return collate(list(x), cfg)


# ---------------------------------------------------------------------------
# Forward


def embed(batch: Batch, state: ModelState, latents: torch.Tensor | None = None,
          t_pos: torch.Tensor | None = None) -> torch.Tensor:
    """Shared (not tower-untied) input embeddings plus learned absolute positions.

    ``latents`` defaults to the batch's clean latents; ``t_pos`` (B, n) holds the
    diffusion timestep per position (0 = none).
    """
    cfg, P = state.cfg, state.params
    B, n = batch.shape
    table = torch.cat([P[f"embed.{m.name}"] for m in cfg.discrete_modalities])
    x = table[batch.ids.clamp(min=0)]
    if state.transfusion:
        lat = batch.latents if latents is None else latents
        cont = matmul(lat, P["patch_proj.in"], "embed")
        if t_pos is not None:
            temb = matmul(timestep_embedding(t_pos, cfg.D).to(cont.dtype), P["time_embed"], "embed")
            cont = cont + torch.where((t_pos > 0).unsqueeze(-1), temb, torch.zeros_like(temb))
        x = torch.where(batch.is_latent.unsqueeze(-1), cont, x)
    return x + P["pos_embed"][:n]


@dataclass
class ForwardOut:
    logits: torch.Tensor  # (B, n, V)
    eps: torch.Tensor | None  # (B, n, latent_dim), transfusion only
    hidden: list[torch.Tensor] = field(default_factory=list)


def _groups_for(batch: Batch, cfg: ModelConfig) -> TowerGroups:
    return tower_groups(cfg.tower_map.lookup(batch.modality), cfg.K)


def forward(batch, state: ModelState, latents: torch.Tensor | None = None, t_pos: torch.Tensor | None = None,
            return_hidden: bool = False) -> ForwardOut:
    """Logits at every position (the head follows the position's modality; continuous positions
    use the first discrete modality's head) and noise predictions at every position in transfusion mode.
    Losses read only the positions that belong to each head."""
    cfg, P = state.cfg, state.params
    batch = as_batch(batch, cfg)
    B, n = batch.shape
    x = embed(batch, state, latents, t_pos)
    variant = variant_for(cfg.sparsity, cfg.moe_tower_ids)
    groups = _groups_for(batch, cfg)
    hidden = []
    for l in range(cfg.n_layers):
        x = mot_layer_forward(
            x, batch.modality, cfg.tower_map, P.layer(l), batch.allowed, variant,
            n_heads=cfg.n_heads, norm=cfg.norm, norm_order=cfg.norm_order, norm_eps=cfg.norm_eps,
            capacity_factor=cfg.moe_capacity_factor, groups=groups,
        )
        if return_hidden:
            hidden.append(x)
    final = normalize(cfg.norm, x, P["final_norm"], cfg.norm_eps).reshape(B * n, cfg.D)
    heads = cfg.discrete_modalities
    if len(heads) == 1:
        logits = matmul(final, P[f"head.{heads[0].name}"], "head")
    else:
        head_of = batch.modality.clone()
        head_of[batch.is_latent] = heads[0].id
        hg = tower_groups(head_of, len(cfg.modalities))
        logits = _grouped(hg, lambda m, idx, rows: matmul(rows, P[f"head.{cfg.modalities[m].name}"], "head"), final)
    eps = None
    if state.transfusion:
        eps = matmul(final, P["patch_proj.out"], "head").view(B, n, cfg.latent_dim)
    return ForwardOut(logits.view(B, n, -1), eps, hidden)


# ---------------------------------------------------------------------------
# Losses


@dataclass
class LossBreakdown:
    total: torch.Tensor
    by_modality: dict[str, torch.Tensor]
    weights: dict[str, float]
    counts: dict[str, int]

    def floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.by_modality.items()}

    def recombined(self) -> torch.Tensor:
        out = self.total.new_zeros(())
        for k, v in self.by_modality.items():
            out = out + self.weights[k] * v
        return out


@dataclass
class NoisedLatents:
    x_t: torch.Tensor
    eps: torch.Tensor
    t_pos: torch.Tensor  # (B, n) diffusion timestep per position, 0 outside images


def noise_latents(batch: Batch, sched: NoiseSchedule, rng: np.random.Generator) -> NoisedLatents:
    """One timestep t ~ U{1..T} and fresh noise per image."""
    B, n = batch.shape
    ld = batch.latents.shape[-1]
    eps = torch.zeros_like(batch.latents)
    x_t = batch.latents.clone()
    t_pos = torch.zeros((B, n), dtype=torch.long)
    for b, spans in enumerate(batch.spans):
        for s in spans:
            t = int(rng.integers(1, sched.T + 1))
            e = torch.from_numpy(rng.standard_normal((s[1] - s[0], ld))).to(eps.dtype)
            eps[b, s[0]:s[1]] = e
            x_t[b, s[0]:s[1]] = forward_noise(batch.latents[b, s[0]:s[1]], t, e, sched)
            t_pos[b, s[0]:s[1]] = t
    return NoisedLatents(x_t, eps, t_pos)


def lm_terms(out: ForwardOut, batch: Batch, modalities_filter: Sequence[int] | None = None):
    """Next-token NLL at every valid target, with the target's modality id."""
    logits = out.logits[:, :-1]
    targets = batch.ids[:, 1:]
    valid = batch.loss_mask[:, 1:] & ~batch.is_latent[:, 1:]
    nll = cross_entropy(logits[valid], targets[valid])
    tmod = batch.modality[:, 1:][valid]
    return nll, tmod


def image_mse(eps_pred: torch.Tensor, eps_true: torch.Tensor, batch: Batch) -> torch.Tensor:
    """Per-image mean squared error, shape (n_images,)."""
    idx = batch.span_index()
    sel = idx >= 0
    if not bool(sel.any()):
        return eps_pred.new_zeros((0,))
    sq = (eps_pred - eps_true).pow(2).mean(-1)[sel]
    img = idx[sel]
    sums = torch.zeros(batch.n_images, dtype=sq.dtype).index_add(0, img, sq)
    counts = torch.bincount(img, minlength=batch.n_images).to(sq.dtype)
    return sums / counts


def compute_loss(state: ModelState, batch, rng: np.random.Generator | None = None,
                 noised: NoisedLatents | None = None) -> LossBreakdown:
    """Chameleon: mean next-token NLL over all targets. Transfusion: L_LM + lambda * L_DDPM.

    Per-modality parts recombine to the total with ``weights`` (token fractions
    for chameleon, {1, lambda} for transfusion).
    """
    cfg = state.cfg
    batch = as_batch(batch, cfg)
    names = {m.id: m.name for m in cfg.modalities}
    if not state.transfusion:
        out = forward(batch, state)
        nll, tmod = lm_terms(out, batch)
        N = nll.numel()
        total = nll.mean() if N else nll.new_zeros(())
        by, weights, counts = {}, {}, {}
        for m in cfg.modalities:
            sel = tmod == m.id
            c = int(sel.sum())
            if c == 0:
                continue
            by[m.name] = nll[sel].mean()
            weights[m.name] = c / N
            counts[m.name] = c
        return LossBreakdown(total, by, weights, counts)

    if noised is None:
        if rng is None:
            raise ValueError("transfusion loss needs an rng or pre-noised latents")
        noised = noise_latents(batch, state.sched, rng)
    out = forward(batch, state, noised.x_t, noised.t_pos)
    nll, _ = lm_terms(out, batch)
    per_image = image_mse(out.eps, noised.eps, batch)
    lam = cfg.diffusion.lambda_coeff
    total = combined_loss(nll, per_image, lam)
    text, image = cfg.modality("text").name, cfg.continuous_modality.name
    by, weights, counts = {}, {}, {}
    if nll.numel():
        by[text], weights[text], counts[text] = nll.mean(), 1.0, nll.numel()
    if per_image.numel():
        by[image], weights[image], counts[image] = per_image.mean(), lam, per_image.numel()
    return LossBreakdown(total, by, weights, counts)


# ---------------------------------------------------------------------------
# Optimisation


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 3e-4
    min_lr: float = 1.5e-5
    warmup_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    log_every: int = 10
    valid_every: int = 200
    valid_batch: int = 32
    ckpt_every: int = 0
    seed: int = 0

    @property
    def warmup(self) -> int:
        # full-scale recipe warms up 4000 of 250k steps; shrink in proportion
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, round(self.steps * 4000 / 250_000))


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear warmup then cosine decay to ``min_lr``; ``step`` counts from 1."""
    w = tc.warmup
    if step <= w:
        return tc.lr * step / w
    frac = min(1.0, (step - w) / max(1, tc.steps - w))
    return tc.min_lr + 0.5 * (tc.lr - tc.min_lr) * (1 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    """AdamW with decoupled weight decay on matrices.

    Tensors that received no gradient this step keep their moments untouched and
    only see weight-decay shrinkage.
    """

    tc: TrainConfig
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def apply(self, params: ParamStore, lr: float) -> None:
        tc = self.tc
        b1, b2 = tc.beta1, tc.beta2
        with torch.no_grad():
            for name, p in params.items():
                if tc.weight_decay and p.dim() >= 2:
                    p.mul_(1.0 - lr * tc.weight_decay)
                g = p.grad
                if g is None:
                    continue
                if name not in self.m:
                    self.m[name] = torch.zeros_like(p)
                    self.v[name] = torch.zeros_like(p)
                    self.counts[name] = 0
                self.counts[name] += 1
                c = self.counts[name]
                m, v = self.m[name], self.v[name]
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                mhat = m / (1 - b1 ** c)
                vhat = v / (1 - b2 ** c)
                p.sub_(lr * mhat / (vhat.sqrt() + tc.adam_eps))


@dataclass
class StepResult:
    step: int
    loss: float
    by_modality: dict[str, float]
    weights: dict[str, float]
    grad_norm: float
    lr: float


def train_step(batch, state: ModelState, opt: OptimizerState, rng: np.random.Generator) -> StepResult:
    """One optimisation step; updates ``state.params`` and ``opt`` in place."""
    batch = as_batch(batch, state.cfg)
    step = opt.step + 1
    lr = lr_at(step, opt.tc)
    params = state.params
    params.zero_grad()
    losses = compute_loss(state, batch, rng)
    if not torch.isfinite(losses.total):
        raise NumericError(f"non-finite loss at step {step}: {_param_stats(params)}")
    losses.total.backward()
    grads = [p for _, p in params.items() if p.grad is not None]
    gn = torch.nn.utils.clip_grad_norm_(grads, opt.tc.grad_clip) if opt.tc.grad_clip else \
        torch.sqrt(sum(p.grad.pow(2).sum() for p in grads))
    if not torch.isfinite(gn):
        raise NumericError(f"non-finite gradient norm at step {step}: {_param_stats(params)}")
    opt.apply(params, lr)
    opt.step = step
    params.zero_grad()
    return StepResult(step, float(losses.total.detach()), losses.floats(), losses.weights, float(gn), lr)


def _param_stats(params: ParamStore) -> str:
    worst = max(params.items(), key=lambda kv: float(kv[1].detach().abs().max()))
    return f"max |param| {float(worst[1].detach().abs().max()):.3g} in {worst[0]}"


# ---------------------------------------------------------------------------
# Generation


def _append(seq: MixedSequence, modality: int, token: int, latent: np.ndarray | None,
            latent_dim: int) -> MixedSequence:
    lat = seq.latents if seq.latents is not None else np.zeros((seq.length, latent_dim))
    new_lat = np.zeros((1, latent_dim)) if latent is None else latent[None, :]
    return MixedSequence(
        np.append(seq.modality_of, modality),
        np.append(seq.discrete_ids, token),
        np.concatenate([lat, new_lat]),
        seq.image_spans,
        np.append(seq.loss_mask, True),
    )


def unconditional_prompt(seq: MixedSequence, specials: dict[str, int]) -> MixedSequence:
    """The caption run right before the final BOI replaced by the single null token."""
    ids = seq.discrete_ids
    boi = seq.length - 1
    start = boi
    while start > 0 and ids[start - 1] >= 0 and ids[start - 1] not in (specials["eoi"], specials["pad"]):
        start -= 1
    keep = list(range(start))
    modality = np.concatenate([seq.modality_of[keep], [seq.modality_of[boi]], [seq.modality_of[boi]]])
    new_ids = np.concatenate([ids[keep], [specials["null"], specials["boi"]]])
    lat = seq.latents[keep] if seq.latents is not None else np.zeros((start, 0))
    lat = np.concatenate([lat, np.zeros((2, lat.shape[1]))]) if lat.shape[1] else None
    spans = tuple(s for s in seq.image_spans if s[1] <= start)
    return MixedSequence(modality, new_ids, lat, spans, np.ones(len(new_ids), dtype=bool))


EpsFn = Callable[[MixedSequence, np.ndarray, int], np.ndarray]


def _model_eps(state: ModelState, seq: MixedSequence, start: int, end: int, t_train: int) -> np.ndarray:
    batch = collate([seq], state.cfg)
    t_pos = torch.zeros(batch.shape, dtype=torch.long)
    t_pos[0, start:end] = t_train
    with torch.no_grad():
        out = forward(batch, state, batch.latents, t_pos)
    return out.eps[0, start:end].numpy().astype(np.float64)


def _last_logits(state: ModelState, seq: MixedSequence) -> np.ndarray:
    with torch.no_grad():
        out = forward(collate([seq], state.cfg), state)
    return out.logits[0, -1].numpy().astype(np.float64)


def generate(
    prompt: MixedSequence,
    state: ModelState,
    max_tokens: int,
    image_patches: int,
    rng: np.random.Generator,
    *,
    temperature: float = 1.0,
    cfg_scale: float | None = None,
    eps_fn: EpsFn | None = None,
    logits_fn: Callable[[MixedSequence], np.ndarray] | None = None,
) -> MixedSequence:
    """Alternate LM sampling and diffusion: a BOI switches to denoising ``image_patches`` noise
    patches over the respaced schedule, then EOI is appended and LM sampling resumes.

    ``max_tokens`` bounds the number of appended positions; if an image cannot
    be completed within it the result is returned with ``truncated=True``.
    ``cfg_scale`` 0 disables guidance. ``eps_fn``/``logits_fn`` replace the
    model's predictions (oracles and tests).
    """
    cfg = state.cfg
    if not state.transfusion:
        raise ConfigError("generate() runs in transfusion mode only")
    sp = cfg.specials
    text_id = cfg.modality("text").id
    img_id = cfg.continuous_modality.id
    ld = cfg.latent_dim
    w = cfg.diffusion.cfg_scale if cfg_scale is None else cfg_scale
    sched = respace(state.sched, cfg.diffusion.inference_steps, cfg.diffusion.sigma_mode)
    budget = min(max_tokens, cfg.seq_len - prompt.length)
    seq = prompt
    if seq.latents is None:
        seq = MixedSequence(seq.modality_of, seq.discrete_ids, np.zeros((seq.length, ld)),
                            seq.image_spans, seq.loss_mask)
    produced = 0
    banned = [sp["pad"], sp["null"]]

    def predict(s: MixedSequence, start: int, end: int, j: int) -> np.ndarray:
        t_train = int(sched.timesteps[j - 1])
        if eps_fn is not None:
            return eps_fn(s, s.latents[start:end], j)
        return _model_eps(state, s, start, end, t_train)

    while produced < budget:
        if seq.discrete_ids[-1] == sp["boi"]:
            if produced + image_patches + 1 > budget:
                return _flag(seq)
            start = seq.length
            x = rng.standard_normal((image_patches, ld))
            for _ in range(image_patches):
                seq = _append(seq, img_id, -1, np.zeros(ld), ld)
            end = seq.length
            span = (start, end, start - 1, end)
            uncond_base = unconditional_prompt(prompt_until(seq, start), sp) if w > 0 and w != 1 else None
            for j in range(sched.T, 0, -1):
                cur = _with_latents(seq, start, end, x, span)
                eps = predict(cur, start, end, j)
                if uncond_base is not None:
                    u_start = uncond_base.length
                    u = _extend_with_patches(uncond_base, img_id, x, ld)
                    eps_u = predict(u, u_start, u_start + image_patches, j)
                    eps = cfg_combine(eps, eps_u, w)
                z = rng.standard_normal(x.shape) if j > 1 else np.zeros_like(x)
                x = reverse_step(x, j, eps, z, sched)
            seq = _with_latents(seq, start, end, x, span)
            seq = _append(seq, text_id, sp["eoi"], None, ld)
            produced += image_patches + 1
            continue
        logits = logits_fn(seq) if logits_fn is not None else _last_logits(state, seq)
        logits = np.array(logits, dtype=np.float64)[: cfg.text_vocab]
        logits[banned] = -np.inf
        if temperature <= 0:
            tok = int(np.argmax(logits))
        else:
            z = logits / temperature
            p = np.exp(z - z.max())
            tok = int(rng.choice(len(p), p=p / p.sum()))
        seq = _append(seq, text_id, tok, None, ld)
        produced += 1
    if seq.discrete_ids[-1] == sp["boi"]:
        return _flag(seq)
    return seq


def _flag(seq: MixedSequence) -> MixedSequence:
    return MixedSequence(seq.modality_of, seq.discrete_ids, seq.latents, seq.image_spans, seq.loss_mask, True)


def prompt_until(seq: MixedSequence, end: int) -> MixedSequence:
    lat = None if seq.latents is None else seq.latents[:end]
    return MixedSequence(seq.modality_of[:end], seq.discrete_ids[:end], lat,
                         tuple(s for s in seq.image_spans if s[1] <= end), seq.loss_mask[:end])


def _with_latents(seq: MixedSequence, start: int, end: int, x: np.ndarray, span) -> MixedSequence:
    lat = seq.latents.copy()
    lat[start:end] = x
    spans = tuple(s for s in seq.image_spans if s[0] != start) + (span,)
    return MixedSequence(seq.modality_of, seq.discrete_ids, lat, spans, seq.loss_mask)


def _extend_with_patches(base: MixedSequence, img_id: int, x: np.ndarray, ld: int) -> MixedSequence:
    seq = base
    if seq.latents is None:
        seq = MixedSequence(seq.modality_of, seq.discrete_ids, np.zeros((seq.length, ld)),
                            seq.image_spans, seq.loss_mask)
    start = seq.length
    for row in x:
        seq = _append(seq, img_id, -1, row, ld)
    return _with_latents(seq, start, seq.length, x, (start, seq.length, start - 1, seq.length))
