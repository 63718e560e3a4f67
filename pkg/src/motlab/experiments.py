"""Desk-scale experiment recipes and the FLOP-matched training matrix."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .accounting import count_macs
from .analysis import LossCurve, ModalityLosses, modality_losses
from .core import ConfigError, DiffusionConfig, ModelConfig, MixedSequence, ObjectiveMode, Sparsity
from .io import MetricsLog, RunConfig, run_lock, save_checkpoint
from .model import ModelState, OptimizerState, TrainConfig, collate, train_step
from .synthdata import SynthSpec, gen_batch, make_rng

RECIPES = ("chameleon_2mod", "chameleon_3mod", "transfusion_2mod")

# variants accepted besides plain sparsity modes: tower-sharing ablations on three modalities
LOO_VARIANTS = ("loo_text", "loo_image", "loo_speech")


def recipe(name: str) -> RunConfig:
    """Base run config for a recipe (dense sparsity; variants are applied by ``variant_config``)."""
    train = TrainConfig(steps=3000, batch_size=16, lr=3e-4)
    if name == "chameleon_2mod":
        data = SynthSpec(modalities=("text", "image"), latent_classes=32)
        return RunConfig(data=data, mode="chameleon", model={"ffn_hidden": 64, "seq_len": 64}, train=train)
    if name == "chameleon_3mod":
        data = SynthSpec(modalities=("text", "image", "speech"), latent_classes=32)
        return RunConfig(data=data, mode="chameleon", model={"ffn_hidden": 64, "seq_len": 96}, train=train)
    if name == "transfusion_2mod":
        data = SynthSpec(modalities=("text", "image"), uncond_prob=0.1)
        return RunConfig(data=data, mode="transfusion", model={"ffn_hidden": 64, "seq_len": 64},
                         diffusion=DiffusionConfig(), train=dataclasses.replace(train, steps=2000, batch_size=8, lr=1e-3))
    raise ConfigError(f"unknown recipe {name!r}; choose from {RECIPES}")


def variant_config(base: RunConfig, variant: str) -> RunConfig:
    """``variant`` is a sparsity value or a leave-one-out tower mode (full untying, two towers)."""
    if variant in LOO_VARIANTS:
        if len(base.data.modalities) != 3:
            raise ConfigError(f"{variant} needs three modalities")
        return base.with_(sparsity=Sparsity.MOT_FULL, tower_mode=variant)
    s = Sparsity(variant)
    tower = "dense" if s in (Sparsity.DENSE, Sparsity.MOE) else "full_mot"
    return base.with_(sparsity=s, tower_mode=tower)


def hybrid_variant(base: ModelConfig) -> ModelConfig:
    """MoT with the text tower's FFN replaced by a 4-expert expert-choice MoE."""
    if not base.has_modality("text"):
        raise ConfigError("hybrid variant needs a text modality")
    if base.sparsity is Sparsity.HYBRID:
        return base
    if base.sparsity is not Sparsity.MOT_FULL:
        raise ConfigError(f"hybrid variant starts from mot_full, got {base.sparsity.value}")
    return base.with_(sparsity=Sparsity.HYBRID, moe_experts=4)


# ---------------------------------------------------------------------------
# Single run


@dataclass
class RunResult:
    curve: LossCurve
    state: ModelState
    opt: OptimizerState
    valid: list[ModalityLosses] = field(default_factory=list)
    seconds: float = 0.0


def valid_batch(rc: RunConfig, cfg: ModelConfig) -> list[MixedSequence]:
    """Held-out sequences from a stream independent of every training stream."""
    return gen_batch(rc.data, rc.mode, rc.train.valid_batch, cfg.seq_len, make_rng(rc.data.seed, "valid"))


def train_run(rc: RunConfig, seed: int = 0, out_dir: str | Path | None = None, *,
              log: Callable[[dict], None] | None = None) -> RunResult:
    """Train one (config, seed) pair; the data stream depends on the data seed and ``seed`` only."""
    tc = rc.train
    cfg = rc.model_config(seed)
    state = ModelState.create(cfg, seed)
    opt = OptimizerState(tc)
    data_rng = make_rng(rc.data.seed, f"train:{seed}")
    noise_rng = make_rng(seed, "noise")
    vbatch = collate(valid_batch(rc, cfg), cfg)
    curve = LossCurve()
    valid: list[ModalityLosses] = []
    t0 = time.perf_counter()

    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    lock = run_lock(out) if out is not None else None
    if lock is not None:
        lock.__enter__()
        metrics = MetricsLog(out / "metrics.jsonl")
    try:
        acc: dict[str, list[float]] = {}
        acc_total: list[float] = []
        for step in range(1, tc.steps + 1):
            batch = collate(gen_batch(rc.data, rc.mode, tc.batch_size, cfg.seq_len, data_rng), cfg)
            r = train_step(batch, state, opt, noise_rng)
            acc_total.append(r.loss)
            for k, v in r.by_modality.items():
                acc.setdefault(k, []).append(v)
            if step % tc.log_every == 0 or step == tc.steps:
                rec = {
                    "step": step, "split": "train",
                    "loss_total": float(np.mean(acc_total)),
                    "loss_by_modality": {k: float(np.mean(v)) for k, v in acc.items()},
                    "lr": r.lr, "grad_norm": r.grad_norm,
                }
                curve.add(step, rec["loss_by_modality"], rec["loss_total"], "train")
                _emit(rec, metrics, log)
                acc, acc_total = {}, []
            if step % tc.valid_every == 0 or step == tc.steps:
                ml = modality_losses(state, vbatch)
                valid.append(ml)
                rec = {"step": step, "split": "valid", "loss_total": ml.total, "loss_by_modality": ml.by_modality,
                       "weights": ml.weights, "recombination_error": ml.recombination_error}
                curve.add(step, ml.by_modality, ml.total, "valid")
                _emit(rec, metrics, log)
            if out is not None and ((tc.ckpt_every and step % tc.ckpt_every == 0) or step == tc.steps):
                save_checkpoint(out / "checkpoint", state, rc, step=step, opt=opt, seed=seed,
                                rngs={"data": data_rng, "noise": noise_rng})
    finally:
        if metrics is not None:
            metrics.close()
        if lock is not None:
            lock.__exit__(None, None, None)
    return RunResult(curve, state, opt, valid, time.perf_counter() - t0)


def _emit(rec: dict, metrics: MetricsLog | None, log: Callable[[dict], None] | None) -> None:
    if metrics is not None:
        metrics.write(rec)
    if log is not None:
        log(rec)


# ---------------------------------------------------------------------------
# Matrix


class MacMismatch(ConfigError):
    pass


def check_mac_parity(configs: dict[str, ModelConfig], n: int | None = None) -> dict[str, int]:
    """MACs per forward excluding the router; raises with every count when they differ."""
    from .accounting import mac_breakdown

    counts = {}
    for name, cfg in configs.items():
        tags = mac_breakdown(cfg, n)
        counts[name] = sum(v for k, v in tags.items() if k != "router")
    if len(set(counts.values())) > 1:
        raise MacMismatch(f"variants are not FLOP-matched: {counts}")
    return counts


def run_matrix(recipe_name: str, variants: Sequence[str], base: RunConfig | None = None, steps: int | None = None,
               seeds: Sequence[int] = (0, 1, 2), out_dir: str | Path | None = None,
               log: Callable[[str, int, dict], None] | None = None) -> dict[tuple[str, int], RunResult]:
    """Train every (variant, seed) on the shared data stream after verifying MAC parity."""
    rc = base if base is not None else recipe(recipe_name)
    if steps is not None:
        rc = rc.with_(train=dataclasses.replace(rc.train, steps=steps))
    configs = {v: variant_config(rc, v) for v in variants}
    check_mac_parity({v: c.model_config() for v, c in configs.items()})
    results = {}
    for v in variants:
        for s in seeds:
            d = None if out_dir is None else Path(out_dir) / f"{v}-seed{s}"
            cb = None if log is None else (lambda rec, v=v, s=s: log(v, s, rec))
            results[(v, s)] = train_run(configs[v], s, d, log=cb)
    return results


# ---------------------------------------------------------------------------
# Gradient certification


def gradcheck_run(rc: RunConfig, seed: int = 0, *, batch_size: int = 2, h: float = 1e-4,
                  probes_per_tensor: int = 8, state: ModelState | None = None, roundoff_ulps: float = 8.0):
    """Finite-difference check of every parameter tensor on a small synthetic batch.

    Transfusion noise and timesteps are drawn once and expert-choice selections
    are taped on the unperturbed pass, so the loss is a smooth deterministic
    function of the parameters around the probe point.
    """
    from .layers import RoutingTape
    from .model import compute_loss, noise_latents
    from .numerics import check_gradients

    cfg = rc.model_config(seed)
    state = state if state is not None else ModelState.create(cfg, seed)
    batch = collate(gen_batch(rc.data, rc.mode, batch_size, cfg.seq_len, make_rng(rc.data.seed, "gradcheck")), cfg)
    noised = noise_latents(batch, state.sched, make_rng(seed, "gradcheck-noise")) if state.transfusion else None

    tape = RoutingTape()

    def loss_fn(params):
        with tape.use():
            return compute_loss(ModelState(cfg, params, state.sched), batch, noised=noised).total

    return check_gradients(loss_fn, state.params, h=h, probes_per_tensor=probes_per_tensor, seed=seed,
                           roundoff_ulps=roundoff_ulps)
