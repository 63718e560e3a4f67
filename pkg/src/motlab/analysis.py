"""Loss-curve bookkeeping, step matching, per-modality losses and the modality clustering probe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

TOTAL = "total"


@dataclass(frozen=True)
class CurvePoint:
    step: int
    loss_by_modality: dict[str, float]
    loss_total: float
    split: str = "train"

    def value(self, modality: str) -> float | None:
        if modality == TOTAL:
            return self.loss_total
        return self.loss_by_modality.get(modality)


@dataclass
class LossCurve:
    points: list[CurvePoint] = field(default_factory=list)

    def add(self, step: int, loss_by_modality: dict[str, float], loss_total: float, split: str = "train") -> None:
        vals = list(loss_by_modality.values()) + [loss_total]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite loss at step {step}")
        last = self.steps(split)
        if last and step <= last[-1]:
            raise ValueError(f"steps must increase within split {split!r}: {step} after {last[-1]}")
        self.points.append(CurvePoint(int(step), dict(loss_by_modality), float(loss_total), split))

    def steps(self, split: str = "train") -> list[int]:
        return [p.step for p in self.points if p.split == split]

    def series(self, modality: str = TOTAL, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        pts = [(p.step, p.value(modality)) for p in self.points if p.split == split]
        pts = [(s, v) for s, v in pts if v is not None]
        if not pts:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        s, v = zip(*pts)
        return np.asarray(s, dtype=np.int64), np.asarray(v, dtype=np.float64)

    def last(self, modality: str = TOTAL, split: str = "train") -> float:
        return float(self.series(modality, split)[1][-1])

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "LossCurve":
        c = cls()
        for r in records:
            c.add(r["step"], r.get("loss_by_modality", {}), r["loss_total"], r.get("split", "train"))
        return c


def ema(steps: np.ndarray, values: np.ndarray, halflife: float) -> np.ndarray:
    """Exponential moving average whose decay follows step gaps, so uneven logging is handled.

    ``halflife`` is in training steps; 0 disables smoothing.
    """
    out = np.array(values, dtype=np.float64)
    if halflife <= 0 or len(out) < 2:
        return out
    for i in range(1, len(out)):
        beta = 0.5 ** ((steps[i] - steps[i - 1]) / halflife)
        out[i] = beta * out[i - 1] + (1.0 - beta) * values[i]
    return out


@dataclass(frozen=True)
class StepMatch:
    ref_step: int
    matched_step: int | None
    ratio: float | None


def step_match(reference: LossCurve, candidate: LossCurve, modality: str = TOTAL,
               smoothing_halflife: float = 50, split: str = "train") -> list[StepMatch]:
    """For each reference point, the earliest candidate step whose smoothed loss is at or below it."""
    rs, rv = reference.series(modality, split)
    cs, cv = candidate.series(modality, split)
    if not len(rs) or not len(cs):
        raise ValueError(f"step_match: empty curve for modality {modality!r}, split {split!r}")
    rv = ema(rs, rv, smoothing_halflife)
    cv = ema(cs, cv, smoothing_halflife)
    # running minimum turns "first step reaching <= L" into a binary search
    run_min = np.minimum.accumulate(cv)
    out = []
    for s, L in zip(rs, rv):
        j = int(np.searchsorted(-run_min, -L, side="left"))
        if j < len(cs):
            out.append(StepMatch(int(s), int(cs[j]), float(cs[j]) / float(s) if s else None))
        else:
            out.append(StepMatch(int(s), None, None))
    return out


def median_ratio(matches: Sequence[StepMatch], min_step: int = 1) -> float | None:
    r = [m.ratio for m in matches if m.ratio is not None and m.ref_step >= min_step]
    return float(np.median(r)) if r else None


def smoothed_last(curve: LossCurve, modality: str, halflife: float = 50, split: str = "train") -> float:
    s, v = curve.series(modality, split)
    return float(ema(s, v, halflife)[-1])


# ---------------------------------------------------------------------------
# Per-modality losses


@dataclass
class ModalityLosses:
    by_modality: dict[str, float]
    weights: dict[str, float]
    total: float

    @property
    def recombined(self) -> float:
        return math.fsum(self.weights[k] * v for k, v in self.by_modality.items())

    @property
    def recombination_error(self) -> float:
        return abs(self.recombined - self.total)


def modality_losses(model, batch, rng: np.random.Generator | None = None) -> ModalityLosses:
    """Loss split by target modality; ``weights`` recombine the parts into the total.

    Transfusion losses need noise draws; a fixed-seed stream is used when
    ``rng`` is omitted so repeated evaluations agree.
    """
    from .model import as_batch, compute_loss
    from .synthdata import make_rng

    batch = as_batch(batch, model.cfg)
    if rng is None and model.transfusion:
        rng = make_rng(0, "eval-noise")
    with torch.no_grad():
        lb = compute_loss(model, batch, rng)
    return ModalityLosses(lb.floats(), dict(lb.weights), float(lb.total))


# ---------------------------------------------------------------------------
# Clustering probe


def top_components(x: np.ndarray, n_components: int = 2, tol: float = 1e-8, max_iter: int = 20000,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenvectors of the covariance of centered ``x`` by power iteration with deflation.

    Returns (components (k, D), explained variances (k,)).
    """
    N, D = x.shape
    cov = x.T @ x / max(N, 1)
    scale = float(np.trace(cov))
    comps = np.zeros((n_components, D))
    var = np.zeros(n_components)
    if scale <= 0:
        return comps, var
    rng = np.random.default_rng(seed)
    for k in range(min(n_components, D)):
        v = rng.standard_normal(D)
        v -= comps[:k].T @ (comps[:k] @ v)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = cov @ v
            w -= comps[:k].T @ (comps[:k] @ w)
            nw = np.linalg.norm(w)
            if nw <= 1e-14 * scale:
                v = np.zeros(D)
                break
            w /= nw
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        comps[k] = v
        var[k] = float(v @ cov @ v)
    return comps, var


def silhouette(points: np.ndarray, labels: np.ndarray) -> float | None:
    """Mean Euclidean silhouette; ``None`` with fewer than two labels. Singleton clusters score 0."""
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        return None
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    masks = [labels == u for u in uniq]
    sums = np.stack([d[:, m].sum(axis=1) for m in masks], axis=1)
    sizes = np.array([m.sum() for m in masks])
    own = np.searchsorted(uniq, labels)
    own_size = sizes[own]
    a = sums[np.arange(len(labels)), own] / np.maximum(own_size - 1, 1)
    other = sums / sizes
    other[np.arange(len(labels)), own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


@dataclass
class ProbeResult:
    coords: np.ndarray  # (N, 2)
    labels: np.ndarray  # (N,) modality ids
    explained_variance: np.ndarray  # (2,)
    silhouette: float | None

    @property
    def degenerate(self) -> bool:
        return float(self.explained_variance.sum()) == 0.0


def probe_states(states: np.ndarray, labels: np.ndarray, tol: float = 1e-8) -> ProbeResult:
    x = np.asarray(states, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    comps, var = top_components(x, 2, tol)
    coords = x @ comps.T
    sil = None if float(var.sum()) == 0.0 else silhouette(coords, labels)
    return ProbeResult(coords, np.asarray(labels), var, sil)


def feature_cluster_probe(model, batch, layer: int) -> ProbeResult:
    """PCA-2 projection of the hidden states after ``layer`` (0-based) and their modality silhouette.

    Padding and other non-target positions are left out.
    """
    from .model import as_batch, forward

    cfg = model.cfg
    if not 0 <= layer < cfg.n_layers:
        raise ValueError(f"layer {layer} outside 0..{cfg.n_layers - 1}")
    batch = as_batch(batch, cfg)
    with torch.no_grad():
        out = forward(batch, model, return_hidden=True)
    h = out.hidden[layer]
    keep = batch.loss_mask.reshape(-1)
    states = h.reshape(-1, cfg.D)[keep].numpy()
    labels = batch.modality.reshape(-1)[keep].numpy()
    return probe_states(states, labels)
