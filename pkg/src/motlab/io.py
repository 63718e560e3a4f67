"""Run configs, checkpoints, metrics logs and sequence files.

Configs and metrics are JSON; tensors live in a little-endian raw sidecar whose
sha256 is recorded in the manifest and checked on load.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
import torch

from .core import (
    ConfigError,
    DiffusionConfig,
    MixedSequence,
    ModelConfig,
    ObjectiveMode,
    ParamStore,
    Sparsity,
    TOWER_MODES,
)
from .model import ModelState, OptimizerState, TrainConfig
from .synthdata import SynthSpec, model_config_for

SCHEMA_VERSION = 1


class CheckpointError(OSError):
    pass


# ---------------------------------------------------------------------------
# Run configs

# ModelConfig fields a run config may override; modalities and vocabularies follow the data spec
MODEL_KEYS = ("d_model", "n_layers", "n_heads", "ffn_hidden", "seq_len", "moe_experts", "moe_capacity_factor",
              "norm", "norm_order", "norm_eps", "init_std", "dtype", "latent_dim")


@dataclass
class RunConfig:
    data: SynthSpec = field(default_factory=SynthSpec)
    mode: ObjectiveMode = ObjectiveMode.CHAMELEON
    sparsity: Sparsity = Sparsity.DENSE
    tower_mode: str | None = None
    model: dict[str, Any] = field(default_factory=dict)
    diffusion: DiffusionConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.mode = ObjectiveMode(self.mode)
        self.sparsity = Sparsity(self.sparsity)
        unknown = set(self.model) - set(MODEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        if self.tower_mode is not None and self.tower_mode not in TOWER_MODES:
            raise ConfigError(f"unknown tower_mode {self.tower_mode!r}")

    def model_config(self, seed: int = 0) -> ModelConfig:
        kw = dict(self.model)
        kw.setdefault("latent_dim", self.data.latent_dim)
        return model_config_for(self.data, self.mode, sparsity=self.sparsity, tower_mode=self.tower_mode,
                                diffusion=self.diffusion, seed=seed, **kw)

    def with_(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _strict(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown fields in {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"bad {section!r} section: {e}") from None


def run_config_to_dict(rc: RunConfig) -> dict:
    data = dataclasses.asdict(rc.data)
    data["modalities"] = list(rc.data.modalities)
    data["modality_token_ratio"] = {k: v for k, v in rc.data.modality_token_ratio}
    return {
        "schema_version": SCHEMA_VERSION,
        "data": data,
        "mode": rc.mode.value,
        "sparsity": rc.sparsity.value,
        "tower_mode": rc.tower_mode,
        "model": dict(rc.model),
        "diffusion": None if rc.diffusion is None else dataclasses.asdict(rc.diffusion),
        "train": dataclasses.asdict(rc.train),
    }


def run_config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    allowed = {"schema_version", "data", "mode", "sparsity", "tower_mode", "model", "diffusion", "train"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level fields: {sorted(unknown)}")
    data = dict(d.get("data", {}))
    if "modalities" in data:
        data["modalities"] = tuple(data["modalities"])
    train = dict(d.get("train", {}))
    if "betas" in train:
        raise ConfigError("use beta1/beta2 rather than betas")
    try:
        return RunConfig(
            data=_strict(SynthSpec, data, "data"),
            mode=d.get("mode", "chameleon"),
            sparsity=d.get("sparsity", "dense"),
            tower_mode=d.get("tower_mode"),
            model=dict(d.get("model", {})),
            diffusion=None if d.get("diffusion") is None else _strict(DiffusionConfig, d["diffusion"], "diffusion"),
            train=_strict(TrainConfig, train, "train"),
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def load_run_config(path: str | os.PathLike) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CheckpointError(f"cannot read config {path}: {e.strerror}") from None
    try:
        return run_config_from_dict(json.loads(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None


def save_run_config(rc: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(run_config_to_dict(rc), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints

_DTYPES = {torch.float64: "<f8", torch.float32: "<f4"}


def _rng_state(rng: np.random.Generator | None) -> dict | None:
    if rng is None:
        return None

    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__array__": x.tolist(), "dtype": str(x.dtype)}
        if isinstance(x, np.integer):
            return int(x)
        return x

    return plain(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    def back(x):
        if isinstance(x, dict):
            if "__array__" in x:
                return np.array(x["__array__"], dtype=x["dtype"])
            return {k: back(v) for k, v in x.items()}
        return x

    st = back(state)
    bg = getattr(np.random, st["bit_generator"])()
    bg.state = st
    return np.random.Generator(bg)


def save_checkpoint(path: str | os.PathLike, state: ModelState, run_config: RunConfig | None = None, *,
                    step: int = 0, opt: OptimizerState | None = None, rngs: dict | None = None,
                    seed: int = 0) -> Path:
    """Write ``manifest.json`` and ``params.bin`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors: list[tuple[str, torch.Tensor]] = [(f"param/{k}", v) for k, v in state.params.items()]
    if opt is not None:
        for k in state.params.names():
            if k in opt.m:
                tensors.append((f"adam_m/{k}", opt.m[k]))
                tensors.append((f"adam_v/{k}", opt.v[k]))
    directory, blobs, offset = {}, [], 0
    for name, t in tensors:
        arr = t.detach().cpu().numpy().astype(_DTYPES[t.dtype], copy=False)
        blob = arr.tobytes()
        directory[name] = {"shape": list(arr.shape), "dtype": _DTYPES[t.dtype], "offset": offset, "length": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": None if run_config is None else run_config_to_dict(run_config),
        "seed": seed,
        "step": step,
        "optimizer": None if opt is None else {"step": opt.step, "counts": dict(opt.counts)},
        "rng": {k: _rng_state(v) for k, v in (rngs or {}).items()},
        "tensors": directory,
        "params_sha256": hashlib.sha256(payload).hexdigest(),
    }
    tmp_bin, tmp_man = out / "params.bin.tmp", out / "manifest.json.tmp"
    tmp_bin.write_bytes(payload)
    tmp_man.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp_bin, out / "params.bin")
    os.replace(tmp_man, out / "manifest.json")
    return out


@dataclass
class Checkpoint:
    state: ModelState
    run_config: RunConfig | None
    step: int
    opt: OptimizerState | None
    rngs: dict[str, np.random.Generator]
    manifest: dict


def load_checkpoint(path: str | os.PathLike, run_config: RunConfig | None = None) -> Checkpoint:
    """Load a checkpoint; ``run_config`` overrides the echoed config when given."""
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        payload = (d / "params.bin").read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint incomplete: {e.filename} missing") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint manifest unreadable: {e}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema {manifest.get('schema_version')!r}")
    if hashlib.sha256(payload).hexdigest() != manifest["params_sha256"]:
        raise CheckpointError("params.bin does not match the manifest hash")
    rc = run_config
    if rc is None:
        if manifest.get("config") is None:
            raise ConfigError("checkpoint carries no config; pass one explicitly")
        rc = run_config_from_dict(manifest["config"])
    cfg = rc.model_config(manifest.get("seed", 0))
    state = ModelState.create(cfg, manifest.get("seed", 0))
    tensors = {}
    for name, meta in manifest["tensors"].items():
        chunk = payload[meta["offset"]: meta["offset"] + meta["length"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"])
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).to(cfg.torch_dtype)
    expected = state.params.names()
    got = [k[len("param/"):] for k in tensors if k.startswith("param/")]
    if sorted(expected) != sorted(got):
        missing, extra = sorted(set(expected) - set(got)), sorted(set(got) - set(expected))
        raise CheckpointError(f"checkpoint tensors do not match config: missing {missing[:3]}, extra {extra[:3]}")
    params = ParamStore()
    for k in expected:
        t = tensors[f"param/{k}"].clone()
        if tuple(t.shape) != tuple(state.params[k].shape):
            raise CheckpointError(f"shape mismatch for {k}: {tuple(t.shape)} vs {tuple(state.params[k].shape)}")
        params[k] = t.requires_grad_(True)
    state = ModelState(cfg, params, state.sched)
    opt = None
    if manifest.get("optimizer") is not None:
        opt = OptimizerState(rc.train, step=manifest["optimizer"]["step"])
        opt.counts = {k: int(v) for k, v in manifest["optimizer"]["counts"].items()}
        for k in opt.counts:
            opt.m[k] = tensors[f"adam_m/{k}"].clone()
            opt.v[k] = tensors[f"adam_v/{k}"].clone()
    rngs = {k: restore_rng(v) for k, v in manifest.get("rng", {}).items() if v is not None}
    return Checkpoint(state, rc, manifest.get("step", 0), opt, rngs, manifest)


# ---------------------------------------------------------------------------
# Metrics


class MetricsLog:
    """Append-only JSONL; every record goes out in a single write followed by a flush."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str | os.PathLike) -> list[dict]:
    """Every complete record; a torn final line (crash mid-write) is dropped."""
    try:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
    except OSError as e:
        raise CheckpointError(f"cannot read metrics {path}: {e.strerror}") from None
    out = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise CheckpointError(f"{path}: corrupt record on line {i + 1}") from None
    return out


@contextmanager
def run_lock(run_dir: str | os.PathLike) -> Iterator[Path]:
    """Exclusive ownership of a run directory via an O_EXCL lock file."""
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    lock = d / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CheckpointError(f"{d} is locked by another writer ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Sequences


def sequence_to_dict(seq: MixedSequence) -> dict:
    return {
        "modality_of": seq.modality_of.tolist(),
        "discrete_ids": seq.discrete_ids.tolist(),
        "latents": None if seq.latents is None else seq.latents.tolist(),
        "image_spans": [list(s) for s in seq.image_spans],
        "loss_mask": seq.loss_mask.tolist(),
        "truncated": bool(seq.truncated),
    }


def sequence_from_dict(d: dict) -> MixedSequence:
    allowed = {"modality_of", "discrete_ids", "latents", "image_spans", "loss_mask", "truncated"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown sequence fields: {sorted(unknown)}")
    n = len(d["discrete_ids"])
    return MixedSequence(
        np.asarray(d["modality_of"], dtype=np.int64),
        np.asarray(d["discrete_ids"], dtype=np.int64),
        None if d.get("latents") is None else np.asarray(d["latents"], dtype=np.float64),
        tuple(tuple(int(x) for x in s) for s in d.get("image_spans", [])),
        np.asarray(d.get("loss_mask", [True] * n), dtype=bool),
        bool(d.get("truncated", False)),
    )


def write_sequences(path: str | os.PathLike, seqs: Iterable[MixedSequence]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(json.dumps(sequence_to_dict(s)) + "\n")
            n += 1
    return n


def read_sequences(path: str | os.PathLike) -> list[MixedSequence]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [sequence_from_dict(json.loads(line)) for line in fh if line.strip()]
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid sequence JSON: {e}") from None
