"""Command-line entry point: ``motlab <subcommand> ...``.

Failures print one JSON object on stderr and exit with 2 (config), 3 (numeric) or 4 (I/O).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .core import ConfigError, NumericError

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _dump(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    from .experiments import train_run
    from .io import load_run_config

    rc = load_run_config(args.config)
    changes = {}
    if args.steps is not None:
        changes["steps"] = args.steps
    if args.ckpt_every is not None:
        changes["ckpt_every"] = args.ckpt_every
    if changes:
        rc = rc.with_(train=dataclasses.replace(rc.train, **changes))
    out = Path(args.out)
    res = train_run(rc, args.seed, out)
    _dump({"run_dir": str(out), "steps": rc.train.steps, "final_valid": res.valid[-1].total if res.valid else None,
           "seconds": round(res.seconds, 3)})
    return 0


def _load(args):
    from .io import load_checkpoint, load_run_config

    rc = load_run_config(args.config) if getattr(args, "config", None) else None
    return load_checkpoint(args.ckpt, rc)


def cmd_eval(args) -> int:
    from .analysis import modality_losses
    from .experiments import valid_batch
    from .model import collate
    from .synthdata import gen_batch, make_rng

    ck = _load(args)
    rc, cfg = ck.run_config, ck.state.cfg
    if args.split == "valid":
        seqs = valid_batch(rc, cfg)
    else:
        seqs = gen_batch(rc.data, rc.mode, rc.train.valid_batch, cfg.seq_len, make_rng(rc.data.seed, f"eval:{args.split}"))
    ml = modality_losses(ck.state, collate(seqs, cfg))
    _dump({"step": ck.step, "split": args.split, "loss_total": ml.total, "loss_by_modality": ml.by_modality,
           "weights": ml.weights})
    return 0


def cmd_sample(args) -> int:
    from .io import read_sequences, sequence_from_dict, sequence_to_dict
    from .model import generate
    from .synthdata import make_rng

    ck = _load(args)
    text = Path(args.prompt_file).read_text()
    try:
        prompt = sequence_from_dict(json.loads(text))
    except json.JSONDecodeError:
        prompts = read_sequences(args.prompt_file)
        if not prompts:
            raise ConfigError(f"{args.prompt_file} holds no prompt") from None
        prompt = prompts[0]
    patches = args.image_patches if args.image_patches is not None else ck.run_config.data.image_patches
    out = generate(prompt, ck.state, args.max_tokens, patches, make_rng(args.seed, "sample"),
                   temperature=args.temperature, cfg_scale=args.cfg_scale)
    Path(args.out).write_text(json.dumps(sequence_to_dict(out)) + "\n")
    _dump({"out": args.out, "length": out.length, "truncated": out.truncated, "images": len(out.image_spans)})
    return 0


def cmd_flops(args) -> int:
    from .accounting import cost_report
    from .io import load_run_config

    rc = load_run_config(args.config)
    rep = cost_report(rc.model_config(), args.n)
    sys.stdout.write(rep.to_json() + "\n")
    return 0


def cmd_step_match(args) -> int:
    from .analysis import LossCurve, step_match
    from .io import read_metrics

    ref = LossCurve.from_records(read_metrics(args.ref))
    cand = LossCurve.from_records(read_metrics(args.cand))
    rows = step_match(ref, cand, args.modality, args.halflife, args.split)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["ref_step", "matched_step", "ratio"])
    for r in rows:
        w.writerow([r.ref_step, "" if r.matched_step is None else r.matched_step,
                    "" if r.ratio is None else repr(r.ratio)])
    return 0


def cmd_gen_data(args) -> int:
    from .io import _strict, write_sequences
    from .synthdata import SynthSpec, gen_batch, make_rng

    try:
        raw = json.loads(Path(args.spec).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.spec} is not valid JSON: {e}") from None
    if "modalities" in raw:
        raw["modalities"] = tuple(raw["modalities"])
    spec = _strict(SynthSpec, raw, "spec")
    seqs = gen_batch(spec, args.mode, args.n, args.seq_len, make_rng(spec.seed, f"corpus:{args.seed}"))
    write_sequences(args.out, seqs)
    _dump({"out": args.out, "sequences": len(seqs)})
    return 0


def cmd_probe(args) -> int:
    from .analysis import feature_cluster_probe
    from .experiments import valid_batch
    from .model import collate

    ck = _load(args)
    batch = collate(valid_batch(ck.run_config, ck.state.cfg), ck.state.cfg)
    res = feature_cluster_probe(ck.state, batch, args.layer)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pc1", "pc2", "modality"])
            for (a, b), m in zip(res.coords, res.labels):
                w.writerow([repr(float(a)), repr(float(b)), int(m)])
    _dump({"layer": args.layer, "silhouette": res.silhouette, "explained_variance": res.explained_variance.tolist(),
           "points": int(len(res.labels))})
    return 0


def cmd_gradcheck(args) -> int:
    from .experiments import gradcheck_run
    from .io import load_run_config

    rc = load_run_config(args.config)
    reports = gradcheck_run(rc, args.seed, h=args.h, probes_per_tensor=args.probes)
    worst = max(r.max_rel_err for r in reports)
    sys.stdout.write(f"{'tensor':48s} {'rel_err':>10s} {'abs_err':>10s} {'excess':>10s} {'n':>3s}\n")
    for r in reports:
        flag = "ok" if r.ok(args.tol) else ("FAIL(floor)" if r.ok_above_floor(args.tol) else "FAIL")
        sys.stdout.write(f"{r.param_name:48s} {r.max_rel_err:10.3e} {r.max_abs_err:10.3e} {r.max_excess_err:10.3e} "
                         f"{r.n_probed:3d} {flag}\n")
    sys.stdout.write(f"worst {worst:.3e} tol {args.tol:.1e}\n")
    if worst >= args.tol:
        raise NumericError(f"gradient check failed: worst relative error {worst:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="motlab", description="Mixture-of-Transformers desk-scale toolkit")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train one run")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ckpt-every", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="per-modality losses of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--split", default="valid")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sample", help="mixed-mode generation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--prompt-file", required=True)
    s.add_argument("--cfg-scale", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.add_argument("--max-tokens", type=int, default=32)
    s.add_argument("--image-patches", type=int)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("flops", help="parameter and MAC report")
    s.add_argument("--config", required=True)
    s.add_argument("--n", type=int)
    s.set_defaults(fn=cmd_flops)

    s = sub.add_parser("step-match", help="step-matching CSV between two metrics files")
    s.add_argument("--ref", required=True)
    s.add_argument("--cand", required=True)
    s.add_argument("--modality", default="total")
    s.add_argument("--halflife", type=float, default=50)
    s.add_argument("--split", default="train")
    s.set_defaults(fn=cmd_step_match)

    s = sub.add_parser("gen-data", help="dump a synthetic corpus as JSONL")
    s.add_argument("--spec", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", default="chameleon")
    s.add_argument("--seq-len", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("probe", help="PCA modality-clustering probe")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("gradcheck", help="finite-difference gradient certification")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-4)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--probes", type=int, default=8)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (ConfigError, NumericError, OSError, ValueError) as e:
        err = e
    if isinstance(err, NumericError):
        code, kind = EXIT_NUMERIC, "numeric"
    elif isinstance(err, OSError):
        code, kind = EXIT_IO, "io"
    else:
        code, kind = EXIT_CONFIG, "config"
    msg = str(err)
    if isinstance(err, OSError) and err.strerror and err.filename is not None:
        msg = f"{err.strerror}: {err.filename}"
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": msg}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
