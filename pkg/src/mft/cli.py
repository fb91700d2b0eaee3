"""Command-line entry point: ``mft <command> [flags]``.

Commands::

    synth-gen          write train/val/test JSONL plus manifest.json
    train              train on a dataset directory (or on freshly synthesized tracks)
    eval               score a checkpoint on one split
    ablate             train and score the full model and variants v1..v5
    export-attention   mean MC/GC attention matrices of a checkpoint
    grad-check         finite-difference check of every parameter gradient

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric error
(a failing grad-check also exits with 4).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, SamplingSettings, apply_overrides, load_config
from .errors import ConfigError, DataError, MFTError
from .evaluate import VARIANTS, ablation_csv, ablation_run, attention_summary, compute_metrics
from .gradcheck import gradient_check
from .ingest import FLAVORS, dump_jsonl, encode_all, fit_normalizer, parse_annotations, windows_from_tracks
from .model import MFTConfig, param_count, predict
from .synth import generate_dataset, manifest
from .train import train

log = logging.getLogger("mft")

SPLITS = ("train", "val", "test")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- data ------------------------------------------------------------------------


def read_manifest(data_dir: Path) -> dict | None:
    path = data_dir / "manifest.json"
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from None


def load_split_tracks(data_dir: str | Path, split: str, flavor: str):
    data_dir = Path(data_dir)
    info = read_manifest(data_dir)
    if info is not None and info.get("flavor", flavor) != flavor:
        raise ConfigError(f"dataset in {data_dir} is {info['flavor']!r} but the model expects {flavor!r}")
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    with path.open(encoding="utf-8") as fh:
        return parse_annotations(fh, flavor)


def load_tracks(cfg: RunConfig) -> dict[str, list]:
    """Tracks per split, read from ``data_dir`` or synthesized from the config."""
    flavor = cfg.model.flavor
    if cfg.data_dir is None:
        ds = generate_dataset(cfg.synth.n_tracks, cfg.synth.rule(flavor), cfg.seed)
        return {name: ds.split(name) for name in SPLITS}
    return {name: load_split_tracks(cfg.data_dir, name, flavor) for name in SPLITS}


def _windows(tracks, model: MFTConfig, sampling: SamplingSettings):
    return windows_from_tracks(tracks, model.n_frames, sampling.overlap, sampling.tte_range)


def prepare_clips(cfg: RunConfig):
    """Sample, fit the normalizer on train, encode all three splits."""
    tracks = load_tracks(cfg)
    windows = {name: _windows(tracks[name], cfg.model, cfg.sampling) for name in SPLITS}
    if not windows["train"]:
        raise DataError("no training clips satisfy the sampling settings")
    schema = fit_normalizer(windows["train"], cfg.model.flavor)
    clips = {name: encode_all(windows[name], schema) for name in SPLITS}
    return clips, schema


# -- commands --------------------------------------------------------------------


def cmd_synth_gen(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds = generate_dataset(cfg.synth.n_tracks, cfg.synth.rule(cfg.model.flavor), cfg.seed)
    for name in SPLITS:
        (out / f"{name}.jsonl").write_text(dump_jsonl(ds.split(name)), encoding="utf-8")
    info = manifest(ds)
    (out / "manifest.json").write_text(_dump_json(info), encoding="utf-8")
    print(_dump_json({"out": str(out), "splits": info["splits"]}), end="")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    print(f"param_count: {param_count(cfg.model)}", flush=True)
    clips, schema = prepare_clips(cfg)
    out = _out_dir(cfg)
    result = train(cfg.model, clips["train"], clips["val"], cfg.train)
    sampling = {"overlap": cfg.sampling.overlap, "tte_min": cfg.sampling.tte_min, "tte_max": cfg.sampling.tte_max}
    extra = {"eval_batch_size": cfg.train.eval_batch_size, "seed": cfg.seed}
    save_checkpoint(out / "checkpoint.mft", result.params, schema, sampling, dict(extra, epoch=cfg.train.epochs))
    save_checkpoint(out / "best.mft", result.best_params, schema, sampling, dict(extra, epoch=result.best_epoch))
    history = {
        "w_pos": result.w_pos,
        "best_epoch": result.best_epoch,
        "n_clips": {name: len(clips[name]) for name in SPLITS},
        "epochs": [{"epoch": r.epoch, "train_loss": r.train_loss, "val": r.val} for r in result.history],
    }
    (out / "history.json").write_text(_dump_json(history), encoding="utf-8")
    (out / "config.json").write_text(_dump_json(cfg.to_dict()), encoding="utf-8")
    final = result.history[-1].val if result.history else None
    print(_dump_json({"out": str(out), "best_epoch": result.best_epoch, "final_val": final}), end="")
    return 0


def _load_for_eval(args, cfg: RunConfig):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    if args.flavor is not None and args.flavor != ckpt.config.flavor:
        raise ConfigError(f"--flavor {args.flavor} does not match the checkpoint flavor {ckpt.config.flavor!r}")
    if ckpt.schema is None:
        raise DataError("checkpoint carries no encoding schema")
    if cfg.data_dir is None:
        raise ConfigError("--data is required")
    sampling = SamplingSettings(**ckpt.sampling) if ckpt.sampling else cfg.sampling
    if args.tte_min is not None or args.tte_max is not None:
        sampling = cfg.sampling
    tracks = load_split_tracks(cfg.data_dir, args.split, ckpt.config.flavor)
    windows = _windows(tracks, ckpt.config, sampling)
    return ckpt, encode_all(windows, ckpt.schema)


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt, clips = _load_for_eval(args, cfg)
    if not clips:
        raise DataError(f"split {args.split!r} yields no clips")
    batch_size = int(ckpt.extra.get("eval_batch_size", cfg.train.eval_batch_size))
    scores = predict(ckpt.params, clips, batch_size)
    report = compute_metrics(scores, [c.label for c in clips]).to_dict()
    text = _dump_json(report)
    if args.out is not None:
        (_out_dir(cfg) / "metrics.json").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_export_attention(cfg: RunConfig, args) -> int:
    ckpt, clips = _load_for_eval(args, cfg)
    summary = attention_summary(ckpt.params, clips).to_dict()
    text = _dump_json(summary)
    if args.out is not None:
        (_out_dir(cfg) / "attention.json").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    clips, _ = prepare_clips(cfg)
    rows = ablation_run(cfg.model, cfg.variants, clips["train"], clips["val"], clips["test"], cfg.train)
    out = _out_dir(cfg)
    csv_text = ablation_csv(rows)
    (out / "ablation.csv").write_text(csv_text, encoding="utf-8")
    (out / "ablation.json").write_text(_dump_json([r.to_dict() for r in rows]), encoding="utf-8")
    print(csv_text, end="")
    return 0


def _parse_fault(spec: str) -> tuple[str, float]:
    op, _, factor = spec.partition(":")
    try:
        return op, float(factor) if factor else 1.01
    except ValueError:
        raise ConfigError(f"bad --inject-fault value {spec!r}; expected OP or OP:FACTOR") from None


def cmd_grad_check(cfg: RunConfig, args) -> int:
    g = cfg.grad_check
    toy = MFTConfig(
        n_frames=g.n_frames, model_dim=g.model_dim, heads=g.heads, flavor=cfg.model.flavor,
        ffn_hidden=g.ffn_hidden, mlp_hidden=g.mlp_hidden, dropout_p=cfg.model.dropout_p,
        use_P=cfg.model.use_P, use_E=cfg.model.use_E, ccr_mode=cfg.model.ccr_mode,
    )
    if args.inject_fault:
        op, factor = _parse_fault(args.inject_fault)
        with T.inject_fault(op, factor):
            report = gradient_check(toy, cfg.seed, g.batch_size, g.step, g.tolerance)
    else:
        report = gradient_check(toy, cfg.seed, g.batch_size, g.step, g.tolerance)
    print(_dump_json(report.to_dict()), end="")
    if not report.passed:
        print(f"grad-check FAILED for: {', '.join(report.failures)}", file=sys.stderr)
        return 4
    print(f"grad-check passed ({len(report.checks)} tensors, max rel err {report.max_rel_error:.2e})", file=sys.stderr)
    return 0


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-attention": cmd_export_attention,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mft", description="Multi-context fusion transformer for crossing-intention prediction")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--flavor", choices=FLAVORS)
        p.add_argument("--tte-min", type=int, dest="tte_min")
        p.add_argument("--tte-max", type=int, dest="tte_max")
        if name in ("train", "eval", "ablate", "export-attention"):
            p.add_argument("--data", help="dataset directory with train/val/test.jsonl")
        if name in ("eval", "export-attention"):
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--split", choices=SPLITS, default="test")
        if name == "ablate":
            p.add_argument("--variant", action="append", choices=list(VARIANTS), dest="variants",
                           help="repeatable; default is every variant")
        if name == "grad-check":
            p.add_argument("--inject-fault", metavar="OP[:FACTOR]", help="scale the backward rule of OP")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(
            cfg,
            seed=args.seed,
            out=args.out,
            data=getattr(args, "data", None),
            flavor=None if args.command in ("eval", "export-attention") else args.flavor,
            tte_min=args.tte_min,
            tte_max=args.tte_max,
            variants=getattr(args, "variants", None),
        )
        # overflow/NaN surface as NumericError from the op that produced them
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return COMMANDS[args.command](cfg, args)
    except MFTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
