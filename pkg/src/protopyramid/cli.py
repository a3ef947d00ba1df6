"""Command-line entry point: data generation, training, evaluation, explanation."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as D
from . import metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_default_config, load_config
from .explain import explain, render
from .model import Model
from .trainer import Trainer, TrainingError


class CliError(Exception):
    pass


def _load_run_config(path) -> RunConfig:
    if not Path(path).exists():
        raise CliError(f"config file not found: {path}")
    return load_config(path)


def _prepare(cfg: RunConfig):
    ad.set_default_dtype(cfg.train.dtype)
    model = Model(cfg.backbone, cfg.prototypes, seed=cfg.train.seed)
    return model


def cmd_print_default_config(args) -> int:
    sys.stdout.write(dump_default_config())
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args.config)
    ds = D.generate_dataset(cfg.data)
    D.write_dataset(ds, args.out)
    # embed the run-config hash alongside the manifest
    with open(Path(args.out) / "config_hash.json", "w") as f:
        json.dump({"config_hash": cfg.hash()}, f, sort_keys=True)
        f.write("\n")
    print(f"wrote dataset to {args.out} (config {cfg.hash()})")
    return 0


def _check_hash(meta_hash: str, cfg_hash: str, quiet: bool) -> None:
    if meta_hash and meta_hash != cfg_hash and not quiet:
        print(
            f"warning: checkpoint config hash {meta_hash} != supplied config {cfg_hash}",
            file=sys.stderr,
        )


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    if not Path(args.data).exists():
        raise CliError(f"data directory not found: {args.data}")
    dataset = D.read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        model, opt_state, meta = load_checkpoint(args.resume)
        _check_hash(meta.get("config_hash", ""), cfg.hash(), args.ignore_config_mismatch)
    else:
        model = _prepare(cfg)
        opt_state = None

    trainer = Trainer(model, dataset, cfg.train, cfg.loss_weights,
                      cfg.fine_annotation, config_hash=cfg.hash())
    if opt_state:
        trainer.optimizer.load_state_tensors(opt_state)

    ckpt_path = out / "model.ckpt"
    if args.stage:
        if args.stage == "a":
            trainer.stage_a_warmup()
        elif args.stage == "b":
            trainer.stage_b_project()
        else:
            trainer.stage_c_finetune()
        save_checkpoint(ckpt_path, model, trainer.optimizer, cfg.hash(),
                        f"stage-{args.stage}", trainer.history)
    else:
        trainer.train(out_path=ckpt_path)
    with open(out / "metrics.jsonl", "w") as f:
        for entry in trainer.history:
            f.write(json.dumps({"config_hash": cfg.hash(), **entry}, sort_keys=True) + "\n")
    print(f"wrote checkpoint to {ckpt_path} (config {cfg.hash()})")
    return 0


def cmd_evaluate(args) -> int:
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    model, _, meta = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = _load_run_config(args.config)
        _check_hash(meta.get("config_hash", ""), cfg.hash(), args.ignore_config_mismatch)
    dataset = D.read_dataset(args.data)
    if args.split not in dataset.splits:
        raise CliError(f"split {args.split!r} not in dataset")
    images, labels, _, _ = dataset.arrays(args.split)
    report = metrics.evaluate(model, images, labels)
    payload = {"config_hash": meta.get("config_hash", ""), "split": args.split}
    payload.update(report.to_dict())
    text = json.dumps(payload, sort_keys=True, indent=1)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return 0


def _load_image(spec: str, dataset) -> tuple:
    if dataset is not None:
        try:
            sample = dataset.by_id(spec)
            return sample.image, spec
        except KeyError:
            pass
    path = Path(spec)
    if not path.exists():
        raise CliError(f"image {spec!r} is neither a dataset id nor a file")
    if path.suffix == ".npy":
        return np.load(path), path.stem
    raise CliError(f"unsupported image file type: {path.suffix} (use .npy or a dataset id)")


def cmd_explain(args) -> int:
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    model, _, meta = load_checkpoint(args.checkpoint)
    dataset = D.read_dataset(args.data) if args.data else None
    image, name = _load_image(args.image, dataset)
    expl = explain(model, image, top_n=args.top)
    files = render(expl, image, args.out, dataset=dataset)
    print(f"wrote {len(files)} explanation files for {name} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="protopyramid",
        description="Multi-scale prototype classifier: data, training, evaluation, explanation",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("print-default-config").set_defaults(func=cmd_print_default_config)

    g = sub.add_parser("gen-data")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--stage", choices=["a", "b", "c"])
    t.add_argument("--ignore-config-mismatch", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--config")
    e.add_argument("--out")
    e.add_argument("--ignore-config-mismatch", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("explain")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", required=True)
    x.add_argument("--data")
    x.add_argument("--out", required=True)
    x.add_argument("--top", type=int, default=3)
    x.set_defaults(func=cmd_explain)
    return p


def main(argv=None) -> int:
    if os.environ.get("PROTOPYRAMID_LOG", "").lower() in ("debug", "verbose"):
        np.seterr(all="warn")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, TrainingError, FileNotFoundError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
