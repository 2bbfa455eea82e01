"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import data as D
from . import metrics
from .training import (ABLATIONS, Checkpoint, GanTrainer, TryOnPipeline, load_config, matcher_from_checkpoint,
                       train_bpgm, train_generator)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("cvton_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file with TrainConfig / ToySpec keys")
    p.add_argument("--seed", type=int, help="seed for every random choice in the command")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cvton-lab", description="Toy-scale virtual try-on experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the procedural toy dataset")
    _shared(p)
    p.add_argument("--spec", type=Path, help="YAML/JSON file with ToySpec fields")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train-bpgm", help="train the geometric matcher")
    _shared(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-cag", help="train the context-aware generator")
    _shared(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--bpgm", type=Path, help="matcher checkpoint (not needed with --no-bpgm)")
    p.add_argument("--epochs", type=int)
    for flag in ABLATIONS:
        p.add_argument(f"--{flag.replace('_', '-')}", action="store_true", default=None)

    p = sub.add_parser("infer", help="dress a person in a garment")
    _shared(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--person", type=Path, required=True, help="person PNG inside a dataset split directory")
    p.add_argument("--garment", type=Path, required=True, help="catalog garment PNG")
    p.add_argument("--grid", action="store_true", help="also write person | garment | warped | result")
    p.add_argument("--live", action="store_true", help="use live instead of EMA generator weights")

    p = sub.add_parser("evaluate", help="FID / LPIPS on a test split")
    _shared(p)
    p.add_argument("--data", type=Path, required=True)
    model = p.add_mutually_exclusive_group(required=True)
    model.add_argument("--ckpt", type=Path)
    model.add_argument("--baseline", choices=("identity", "gray"),
                       help="score ground truth or constant mid-gray images instead of a model")
    p.add_argument("--protocol", choices=("paired", "unpaired"), required=True)
    p.add_argument("--split", choices=D.SPLITS, default="test")
    p.add_argument("--batch-size", type=int, default=25)

    p = sub.add_parser("ablate", help="train and score the four ablation variants")
    _shared(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--bpgm", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    return parser


# --- helpers ---------------------------------------------------------------


def _read_yaml(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    loaded = yaml.safe_load(path.read_text()) or {}
    if not isinstance(loaded, dict):
        raise UsageError(f"{path} must contain a mapping")
    return loaded


def _train_config(args, **extra):
    overrides = {"seed": args.seed, **extra}
    return load_config(args.config, **overrides)


def _save_image(t: torch.Tensor, path: Path) -> None:
    arr = ((t.detach().double().clamp(-1, 1) + 1) * 127.5).round().byte().permute(1, 2, 0).numpy()
    Image.fromarray(arr).save(path, format="PNG")


def _load_rgb(path: Path) -> torch.Tensor:
    if not path.is_file():
        raise D.DataError(f"missing image {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB")).copy()
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1).permute(2, 0, 1)


# --- commands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    fields = _read_yaml(args.spec)
    fields.update({k: v for k, v in (("height", args.height), ("width", args.width), ("n_train", args.n_train),
                                     ("n_test", args.n_test), ("seed", args.seed)) if v is not None})
    spec = D.ToySpec.from_dict(fields)
    root = D.generate_toy_dataset(spec, args.out)
    print(f"wrote {spec.n_train} train / {spec.n_test} test samples to {root}")
    return EXIT_OK


def _dataset_config(args, cfg):
    spec_file = args.data / "toyspec.json"
    if spec_file.is_file():
        spec = json.loads(spec_file.read_text())
        if (spec["height"], spec["width"]) != cfg.resolution:
            cfg = cfg.replace(height=spec["height"], width=spec["width"])
    return cfg


def cmd_train_bpgm(args) -> int:
    cfg = _dataset_config(args, _train_config(args))
    ds = D.load_dataset(args.data, "train", "paired")
    ckpt = train_bpgm(cfg, ds, args.out, args.epochs)
    print(f"matcher trained for {ckpt.epoch} epochs; checkpoints in {args.out}")
    return EXIT_OK


def cmd_train_cag(args) -> int:
    flags = {f: getattr(args, f) for f in ABLATIONS}
    cfg = _dataset_config(args, _train_config(args, **flags))
    if not cfg.no_bpgm and args.bpgm is None:
        raise UsageError("--bpgm is required unless --no-bpgm is given")
    bpgm = Checkpoint.load(args.bpgm) if args.bpgm is not None else None
    ds = D.load_dataset(args.data, "train", "paired")
    ckpt = train_generator(cfg, ds, bpgm, args.out, args.epochs)
    print(f"generator trained for {ckpt.epoch} epochs; checkpoints in {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    pipe = TryOnPipeline.from_checkpoint(args.ckpt, use_ema=not args.live)
    base, sid = args.person.parent.parent, args.person.stem
    sample = D.read_sample(base, sid)
    garment = _load_rgb(args.garment)
    if tuple(garment.shape[-2:]) != tuple(sample.person.shape[-2:]):
        raise D.DataError(f"garment {tuple(garment.shape[-2:])} and person {tuple(sample.person.shape[-2:])} "
                          "differ in resolution")
    target = D.TryOnSample(sample.person, garment, sample.seg, sample.clothing_mask,
                           D.garment_mask_from_image(garment), args.garment.stem)
    batch = D.collate([(sample, target)], pipe.cfg.body_channels)
    out = pipe.run(batch)
    args.out.mkdir(parents=True, exist_ok=True)
    _save_image(out["output"][0], args.out / "tryon.png")
    if args.grid:
        row = torch.cat([out["person"][0], out["garment"][0], out["warped"][0], out["output"][0]], dim=-1)
        _save_image(row, args.out / "grid.png")
    print(f"wrote {args.out / 'tryon.png'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pairing = "paired" if args.protocol == "paired" else "shuffled"
    seed = args.seed if args.seed is not None else 0
    ds = D.load_dataset(args.data, args.split, pairing, seed=seed)
    if args.baseline is None:
        model = TryOnPipeline.from_checkpoint(args.ckpt)
        cfg = model.cfg
    else:
        model = (lambda b: b["person"]) if args.baseline == "identity" else (lambda b: torch.zeros_like(b["person"]))
        cfg = load_config(args.config)
    fx = metrics.load_extractor(cfg.extractor_weights, cfg.extractor_seed, cfg.torch_dtype)
    report = metrics.evaluate_testset(model, D.iterate_batches(ds, args.batch_size), args.protocol, fx, seed)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write(args.out / "report.json")
    print(report.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _dataset_config(args, _train_config(args))
    bpgm = Checkpoint.load(args.bpgm)
    train = D.load_dataset(args.data, "train", "paired")
    rows = {}
    for flag in (None, *ABLATIONS):
        name = flag or "full"
        cfg = base.replace(**{flag: True}) if flag else base
        matcher = None if cfg.no_bpgm else matcher_from_checkpoint(bpgm, cfg)
        trainer = GanTrainer(cfg, matcher)
        trainer.run(train, args.epochs, args.out / name)
        pipe = trainer.pipeline(use_ema=True)
        fx = metrics.load_extractor(cfg.extractor_weights, cfg.extractor_seed, cfg.torch_dtype)
        reports = {}
        for protocol, pairing in (("paired", "paired"), ("unpaired", "shuffled")):
            ds = D.load_dataset(args.data, "test", pairing, seed=cfg.seed)
            reports[protocol] = metrics.evaluate_testset(pipe, D.iterate_batches(ds, 25), protocol, fx, cfg.seed)
            reports[protocol].write(args.out / name / f"report_{protocol}.json")
        rows[name] = reports
        print(f"{name:>18}: {reports['paired'].summary()} | {reports['unpaired'].summary()}")
    summary = {k: {p: r.fid if p == "unpaired" else r.lpips_mean for p, r in v.items()} for k, v in rows.items()}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-bpgm": cmd_train_bpgm,
    "train-cag": cmd_train_cag,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None and not args.config.is_file():
            raise UsageError(f"config file {args.config} does not exist")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
