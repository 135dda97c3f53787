"""Command-line pipeline: phantom data, training, evaluation, translation.

Every subcommand is driven by the YAML run config (see config module),
except `translate`, which rebuilds everything it needs from the
checkpoint itself, and `make-phantoms`, which writes a synthetic paired
dataset for desk-scale runs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .backbone import backbone_from_recipe
from .config import load_run_config, load_split_datasets, make_backbone
from .data import load_volume, save_volume
from .errors import (
    BackboneLoadError,
    CheckpointError,
    ConfigError,
    ContractError,
    DegenerateInputError,
    NonFiniteLossError,
    ShapeError,
    VolumeIOError,
)
from .evaluation import (
    ThresholdBandSegmenter,
    evaluate_run,
    model_predictor,
    run_ablation,
    translate_volume,
)
from .phantoms import ORGAN_BANDS, write_phantom_dataset
from .training import load_checkpoint, train

SEGMENTERS = {"threshold-band": lambda: ThresholdBandSegmenter(ORGAN_BANDS)}

_USER_ERRORS = (
    BackboneLoadError,
    CheckpointError,
    ConfigError,
    ContractError,
    DegenerateInputError,
    NonFiniteLossError,
    ShapeError,
    VolumeIOError,
)


def _write_train_log(log, path: Path) -> None:
    # one JSON object per line: step records, then per-epoch validation
    with path.open("w") as fh:
        for rec in log.records:
            fh.write(json.dumps({"kind": "step", **rec}) + "\n")
        for rec in log.val_records:
            fh.write(json.dumps({"kind": "val", **rec}) + "\n")


def _cmd_make_phantoms(args) -> int:
    manifest = write_phantom_dataset(
        args.out,
        n_cases=args.cases,
        shape=(args.slices, args.size, args.size),
        seed=args.seed,
    )
    print(f"wrote {args.cases} paired cases; manifest: {manifest}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    backbone = make_backbone(cfg.backbone)
    datasets = load_split_datasets(cfg)
    if len(datasets["train"]) == 0:
        raise ContractError("train split is empty")
    result = train(
        cfg.train,
        datasets["train"],
        backbone,
        val_dataset=datasets["val"],
        out_dir=cfg.out_dir,
        resume_from=args.resume,
    )
    _write_train_log(result.log, Path(cfg.out_dir) / "train_log.jsonl")
    losses = result.log.losses()
    print(f"trained {len(losses)} steps in {result.log.wall_seconds:.1f}s")
    print(f"train loss {losses[0]:.5f} -> {losses[-1]:.5f}")
    if result.log.val_records:
        best = min(r["val_l1"] for r in result.log.val_records)
        print(f"best val L1 {best:.5f}")
    for label, path in (("best", result.best_checkpoint), ("final", result.final_checkpoint)):
        if path:
            print(f"{label} checkpoint: {path}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config)
    backbone = make_backbone(cfg.backbone)
    datasets = load_split_datasets(cfg)
    if len(datasets["test"]) == 0:
        raise ContractError("test split is empty; evaluation needs held-out cases")
    model = load_checkpoint(args.ckpt, backbone, expected_config=cfg.train.model)
    segmenter = SEGMENTERS[args.segmenter]() if args.segmenter else None
    report = evaluate_run(model_predictor(model), datasets["test"], segmenter=segmenter)
    report.save(args.out)
    print(report.render())
    print(f"report written to {args.out}")
    return 0


def _cmd_translate(args) -> int:
    try:
        payload = torch.load(args.ckpt, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - rewrapped below
        raise CheckpointError(f"cannot read checkpoint {args.ckpt}: {exc}") from exc
    recipe = payload.get("backbone_recipe") if isinstance(payload, dict) else None
    backbone = backbone_from_recipe(recipe) if recipe else None
    model = load_checkpoint(args.ckpt, backbone)
    volume = load_volume(args.in_path, modality=args.modality)
    result = translate_volume(model, volume)
    save_volume(result, args.out)
    print(f"wrote synthetic CT {result.shape} to {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    backbone = make_backbone(cfg.backbone)
    datasets = load_split_datasets(cfg)
    report = run_ablation(
        cfg.train, datasets["train"], datasets["val"], backbone, out_dir=cfg.out_dir
    )
    out = Path(cfg.out_dir) / "ablation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(report.render())
    print(f"table written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sctfuse",
        description="Source-modality to synthetic-CT translation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    mp = sub.add_parser("make-phantoms", help="write a synthetic paired dataset")
    mp.add_argument("--out", required=True, help="output directory")
    mp.add_argument("--cases", type=int, default=40)
    mp.add_argument("--slices", type=int, default=2, help="slices per volume")
    mp.add_argument("--size", type=int, default=64, help="in-plane size")
    mp.add_argument("--seed", type=int, default=0)
    mp.set_defaults(func=_cmd_make_phantoms)

    tr = sub.add_parser("train", help="train a generator from a run config")
    tr.add_argument("--config", required=True, help="YAML run config")
    tr.add_argument("--resume", default=None, help="checkpoint to warm-start from")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--segmenter", default=None, choices=sorted(SEGMENTERS))
    ev.add_argument("--out", required=True, help="where to write report.json")
    ev.set_defaults(func=_cmd_evaluate)

    ts = sub.add_parser("translate", help="translate one volume with a checkpoint")
    ts.add_argument("--ckpt", required=True)
    ts.add_argument("--in", dest="in_path", required=True, metavar="IN")
    ts.add_argument("--out", required=True)
    ts.add_argument("--modality", default="CBCT", choices=("CBCT", "MRI"))
    ts.set_defaults(func=_cmd_translate)

    ab = sub.add_parser("ablate", help="train and compare all generator variants")
    ab.add_argument("--config", required=True)
    ab.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
