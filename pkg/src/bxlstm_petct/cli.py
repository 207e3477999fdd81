"""Command-line entry point: ``bxlstm-petct <subcommand> ...``.

Exit status: 0 success, 1 runtime error (one-line diagnostic on stderr),
2 usage error.  Configuration comes from a JSON file with optional sections
``network``, ``train``, ``mae`` and ``augment``; flags override it.  The
``BXLSTM_LOG_LEVEL`` environment variable sets log verbosity only.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .augment import AugmentConfig
from .errors import PipelineError
from .mae import MaeConfig, pretrain
from .network import NetworkConfig, load_checkpoint
from .phantom import PhantomSpec, generate_corpus, read_manifest

log = logging.getLogger("bxlstm_petct")

N_FOLDS = 5


class UsageError(Exception):
    pass


def load_run_config(path) -> dict:
    """Sections of a run config file; unknown top-level keys are rejected."""
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    unknown = set(cfg) - {"network", "train", "mae", "augment"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _network_cfg(cfg: dict, **overrides) -> NetworkConfig:
    d = dict(cfg.get("network", {}))
    d.update({k: v for k, v in overrides.items() if v is not None})
    return NetworkConfig.from_dict(d)


def _progress(every: int):
    def report(row):
        if row["step"] % every == 0 or "val_dice" in row:
            extra = f" val_dice={row['val_dice']:.4f}" if "val_dice" in row else ""
            log.info("step %d loss %.5f%s", row["step"], row["loss"], extra)

    return report


# ----------------------------------------------------------------------------
# subcommands


def cmd_phantom(args):
    spec = PhantomSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    manifest = generate_corpus(spec, args.n, args.out)
    print(f"wrote {len(manifest['cases'])} cases to {args.out}")


def cmd_split(args):
    from .training import make_splits, write_splits

    manifest = json.loads(Path(args.manifest).read_text())
    names = manifest.get("labeled", manifest["cases"])
    splits = make_splits(names, args.k, args.seed)
    write_splits(splits, args.out)
    print(f"wrote {len(splits)} folds over {len(names)} cases to {args.out}")


def cmd_pretrain(args):
    cfg = load_run_config(args.config)
    net = _network_cfg(cfg, seed=args.seed)
    mae_cfg = MaeConfig.from_dict(cfg.get("mae", {}))
    if args.seed is not None:
        mae_cfg = dataclasses.replace(mae_cfg, seed=args.seed)
    log_path = args.log or f"{args.out}.log.csv"
    rows = pretrain(args.corpus, net, mae_cfg, args.steps, args.out, log_path, progress=_progress(25))
    final = f", last loss {rows[-1]['loss']:.5f}" if rows else ""
    print(f"wrote MAE checkpoint {args.out} after {len(rows)} steps{final}")


def cmd_finetune(args):
    from .training import TrainConfig, finetune, read_splits

    cfg = load_run_config(args.config)
    net = _network_cfg(cfg, seed=args.seed)
    train = dict(cfg.get("train", {}))
    for key in ("steps", "seed"):
        if getattr(args, key) is not None:
            train[key] = getattr(args, key)
    if args.no_augment:
        train["augment"] = False
    train_cfg = TrainConfig.from_dict(train)
    aug = AugmentConfig.from_dict(cfg.get("augment", {}))
    splits = read_splits(args.splits)
    if len(splits) != N_FOLDS:
        raise UsageError(f"{args.splits} has {len(splits)} folds, expected {N_FOLDS}")
    log_path = args.log or f"{args.out}.log.csv"
    result = finetune(
        splits,
        args.fold,
        args.corpus,
        net,
        train_cfg,
        init=args.init,
        out_ckpt=args.out,
        log_path=log_path,
        aug_cfg=aug,
        progress=_progress(25),
    )
    if result["transfer"] is not None:
        t = result["transfer"]
        print(f"initialised {len(t['copied'])} encoder tensors from {args.init}, {len(t['fresh'])} fresh")
    last = result["validation"][-1]["dice"] if result["validation"] else float("nan")
    print(f"wrote fold {args.fold} checkpoint {args.out}; final validation dice {last:.4f}")


def cmd_infer(args):
    from .inference import predict_case, write_prediction
    from .volume_io import preprocess_case, read_case, resample_to

    model = load_checkpoint(args.ckpt)
    if model.kind != "segmentation":
        raise UsageError(f"{args.ckpt} is a {model.kind} checkpoint, not a segmentation model")
    names = args.case
    if names == ["all"]:
        names = read_manifest(args.corpus)["cases"]
    for name in names:
        raw = read_case(args.corpus, name)
        _, mask = predict_case(model, preprocess_case(raw), tta=args.tta == "on")
        # back onto the acquisition grid so masks compare directly with the ground truth
        mask = resample_to(mask, raw.ct.dims, raw.ct.spacing)
        path = write_prediction(mask, args.out, name)
        print(f"{name}: {int(mask.data.sum())} lesion voxels -> {path}")


def _find_masks(directory, suffix) -> dict:
    d = Path(directory)
    return {p.name[: -len(suffix)]: p for p in sorted(d.glob(f"*{suffix}"))}


def cmd_evaluate(args):
    from .metrics import score_case, write_aggregate_json, write_scores_csv
    from .volume_io import read_volume

    gt = _find_masks(args.gt, "_mask.vvol")
    preds = _find_masks(args.pred, "_pred.vvol") or _find_masks(args.pred, "_mask.vvol")
    if not gt:
        raise PipelineError(f"no *_mask.vvol ground truth in {args.gt}")
    names = sorted(set(gt) & set(preds))
    missing = sorted(set(gt) - set(preds))
    if not names:
        raise PipelineError(f"no predictions in {args.pred} match ground truth in {args.gt}")
    if missing:
        log.warning("no prediction for %d cases: %s", len(missing), ", ".join(missing))
    scores = []
    for name in names:
        g, p = read_volume(gt[name]), read_volume(preds[name])
        scores.append(score_case(name, p.data, g.data, g.spacing, args.connectivity))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores_csv(scores, out / "scores.csv")
    summary = write_aggregate_json(scores, out / "summary.json")
    print(f"dice {summary['dice']:.4f}  fnv {summary['fnv_cm3']:.4f} cm3  fpv {summary['fpv_cm3']:.4f} cm3  ({len(scores)} cases)")


def cmd_ablate(args):
    from .training import TrainConfig, ablation

    cfg = load_run_config(args.config)
    net = _network_cfg(cfg)
    train = dict(cfg.get("train", {}))
    if args.steps is not None:
        train["steps"] = args.steps
    report = ablation(
        args.corpus,
        args.out,
        net,
        TrainConfig.from_dict(train),
        MaeConfig.from_dict(cfg.get("mae", {})),
        pretrain_steps=args.pretrain_steps,
        fold=args.fold,
    )
    print(f"{'variant':10s} {'dice':>7s} {'fnv_cm3':>9s} {'fpv_cm3':>9s}")
    for r in report["rows"]:
        print(f"{r['variant']:10s} {r['dice']:7.4f} {r['fnv_cm3']:9.4f} {r['fpv_cm3']:9.4f}")


def cmd_gradcheck(args):
    from .selfcheck import run_suite

    def report(r):
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:22s} rel_err={r.error:.3e} tol={r.tol:.0e} ({r.seconds:.1f}s)", flush=True)

    results = run_suite(points=args.points, seed=args.seed, network=not args.skip_network, report=report)
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


def _resolve(path_or_dir, name, suffix) -> Path:
    p = Path(path_or_dir)
    return p / f"{name}{suffix}" if p.is_dir() else p


def cmd_export_slices(args):
    from .slices import export_slices
    from .volume_io import read_volume

    gt = read_volume(_resolve(args.gt, args.case, "_mask.vvol"))
    pred = read_volume(_resolve(args.pred, args.case, "_pred.vvol"))
    image_dir = Path(args.image) if args.image else Path(args.gt) if Path(args.gt).is_dir() else Path(args.gt).parent
    image_path = image_dir / f"{args.case}_{args.channel}.vvol"
    image = read_volume(image_path).data if image_path.exists() else gt.data
    written = export_slices(args.case, image, gt.data, pred.data, args.out)
    print(f"wrote {len(written)} images to {args.out}")


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="bxlstm-petct", description=__doc__.split("\n")[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("phantom", help="generate a synthetic PET/CT corpus", formatter_class=fmt)
    p.add_argument("--spec", help="phantom spec JSON (defaults used when omitted)")
    p.add_argument("--n", type=int, required=True, help="number of cases")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("split", help="write 5-fold cross-validation splits", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="corpus manifest.json")
    p.add_argument("--k", type=int, default=N_FOLDS, help="number of folds")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")
    p.add_argument("--out", required=True, help="splits JSON path")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining", formatter_class=fmt)
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--steps", type=int, required=True, help="optimizer steps")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log CSV (default: <out>.log.csv)")
    p.add_argument("--seed", type=int, help="override network and MAE seeds")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning on one fold", formatter_class=fmt)
    p.add_argument("--splits", required=True, help="splits JSON")
    p.add_argument("--fold", type=int, required=True, choices=range(N_FOLDS), metavar="{0..4}", help="fold index")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--init", help="MAE checkpoint whose encoder initialises the model")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--seed", type=int, help="override network and data seeds")
    p.add_argument("--no-augment", action="store_true", help="disable augmentation")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="predict lesion masks", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="fine-tuned checkpoint")
    p.add_argument("--case", required=True, nargs="+", help="case name(s), or 'all'")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--tta", choices=("on", "off"), default="on", help="flip test-time augmentation")
    p.add_argument("--out", required=True, help="prediction directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against ground truth", formatter_class=fmt)
    p.add_argument("--pred", required=True, help="directory of <case>_pred.vvol (or <case>_mask.vvol)")
    p.add_argument("--gt", required=True, help="directory of <case>_mask.vvol")
    p.add_argument("--out", required=True, help="report directory (scores.csv, summary.json)")
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26, help="component connectivity")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="scratch vs enc+SSL vs bot+SSL comparison", formatter_class=fmt)
    p.add_argument("--corpus", required=True, help="corpus directory (>= 10 labeled cases)")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--pretrain-steps", type=int, default=100, help="MAE steps per placement")
    p.add_argument("--fold", type=int, default=0, choices=range(N_FOLDS), metavar="{0..4}", help="fold index")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=fmt)
    p.add_argument("--points", type=int, default=5, help="random points per op")
    p.add_argument("--seed", type=int, default=0, help="seed for the random points")
    p.add_argument("--skip-network", action="store_true", help="skip the full tiny-network check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-slices", help="mid-slice PGM images with GT/prediction contours", formatter_class=fmt)
    p.add_argument("--case", required=True, help="case name")
    p.add_argument("--pred", required=True, help="prediction .vvol or directory")
    p.add_argument("--gt", required=True, help="ground-truth .vvol or corpus directory")
    p.add_argument("--image", help="directory holding <case>_<channel>.vvol (default: the gt directory)")
    p.add_argument("--channel", choices=("pet", "ct"), default="pet", help="background image channel")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_slices)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("BXLSTM_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        status = args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (PipelineError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0 if status is None else int(status)


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
