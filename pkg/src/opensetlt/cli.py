"""Command-line driver: ``opensetlt <subcommand> ...``.

Every subcommand writes only below ``--out``. Errors exit nonzero with a
categorised message; config errors list every offending key.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import KEY_DOCS, TrainConfig, describe_keys
from .errors import ConfigError, OpenSetLTError
from .etf import make_simplex_etf, verify_etf

SYNTH_KEYS = [k for k in KEY_DOCS if k.startswith("synth_")]
DATA_KEYS = ["dataset", "dataset_checksum"] + SYNTH_KEYS
SPLIT_KEYS = DATA_KEYS + ["seen_classes", "label_fraction", "split_seed"]
EVAL_KEYS = DATA_KEYS + ["manifest", "eval_batch_size"]


def _parse_classes(text):
    try:
        return [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"seen_classes: expected comma-separated integers, got {text!r}") from None


def load_config(args) -> TrainConfig:
    """Config file (or defaults) with command-line overrides applied."""
    d = TrainConfig().as_dict()
    if getattr(args, "config", None):
        d = TrainConfig.load(args.config).as_dict()
    if getattr(args, "dataset", None):
        d["dataset"] = args.dataset
    if getattr(args, "label_fraction", None) is not None:
        d["label_fraction"] = args.label_fraction
    if getattr(args, "seen_classes", None):
        d["seen_classes"] = _parse_classes(args.seen_classes)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
        d["split_seed"] = args.seed
    return TrainConfig.from_dict(d)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(title, payload):
    print(f"===== {title} =====")
    print(payload.rstrip("\n"))
    print(f"===== end {title} =====")


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_split(args):
    from .training import resolve_dataset
    from .data import make_split

    cfg = load_config(args)
    dataset = resolve_dataset(cfg)
    manifest = make_split(dataset, cfg.seen_classes, cfg.label_fraction, cfg.split_seed)
    path = _out_dir(args) / "manifest.json"
    manifest.save(path)
    print(f"manifest: {path} (labelled {len(manifest.labelled_ids)}, "
          f"unlabelled {len(manifest.unlabelled_ids)}, val {len(manifest.val_ids)})")
    return 0


def cmd_synth_data(args):
    from .data import save_dataset
    from .training import resolve_dataset

    cfg = load_config(args).replace(dataset="synthetic")
    dataset = resolve_dataset(cfg)
    path = save_dataset(dataset, _out_dir(args) / "dataset.npz")
    counts = dataset.class_counts("train")
    print(f"dataset: {path} (train counts {list(map(int, counts))})")
    return 0


def cmd_train(args):
    from .training import fit, resolve_dataset, resolve_manifest

    cfg = load_config(args)
    out = _out_dir(args)
    dataset = resolve_dataset(cfg)
    manifest = resolve_manifest(cfg, dataset)
    cfg.save(out / "config.json")
    manifest.save(out / "manifest.json")
    result = fit(cfg, dataset, manifest, out_dir=out, resume=args.resume, log_every=args.log_every)
    rec = result.record
    print(f"trained {len(rec.epochs)} epochs; best epoch {rec.best_epoch} "
          f"(val closed acc {rec.best_val_acc:.2f}); config digest {rec.config_digest}")
    return 0


def _load_for_eval(args):
    from .data import SplitManifest
    from .training import load_checkpoint, resolve_dataset, resolve_manifest

    model, meta, _ = load_checkpoint(args.checkpoint)
    d = dict(meta["config"])
    if args.dataset:
        d["dataset"] = args.dataset
    cfg = TrainConfig.from_dict(d)
    dataset = resolve_dataset(cfg)
    manifest_path = args.manifest or (Path(args.checkpoint).parent / "manifest.json")
    if Path(manifest_path).exists() or args.manifest:
        manifest = SplitManifest.load(manifest_path)
        manifest.check_dataset(dataset)
    else:
        manifest = resolve_manifest(cfg, dataset)
    return model, meta, cfg, dataset, manifest


def _write_report(args, out):
    from .evaluation import report

    model, meta, cfg, dataset, manifest = _load_for_eval(args)
    rep = report(model, dataset, manifest,
                 config=dict(cfg.as_dict(), config_digest=meta["config_digest"],
                             source_revision=meta.get("source_revision", "")),
                 batch_size=cfg.eval_batch_size)
    (out / "metrics.json").write_text(rep.to_json())
    (out / "confusion.csv").write_text(rep.confusion_csv())
    summary = (f"closed_set_acc,{rep.closed_set_acc!r}\n"
               f"open_set_acc,{rep.open_set_acc!r}\n"
               f"joint_acc_k_plus_1,{rep.joint_acc!r}\n")
    summary += "".join(f"class_{c}_acc,{a!r}\n" for c, a in zip(rep.seen_classes, rep.per_class_acc))
    _emit("metrics", summary)
    _emit("confusion", rep.confusion_csv())
    return rep, meta


def cmd_eval(args):
    _write_report(args, _out_dir(args))
    return 0


def cmd_report(args):
    from . import plotting

    out = _out_dir(args)
    rep, meta = _write_report(args, out)
    figs = [plotting.per_class_bar(rep, out / "per_class_acc.png"),
            plotting.confusion_heatmap(rep, out / "confusion.png")]
    if meta.get("history"):
        figs.append(plotting.training_curves(meta["history"], out / "training_curves.png"))
    _emit("figures", "\n".join(str(f) for f in figs))
    return 0


def cmd_etf_check(args):
    frame = make_simplex_etf(args.dim, args.classes, seed=args.seed)
    rep = verify_etf(frame, args.tol)
    print(f"dim={args.dim} classes={args.classes} seed={args.seed}")
    print(f"max_norm_deviation={rep.max_norm_deviation:.3e}")
    print(f"max_angle_deviation={rep.max_angle_deviation:.3e}")
    print("PASS" if rep.passed else "FAIL")
    if args.out:
        from .etf import save_etf
        save_etf(frame, _out_dir(args) / "etf")
    return 0 if rep.passed else 1


# ---------------------------------------------------------------------------
# parser


def _add_common(p, config=True):
    if config:
        p.add_argument("--config", help="flat JSON config file (unset keys take defaults)")
        p.add_argument("--dataset", help="override 'dataset' (archive path or 'synthetic')")
        p.add_argument("--seed", type=int, help="override 'seed' and 'split_seed'")
    p.add_argument("--out", required=True, help="output directory; nothing is written elsewhere")


def _add_split_flags(p):
    p.add_argument("--label-fraction", type=float, help="override 'label_fraction'")
    p.add_argument("--seen-classes", help="override 'seen_classes', e.g. 0,2,4")


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="opensetlt",
        description="Open-set semi-supervised classification on long-tailed data.",
        epilog="Data paths that are relative and missing are looked up under $OPENSETLT_DATA_ROOT.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help, keys):
        epilog = "config keys:\n" + describe_keys(keys) if keys else None
        p = sub.add_parser(name, help=help, description=help, epilog=epilog, formatter_class=fmt)
        p.set_defaults(func=fn)
        return p

    p = add("make-split", cmd_make_split, "write a seen/unseen, labelled/unlabelled split manifest", SPLIT_KEYS)
    _add_common(p)
    _add_split_flags(p)

    p = add("synth-data", cmd_synth_data, "generate the synthetic long-tail dataset archive", SYNTH_KEYS)
    _add_common(p)

    p = add("train", cmd_train, "train a model; writes metrics.csv, run_record.json and checkpoints",
            list(KEY_DOCS))
    _add_common(p)
    _add_split_flags(p)
    p.add_argument("--resume", help="continue from a checkpoint_last.npz written with the same config")
    p.add_argument("--log-every", type=int, default=0, help="log every N steps (0 = per epoch only)")

    for name, fn, text in (
        ("eval", cmd_eval, "evaluate a checkpoint; writes metrics.json and confusion.csv"),
        ("report", cmd_report, "evaluate a checkpoint and render figures next to the metrics"),
    ):
        p = add(name, fn, text, EVAL_KEYS)
        p.add_argument("--checkpoint", required=True, help="checkpoint .npz written by train")
        p.add_argument("--manifest", help="split manifest (default: manifest.json next to the checkpoint)")
        p.add_argument("--dataset", help="override the dataset recorded in the checkpoint")
        p.add_argument("--out", required=True, help="output directory; nothing is written elsewhere")

    p = add("etf-check", cmd_etf_check, "build a simplex ETF and verify its geometry", None)
    p.add_argument("--dim", type=int, required=True, help="feature dimension d")
    p.add_argument("--classes", type=int, required=True, help="number of classes L")
    p.add_argument("--seed", type=int, default=0, help="rotation seed")
    p.add_argument("--tol", type=float, default=1e-6, help="tolerance on norms and angles")
    p.add_argument("--out", help="optional directory to save the frame to")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"{exc.category}:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return exc.exit_code
    except OpenSetLTError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
