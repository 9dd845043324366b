"""Command-line entry point wiring dataset generation, augmentation, training,
evaluation, exports, and complexity profiling.

Exit codes: 0 success, 2 usage, 3 I/O, 4 configuration, 5 numeric abort.
Config precedence: flags > config file > preset > built-in defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .autodiff import ContractError
from .data import ManifestError, load_manifest
from .evaluate import (cross_domain_report, export_embeddings, export_trajectory)
from .losses import BTConfig
from .model import AprModel, ConfigError, get_profile, profile_names
from .complexity import layer_table, profile_named, summary_csv, summary_table
from .scene import ALL_STYLES, augment_dataset, build_dataset, make_scene
from .trainer import PRESETS, NumericError, TrainConfig, train_da, train_sb

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONFIG = 4
EXIT_NUMERIC = 5


def _read_config_file(path: str | None) -> dict[str, str]:
    """Parse `key = value` lines; `#` comments and blank lines are skipped."""
    if path is None:
        return {}
    text = Path(path).read_text()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


_TRAIN_FIELDS = {
    "epochs": int, "batch_size": int, "lr": float, "weight_decay": float,
    "step_size": int, "gamma": float, "seed": int, "short_side": int, "crop": int,
    "lam": float, "alpha1": float, "alpha2": float, "eps": float,
    "latent_dim": int, "attention_dropout": float,
}


def _resolve_train_config(args) -> tuple[TrainConfig, dict]:
    """Overlay preset, config file, and flags into one resolved mapping."""
    resolved = dict(PRESETS[args.preset])
    resolved.update({"lam": 5.1e-3, "alpha1": 1e-7, "alpha2": 1e-3, "eps": 1e-5,
                     "seed": 0, "latent_dim": None, "attention_dropout": None})
    file_values = _read_config_file(args.config)
    for key, raw in file_values.items():
        if key not in _TRAIN_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        resolved[key] = _TRAIN_FIELDS[key](raw)
    for key in _TRAIN_FIELDS:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    bt = BTConfig(lam=resolved["lam"], alpha1=resolved["alpha1"],
                  alpha2=resolved["alpha2"], eps=resolved["eps"])
    cfg = TrainConfig(
        regime=args.regime, epochs=resolved["epochs"],
        batch_size=resolved["batch_size"], lr=resolved["lr"],
        weight_decay=resolved["weight_decay"], step_size=resolved["step_size"],
        gamma=resolved["gamma"], bt=bt, seed=resolved["seed"],
        short_side=resolved["short_side"], crop=resolved["crop"])
    return cfg, resolved


def _print_resolved(name: str, mapping: dict) -> None:
    print(f"[{name}] resolved configuration:")
    for key in sorted(mapping):
        print(f"  {key} = {mapping[key]}")


def _write_resolved(out_dir: Path, mapping: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {mapping[key]}" for key in sorted(mapping)]
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="master random seed (default 0)")
    parser.add_argument("--config", type=str, default=None,
                        help="key = value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poseadapt",
        description="domain-adaptive absolute pose regression at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic scene dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-train", type=int, default=500, help="training poses (default 500)")
    p.add_argument("--n-test", type=int, default=100, help="test poses (default 100)")
    p.add_argument("--styles", default=",".join(ALL_STYLES),
                   help=f"comma list of styles (default {','.join(ALL_STYLES)})")
    p.add_argument("--landmarks", type=int, default=48,
                   help="landmarks in the scene (default 48)")
    p.add_argument("--render-size", type=int, default=72,
                   help="rendered image side in pixels (default 72)")

    p = sub.add_parser("augment", help="add style variants to an existing dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--styles", required=True, help="comma list of styles to add")

    p = sub.add_parser("train", help="train a DA or SB model")
    _add_common(p)
    p.add_argument("--regime", choices=("da", "sb"), default="da",
                   help="three-branch domain-adaptive or single-branch (default da)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                   help="hyperparameter preset (default desk)")
    p.add_argument("--arch", choices=profile_names(), default="desk-small",
                   help="architecture profile (default desk-small)")
    p.add_argument("--epochs", type=int, default=None, help="override epochs (preset 60)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None,
                   help="override batch size (preset 16)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-3)")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None,
                   help="L2 weight decay (default 1e-4)")
    p.add_argument("--step-size", dest="step_size", type=int, default=None,
                   help="scheduler step size in epochs (preset 20)")
    p.add_argument("--gamma", type=float, default=None,
                   help="scheduler decay factor (preset 0.5)")
    p.add_argument("--lam", type=float, default=None,
                   help="off-diagonal weight of the twin loss (default 5.1e-3)")
    p.add_argument("--alpha1", type=float, default=None,
                   help="invariance-term weight (default 1e-7)")
    p.add_argument("--alpha2", type=float, default=None,
                   help="redundancy-term weight (default 1e-3)")
    p.add_argument("--eps", type=float, default=None,
                   help="standardization epsilon (default 1e-5)")
    p.add_argument("--latent-dim", dest="latent_dim", type=int, default=None,
                   help="override latent width of the architecture")
    p.add_argument("--attention-dropout", dest="attention_dropout", type=float,
                   default=None, help="attention dropout rate (default 0.0025)")
    p.add_argument("--short-side", dest="short_side", type=int, default=None,
                   help="rescale target for the shorter image side (preset 72)")
    p.add_argument("--crop", type=int, default=None,
                   help="square crop size (preset 64)")

    p = sub.add_parser("eval", help="cross-domain median-error report")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--domains", default=",".join(ALL_STYLES),
                   help=f"comma list of domains (default {','.join(ALL_STYLES)})")
    p.add_argument("--split", default="test", help="manifest split (default test)")
    p.add_argument("--out", default=None, help="also write the CSV report here")

    p = sub.add_parser("trajectory", help="export ground-truth vs predicted path CSV")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", help="manifest split (default test)")
    p.add_argument("--domain", default="real", help="image domain (default real)")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("embeddings", help="export 2-D latent projections per domain")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--domains", default=",".join(ALL_STYLES),
                   help=f"comma list of domains (default {','.join(ALL_STYLES)})")
    p.add_argument("--split", default="test", help="manifest split (default test)")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("complexity", help="analytic cost profile of an architecture")
    _add_common(p)
    p.add_argument("--profile", default=None, choices=profile_names(),
                   help="single profile to report (default: all)")
    p.add_argument("--layers", action="store_true", help="print the per-layer table")
    p.add_argument("--csv", default=None, help="write the summary CSV here")
    return parser


def _cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else 0
    styles = [s for s in args.styles.split(",") if s]
    resolved = {"seed": seed, "out": args.out, "n_train": args.n_train,
                "n_test": args.n_test, "styles": ",".join(styles),
                "landmarks": args.landmarks, "render_size": args.render_size}
    _print_resolved("gen-data", resolved)
    scene = make_scene(seed, n_landmarks=args.landmarks)
    train_m, test_m = build_dataset(scene, args.n_train, args.n_test, styles,
                                    args.out, seed, render_size=args.render_size)
    print(f"wrote {train_m}")
    print(f"wrote {test_m}")
    return EXIT_OK


def _cmd_augment(args) -> int:
    styles = [s for s in args.styles.split(",") if s]
    _print_resolved("augment", {"data": args.data, "styles": ",".join(styles)})
    augment_dataset(args.data, styles)
    print(f"augmented {args.data} with {styles}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg, resolved = _resolve_train_config(args)
    resolved.update({"regime": args.regime, "arch": args.arch,
                     "data": args.data, "out": args.out, "preset": args.preset})
    _print_resolved("train", resolved)
    arch = get_profile(args.arch)
    if resolved.get("latent_dim"):
        arch = dataclasses.replace(arch, latent_dim=int(resolved["latent_dim"]))
    if resolved.get("attention_dropout") is not None:
        arch = dataclasses.replace(
            arch, attention_dropout=float(resolved["attention_dropout"]))
    manifest = load_manifest(Path(args.data) / "train.manifest")
    model = AprModel(arch, seed=cfg.seed,
                     preprocess={"short_side": cfg.short_side, "crop": cfg.crop})
    out_dir = Path(args.out)
    _write_resolved(out_dir, resolved)
    run = train_da(model, manifest, cfg, out_dir) if args.regime == "da" \
        else train_sb(model, manifest, cfg, out_dir)
    print(f"finished {run.steps} steps in {run.wall_seconds:.1f}s")
    print(f"checkpoint: {run.final_checkpoint}")
    print(f"loss log:   {run.log_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    domains = [d for d in args.domains.split(",") if d]
    _print_resolved("eval", {"ckpt": args.ckpt, "data": args.data,
                             "domains": ",".join(domains), "split": args.split})
    model = AprModel.load(args.ckpt)
    report = cross_domain_report(model, args.data, domains, split=args.split)
    print(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_csv())
        print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_trajectory(args) -> int:
    _print_resolved("trajectory", {"ckpt": args.ckpt, "data": args.data,
                                   "split": args.split, "domain": args.domain,
                                   "out": args.out})
    model = AprModel.load(args.ckpt)
    manifest = load_manifest(Path(args.data) / f"{args.split}.manifest")
    path = export_trajectory(model, manifest, args.out, domain=args.domain)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_embeddings(args) -> int:
    domains = [d for d in args.domains.split(",") if d]
    _print_resolved("embeddings", {"ckpt": args.ckpt, "data": args.data,
                                   "domains": ",".join(domains),
                                   "split": args.split, "out": args.out})
    model = AprModel.load(args.ckpt)
    path = export_embeddings(model, args.data, domains, args.out, split=args.split)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_complexity(args) -> int:
    names = [args.profile] if args.profile else profile_names()
    _print_resolved("complexity", {"profile": ",".join(names)})
    if args.layers:
        for name in names:
            layers, total = profile_named(name)
            print(f"== {name}")
            print(layer_table(layers, total))
    print(summary_table(names))
    if args.csv:
        Path(args.csv).write_text(summary_csv(names))
        print(f"wrote {args.csv}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "trajectory": _cmd_trajectory,
    "embeddings": _cmd_embeddings,
    "complexity": _cmd_complexity,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ContractError, ManifestError) as exc:
        print(f"error=config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"error=numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FileNotFoundError) as exc:
        print(f"error=io: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
