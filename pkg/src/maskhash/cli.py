"""Command-line interface: gen-data, train, encode, eval, sweep.

Every successful command writes a manifest JSON beside its outputs with the
resolved configuration, a config hash, input/output paths, and wall time, so
a run can be repeated byte-identically. Config precedence is flags over
--config JSON over built-in defaults.

Exit codes: 0 success, 2 usage or configuration, 3 I/O or file format,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from maskhash.data import generate_synthetic, load_dataset, save_dataset, split_per_class
from maskhash.errors import (
    ArgumentError,
    ConfigError,
    EvaluationError,
    FormatError,
    NumericalError,
)
from maskhash.losses import ContrastiveConfig
from maskhash.model import PRESETS, ModelConfig, load_checkpoint
from maskhash.retrieval import (
    CodeDatabase,
    cross_dataset_eval,
    encode_dataset,
    load_codes,
    map_at_k,
    pr_curve,
    save_codes,
)
from maskhash.trainer import ABLATIONS, TrainConfig, fit

DEFAULT_KS = (5, 10, 20)


def _config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()
    ).hexdigest()


def _write_manifest(
    path: Path, command: str, config: dict, inputs: list, outputs: list,
    seed: int | None, started: float,
) -> None:
    manifest = {
        "version": 1,
        "command": command,
        "config": config,
        "config_sha256": _config_hash(config),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "wall_time_seconds": round(time.perf_counter() - started, 3),
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def _resolve_config(defaults: dict, args: argparse.Namespace) -> dict:
    """Defaults, then --config JSON, then explicitly passed flags."""
    config = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as f:
            try:
                loaded = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{args.config} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config} must hold a JSON object")
        for key, value in loaded.items():
            if key not in config:
                raise ConfigError(f"unknown config key {key!r} in {args.config}")
            config[key] = value
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            config[key] = flag
    return config


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        raise ArgumentError(f"bad K list {text!r}: {e}") from e
    if not ks:
        raise ArgumentError("K list is empty")
    if any(k < 1 for k in ks):
        raise ArgumentError(f"K values must be positive, got {ks}")
    return ks


def _model_config(ds, config: dict) -> ModelConfig:
    overrides = {
        k: config[k]
        for k in ("enc_depth", "enc_heads", "enc_width", "dec_depth", "dec_heads", "dec_width")
        if config[k] is not None
    }
    return ModelConfig.from_preset(
        config["preset"], feature_dim=ds.d, max_frames=ds.M,
        code_length=config["bits"], **overrides,
    )


def _train_config(config: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        batch_videos=config["batch"],
        mask_ratio=config["mask_ratio"],
        sampling_strategy=config["strategy"],
        contrastive=ContrastiveConfig(
            tau=config["tau"], rho=config["rho"], alpha=config["alpha"]
        ),
        epochs=config["epochs"],
        base_lr=config["base_lr"],
        lr_decay=config["lr_decay"],
        decay_every=config["decay_every"],
        min_lr=config["min_lr"],
        seed=seed,
        ablation=config["ablation"],
    )


_TRAIN_DEFAULTS = {
    "bits": 16,
    "mask_ratio": 0.75,
    "strategy": "non_overlapped",
    "ablation": "full",
    "batch": 64,
    "epochs": 50,
    "tau": 0.5,
    "rho": 0.1,
    "alpha": 1.0,
    "base_lr": 1e-4,
    "lr_decay": 0.9,
    "decay_every": 20,
    "min_lr": 1e-5,
    "preset": "small",
    "enc_depth": None,
    "enc_heads": None,
    "enc_width": None,
    "dec_depth": None,
    "dec_heads": None,
    "dec_width": None,
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bits", type=int, help="code length in bits")
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    p.add_argument("--strategy", choices=("non_overlapped", "overlapped"))
    p.add_argument("--batch", type=int, help="videos per batch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--tau", type=float, help="contrastive temperature")
    p.add_argument("--rho", type=float, help="positive-class prior for debiasing")
    p.add_argument("--alpha", type=float, help="contrastive loss weight")
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--lr-decay", dest="lr_decay", type=float)
    p.add_argument("--decay-every", dest="decay_every", type=int)
    p.add_argument("--min-lr", dest="min_lr", type=float)
    p.add_argument("--preset", choices=tuple(PRESETS))
    p.add_argument("--enc-depth", dest="enc_depth", type=int)
    p.add_argument("--enc-heads", dest="enc_heads", type=int)
    p.add_argument("--enc-width", dest="enc_width", type=int)
    p.add_argument("--dec-depth", dest="dec_depth", type=int)
    p.add_argument("--dec-heads", dest="dec_heads", type=int)
    p.add_argument("--dec-width", dest="dec_width", type=int)


def cmd_gen_data(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    defaults = {
        "classes": 10, "per_class": 100, "frames": 16, "dim": 32,
        "center_scale": 3.0, "video_noise": 0.5, "frame_noise": 1.5,
        "split_counts": None,
    }
    config = _resolve_config(defaults, args)
    seed = args.seed if args.seed is not None else 0
    config["seed"] = seed
    ds = generate_synthetic(
        num_classes=config["classes"], per_class=config["per_class"],
        M=config["frames"], d=config["dim"], center_scale=config["center_scale"],
        video_noise=config["video_noise"], frame_noise=config["frame_noise"],
        seed=seed,
    )
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    outputs = []
    if config["split_counts"]:
        # e.g. "train:80,db:15,query:5" writes one container per named part
        names, counts = [], []
        for piece in str(config["split_counts"]).split(","):
            name, _, count = piece.partition(":")
            if not name or not count:
                raise ArgumentError(
                    f"bad --split-counts entry {piece!r}, expected name:count"
                )
            names.append(name.strip())
            counts.append(int(count))
        parts = split_per_class(ds, counts, split_names=names)
        for name, part in zip(names, parts):
            path = out.with_name(f"{out.stem}_{name}{out.suffix}")
            save_dataset(part, path)
            outputs.append(path)
    else:
        save_dataset(ds, out)
        outputs.append(out)
    manifest = out.with_name(out.name + ".manifest.json")
    _write_manifest(manifest, "gen-data", config, [], outputs, seed, started)
    if not args.quiet:
        print(
            f"wrote {len(ds)} videos (M={ds.M}, d={ds.d}, "
            f"classes={ds.num_classes}) to {', '.join(map(str, outputs))}"
        )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config = _resolve_config(_TRAIN_DEFAULTS, args)
    seed = args.seed if args.seed is not None else 0
    config["seed"] = seed
    ds = load_dataset(args.data, split_name="train")
    model_cfg = _model_config(ds, config)
    train_cfg = _train_config(config, seed)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.cmhm"
    log_path = out_dir / "train_log.csv"
    _, log = fit(ds, model_cfg, train_cfg, checkpoint_path=ckpt, quiet=args.quiet)
    log.write_csv(log_path)
    _write_manifest(
        out_dir / "manifest.json", "train", config, [args.data],
        [ckpt, log_path], seed, started,
    )
    if not args.quiet:
        final = log.records[-1].total if log.records else float("nan")
        print(f"trained {train_cfg.epochs} epochs, final loss {final:.6f}, wrote {ckpt}")
    return 0


def cmd_encode(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.d != model.cfg.feature_dim:
        raise ConfigError(
            f"checkpoint feature_dim {model.cfg.feature_dim} does not match "
            f"dataset d {ds.d}"
        )
    if ds.M > model.cfg.max_frames:
        raise ConfigError(
            f"dataset M {ds.M} exceeds checkpoint max_frames {model.cfg.max_frames}"
        )
    db = encode_dataset(model, ds)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_codes(db, out)
    config = {"checkpoint": str(args.checkpoint), "data": str(args.data), "bits": db.k}
    _write_manifest(
        out.with_name(out.name + ".manifest.json"), "encode", config,
        [args.checkpoint, args.data], [out], args.seed, started,
    )
    if not args.quiet:
        print(f"encoded {len(db)} videos at {db.k} bits to {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    queries = load_codes(args.queries)
    db = load_codes(args.db)
    if queries.k != db.k:
        raise ConfigError(f"query codes have k={queries.k} but db has k={db.k}")
    ks = _parse_ks(args.ks)
    report = map_at_k(queries, db, ks)
    report.pr_points = pr_curve(queries, db)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    pr_path = out_dir / "pr_curve.csv"
    map_path = out_dir / "map_at_k.csv"
    report.write_json(report_path)
    report.write_pr_csv(pr_path)
    report.write_map_csv(map_path)
    config = {"queries": str(args.queries), "db": str(args.db), "ks": ks}
    _write_manifest(
        out_dir / "manifest.json", "eval", config, [args.queries, args.db],
        [report_path, pr_path, map_path], args.seed, started,
    )
    if not args.quiet:
        summary = "  ".join(f"mAP@{k}={report.map_at_k[k]:.4f}" for k in sorted(ks))
        print(summary)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config = _resolve_config(_TRAIN_DEFAULTS, args)
    base_seed = args.seed if args.seed is not None else 0

    if args.ratios is not None and args.ablations is not None:
        raise ArgumentError("sweep takes --ratios or --ablations, not both")
    if args.ratios is not None:
        values = [p for p in args.ratios.split(",") if p.strip()]
        settings = [("ratio", float(v)) for v in values]
    elif args.ablations is not None:
        values = [p.strip() for p in args.ablations.split(",") if p.strip()]
        for v in values:
            if v not in ABLATIONS:
                raise ArgumentError(f"unknown ablation {v!r}, expected one of {ABLATIONS}")
        settings = [("ablation", v) for v in values]
    else:
        raise ArgumentError("sweep needs --ratios or --ablations")
    if not settings:
        raise ArgumentError("sweep list is empty")

    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base_seed]
    ks = _parse_ks(args.ks)
    train_data = load_dataset(args.data, split_name="train")
    eval_data = load_dataset(args.eval_data) if args.eval_data else train_data

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs_path = out_dir / "sweep_runs.csv"
    summary_path = out_dir / "sweep_summary.csv"
    k_cols = ",".join(f"map@{k}" for k in sorted(ks))

    first_failure = 0
    rows: dict[str, list[dict[int, float]]] = {}
    with open(runs_path, "w") as runs_f:
        runs_f.write(f"setting,seed,{k_cols}\n")
        for kind, value in settings:
            setting = f"{kind}={value}"
            for seed in seeds:
                run_cfg = dict(config)
                if kind == "ratio":
                    run_cfg["mask_ratio"] = value
                else:
                    run_cfg["ablation"] = value
                run_dir = out_dir / f"{kind}_{value}_s{seed}"
                try:
                    run_dir.mkdir(exist_ok=True)
                    model_cfg = _model_config(train_data, run_cfg)
                    train_cfg = _train_config(run_cfg, seed)
                    ckpt = run_dir / "model.cmhm"
                    _, log = fit(train_data, model_cfg, train_cfg,
                                 checkpoint_path=ckpt, quiet=True)
                    log.write_csv(run_dir / "train_log.csv")
                    report = cross_dataset_eval(
                        ckpt, setting, eval_data, ks,
                        queries_per_class=args.queries_per_class, with_pr=False,
                    )
                    report.write_json(run_dir / "report.json")
                except (ArgumentError, ConfigError, EvaluationError) as e:
                    print(f"sweep setting {setting} seed {seed} failed: {e}", file=sys.stderr)
                    first_failure = first_failure or 2
                    continue
                except NumericalError as e:
                    print(f"sweep setting {setting} seed {seed} failed: {e}", file=sys.stderr)
                    first_failure = first_failure or 4
                    continue
                vals = ",".join(repr(report.map_at_k[k]) for k in sorted(ks))
                runs_f.write(f"{setting},{seed},{vals}\n")
                runs_f.flush()
                rows.setdefault(setting, []).append(report.map_at_k)
                if not args.quiet:
                    print(f"{setting} seed {seed}: {vals}")

    with open(summary_path, "w") as f:
        f.write(f"setting,{k_cols}\n")
        for kind, value in settings:
            setting = f"{kind}={value}"
            reports = rows.get(setting)
            if not reports:
                continue
            means = ",".join(
                repr(float(np.mean([r[k] for r in reports]))) for k in sorted(ks)
            )
            f.write(f"{setting},{means}\n")

    config.update(
        seed=base_seed, seeds=seeds, ks=ks,
        settings=[f"{k}={v}" for k, v in settings],
        queries_per_class=args.queries_per_class,
    )
    inputs = [args.data] + ([args.eval_data] if args.eval_data else [])
    _write_manifest(
        out_dir / "manifest.json", "sweep", config, inputs,
        [runs_path, summary_path], base_seed, started,
    )
    return first_failure


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskhash",
        description="Self-supervised video hashing: train, encode, evaluate.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", help="JSON file with config values (flags win)")
    common.add_argument("--quiet", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--center-scale", dest="center_scale", type=float)
    p.add_argument("--video-noise", dest="video_noise", type=float)
    p.add_argument("--frame-noise", dest="frame_noise", type=float)
    p.add_argument("--split-counts", dest="split_counts",
                   help='per-class split like "train:80,db:15,query:5"')
    p.add_argument("--out", required=True, help="output container path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a hashing model")
    p.add_argument("--data", required=True, help="feature container to train on")
    p.add_argument("--ablation", choices=ABLATIONS)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", parents=[common], help="encode a dataset to binary codes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output code file path")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", parents=[common], help="evaluate retrieval from code files")
    p.add_argument("--queries", required=True, help="query code file")
    p.add_argument("--db", required=True, help="database code file")
    p.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)),
                   help="comma-separated K values")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common],
                       help="train+encode+eval over ratios or ablations")
    p.add_argument("--data", required=True, help="training container")
    p.add_argument("--eval-data", dest="eval_data",
                   help="container for retrieval eval (default: training data)")
    p.add_argument("--ratios", help='comma-separated masking ratios, e.g. "0.5,0.75"')
    p.add_argument("--ablations", help='comma-separated ablation names')
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)))
    p.add_argument("--queries-per-class", dest="queries_per_class", type=int, default=5)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ArgumentError, ConfigError, EvaluationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
