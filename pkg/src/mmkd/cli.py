"""Command-line entry point: reproducible data generation, training,
evaluation, ablation, and cost reporting.

Every artifact-producing command writes a ``run_manifest.json`` into its
output directory recording the command, the fully resolved configuration,
seeds, dataset content hashes, output paths, and timestamps. Relative data
paths resolve under ``$MMKD_DATA_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .costs import cost_report
from .data import (
    FULL_SCALE_DIMS,
    MANIFEST_NAME,
    MODALITIES,
    dataset_fingerprint,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .errors import CheckpointError, ConfigError, DatasetError, MmkdError, TrainingDiverged
from .evaluation import ablate, evaluate_fixed, evaluate_random
from .losses import LOSS_MODES
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .protocols import save_masks
from .training import TrainConfig, train

DATA_ROOT_ENV = "MMKD_DATA_ROOT"


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _resolve_data_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _parse_kv_map(text: str, cast, what: str) -> dict:
    out = {}
    try:
        for part in text.split(","):
            key, value = part.split("=", 1)
            out[key.strip()] = cast(value)
    except ValueError as exc:
        raise ConfigError(f"malformed {what} {text!r} (expected e.g. l=64,v=16,a=16)") from exc
    if set(out) != set(MODALITIES):
        raise ConfigError(f"{what} must name exactly {MODALITIES}, got {sorted(out)}")
    return out


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"malformed number list {text!r}") from exc


def _parse_len_range(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"malformed len range {text!r} (expected lo,hi)")
    return int(parts[0]), int(parts[1])


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _write_run_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    datasets: dict[str, str],
    outputs: list[str],
    started_at: str,
) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "package_version": __version__,
        "config": config,
        "dataset_hashes": datasets,
        "outputs": outputs,
        "started_at": started_at,
        "finished_at": _utc_now(),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _model_config_from_args(args, dims) -> ModelConfig:
    return ModelConfig(
        d_model=args.d_model,
        n_heads=args.n_heads,
        depth=args.depth,
        d_hid=args.d_hid,
        conv_kernel=args.conv_kernel,
        dims=dims,
        dropout=args.dropout,
    )


def _train_config_from_args(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        lr=args.lr,
        epochs=args.epochs,
        seed=args.seed,
        loss_mode=args.loss_mode,
        val_frac=args.val_frac,
        aux_weight=args.aux_weight,
        lam=args.lam,
        tau=args.tau,
        normalize=not args.no_normalize,
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--d-hid", type=int, default=128)
    p.add_argument("--conv-kernel", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.1)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss-mode", choices=LOSS_MODES, default="mvsc")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=65)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--aux-weight", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.9,
                   help="label-distance threshold for contrastive positives")
    p.add_argument("--tau", type=float, default=0.1, help="contrastive temperature")
    p.add_argument("--no-normalize", action="store_true",
                   help="use raw dot products in the contrastive loss")
    _add_model_flags(p)


def cmd_gen_data(args) -> int:
    started = _utc_now()
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    dims = _parse_kv_map(args.dims, int, "dims") if args.dims else None
    strengths = (
        _parse_kv_map(args.strengths, float, "strengths") if args.strengths else None
    )
    dataset = generate_synthetic(
        args.n,
        dims=dims,
        len_range=_parse_len_range(args.len_range),
        seed=args.seed,
        snr=args.snr,
        split=args.split,
        strengths=strengths,
        cross_corr=args.cross_corr,
        feature_noise=args.feature_noise,
        label_scale=args.label_scale,
    )
    save_dataset(dataset, out)
    config = {
        "n": args.n,
        "split": args.split,
        "seed": args.seed,
        "snr": args.snr,
        "dims": dataset.dims,
        "len_range": list(_parse_len_range(args.len_range)),
        "strengths": strengths or {m: 1.0 for m in MODALITIES},
        "cross_corr": args.cross_corr,
        "feature_noise": args.feature_noise,
        "label_scale": args.label_scale,
    }
    manifest_path = _write_run_manifest(
        out,
        "gen-data",
        config,
        {"out": dataset_fingerprint(out)},
        [str(out / MANIFEST_NAME)] + [str(out / f"feat_{m}.bin") for m in MODALITIES],
        started,
    )
    print(out / MANIFEST_NAME)
    print(manifest_path)
    return 0


def cmd_train(args) -> int:
    started = _utc_now()
    data_dir = _resolve_data_path(args.data)
    dataset = load_dataset(data_dir)
    valid = None
    hashes = {"train": dataset_fingerprint(data_dir)}
    if args.valid_data:
        valid_dir = _resolve_data_path(args.valid_data)
        valid = load_dataset(valid_dir)
        hashes["valid"] = dataset_fingerprint(valid_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = _model_config_from_args(args, dataset.dims)
    train_cfg = _train_config_from_args(args)

    log_path = out / "train_log.jsonl"
    def progress(entry):
        print(
            f"epoch {entry['epoch']}/{train_cfg.epochs} "
            f"loss={entry['loss']['l_total']:.4f} val_mae={entry['val_mae']:.4f}"
        )
    result = train(
        dataset, model_cfg, train_cfg, valid_dataset=valid,
        log_path=log_path, progress=progress,
    )
    model = result.load_best()
    ckpt_path = out / "checkpoint.ckpt"
    save_checkpoint(
        model,
        ckpt_path,
        extra={
            "train_config": train_cfg.to_dict(),
            "best_epoch": result.best_epoch,
            "best_val_mae": result.best_val_mae,
            "dataset_hashes": hashes,
        },
    )
    _write_run_manifest(
        out,
        "train",
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        hashes,
        [str(ckpt_path), str(log_path)],
        started,
    )
    print(f"best epoch {result.best_epoch} val_mae={result.best_val_mae:.4f}")
    print(ckpt_path)
    return 0


def cmd_eval(args) -> int:
    started = _utc_now()
    model, header = load_checkpoint(_resolve_data_path(args.ckpt))
    data_dir = _resolve_data_path(args.data)
    dataset = load_dataset(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.protocol == "fixed":
        table = evaluate_fixed(model, dataset, args.batch_size)
    else:
        mr_list = _parse_float_list(args.mr)
        table, assignments = evaluate_random(
            model, dataset, mr_list, args.seed, args.batch_size
        )
        if args.masks_out:
            for key, assignment in assignments.items():
                path = out / f"{Path(args.masks_out).stem}_mr{key}.json"
                save_masks(assignment, path)
                outputs.append(str(path))
    json_path = out / f"eval_{args.protocol}.json"
    text_path = out / f"eval_{args.protocol}.txt"
    json_path.write_text(
        json.dumps(table.to_json_dict(), indent=2) + "\n", encoding="utf-8"
    )
    text_path.write_text(table.to_text() + "\n", encoding="utf-8")
    outputs = [str(json_path), str(text_path)] + outputs
    _write_run_manifest(
        out,
        "eval",
        {
            "protocol": args.protocol,
            "mr": args.mr,
            "seed": args.seed,
            "batch_size": args.batch_size,
            "ckpt": str(args.ckpt),
            "ckpt_sha256": _sha256_file(_resolve_data_path(args.ckpt)),
            "model": header["model_config"],
        },
        {"test": dataset_fingerprint(data_dir)},
        outputs,
        started,
    )
    print(table.to_text())
    if args.json:
        print(json.dumps(table.to_json_dict()))
    return 0


def cmd_ablate(args) -> int:
    started = _utc_now()
    train_dir = _resolve_data_path(args.data)
    test_dir = _resolve_data_path(args.test_data)
    train_ds = load_dataset(train_dir)
    test_ds = load_dataset(test_dir)
    valid = None
    hashes = {
        "train": dataset_fingerprint(train_dir),
        "test": dataset_fingerprint(test_dir),
    }
    if args.valid_data:
        valid_dir = _resolve_data_path(args.valid_data)
        valid = load_dataset(valid_dir)
        hashes["valid"] = dataset_fingerprint(valid_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for mode in modes:
        if mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    model_cfg = _model_config_from_args(args, train_ds.dims)
    train_cfg = _train_config_from_args(args)
    result = ablate(
        train_ds, test_ds, model_cfg, train_cfg, modes,
        repeats=args.repeats, valid_dataset=valid, log_fn=print,
    )
    json_path = out / "ablation.json"
    text_path = out / "ablation.txt"
    json_path.write_text(json.dumps(result.to_json_dict(), indent=2) + "\n", encoding="utf-8")
    text_path.write_text(result.to_text() + "\n", encoding="utf-8")
    _write_run_manifest(
        out,
        "ablate",
        {
            "modes": modes,
            "repeats": args.repeats,
            "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(),
        },
        hashes,
        [str(json_path), str(text_path)],
        started,
    )
    print(result.to_text())
    return 0


def cmd_report(args) -> int:
    dims = _parse_kv_map(args.dims, int, "dims")
    cfg = _model_config_from_args(args, dims)
    report = cost_report(cfg, batch_size=args.bs, seq_len=args.seq_len)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(f"parameters: {report['param_count']:,}")
        for name, count in report["param_breakdown"].items():
            print(f"  {name}: {count:,}")
        print(
            f"FLOPs per test batch (complete-input forward, bs={args.bs}, "
            f"len={args.seq_len}): {report['flops_per_test_batch']:.3e}"
        )
        print(f"FLOPs per training forward: {report['flops_training_forward']:.3e}")
        ref = report["reference_full_scale"]
        print(
            f"reference (full-scale, bs=4): {ref['flops_per_test_batch']:.1e} -- {ref['note']}"
        )
        print(f"methodology: {report['assumptions']['counting']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmkd",
        description=(
            "Joint teacher/student training for sentiment regression with "
            "missing-modality evaluation protocols."
        ),
    )
    parser.add_argument("--version", action="version", version=f"mmkd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset split")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr", type=float, default=8.0)
    p.add_argument("--dims", default=None, help="e.g. l=768,v=47,a=74 (default l=64,v=16,a=16)")
    p.add_argument("--len-range", default="5,20")
    p.add_argument("--strengths", default=None, help="per-modality signal strength, e.g. l=1,v=1,a=1")
    p.add_argument("--cross-corr", type=float, default=0.85)
    p.add_argument("--feature-noise", type=float, default=0.3)
    p.add_argument("--label-scale", type=float, default=1.3)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train teacher and students jointly")
    p.add_argument("--data", required=True)
    p.add_argument("--valid-data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="flat JSON defaults; flags win")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a missing protocol")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", choices=("fixed", "random"), default="fixed")
    p.add_argument("--mr", default="0.0,0.2,0.4,0.6")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--masks-out", default=None, help="basename for sampled mask JSON files")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare auxiliary-loss modes")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--valid-data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", default="mvsc,none")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--config", default=None, help="flat JSON defaults; flags win")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="parameter count and FLOP estimate")
    p.add_argument("--dims", default="l=768,v=47,a=74")
    p.add_argument("--bs", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=50)
    p.add_argument("--json", action="store_true")
    _add_model_flags(p)
    p.set_defaults(func=cmd_report)
    return parser


def _apply_config_file(parser, argv):
    """Load --config JSON (flat keys matching flag dests) as defaults."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"unreadable config file {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a flat JSON object")
    for action in parser._subparsers._group_actions[0].choices.values():
        dests = {a.dest for a in action._actions}
        action.set_defaults(**{k: v for k, v in values.items() if k in dests})


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
