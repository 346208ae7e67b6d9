"""Command-line pipeline: synth, patch, train-teacher, distill, eval, sweep.

Configuration is a flat key=value text file; every schema key is also a
command-line flag (flag > file > default). Each command writes a
run_manifest.txt with the fully resolved configuration into its output
directory, and `replay <manifest> --out NEW` re-executes a run from
that manifest alone.

Exit codes: 0 success, 2 configuration/usage errors, 3 data errors,
4 run failures.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, preprocess, synthdata, train
from .distill import KDConfig
from .errors import CheckpointError, ConfigError, DataError, ToolkitError
from .metrics import report_row, write_report_csv
from .nn import CNN, CNNConfig, CNNStage, Model, ViT, ViTConfig
from .seeding import substream
from .synthdata import SynthConfig
from .train import TrainConfig
from .weights import load_weights, save_weights

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUN = 4

MANIFEST_NAME = "run_manifest.txt"


# -- config schemas -------------------------------------------------------------


def _csv_ints(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(raw).split(",") if v != "")


def _csv_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(raw).split(",") if v != "")


@dataclass(frozen=True)
class Key:
    name: str
    type: type | object
    default: object
    help: str = ""


SYNTH_KEYS = [
    Key("train_images", int, 60, "training images to render"),
    Key("val_images", int, 15, "validation images to render"),
    Key("test_images", int, 15, "test images to render"),
    Key("image_size", int, 256, "square image extent in pixels"),
    Key("margin", int, 16, "background border width"),
    Key("bubble_count_min", int, 1, ""),
    Key("bubble_count_max", int, 3, ""),
    Key("bubble_radius_min", int, 40, ""),
    Key("bubble_radius_max", int, 72, ""),
    Key("bubble_contrast", float, 0.5, "blend weight of the bubble wash; lower is harder"),
    Key("rim_width", int, 5, ""),
    Key("rim_strength", float, 0.35, ""),
    Key("noise_cells", int, 8, ""),
    Key("noise_amp", float, 0.06, ""),
    Key("pixel_jitter", float, 0.015, ""),
    Key("brightness_jitter", float, 0.04, ""),
]

PATCH_KEYS = [
    Key("patch_size", int, 32, "grid cell extent"),
    Key("overlap", float, 0.70, "minimum single-class annotation overlap"),
    Key("foreground", float, 0.70, "minimum Otsu-foreground fraction"),
]

TRAIN_KEYS = [
    Key("batch_size", int, 64, ""),
    Key("learning_rate", float, 0.001, ""),
    Key("momentum", float, 0.0, ""),
    Key("dropout_p", float, 0.2, ""),
    Key("max_epochs", int, 100, ""),
    Key("early_stop_patience", int, 20, ""),
    Key("scheduler_factor", float, 0.1, ""),
    Key("scheduler_patience", int, 5, ""),
    Key("scheduler_min_lr", float, 1e-6, ""),
    Key("min_delta", float, 0.0, ""),
]

CNN_KEYS = [
    Key("cnn_channels", _csv_ints, (16, 32, 64, 64), "conv channels per stage"),
    Key("cnn_kernel", int, 3, "conv kernel extent"),
    Key("cnn_pools", _csv_ints, (2, 2, 2, 1), "max-pool window per stage (1 = none)"),
    Key("fc_hidden", _csv_ints, (128, 64), "hidden widths of the FC classifier"),
]

VIT_KEYS = [
    Key("vit_cell_size", int, 8, "tokenized cell extent"),
    Key("vit_embed_dim", int, 64, ""),
    Key("vit_layers", int, 4, ""),
    Key("vit_heads", int, 4, ""),
    Key("vit_mlp_ratio", float, 2.0, ""),
]

KD_KEYS = [
    Key("temperature", float, 10.0, "softmax temperature T"),
    Key("alpha", float, 0.5, "hard-loss weight; beta = 1 - alpha"),
    Key("kl_direction", str, "student_to_teacher",
        "student_to_teacher or teacher_to_student"),
]

SWEEP_KEYS = [
    Key("temperatures", _csv_floats, (2.0, 5.0, 10.0, 20.0, 40.0), "temperature grid"),
    Key("alphas", _csv_floats, (0.3, 0.5, 0.7), "alpha grid"),
    Key("kl_direction", str, "student_to_teacher", ""),
]

COMMAND_KEYS = {
    "synth": SYNTH_KEYS,
    "patch": PATCH_KEYS,
    "train-teacher": TRAIN_KEYS + CNN_KEYS,
    "distill": TRAIN_KEYS + VIT_KEYS + KD_KEYS,
    "eval": [],
    "sweep": TRAIN_KEYS + VIT_KEYS + SWEEP_KEYS,
}


def parse_config_file(path) -> dict[str, str]:
    """key=value lines; '#' comments; errors cite file:line."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def resolve_config(command: str, file_values: dict[str, str],
                   flag_values: dict[str, object]) -> dict[str, object]:
    """Merge defaults, config file, and flags for one command's schema."""
    schema = {k.name: k for k in COMMAND_KEYS[command]}
    allowed = set(schema) | {"seed"}
    for key in file_values:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} for command {command!r}")
    resolved: dict[str, object] = {}
    for key in schema.values():
        value = key.default
        if key.name in file_values:
            try:
                value = key.type(file_values[key.name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {key.name!r}: {exc}") from None
        if flag_values.get(key.name) is not None:
            value = flag_values[key.name]
        resolved[key.name] = value
    return resolved


# -- run manifest ----------------------------------------------------------------


def write_manifest(out_dir: Path, command: str, config: dict[str, object],
                   inputs: dict[str, str], seed: int, started: str) -> Path:
    lines = [
        f"command={command}",
        f"version={__version__}",
        f"seed={seed}",
        f"out={out_dir.resolve()}",
        f"started={started}",
        f"finished={_now()}",
    ]
    for key, value in sorted(inputs.items()):
        lines.append(f"input.{key}={value}")
    for key, value in sorted(config.items()):
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"config.{key}={value}")
    path = out_dir / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def parse_manifest(path) -> tuple[str, dict[str, str], dict[str, str], int]:
    """Returns (command, config strings, inputs, seed)."""
    values = parse_config_file(path)
    if "command" not in values:
        raise ConfigError(f"{path}: manifest has no command key")
    command = values["command"]
    seed = int(values.get("seed", "0"))
    config = {k[len("config."):]: v for k, v in values.items() if k.startswith("config.")}
    inputs = {k[len("input."):]: v for k, v in values.items() if k.startswith("input.")}
    return command, config, inputs, seed


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- checkpoint meta sidecar --------------------------------------------------------


def write_checkpoint(model: Model, path: Path) -> None:
    save_weights(model, path)
    cfg = model.cfg
    if isinstance(model, CNN):
        stages = ",".join(f"{s.channels}:{s.kernel}:{s.stride}:{s.padding}:{s.pool}"
                          for s in cfg.stages)
        meta = {
            "model": "cnn", "image_size": cfg.image_size, "in_channels": cfg.in_channels,
            "stages": stages, "fc_hidden": ",".join(map(str, cfg.fc_hidden)),
            "num_classes": cfg.num_classes, "dropout_p": cfg.dropout_p,
        }
    elif isinstance(model, ViT):
        meta = {
            "model": "vit", "image_size": cfg.image_size, "cell_size": cfg.cell_size,
            "embed_dim": cfg.embed_dim, "num_layers": cfg.num_layers,
            "num_heads": cfg.num_heads, "mlp_ratio": cfg.mlp_ratio,
            "num_classes": cfg.num_classes, "dropout_p": cfg.dropout_p,
        }
    else:
        raise ConfigError(f"cannot persist model type {type(model).__name__}")
    meta_path = Path(str(path) + ".meta")
    meta_path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def load_checkpoint(path) -> Model:
    path = Path(path)
    meta_path = Path(str(path) + ".meta")
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    if not meta_path.exists():
        raise DataError(f"checkpoint sidecar {meta_path} does not exist")
    meta = parse_config_file(meta_path)
    kind = meta.get("model")
    if kind == "cnn":
        stages = tuple(
            CNNStage(*(int(f) for f in part.split(":")))
            for part in meta["stages"].split(",")
        )
        cfg = CNNConfig(image_size=int(meta["image_size"]), in_channels=int(meta["in_channels"]),
                        stages=stages, fc_hidden=_csv_ints(meta["fc_hidden"]),
                        num_classes=int(meta["num_classes"]), dropout_p=float(meta["dropout_p"]))
        model = CNN(cfg)
    elif kind == "vit":
        cfg = ViTConfig(image_size=int(meta["image_size"]), cell_size=int(meta["cell_size"]),
                        embed_dim=int(meta["embed_dim"]), num_layers=int(meta["num_layers"]),
                        num_heads=int(meta["num_heads"]), mlp_ratio=float(meta["mlp_ratio"]),
                        num_classes=int(meta["num_classes"]), dropout_p=float(meta["dropout_p"]))
        model = ViT(cfg)
    else:
        raise DataError(f"{meta_path}: unknown model kind {kind!r}")
    return load_weights(path, model).eval()


# -- shared helpers -------------------------------------------------------------------


def _load_datasets(root) -> dict[str, preprocess.PatchDataset]:
    datasets = preprocess.load_dataset(root)
    if not datasets:
        raise DataError(f"dataset under {root} is empty")
    return datasets


def _patch_extent(datasets) -> int:
    first = next(iter(datasets.values())).records[0]
    return first.pixels.shape[0]


def _train_config(config: dict[str, object], seed: int) -> TrainConfig:
    fields = {k.name for k in TRAIN_KEYS}
    return TrainConfig(**{k: v for k, v in config.items() if k in fields}, seed=seed)


def _build_teacher(config, image_size: int, rng) -> CNN:
    channels = config["cnn_channels"]
    pools = config["cnn_pools"]
    if len(pools) != len(channels):
        raise ConfigError("cnn_pools must list one window per stage")
    kernel = config["cnn_kernel"]
    stages = tuple(CNNStage(channels=c, kernel=kernel, stride=1,
                            padding=kernel // 2, pool=p)
                   for c, p in zip(channels, pools))
    cfg = CNNConfig(image_size=image_size, stages=stages,
                    fc_hidden=config["fc_hidden"], num_classes=2,
                    dropout_p=config["dropout_p"])
    return CNN(cfg, rng=rng)


def _build_student(config, image_size: int, rng) -> ViT:
    cfg = ViTConfig(image_size=image_size, cell_size=config["vit_cell_size"],
                    embed_dim=config["vit_embed_dim"], num_layers=config["vit_layers"],
                    num_heads=config["vit_heads"], mlp_ratio=config["vit_mlp_ratio"],
                    num_classes=2, dropout_p=config["dropout_p"])
    return ViT(cfg, rng=rng)


# -- commands ---------------------------------------------------------------------------


def cmd_synth(config, inputs, seed, out_dir) -> None:
    cfg = SynthConfig(**config, seed=seed)
    synthdata.generate_corpus(cfg, out_dir)


def cmd_patch(config, inputs, seed, out_dir) -> None:
    corpus = Path(inputs["corpus"])
    entries = synthdata.corpus_entries(corpus)
    datasets: dict[str, list] = {}
    failures = []
    for entry in entries:
        try:
            src = synthdata.load_corpus_image(corpus, entry["split"], entry["source_id"])
            recs = preprocess.extract_patches(
                src, config["patch_size"],
                overlap_threshold=config["overlap"],
                foreground_threshold=config["foreground"],
            )
            datasets.setdefault(entry["split"], []).extend(recs)
        except ToolkitError as exc:
            failures.append(f"{entry['source_id']}: {exc}")
    if failures:
        raise DataError("patching failed for:\n  " + "\n  ".join(failures))
    preprocess.write_dataset(datasets, out_dir)


def cmd_train_teacher(config, inputs, seed, out_dir) -> None:
    datasets = _load_datasets(inputs["dataset"])
    teacher = _build_teacher(config, _patch_extent(datasets), substream(seed, "init"))
    record = train.fit_standalone(teacher, datasets, _train_config(config, seed))
    write_checkpoint(teacher, out_dir / "teacher.dfw")
    train.write_run_record(record, out_dir / "run_record.csv")


def cmd_distill(config, inputs, seed, out_dir) -> None:
    datasets = _load_datasets(inputs["dataset"])
    teacher = load_checkpoint(inputs["teacher"])
    student = _build_student(config, _patch_extent(datasets), substream(seed, "init"))
    kd = KDConfig(temperature=config["temperature"], alpha=config["alpha"],
                  kl_direction=config["kl_direction"])
    record = train.fit_distill(student, teacher, datasets, _train_config(config, seed), kd)
    write_checkpoint(student, out_dir / "student.dfw")
    train.write_run_record(record, out_dir / "run_record.csv")


def cmd_eval(config, inputs, seed, out_dir) -> None:
    datasets = _load_datasets(inputs["dataset"])
    split = inputs["split"]
    if split not in datasets or not datasets[split].records:
        raise DataError(f"split {split!r} is empty or missing")
    model = load_checkpoint(inputs["checkpoint"])
    report = train.evaluate_split(model, datasets[split])
    write_report_csv(out_dir / "metrics.csv", [report_row(split, "-", report)])


def cmd_sweep(config, inputs, seed, out_dir) -> None:
    datasets = _load_datasets(inputs["dataset"])
    teacher_paths = [p for p in inputs["teachers"].split(",") if p]
    teachers = [(Path(p).stem, load_checkpoint(p)) for p in teacher_paths]
    image_size = _patch_extent(datasets)

    def factory(cell_seed: int) -> ViT:
        return _build_student(config, image_size, substream(cell_seed, "init"))

    cells = train.sweep(teachers, config["temperatures"], config["alphas"], datasets,
                        _train_config(config, seed), factory,
                        kl_direction=config["kl_direction"])
    train.write_sweep_report(cells, out_dir / "sweep.tsv")
    cell_dir = out_dir / "cells"
    cell_dir.mkdir(exist_ok=True)
    failed = []
    for cell in cells:
        tag = f"{cell.teacher_id}_T{cell.temperature:g}_a{cell.alpha:g}"
        if cell.record is None:
            failed.append(f"{tag}: {cell.error}")
            continue
        train.write_run_record(cell.record, cell_dir / f"{tag}.csv")
    if failed:
        raise DataError("sweep cells failed:\n  " + "\n  ".join(failed))


COMMANDS = {
    "synth": cmd_synth,
    "patch": cmd_patch,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


# -- argument parsing ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bubblekd",
        description="Patch pipeline and ViT-under-CNN knowledge distillation toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"bubblekd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="top-level seed (default 0)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")

    def schema_flags(p, command):
        for key in COMMAND_KEYS[command]:
            flag = "--" + key.name.replace("_", "-")
            if key.type in (int, float, str):
                p.add_argument(flag, dest=key.name, type=key.type, default=None, help=key.help)
            else:
                p.add_argument(flag, dest=key.name, type=key.type, default=None,
                               help=key.help + " (comma separated)")

    p = sub.add_parser("synth", help="render a synthetic corpus")
    common(p)
    schema_flags(p, "synth")

    p = sub.add_parser("patch", help="segment and grid-patch a corpus into a dataset")
    common(p)
    p.add_argument("--corpus", required=True, help="corpus directory from `synth`")
    schema_flags(p, "patch")

    p = sub.add_parser("train-teacher", help="train the CNN teacher standalone")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory from `patch`")
    schema_flags(p, "train-teacher")

    p = sub.add_parser("distill", help="train the ViT student under a frozen teacher")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint (.dfw)")
    schema_flags(p, "distill")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, choices=preprocess.SPLITS)

    p = sub.add_parser("sweep", help="temperature/alpha grid plus standalone baseline")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--teachers", required=True, help="comma-separated teacher checkpoints")
    schema_flags(p, "sweep")

    p = sub.add_parser("replay", help="re-execute a run from its manifest")
    p.add_argument("manifest", help="path to a run_manifest.txt")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    return parser


def _gather_inputs(command: str, args) -> dict[str, str]:
    names = {"patch": ["corpus"], "train-teacher": ["dataset"],
             "distill": ["dataset", "teacher"], "eval": ["dataset", "checkpoint", "split"],
             "sweep": ["dataset", "teachers"]}.get(command, [])
    out = {}
    for name in names:
        value = getattr(args, name)
        if name == "split":
            out[name] = value
        elif name == "teachers":
            out[name] = ",".join(str(Path(p).resolve()) for p in value.split(","))
        else:
            out[name] = str(Path(value).resolve())
    return out


def run_command(command: str, config: dict[str, object], inputs: dict[str, str],
                seed: int, out, force: bool) -> Path:
    started = _now()
    out_dir = _prepare_out(out, force)
    COMMANDS[command](config, inputs, seed, out_dir)
    write_manifest(out_dir, command, config, inputs, seed, started)
    return out_dir


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            command, config_raw, inputs, seed = parse_manifest(args.manifest)
            if command not in COMMANDS:
                raise ConfigError(f"manifest names unknown command {command!r}")
            config = resolve_config(command, config_raw, {})
            run_command(command, config, inputs, seed, args.out, args.force)
            return EXIT_OK

        file_values = parse_config_file(args.config) if args.config else {}
        flag_values = {k.name: getattr(args, k.name, None) for k in COMMAND_KEYS[args.command]}
        config = resolve_config(args.command, file_values, flag_values)
        if args.seed is not None:
            seed = args.seed
        elif "seed" in file_values:
            seed = int(file_values["seed"])
        else:
            seed = 0
        inputs = _gather_inputs(args.command, args)
        run_command(args.command, config, inputs, seed, args.out, args.force)
        return EXIT_OK
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ToolkitError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
