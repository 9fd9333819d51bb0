"""Command-line interface wiring the library end to end.

Subcommands: ``synth``, ``pretrain``, ``probe``, ``diagnose``,
``augment-preview``. Settings come from a flat ``key = value`` config
file plus ``--key value`` overrides; every run writes the effective
settings to ``config.resolved`` so it can be replayed bit-identically.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 divergence,
5 checkpoint/shape mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plots
from .augment import AugPolicy, sample_views
from .data import (
    Dataset,
    DatasetError,
    SynthConfig,
    load_dataset,
    loso_splits,
    save_dataset,
    synth_dataset,
)
from .model import (
    CheckpointError,
    ModelConfig,
    ModelParams,
    forward_views,
    init_params,
    load_checkpoint,
)
from .objective import FeatureBatch, LossConfig, diagnostics
from .probe import ProbeConfig, loso_evaluate
from .seeding import STREAM_VIEWS, derive_rng
from .training import (
    CHECKPOINT_NAME,
    DivergenceError,
    TrainConfig,
    pretrain,
    pretrain_loso,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_MISMATCH = 5

RESOLVED_NAME = "config.resolved"


class ConfigError(Exception):
    """Invalid configuration key, value, or combination."""


# key -> (type, default)
_SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "workers": (int, 1),
    "normalize": (bool, True),
    # synthetic dataset
    "classes": (int, 3),
    "subjects": (int, 4),
    "segments_per_class": (int, 12),
    "channels": (int, 8),
    "window_samples": (int, 400),
    "rate_hz": (float, 200.0),
    "noise_sigma": (float, 0.5),
    "amplitude": (float, 1.0),
    "amplitude_jitter": (float, 0.2),
    "freq_base": (float, 6.0),
    "freq_class_step": (float, 8.0),
    "freq_channel_step": (float, 0.5),
    # augmentation policy
    "views": (int, 4),
    "swap_fraction": (float, 0.1),
    "mask_min": (float, 0.05),
    "mask_max": (float, 0.2),
    "dropout_min": (float, 0.05),
    "dropout_max": (float, 0.2),
    "crop_min": (float, 0.5),
    "crop_max": (float, 0.95),
    # model
    "dim": (int, 32),
    "conv_width": (int, 25),
    "conv_maps": (int, 16),
    "pool": (int, 4),
    "enc_hidden": (int, 128),
    "proj_hidden": (int, 512),
    # loss
    "lambda": (float, 1.0),
    "tau": (float, 0.5),
    "jitter": (float, 1e-4),
    "clamp": (float, 50.0),
    "feature_norm": (bool, True),
    # training
    "batch_size": (int, 32),
    "epochs": (int, 30),
    "lr": (float, 1e-3),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "opt_eps": (float, 1e-8),
    "grad_clip": (float, 5.0),
    "checkpoint_interval": (int, 10),
    "loso": (bool, False),
    # probe
    "random_baseline": (bool, False),
    "probe_l2": (float, 1e-3),
    "probe_iters": (int, 500),
    "probe_lr": (float, 0.1),
    "probe_tol": (float, 1e-7),
}


def default_config() -> dict:
    return {key: default for key, (_, default) in _SCHEMA.items()}


def _parse_value(key: str, text: str):
    typ, _ = _SCHEMA[key]
    text = text.strip()
    try:
        if typ is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError("expected true/false")
        if typ is int:
            return int(text)
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    updates = {}
    file_path = Path(path)
    if not file_path.is_file():
        raise ConfigError(f"config file not found: {path}")
    for lineno, raw in enumerate(file_path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        updates[key] = _parse_value(key, value)
    return updates


def apply_overrides(cfg: dict, tokens: list[str]) -> None:
    """Interpret leftover CLI tokens as ``--key value`` pairs.

    Bare ``--key`` is accepted for boolean keys and means true.
    """
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument: {token}")
        key = token[2:].replace("-", "_")
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        typ, _ = _SCHEMA[key]
        has_value = i + 1 < len(tokens) and not tokens[i + 1].startswith("--")
        if not has_value:
            if typ is bool:
                cfg[key] = True
                i += 1
                continue
            raise ConfigError(f"missing value for {key}")
        cfg[key] = _parse_value(key, tokens[i + 1])
        i += 2


def validate_config(cfg: dict) -> None:
    checks = (
        ("seed", cfg["seed"] >= 0, "must be >= 0"),
        ("workers", cfg["workers"] >= 1, "must be >= 1"),
        ("classes", cfg["classes"] >= 2, "must be >= 2"),
        ("subjects", cfg["subjects"] >= 1, "must be >= 1"),
        ("segments_per_class", cfg["segments_per_class"] >= 1, "must be >= 1"),
        ("channels", cfg["channels"] >= 1, "must be >= 1"),
        ("window_samples", cfg["window_samples"] >= 8, "must be >= 8"),
        ("rate_hz", cfg["rate_hz"] > 0, "must be positive"),
        ("noise_sigma", cfg["noise_sigma"] >= 0, "must be non-negative"),
        ("amplitude", cfg["amplitude"] > 0, "must be positive"),
        ("amplitude_jitter", 0 <= cfg["amplitude_jitter"] < 1, "must lie in [0, 1)"),
        ("views", cfg["views"] >= 2, "must be >= 2"),
        ("swap_fraction", 0 <= cfg["swap_fraction"] <= 1, "must lie in [0, 1]"),
        ("mask_min", 0 <= cfg["mask_min"] <= cfg["mask_max"], "must be within [0, mask_max]"),
        ("mask_max", cfg["mask_max"] < 1, "must be < 1"),
        ("dropout_min", 0 <= cfg["dropout_min"] <= cfg["dropout_max"], "must be within [0, dropout_max]"),
        ("dropout_max", cfg["dropout_max"] < 1, "must be < 1"),
        ("crop_min", 0 < cfg["crop_min"] <= cfg["crop_max"], "must be within (0, crop_max]"),
        ("crop_max", cfg["crop_max"] <= 1, "must be <= 1"),
        ("dim", cfg["dim"] >= 1, "must be >= 1"),
        ("conv_width", cfg["conv_width"] >= 1, "must be >= 1"),
        ("conv_maps", cfg["conv_maps"] >= 1, "must be >= 1"),
        ("pool", cfg["pool"] >= 1, "must be >= 1"),
        ("enc_hidden", cfg["enc_hidden"] >= 1, "must be >= 1"),
        ("proj_hidden", cfg["proj_hidden"] >= 1, "must be >= 1"),
        ("lambda", cfg["lambda"] >= 0, "must be non-negative"),
        ("tau", cfg["tau"] > 0, "must be positive"),
        ("jitter", cfg["jitter"] >= 0, "must be non-negative"),
        ("clamp", cfg["clamp"] > 0, "must be positive"),
        ("batch_size", cfg["batch_size"] >= 2, "must be >= 2"),
        ("epochs", cfg["epochs"] >= 1, "must be >= 1"),
        ("lr", cfg["lr"] > 0, "must be positive"),
        ("beta1", 0 <= cfg["beta1"] < 1, "must lie in [0, 1)"),
        ("beta2", 0 <= cfg["beta2"] < 1, "must lie in [0, 1)"),
        ("opt_eps", cfg["opt_eps"] > 0, "must be positive"),
        ("grad_clip", cfg["grad_clip"] > 0, "must be positive"),
        ("checkpoint_interval", cfg["checkpoint_interval"] >= 1, "must be >= 1"),
        ("probe_l2", cfg["probe_l2"] >= 0, "must be non-negative"),
        ("probe_iters", cfg["probe_iters"] >= 1, "must be >= 1"),
        ("probe_lr", cfg["probe_lr"] > 0, "must be positive"),
        ("probe_tol", cfg["probe_tol"] > 0, "must be positive"),
    )
    for key, ok, message in checks:
        if not ok:
            raise ConfigError(f"{key} {message}")


def resolve_config(config_path: str | None, override_tokens: list[str]) -> dict:
    cfg = default_config()
    if config_path:
        cfg.update(load_config_file(config_path))
    apply_overrides(cfg, override_tokens)
    validate_config(cfg)
    return cfg


def resolved_text(cfg: dict) -> str:
    return "".join(f"{key} = {_format_value(cfg[key])}\n" for key in sorted(_SCHEMA))


def write_resolved(cfg: dict, directory: str | Path) -> None:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    (path / RESOLVED_NAME).write_text(resolved_text(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(resolved_text(cfg).encode()).hexdigest()


def _synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(
        class_count=cfg["classes"],
        subjects=cfg["subjects"],
        segments_per_class=cfg["segments_per_class"],
        channels=cfg["channels"],
        window=cfg["window_samples"],
        rate_hz=cfg["rate_hz"],
        noise_sigma=cfg["noise_sigma"],
        amplitude=cfg["amplitude"],
        amplitude_jitter=cfg["amplitude_jitter"],
        freq_base_hz=cfg["freq_base"],
        freq_class_step_hz=cfg["freq_class_step"],
        freq_channel_step_hz=cfg["freq_channel_step"],
    )


def _policy(cfg: dict) -> AugPolicy:
    return AugPolicy(
        views_t=cfg["views"],
        swap_fraction=cfg["swap_fraction"],
        mask_ratio_range=(cfg["mask_min"], cfg["mask_max"]),
        dropout_fraction_range=(cfg["dropout_min"], cfg["dropout_max"]),
        crop_ratio_range=(cfg["crop_min"], cfg["crop_max"]),
    )


def _loss_config(cfg: dict) -> LossConfig:
    return LossConfig(
        lam=cfg["lambda"],
        tau=cfg["tau"],
        jitter=cfg["jitter"],
        normalize=cfg["feature_norm"],
        clamp=cfg["clamp"],
    )


def _model_config(cfg: dict, channels: int, time: int) -> ModelConfig:
    return ModelConfig(
        channels=channels,
        time=time,
        views=cfg["views"],
        d_low=cfg["dim"],
        d_high=cfg["dim"],
        conv_width=cfg["conv_width"],
        conv_maps=cfg["conv_maps"],
        pool=cfg["pool"],
        enc_hidden=cfg["enc_hidden"],
        proj_hidden=cfg["proj_hidden"],
    )


def _train_config(cfg: dict, channels: int, time: int) -> TrainConfig:
    return TrainConfig(
        model=_model_config(cfg, channels, time),
        loss=_loss_config(cfg),
        policy=_policy(cfg),
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        opt_eps=cfg["opt_eps"],
        grad_clip=cfg["grad_clip"],
        seed=cfg["seed"],
        checkpoint_interval=cfg["checkpoint_interval"],
        workers=cfg["workers"],
    )


def _probe_config(cfg: dict) -> ProbeConfig:
    return ProbeConfig(
        l2=cfg["probe_l2"],
        max_iters=cfg["probe_iters"],
        lr=cfg["probe_lr"],
        tol=cfg["probe_tol"],
    )


def _check_shape(params: ModelParams, dataset: Dataset, source: str) -> None:
    mc = params.cfg
    if mc.channels != dataset.channels or mc.time != dataset.window:
        raise CheckpointError(
            f"{source}: checkpoint expects {mc.channels}x{mc.time} segments, "
            f"dataset has {dataset.channels}x{dataset.window}"
        )


def cmd_synth(cfg: dict, out_dir: str) -> int:
    dataset = synth_dataset(_synth_config(cfg), cfg["seed"])
    save_dataset(dataset, out_dir)
    write_resolved(cfg, out_dir)
    print(
        f"segments: {len(dataset.segments)}  subjects: {len(dataset.subject_ids)}  "
        f"classes: {dataset.class_count}"
    )
    return EXIT_OK


def cmd_pretrain(cfg: dict, data_dir: str, out_dir: str) -> int:
    dataset = load_dataset(data_dir, normalize=cfg["normalize"])
    train_cfg = _train_config(cfg, dataset.channels, dataset.window)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    figures = out / "figures"
    figures.mkdir(exist_ok=True)
    if cfg["loso"]:
        result = pretrain_loso(dataset, train_cfg, out_dir=out)
        finals = []
        for subject, metrics in sorted(result.metrics_by_subject.items()):
            plots.save_training_curves(
                metrics, figures / f"training_curves_split{subject}.png"
            )
            final = metrics[-1]["loss_total"]
            finals.append(final)
            print(f"split {subject}: final loss {final:.6f}")
        print(f"final loss (mean over splits): {float(np.mean(finals)):.6f}")
    else:
        _, metrics = pretrain(dataset.segments, train_cfg, out_dir=out)
        plots.save_training_curves(metrics, figures / "training_curves.png")
        print(f"final loss: {metrics[-1]['loss_total']:.6f}")
    return EXIT_OK


def _load_probe_params(
    cfg: dict, dataset: Dataset, checkpoint: str | None
) -> dict[int, ModelParams]:
    splits = loso_splits(dataset)
    if cfg["random_baseline"]:
        params = init_params(
            _model_config(cfg, dataset.channels, dataset.window), cfg["seed"]
        )
        return {split.held_out_subject: params for split in splits}
    if checkpoint is None:
        raise ConfigError("probe needs --checkpoint or --random-baseline")
    path = Path(checkpoint)
    if path.is_dir():
        params_by = {}
        for split in splits:
            sub = path / f"split_{split.held_out_subject}" / CHECKPOINT_NAME
            if not sub.is_file():
                raise CheckpointError(f"missing checkpoint file: {sub}")
            params, _ = load_checkpoint(sub)
            _check_shape(params, dataset, str(sub))
            params_by[split.held_out_subject] = params
        return params_by
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint file: {path}")
    params, _ = load_checkpoint(path)
    _check_shape(params, dataset, str(path))
    return {split.held_out_subject: params for split in splits}


def cmd_probe(cfg: dict, data_dir: str, checkpoint: str | None, out_dir: str) -> int:
    dataset = load_dataset(data_dir, normalize=cfg["normalize"])
    params_by = _load_probe_params(cfg, dataset, checkpoint)
    report = loso_evaluate(dataset, params_by, _probe_config(cfg))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    lines = ["subject,accuracy"]
    for subject, accuracy in zip(report.subjects, report.accuracies):
        lines.append(f"{subject},{accuracy!r}")
    (out / "probe_results.csv").write_text("".join(line + "\n" for line in lines))
    summary = {
        "mean": report.mean,
        "std": report.std,
        "config_hash": config_hash(cfg),
    }
    (out / "probe_summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    figures = out / "figures"
    figures.mkdir(exist_ok=True)
    plots.save_accuracy_bars(
        report.subjects, report.accuracies, report.mean, figures / "probe_accuracy.png"
    )
    print(f"mean accuracy: {report.mean:.6f}")
    return EXIT_OK


def cmd_diagnose(cfg: dict, checkpoint: str, data_dir: str, out_dir: str | None) -> int:
    path = Path(checkpoint)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint file: {path}")
    params, _ = load_checkpoint(path)
    dataset = load_dataset(data_dir, normalize=cfg["normalize"])
    _check_shape(params, dataset, str(path))
    n = min(cfg["batch_size"], len(dataset.segments))
    policy = replace(_policy(cfg), views_t=params.cfg.views)
    views = np.stack(
        [
            np.stack(
                sample_views(
                    dataset.segments[i], policy,
                    derive_rng(cfg["seed"], STREAM_VIEWS, 0, i), i,
                ).views
            )
            for i in range(n)
        ]
    )
    s, z, _ = forward_views(params, views)
    report = diagnostics(FeatureBatch.from_features(s, z), _loss_config(cfg))
    rhos = ", ".join(f"{r:.4f}" for r in report["rhos"])
    print(f"batch size: {n}")
    print(f"rho spectrum: [{rhos}]")
    print(f"rho_max: {report['rho_max']:.6f}")
    print(f"offdiag_rms_r1: {report['offdiag_rms_r1']:.6f}")
    print(f"offdiag_rms_r2: {report['offdiag_rms_r2']:.6f}")
    print(f"z_var_min (collapse measure): {report['z_var_min']:.6f}")
    print(f"cca_residual: {report['cca_residual']:.3e}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out)
        payload = {
            key: (value.tolist() if isinstance(value, np.ndarray) else value)
            for key, value in report.items()
        }
        (out / "diagnostics.json").write_text(json.dumps(payload, sort_keys=True) + "\n")
        plots.save_rho_spectrum(report["rhos"], out / "rho_spectrum.png")
    return EXIT_OK


def cmd_augment_preview(cfg: dict, data_dir: str, out_csv: str) -> int:
    dataset = load_dataset(data_dir, normalize=cfg["normalize"])
    segment = dataset.segments[0]
    policy = _policy(cfg)
    rng = derive_rng(cfg["seed"], STREAM_VIEWS, 0, 0)
    view_set = sample_views(segment, policy, rng, source_index=0)
    original = np.asarray(segment.samples, dtype=np.float64)
    out_path = Path(out_csv)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["channel,time_index,value,view_id"]
    panels = [original, *view_set.views]
    for view_id, view in enumerate(panels):
        for channel in range(view.shape[0]):
            for t in range(view.shape[1]):
                lines.append(f"{channel},{t},{float(view[channel, t])!r},{view_id}")
    out_path.write_text("".join(line + "\n" for line in lines))
    write_resolved(cfg, out_path.parent)
    plots.save_view_grid(
        original, view_set.views, view_set.kinds, out_path.with_suffix(".png")
    )
    print(f"wrote {len(panels)} views of segment 0 to {out_path}")
    return EXIT_OK


def _base_parser(name: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=f"hfmca {name}", allow_abbrev=False)
    parser.add_argument("--config", default=None, help="flat key = value config file")
    return parser


def _dispatch(argv: list[str]) -> int:
    if not argv or argv[0] in ("-h", "--help"):
        print(
            "usage: hfmca {synth,pretrain,probe,diagnose,augment-preview} "
            "[--config FILE] [--key value ...]"
        )
        return EXIT_OK
    command, rest = argv[0], argv[1:]
    if command == "synth":
        parser = _base_parser(command)
        parser.add_argument("--out", required=True, help="output dataset directory")
        args, leftover = parser.parse_known_args(rest)
        cfg = resolve_config(args.config, leftover)
        return cmd_synth(cfg, args.out)
    if command == "pretrain":
        parser = _base_parser(command)
        parser.add_argument("--data", required=True, help="dataset directory")
        parser.add_argument("--out", required=True, help="run output directory")
        args, leftover = parser.parse_known_args(rest)
        cfg = resolve_config(args.config, leftover)
        return cmd_pretrain(cfg, args.data, args.out)
    if command == "probe":
        parser = _base_parser(command)
        parser.add_argument("--data", required=True)
        parser.add_argument("--out", required=True)
        parser.add_argument(
            "--checkpoint", default=None,
            help="checkpoint file, or a pretrain output directory with split_* subdirs",
        )
        args, leftover = parser.parse_known_args(rest)
        cfg = resolve_config(args.config, leftover)
        return cmd_probe(cfg, args.data, args.checkpoint, args.out)
    if command == "diagnose":
        parser = _base_parser(command)
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--data", required=True)
        parser.add_argument("--out", default=None, help="optional report directory")
        args, leftover = parser.parse_known_args(rest)
        cfg = resolve_config(args.config, leftover)
        return cmd_diagnose(cfg, args.checkpoint, args.data, args.out)
    if command == "augment-preview":
        parser = _base_parser(command)
        parser.add_argument("--data", required=True)
        parser.add_argument("--out", required=True, help="output CSV path")
        args, leftover = parser.parse_known_args(rest)
        cfg = resolve_config(args.config, leftover)
        return cmd_augment_preview(cfg, args.data, args.out)
    print(f"unknown command: {command}", file=sys.stderr)
    return EXIT_CONFIG


def main(argv: list[str] | None = None) -> int:
    args = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
