"""Experiment runner CLI.

Configuration is a flat `key = value` text file (`#` starts a comment);
every key can also be passed as a `--<key> <value>` flag, and flags win
over file values. Each seed runs independently and writes its artifacts to
`<out>/<run_name>/<seed>/`, using write-then-rename so no artifact is ever
left half-written.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .errors import ConfigError, NoisyFLError
from .metrics import detection_metrics
from .model import save_params
from .orchestrator import (
    CONFIG_KEYS,
    ExperimentConfig,
    ExperimentResult,
    build_noise_plan,
    config_with_overrides,
    run_experiment,
    validate_config,
)

_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")


def _parse_bool(key, raw):
    low = raw.strip().lower()
    if low in _BOOL_TRUE:
        return True
    if low in _BOOL_FALSE:
        return False
    raise ConfigError(f"{key}={raw!r} is not a boolean")


def _parse_hidden_dims(key, raw):
    raw = raw.strip()
    if not raw:
        return ()
    try:
        return tuple(int(part) for part in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}={raw!r}: {exc}") from exc


def _parse_optional_float(key, raw):
    raw = raw.strip()
    if not raw or raw.lower() == "none":
        return None
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}={raw!r} is not a number") from exc


def _converters():
    special = {
        "hidden_dims": _parse_hidden_dims,
        "detection_threshold": _parse_optional_float,
    }
    conv = {}
    for f in fields(ExperimentConfig):
        if f.name in special:
            conv[f.name] = special[f.name]
        elif f.type in ("bool",):
            conv[f.name] = _parse_bool
        elif f.type in ("int",):
            conv[f.name] = lambda key, raw: _parse_number(key, raw, int)
        elif f.type in ("float",):
            conv[f.name] = lambda key, raw: _parse_number(key, raw, float)
        else:
            conv[f.name] = lambda key, raw: raw.strip()
    return conv


def _parse_number(key, raw, kind):
    try:
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}={raw.strip()!r} is not a valid {kind.__name__}") from exc


_CONVERTERS = _converters()


def parse_config(path=None, overrides=None) -> ExperimentConfig:
    """Build a validated config from an optional file plus string overrides."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
            raw[key] = value
    for key, value in (overrides or {}).items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        raw[key] = value
    typed = {key: _CONVERTERS[key](key, value) for key, value in raw.items()}
    cfg = ExperimentConfig(**typed)
    validate_config(cfg)
    return cfg


def _write_atomic(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as f:
        f.write(data)
    os.replace(tmp, path)


def _fmt(x) -> str:
    if x != x:  # nan
        return ""
    return repr(float(x))


ROUNDS_HEADER = (
    "round,stage,accuracy,macro_precision,macro_recall,macro_f1,"
    "mean_train_loss,correction_accuracy"
)


def _rounds_csv(result: ExperimentResult) -> str:
    lines = [ROUNDS_HEADER]
    for r in result.rounds:
        lines.append(
            ",".join(
                [
                    str(r.round),
                    str(r.stage),
                    _fmt(r.accuracy),
                    _fmt(r.macro_precision),
                    _fmt(r.macro_recall),
                    _fmt(r.macro_f1),
                    _fmt(r.mean_train_loss),
                    _fmt(r.correction_accuracy),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _correction_csv(result: ExperimentResult) -> str:
    lines = ["round,client_id,sample_index,corrected_label,observed_label,true_label"]
    for row in result.correction_rows:
        lines.append(",".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def _config_echo(cfg: ExperimentConfig) -> dict:
    echo = {}
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        echo[f.name] = list(value) if isinstance(value, tuple) else value
    return echo


def _json_safe(x):
    return None if isinstance(x, float) and x != x else x


def _detection_payload(cfg, result):
    plan = build_noise_plan(cfg)
    threshold = cfg.effective_detection_threshold()
    payload = {"ran": result.assignment is not None, "threshold": threshold}
    if result.assignment is None:
        return payload
    assignment = result.assignment
    dm = detection_metrics(assignment, plan, threshold)
    realized = {r.client_id: r.realized_rate for r in result.injection_reports}
    payload.update(
        degenerate=assignment.degenerate,
        n_noisy=len(assignment.noisy_ids()),
        n_clean=len(assignment.clean_ids()),
        precision=dm.precision,
        recall=dm.recall,
        noisy_group_mean_rate=_json_safe(dm.noisy_group_mean_rate),
        clean_group_mean_rate=_json_safe(dm.clean_group_mean_rate),
        clients=[
            {
                "client_id": cid,
                "group": assignment.groups[cid],
                "noisy_responsibility": assignment.noisy_responsibility[cid],
                "planned_rate": plan.rate_of(cid),
                "realized_rate": realized.get(cid),
                "missing_classes": result.missing_classes.get(cid, []),
            }
            for cid in range(assignment.n_clients)
        ],
    )
    return payload


def _summary_payload(cfg, result, seed):
    last = result.rounds[-1] if result.rounds else None
    ratio = float("nan")
    if result.mean_vanilla_update_s == result.mean_vanilla_update_s and result.mean_vanilla_update_s > 0:
        ratio = result.mean_correction_update_s / result.mean_vanilla_update_s
    return {
        "version": __version__,
        "seed": seed,
        "config": _config_echo(cfg),
        "final": None
        if last is None
        else {
            "round": last.round,
            "accuracy": last.accuracy,
            "macro_precision": last.macro_precision,
            "macro_recall": last.macro_recall,
            "macro_f1": last.macro_f1,
            "correction_accuracy": _json_safe(last.correction_accuracy),
        },
        "best": {
            "accuracy": _json_safe(result.best_accuracy),
            "accuracy_round": result.best_accuracy_round,
            "macro_f1": _json_safe(result.best_macro_f1),
            "macro_f1_round": result.best_macro_f1_round,
        },
        "detection": _detection_payload(cfg, result),
        "noise": [
            {
                "client_id": r.client_id,
                "pattern": r.pattern,
                "planned_rate": r.planned_rate,
                "realized_rate": r.realized_rate,
                "n_samples": r.n_samples,
            }
            for r in result.injection_reports
        ],
        "timing": {
            "vanilla_update_mean_s": _json_safe(result.mean_vanilla_update_s),
            "correction_update_mean_s": _json_safe(result.mean_correction_update_s),
            "correction_over_vanilla": _json_safe(ratio),
        },
    }


def _dump_json(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path, config_path, seeds, dry_run):
    """Execute one seeded run and write its artifact directory.

    Returns the manifest dict. In dry-run mode only the manifest is written.
    """
    run_dir = out_dir / cfg.run_name / str(seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    seed_cfg = config_with_overrides(cfg, seed=seed)
    validate_config(seed_cfg)

    artifacts = ["manifest.json"]
    manifest = {
        "version": __version__,
        "config_path": str(config_path) if config_path else None,
        "config": _config_echo(seed_cfg),
        "seed": seed,
        "seeds": list(seeds),
        "output_dir": str(run_dir),
        "artifacts": artifacts,
        "dry_run": dry_run,
    }
    if dry_run:
        _write_atomic(run_dir / "manifest.json", _dump_json(manifest))
        return manifest

    result = run_experiment(seed_cfg)

    _write_atomic(run_dir / "rounds.csv", _rounds_csv(result))
    artifacts.append("rounds.csv")
    _write_atomic(run_dir / "summary.json", _dump_json(_summary_payload(seed_cfg, result, seed)))
    artifacts.append("summary.json")
    if result.assignment is not None:
        _write_atomic(run_dir / "detection.json", _dump_json(_detection_payload(seed_cfg, result)))
        artifacts.append("detection.json")
    if result.correction_rows:
        _write_atomic(run_dir / "correction.csv", _correction_csv(result))
        artifacts.append("correction.csv")
    tmp_model = run_dir / "model.bin.tmp"
    save_params(result.final_params, tmp_model)
    os.replace(tmp_model, run_dir / "model.bin")
    artifacts.append("model.bin")
    _write_atomic(run_dir / "manifest.json", _dump_json(manifest))

    last = result.rounds[-1]
    print(
        f"seed {seed}: final acc={last.accuracy:.4f} f1={last.macro_f1:.4f} "
        f"best_acc={result.best_accuracy:.4f}@r{result.best_accuracy_round} -> {run_dir}"
    )
    return manifest


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisyfl",
        description="Federated-learning simulator with label-noise injection, "
        "noisy-client detection and label correction.",
    )
    parser.add_argument("--config", metavar="PATH", help="flat key=value config file")
    parser.add_argument("--out", metavar="DIR", default="runs", help="output directory")
    parser.add_argument(
        "--seeds", metavar="LIST", help="comma-separated seeds, one run per seed"
    )
    parser.add_argument("--no-correction", action="store_true", help="disable stage-2 label correction")
    parser.add_argument("--no-logit-adjust", action="store_true", help="disable logit adjustment")
    parser.add_argument("--dry-run", action="store_true", help="validate config, write manifest only")
    for key in CONFIG_KEYS:
        parser.add_argument(f"--{key}", metavar="V", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {
            key: getattr(args, key)
            for key in CONFIG_KEYS
            if getattr(args, key, None) is not None
        }
        if args.no_correction:
            overrides["correction"] = "false"
        if args.no_logit_adjust:
            overrides["logit_adjust"] = "false"
        cfg = parse_config(args.config, overrides)
        if args.seeds:
            try:
                seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            except ValueError:
                raise ConfigError(f"--seeds {args.seeds!r} is not a comma-separated int list")
            if not seeds:
                raise ConfigError("--seeds produced an empty list")
        else:
            seeds = [cfg.seed]
        out_dir = Path(args.out)
        for seed in seeds:
            run_seed(cfg, seed, out_dir, args.config, seeds, args.dry_run)
        return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NoisyFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
