from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from .attack import AttackRecord, StateAttacker
from .casefile import load_bundled_case, load_case
from .config import RunConfig, load_config
from .dataset import (
    DatasetSplit,
    build_windows,
    coordinate_scale,
    fit_normalizer,
    load_dataset,
    save_dataset,
    split,
    spread_gap,
    spread_starts,
    thin,
    write_manifest,
    write_trajectory_csv,
)
from .errors import ConfigError, FdiaError, ModelFileError, NumericalError, TrainingDivergedError
from .estimation import noise_sigmas
from .grid import NetworkModel, StateVector
from .loads import build_scenarios, demand_multipliers, read_load_csv, synthetic_profile
from .log import configure_logging, get_logger
from .neural import DaeModel, TrainConfig, load_model, save_model, train
from .pipeline import IdentificationThresholds, OnlineCorrector
from .powerflow import trajectory
from .reports import (
    evaluate,
    roc_sweep,
    write_histogram_csv,
    write_per_state_csv,
    write_predictions,
    write_report_json,
)
from .streaming import iter_outcome_lines, run_correction_stream

Json = Dict[str, Any]

logger = get_logger("cli")

DATASET_FILE = "dataset.bin"
MANIFEST_FILE = "manifest.json"
MODEL_FILE = "model.bin"


def load_grid(cfg: RunConfig) -> NetworkModel:
    if cfg.grid.case_path:
        try:
            text = Path(cfg.grid.case_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read case {cfg.grid.case_path}: {exc}") from exc
        return load_case(text)
    return load_bundled_case(cfg.grid.case_name)


def thresholds_of(cfg: RunConfig) -> IdentificationThresholds:
    return IdentificationThresholds(cfg.thresholds.theta, cfg.thresholds.v)


def _model_path(cfg: RunConfig, override: Optional[str]) -> Path:
    return Path(override) if override else cfg.output_path / MODEL_FILE


def _load_artifact_dataset(cfg: RunConfig) -> DatasetSplit:
    path = cfg.output_path / DATASET_FILE
    if not path.exists():
        raise ConfigError(f"dataset {path} not found; run `fdia-dae simulate` first")
    return load_dataset(path)


def _load_artifact_model(path: Path) -> DaeModel:
    if not path.exists():
        raise ConfigError(f"model {path} not found; run `fdia-dae train` first")
    return load_model(path)


def _load_multipliers(cfg: RunConfig, hours: int, rng: np.random.Generator) -> np.ndarray:
    lc = cfg.loads
    if lc.csv_path:
        demand = read_load_csv(lc.csv_path)["demand_mw"].to_numpy()
        multipliers = demand_multipliers(demand)
        if multipliers.size < hours:
            raise ConfigError(
                f"load csv has {multipliers.size} hours, the run needs {hours}"
            )
        return multipliers[:hours]
    return synthetic_profile(
        hours,
        rng,
        daily_amplitude=lc.daily_amplitude,
        weekly_amplitude=lc.weekly_amplitude,
        seasonal_amplitude=lc.seasonal_amplitude,
        noise_sigma=lc.noise_sigma,
    )


def _profile_hours(cfg: RunConfig, hours_needed: int) -> int:
    """Hours of load profile to solve: at least `hours_needed`, up to `span_hours`."""

    span = max(hours_needed, cfg.dataset.span_hours)
    if cfg.loads.csv_path and span > hours_needed:
        available = len(read_load_csv(cfg.loads.csv_path))
        span = max(hours_needed, min(span, available))
    return span


def cmd_simulate(cfg: RunConfig) -> Json:
    """Trajectory, attacked windows, split and manifest under output_dir."""

    ds = cfg.dataset
    grid = load_grid(cfg)
    rng = np.random.default_rng(cfg.seed)
    temporal = ds.boundary_mode == "temporal"

    gap = math.ceil((ds.window - 1) / ds.stride) if temporal else 0
    n_windows = ds.sample_count + 2 * gap
    hours_needed = (n_windows - 1) * ds.stride + ds.window
    hours_needed += math.ceil(hours_needed * ds.max_failure_rate)
    hours_total = _profile_hours(cfg, hours_needed)
    multipliers = _load_multipliers(cfg, hours_total, rng)
    scenarios = build_scenarios(
        multipliers, grid.n_bus, rng, jitter=cfg.loads.jitter, start_hour=cfg.loads.start_hour
    )
    traj = trajectory(grid, scenarios)
    if traj.failure_rate > ds.max_failure_rate:
        raise NumericalError(
            f"{len(traj.failures)} of {len(scenarios)} power flows failed "
            f"(rate {traj.failure_rate:.3f} > {ds.max_failure_rate}); first: {traj.failures[:3]}"
        )

    # Windows spread over the whole profile when it is longer than a packed run.
    starts = None
    if hours_total > hours_needed:
        candidates = n_windows + math.ceil(n_windows * ds.max_failure_rate)
        starts = spread_starts(len(traj), ds.window, candidates)
        if temporal:
            gap = spread_gap(starts, ds.window)
        n_windows = ds.sample_count + 2 * gap

    states = traj.as_array()
    train_hours = max(2, int(len(traj) * ds.fractions[0]))
    noise_scale = coordinate_scale(states[:train_hours])
    attacker = StateAttacker(
        grid,
        mode=cfg.attack.mode,
        magnitude=cfg.attack.magnitude,
        min_magnitude=cfg.attack.min_magnitude,
        targets=cfg.attack.targets or None,
        alpha=cfg.grid.alpha,
        max_retries=cfg.attack.max_retries,
        sigmas=noise_sigmas(grid.measurement_plan, cfg.grid.power_sigma, cfg.grid.voltage_sigma),
    )

    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    records: List[Tuple[int, str]] = []

    def audit(hour: int, record: AttackRecord) -> None:
        payload = record.to_json()
        payload["hour"] = hour
        records.append((hour, json.dumps(payload, sort_keys=True)))

    windows = build_windows(
        traj.states,
        ds.window,
        attacker,
        ds.awgn_sigma,
        rng,
        hours=traj.timestamps,
        stride=ds.stride,
        noise_scale=noise_scale,
        attack_fraction=ds.attack_fraction,
        audit_fraction=ds.audit_fraction,
        limit=None if starts is not None else n_windows,
        starts=starts,
        on_record=audit,
    )
    if starts is not None:
        windows = thin(windows, n_windows)
        kept = set(windows.hours.tolist())
        records = [(hour, line) for hour, line in records if hour in kept]
    data = split(windows, ds.fractions, ds.boundary_mode, gap=gap)

    save_dataset(out / DATASET_FILE, data)
    write_trajectory_csv(out / "trajectory.csv", traj.states, traj.timestamps, grid.state_labels())
    (out / "attacks.jsonl").write_text("".join(line + "\n" for _, line in records), encoding="utf-8")
    n_train, n_val, n_test = data.counts
    manifest = {
        "seed": cfg.seed,
        "case": grid.name,
        "n_bus": grid.n_bus,
        "n_states": grid.n_states,
        "slack_index": grid.slack_index,
        "input_shape": [ds.window, grid.n_states],
        "window": ds.window,
        "stride": ds.stride,
        "awgn_sigma": ds.awgn_sigma,
        "boundary_mode": ds.boundary_mode,
        "fractions": list(ds.fractions),
        "counts": {"train": n_train, "val": n_val, "test": n_test},
        "hours": len(scenarios),
        "window_spread": starts is not None,
        "power_flow_failures": len(traj.failures),
        "attack": {
            "mode": cfg.attack.mode,
            "magnitude": cfg.attack.magnitude,
            "min_magnitude": cfg.attack.min_magnitude,
            "targets": list(cfg.attack.targets),
            "attack_fraction": ds.attack_fraction,
            "audit_fraction": ds.audit_fraction,
            "audited": len(records),
        },
        "noise_scale": noise_scale.tolist(),
        "config": cfg.to_dict(),
    }
    write_manifest(out / MANIFEST_FILE, manifest)
    logger.info(
        "simulate.done out=%s train=%d val=%d test=%d", str(out), n_train, n_val, n_test
    )
    return {
        "output_dir": str(out),
        "counts": manifest["counts"],
        "input_shape": manifest["input_shape"],
        "failures": len(traj.failures),
    }


def cmd_train(cfg: RunConfig, model_path: Optional[str] = None) -> Json:
    data = _load_artifact_dataset(cfg)
    path = _model_path(cfg, model_path)
    tc = cfg.train
    slack_index = load_grid(cfg).slack_index

    if tc.resume and path.exists():
        model = load_model(path)
        if model.w != data.w or model.n_states != data.n_states:
            raise ConfigError("checkpoint does not match the dataset dimensions")
        if model.slack_index != slack_index:
            raise ConfigError(
                f"checkpoint slack index {model.slack_index} differs from the case ({slack_index})"
            )
        logger.info("train.resume path=%s epochs_trained=%d", str(path), model.epochs_trained)
    else:
        model = DaeModel.init(
            data.n_states,
            data.w,
            units=tuple(tc.units),  # type: ignore[arg-type]
            activation=tc.activation,
            seed=cfg.seed,
            normalizer=fit_normalizer(data.train),
            slack_index=slack_index,
        )
    norm = model.normalizer
    if norm is None:
        raise ModelFileError(f"checkpoint {path} carries no normalizer")
    normalized = DatasetSplit(
        train=norm.apply_set(data.train),
        val=norm.apply_set(data.val),
        test=norm.apply_set(data.test),
        fractions=data.fractions,
    )
    train_cfg = TrainConfig(
        epochs=tc.epochs,
        batch_size=tc.batch_size,
        learning_rate=tc.learning_rate,
        optimizer=tc.optimizer,
        seed=cfg.seed,
        clip_norm=tc.clip_norm,
        patience=tc.patience,
        lr_decay=tc.lr_decay,
    )
    start_epochs = model.epochs_trained
    try:
        report = train(model, normalized, train_cfg)
    except TrainingDivergedError:
        if model.epochs_trained > start_epochs:
            save_model(model, path)
            logger.error("train.diverged last good checkpoint saved path=%s", str(path))
        raise

    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path)
    report_path = cfg.output_path / "train_report.csv"
    frame = report.to_frame()
    if tc.resume and start_epochs and report_path.exists():
        frame = pd.concat([pd.read_csv(report_path), frame], ignore_index=True)
    frame.to_csv(report_path, index=False)
    logger.info(
        "train.done model=%s best_epoch=%d best_val_rmse=%.6f",
        str(path),
        report.best_epoch,
        report.best_val_rmse,
    )
    return {
        "model": str(path),
        "epochs": report.epochs,
        "best_epoch": report.best_epoch,
        "best_val_rmse": report.best_val_rmse,
        "report": str(report_path),
    }


def cmd_evaluate(cfg: RunConfig, model_path: Optional[str] = None) -> Json:
    data = _load_artifact_dataset(cfg)
    model = _load_artifact_model(_model_path(cfg, model_path))
    grid = load_grid(cfg)
    thresholds = thresholds_of(cfg)
    hc = cfg.histogram
    report, predictions = evaluate(
        model,
        data.test,
        thresholds,
        bins=hc.bins,
        value_range=(hc.low, hc.high),
        slack_index=grid.slack_index,
    )

    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out / "eval_report.json")
    write_histogram_csv(report, out / "histogram.csv")
    write_per_state_csv(report, out / "per_state.csv", grid.state_labels())
    write_predictions(out / "predictions.npz", data.test.targets, predictions)
    roc = roc_sweep(data.test.inputs[:, -1], predictions[:, -1], data.test.masks, thresholds)
    roc.to_csv(out / "roc.csv", index=False)
    return {
        "overall_rmse": report.overall_rmse,
        "max_per_state_rmse": max(report.per_state_rmse),
        "corrected_rmse": report.corrected_rmse,
        "attacked_rmse": report.attacked_rmse,
        "accuracy": report.identification.accuracy,
        "tpr": report.identification.tpr,
        "fpr": report.identification.fpr,
        "report": str(out / "eval_report.json"),
    }


def cmd_attack_demo(
    cfg: RunConfig, model_path: Optional[str] = None, *, clean: bool = False, out: Optional[TextIO] = None
) -> Json:
    """Correct one test window and tabulate normal/attacked/corrected values."""

    out = out or sys.stdout
    data = _load_artifact_dataset(cfg)
    model = _load_artifact_model(_model_path(cfg, model_path))
    grid = load_grid(cfg)
    idx = cfg.demo.window_index
    if not 0 <= idx < len(data.test):
        raise ConfigError(f"demo.window_index {idx} outside the {len(data.test)} test windows")
    sample = data.test[idx]

    normal = sample.target[-1]
    attacked = normal.copy() if clean else sample.inputs[-1]
    corrector = OnlineCorrector(model, thresholds_of(cfg), slack_index=grid.slack_index)
    corrector.warm_up([StateVector.from_array(row) for row in sample.inputs[:-1]])
    outcome = corrector.correct(StateVector.from_array(attacked), timestep=int(sample.hour))
    corrected = outcome.corrected.as_array()

    if cfg.demo.states:
        chosen = [k for k in cfg.demo.states if 0 <= k < grid.n_states]
    else:
        attacked_idx = [] if clean else np.flatnonzero(sample.attack_mask).tolist()
        rng = np.random.default_rng(cfg.seed)
        others = [
            k
            for k in rng.permutation(grid.n_states).tolist()
            if k not in attacked_idx and k != grid.slack_index
        ]
        chosen = (attacked_idx + others)[: cfg.demo.max_states]

    frame = pd.DataFrame(
        {
            "state_index": chosen,
            "normal": normal[chosen],
            "attacked": attacked[chosen],
            "corrected": corrected[chosen],
        }
    )
    dest = cfg.output_path
    dest.mkdir(parents=True, exist_ok=True)
    frame.to_csv(dest / "attack_demo.csv", index=False)

    labels = grid.state_labels()
    table = frame.assign(label=[labels[k] for k in chosen], flagged=[k in outcome.flagged for k in chosen])
    out.write(table.to_string(index=False) + "\n")
    return {
        "window_index": idx,
        "hour": int(sample.hour),
        "states": chosen,
        "flagged": list(outcome.flagged),
        "csv": str(dest / "attack_demo.csv"),
    }


def cmd_correct_stream(
    cfg: RunConfig,
    model_path: Optional[str] = None,
    *,
    stdin: Optional[TextIO] = None,
    stdout: Optional[TextIO] = None,
) -> Json:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    model = _load_artifact_model(_model_path(cfg, model_path))
    grid = load_grid(cfg)
    count = 0
    outcomes = run_correction_stream(model, stdin, thresholds_of(cfg), slack_index=grid.slack_index)
    for line in iter_outcome_lines(outcomes):
        stdout.write(line)
        stdout.flush()
        count += 1
    return {"corrected": count}


def cmd_serve(host: str, port: int, model_path: Optional[str]) -> None:
    import uvicorn

    if model_path:
        os.environ["FDIA_MODEL_PATH"] = model_path
    uvicorn.run("fdia_dae.server:app", host=host, port=port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fdia-dae",
        description="Stealthy FDIA simulation and LSTM denoising-autoencoder correction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override a config value, e.g. --set dataset.window=5 (repeatable)",
        )
        p.add_argument("--seed", type=int, help="Shortcut for --set seed=N")

    for name, help_text in (
        ("simulate", "Solve the load trajectory and build the attacked window dataset"),
        ("train", "Train the denoising autoencoder on the dataset"),
        ("evaluate", "Score the model on the test split"),
        ("attack-demo", "Correct one test window and print a before/after table"),
        ("correct-stream", "Correct JSON-lines states from stdin to stdout"),
    ):
        p = sub.add_parser(name, help=help_text)
        common(p)
        if name != "simulate":
            p.add_argument("--model", help="Model file (default: <output_dir>/model.bin)")
        if name == "attack-demo":
            p.add_argument("--clean", action="store_true", help="Replace the attacked row by the normal state")

    serve = sub.add_parser("serve", help="Run the HTTP correction service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--model", help="Model file (default: $FDIA_MODEL_PATH)")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: List[str] = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            cmd_serve(args.host, args.port, args.model)
            return 0
        cfg = _config_from_args(args)
        if args.command == "simulate":
            summary = cmd_simulate(cfg)
        elif args.command == "train":
            summary = cmd_train(cfg, args.model)
        elif args.command == "evaluate":
            summary = cmd_evaluate(cfg, args.model)
        elif args.command == "attack-demo":
            summary = cmd_attack_demo(cfg, args.model, clean=args.clean)
        else:
            summary = cmd_correct_stream(cfg, args.model)
    except FdiaError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return exc.exit_code
    logger.info("%s summary %s", args.command, json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
