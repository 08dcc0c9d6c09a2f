"""Command-line entry point: train, eval, forecast, adapt, analyze, bench.

Every command reads a flat key=value config file (``--config``), overridden
by ``--set key=value`` pairs, overridden in turn by explicit flags. Outputs
are plain CSV/text files in the output directory. Exit codes: 0 success,
2 usage or configuration problems, 3 data problems, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .adaptation import adaptation_benchmark, scale_up_forecast
from .config import (
    RunConfig,
    apply_overrides,
    build_model_config,
    echo_config,
    parse_config_file,
    resolve_threads,
)
from .data import Dataset, chronological_split, load_csv, synth_generate, windows
from .errors import CheckpointError, ConfigError, DataError, KoopaError, NumericError, TrainingError
from .metrics import degree_of_variation, evaluate_model, mae as mae_fn, mse as mse_fn, stability_report
from .model import fit_mask, new_model, train
from .spectral import accumulate_amplitudes, build_mask

log = logging.getLogger("koopa.cli")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


#: explicit flags and the config keys they override
_FLAG_KEYS = {
    "data": "data_path",
    "out": "out_dir",
    "checkpoint": "checkpoint",
    "horizon": "adapt_horizon",
    "mode": "adapt_mode",
    "which": "which",
    "split": "split",
    "input": "input_path",
}


def _resolved(args) -> RunConfig:
    values = parse_config_file(args.config) if args.config else {}
    values = apply_overrides(values, args.set)
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = str(value)
    return RunConfig(values)


def _out_dir(run: RunConfig) -> str:
    out = run.get_str("out_dir", "koopa-out")
    os.makedirs(out, exist_ok=True)
    echo_config(run.values, os.path.join(out, "config.resolved"))
    return out


def _load_dataset(run: RunConfig, min_rows: int | None = None) -> Dataset:
    path = run.get_str("data_path")
    if path.startswith("synth:"):
        kind = path.split(":", 1)[1]
        ds = synth_generate(
            kind,
            {"length": run.get_int("synth_length", 2048), "variates": run.get_int("synth_variates", 2)},
            seed=run.get_int("synth_seed", 0),
        )
        return ds
    raw = load_csv(path)
    preset = run.get_str("split_preset", "none")
    ratios = (run.get_float("train_ratio", 0.7), run.get_float("val_ratio", 0.1))
    return chronological_split(
        raw, ratios=ratios, preset=None if preset == "none" else preset, min_rows=min_rows
    )


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_train(args) -> int:
    run = _resolved(args)
    horizon = run.get_int("horizon")
    lookback = run.get_int("lookback", 2 * horizon)
    dataset = _load_dataset(run, min_rows=lookback + horizon)
    cfg = build_model_config(run, dataset.n_variates)
    out = _out_dir(run)
    mask = fit_mask(cfg, (w.lookback for w in windows(dataset, "train", cfg.lookback, cfg.horizon)))
    model = new_model(cfg, mask, scaler=dataset.scaler)
    result = train(model, dataset)
    ckpt.save_checkpoint(model, os.path.join(out, "model.kpa"))
    _write_csv(
        os.path.join(out, "training_log.csv"),
        ["epoch", "train_mse", "val_mse", "seconds"],
        [[r.epoch, repr(r.train_mse), repr(r.val_mse), f"{r.seconds:.3f}"] for r in result.log],
    )
    for event in result.events:
        print(f"event: {event}")
    print(
        f"trained {cfg.blocks} blocks for {result.epochs_run} epochs "
        f"(best val mse {result.best_val:.6f}); checkpoint at {out}/model.kpa"
    )
    return 0


def cmd_eval(args) -> int:
    run = _resolved(args)
    model = ckpt.load_checkpoint(run.get_str("checkpoint"))
    dataset = _load_dataset(run)
    split = run.get_str("split", "test")
    report = evaluate_model(
        model,
        dataset,
        split=split,
        stride=run.get_int("stride", 1),
        seasonality=run.get_int("seasonality", 1),
        threads=resolve_threads(args.threads),
    )
    out = _out_dir(run)
    _write_csv(
        os.path.join(out, "metrics.csv"),
        ["split", "mse", "mae", "smape", "mase", "window_count"],
        [[split, repr(report.mse), repr(report.mae), repr(report.smape), repr(report.mase), report.window_count]],
    )
    _write_csv(
        os.path.join(out, "per_horizon_mse.csv"),
        ["step", "mse"],
        [[i + 1, repr(v)] for i, v in enumerate(report.per_horizon_mse)],
    )
    print(
        f"{split}: mse={report.mse:.6f} mae={report.mae:.6f} smape={report.smape:.4f} "
        f"mase={report.mase:.4f} over {report.window_count} windows"
    )
    return 0


def cmd_forecast(args) -> int:
    run = _resolved(args)
    model = ckpt.load_checkpoint(run.get_str("checkpoint"))
    raw = load_csv(run.get_str("input_path"))
    cfg = model.config
    if raw.n_variates != cfg.variates:
        raise ConfigError(f"input has {raw.n_variates} variates, model expects {cfg.variates}")
    if raw.n_rows < cfg.lookback:
        raise DataError(f"input has {raw.n_rows} rows, lookback needs {cfg.lookback}")
    window = raw.values[-cfg.lookback :]
    if model.scaler is not None:
        mean, std = model.scaler
        window = (window - mean) / std
    from .model import koopa_forward

    pred = koopa_forward(model, window).prediction
    if model.scaler is not None:
        pred = pred * std + mean
    out = _out_dir(run)
    path = os.path.join(out, "forecast.csv")
    _write_csv(path, [f"v{j}" for j in range(cfg.variates)], [[repr(float(v)) for v in row] for row in pred])
    print(f"wrote {pred.shape[0]}x{pred.shape[1]} forecast to {path}")
    return 0


def cmd_adapt(args) -> int:
    run = _resolved(args)
    model = ckpt.load_checkpoint(run.get_str("checkpoint"))
    cfg = model.config
    h_te = run.get_int("adapt_horizon")
    if h_te < cfg.horizon:
        raise ConfigError(f"adapt horizon {h_te} is smaller than the training horizon {cfg.horizon}")
    mode = run.get_str("adapt_mode", "oa_fast")
    if mode not in ("vanilla", "oa_naive", "oa_fast"):
        raise ConfigError(f"adapt_mode must be vanilla|oa_naive|oa_fast, got {mode!r}")
    dataset = _load_dataset(run)
    max_windows = run.get_int("adapt_max_windows", 32)
    pairs = list(windows(dataset, "test", cfg.lookback, h_te, stride=h_te))[:max_windows]
    if not pairs:
        raise DataError(f"test split has no windows of T+H_te={cfg.lookback + h_te} rows")
    modes = ["vanilla"] + ([mode] if mode != "vanilla" else [])
    sums = {m: [0.0, 0.0] for m in modes}
    first_forecast = None
    for pair in pairs:
        for m in modes:
            pred = scale_up_forecast(model, pair.lookback, h_te, ground_truth=pair.target, mode=m)
            sums[m][0] += mse_fn(pred, pair.target)
            sums[m][1] += mae_fn(pred, pair.target)
            if first_forecast is None and m == modes[-1]:
                first_forecast = pred
    out = _out_dir(run)
    n = len(pairs)
    vanilla_mse = sums["vanilla"][0] / n
    rows = []
    for m in modes:
        m_mse, m_mae = sums[m][0] / n, sums[m][1] / n
        promotion = 0.0 if m == "vanilla" or vanilla_mse == 0 else (vanilla_mse - m_mse) / vanilla_mse * 100.0
        rows.append([m, repr(m_mse), repr(m_mae), f"{promotion:.2f}"])
    _write_csv(os.path.join(out, "adapt_compare.csv"), ["mode", "mse", "mae", "promotion_pct"], rows)
    _write_csv(
        os.path.join(out, "adapt_forecast.csv"),
        [f"v{j}" for j in range(cfg.variates)],
        [[repr(float(v)) for v in row] for row in first_forecast],
    )
    for row in rows:
        print(f"{row[0]}: mse={row[1]} mae={row[2]} promotion={row[3]}%")
    return 0


def cmd_analyze(args) -> int:
    run = _resolved(args)
    which = run.get_str("which")
    dataset = _load_dataset(run)
    out = _out_dir(run)
    if which == "dov":
        if run.has("checkpoint"):
            model = ckpt.load_checkpoint(run.get_str("checkpoint"))
            mask, lookback, horizon = model.mask, model.config.lookback, model.config.horizon
        else:
            lookback = run.get_int("lookback")
            horizon = run.get_int("horizon")
            stats = accumulate_amplitudes(
                w.lookback for w in windows(dataset, "train", lookback, horizon)
            )
            mask = build_mask(stats, run.get_float("alpha", 0.2))
        report = degree_of_variation(
            dataset, mask, lookback, horizon, subsets=run.get_int("subsets", 20),
            stride=run.get_int("stride", 1),
        )
        _write_csv(
            os.path.join(out, "dov.csv"),
            ["component", "weight_std"],
            [["invariant", repr(report.std_invariant)], ["variant", repr(report.std_variant)]],
        )
        print(f"degree of variation: invariant={report.std_invariant:.6f} variant={report.std_variant:.6f}")
    elif which == "stability":
        model = ckpt.load_checkpoint(run.get_str("checkpoint"))
        rows = stability_report(model, dataset, split=run.get_str("split", "test"),
                                sample=run.get_int("sample", 16))
        _write_csv(
            os.path.join(out, "stability.csv"),
            ["kind", "id", "stability"],
            [[r.kind, r.ident, repr(r.stability)] for r in rows],
        )
        _write_csv(
            os.path.join(out, "eigenvalues.csv"),
            ["id", "re", "im"],
            [[r.ident, repr(float(ev.real)), repr(float(ev.imag))] for r in rows for ev in r.eigenvalues],
        )
        print(f"wrote stability report ({len(rows)} operators) to {out}/stability.csv")
    else:
        raise ConfigError(f"analyze expects which=dov|stability, got {which!r}")
    return 0


def cmd_bench(args) -> int:
    run = _resolved(args)
    dims = run.get_int_tuple("bench_dims", (16, 32, 64, 128))
    steps = run.get_int("bench_steps", 256)
    repeats = run.get_int("bench_repeats", 5)
    rows = adaptation_benchmark(dims, steps=steps, repeats=repeats, seed=run.get_int("seed", 0))
    out = _out_dir(run)
    _write_csv(
        os.path.join(out, "adapt_bench.csv"),
        ["algorithm", "D", "F", "L", "total_seconds", "per_step_seconds"],
        [[r.algorithm, r.dim, r.initial_segments, r.steps, repr(r.total_seconds), repr(r.per_step_seconds)]
         for r in rows],
    )
    for r in rows:
        print(f"{r.algorithm} D={r.dim} L={r.steps}: total={r.total_seconds:.4f}s per-step={r.per_step_seconds:.6f}s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koopa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--threads", type=int, default=None, help="worker fan-out (or KOOPA_THREADS)")
        p.add_argument("--out", help="output directory (key out_dir)")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument("--data", help="dataset CSV path (key data_path)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--data", help="dataset CSV path")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--split", help="train|val|test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("forecast", help="forecast from a CSV holding one lookback window")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--input", help="CSV with at least T rows (key input_path)")
    p.set_defaults(fn=cmd_forecast)

    p = sub.add_parser("adapt", help="scale up the horizon, comparing vanilla vs operator adaptation")
    common(p)
    p.add_argument("--data", help="dataset CSV path")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--horizon", type=int, help="scale-up horizon H_te (key adapt_horizon)")
    p.add_argument("--mode", help="vanilla|oa_naive|oa_fast (key adapt_mode)")
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("analyze", help="emit dynamics-variation or operator-stability reports")
    common(p)
    p.add_argument("--data", help="dataset CSV path")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--which", help="dov|stability")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("bench", help="time the adaptation algorithms over a D grid")
    common(p)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KoopaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
