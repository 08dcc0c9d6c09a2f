"""Forecast metrics, naive baselines, and the two analysis procedures:
temporal-dependency variation of the disentangled components, and operator
stability as eigenvalue distance from the unit circle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, Split
from .errors import MetricError, ShapeError
from .linalg import eigenvalues
from .model import KoopaModel, _forward_batch, denormalize, operator_stability
from .spectral import SpectrumMask, fourier_filter


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


def mse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _check_pair(pred, truth)
    return float(((pred - truth) ** 2).mean())


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _check_pair(pred, truth)
    return float(np.abs(pred - truth).mean())


def smape(pred: np.ndarray, truth: np.ndarray) -> float:
    """Symmetric MAPE with the M4 factor 200; 0/0 terms count as zero."""
    pred, truth = _check_pair(pred, truth)
    num = np.abs(pred - truth)
    den = np.abs(pred) + np.abs(truth)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(200.0 * terms.mean())


def mase(pred: np.ndarray, truth: np.ndarray, insample: np.ndarray, seasonality: int = 1) -> float:
    """MAE scaled by the in-sample seasonal-naive MAE."""
    pred, truth = _check_pair(pred, truth)
    insample = np.asarray(insample, dtype=np.float64)
    if insample.ndim == 1:
        insample = insample[:, None]
    if seasonality < 1 or insample.shape[0] <= seasonality:
        raise MetricError(
            f"insample has {insample.shape[0]} rows, need more than seasonality={seasonality}"
        )
    scale = float(np.abs(insample[seasonality:] - insample[:-seasonality]).mean())
    if scale == 0.0:
        raise MetricError("MASE denominator is zero (seasonal-naive errors vanish in-sample)")
    return float(np.abs(pred - truth).mean() / scale)


def naive_baselines(lookback: np.ndarray, horizon: int, seasonality: int = 1) -> dict[str, np.ndarray]:
    """repeat-last, seasonal-naive(s), and per-variate linear extrapolation."""
    x = np.asarray(lookback, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"lookback must be (T, C), got {x.shape}")
    t = x.shape[0]
    if not 1 <= seasonality <= t:
        raise ValueError(f"seasonality {seasonality} must lie in [1, T={t}]")
    repeat_last = np.tile(x[-1], (horizon, 1))
    pattern = x[-seasonality:]
    seasonal = pattern[np.arange(horizon) % seasonality]
    steps = np.arange(t, dtype=np.float64)
    design = np.stack([steps, np.ones(t)], axis=1)
    coef, *_ = np.linalg.lstsq(design, x, rcond=None)
    future = np.stack([np.arange(t, t + horizon, dtype=np.float64), np.ones(horizon)], axis=1)
    return {"repeat_last": repeat_last, "seasonal_naive": seasonal, "linear_extrap": future @ coef}


@dataclass(frozen=True)
class MetricReport:
    mse: float
    mae: float
    smape: float
    mase: float
    window_count: int
    per_horizon_mse: np.ndarray | None = None


def evaluate_model(
    model: KoopaModel,
    dataset: Dataset,
    split: Split = "test",
    stride: int = 1,
    seasonality: int = 1,
    chunk: int = 256,
    threads: int = 1,
) -> MetricReport:
    """Metrics over all window pairs of a split, on the standardized scale.

    MASE uses each window's own lookback as the in-sample series; windows
    whose seasonal-naive denominator vanishes are left out of its average.
    Chunks may be evaluated by worker threads (inference on a frozen model is
    thread-safe); partial sums are merged in chunk order either way, so the
    result does not depend on ``threads``.
    """
    cfg = model.config
    lo, hi = dataset.split_range(split)
    vals = dataset.scaled_values
    need = cfg.lookback + cfg.horizon
    origins = np.arange(lo, hi - need + 1, stride)
    if origins.size == 0:
        raise MetricError(f"{split} split has no complete windows for T+H={need}")

    def eval_chunk(batch: np.ndarray):
        idx = batch[:, None] + np.arange(need)
        both = vals[idx]
        x, y = both[:, : cfg.lookback], both[:, cfg.lookback :]
        cache = _forward_batch(model, x)
        pred = denormalize(cache.y_norm, cache.mean, cache.std)
        err = pred - y
        den = np.abs(pred) + np.abs(y)
        smape_part = float(np.divide(np.abs(err), den, out=np.zeros_like(den), where=den > 0).sum())
        scales = np.abs(x[:, seasonality:] - x[:, :-seasonality]).mean(axis=(1, 2))
        w_mae = np.abs(err).mean(axis=(1, 2))
        ok = scales > 0
        return (
            float((err**2).sum()),
            float(np.abs(err).sum()),
            smape_part,
            (err**2).sum(axis=(0, 2)),
            (w_mae[ok] / scales[ok]).tolist(),
            int(batch.size),
        )

    batches = [origins[s : s + chunk] for s in range(0, origins.size, chunk)]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(eval_chunk, batches))
    else:
        parts = [eval_chunk(b) for b in batches]
    sq_sum = sum(p[0] for p in parts)
    abs_sum = sum(p[1] for p in parts)
    smape_sum = sum(p[2] for p in parts)
    per_h = np.sum([p[3] for p in parts], axis=0)
    mase_vals = [v for p in parts for v in p[4]]
    count = sum(p[5] for p in parts)
    denom = count * cfg.horizon * cfg.variates
    return MetricReport(
        mse=sq_sum / denom,
        mae=abs_sum / denom,
        smape=200.0 * smape_sum / denom,
        mase=float(np.mean(mase_vals)) if mase_vals else float("nan"),
        window_count=count,
        per_horizon_mse=per_h / (count * cfg.variates),
    )


# ---------------------------------------------------------------------------
# degree of variation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DovReport:
    subsets: int
    std_invariant: float
    std_variant: float
    weights_invariant: np.ndarray | None = None
    weights_variant: np.ndarray | None = None


def _component_regression(
    lookbacks: np.ndarray, targets: np.ndarray, ridge: float
) -> np.ndarray:
    """Least-squares map from flattened lookbacks to flattened targets.

    A tiny ridge keeps the fit defined when a subset has fewer windows than
    features; otherwise plain least squares (the min-norm pinv solution).
    """
    n = lookbacks.shape[0]
    x = np.concatenate([lookbacks.reshape(n, -1), np.ones((n, 1))], axis=1)
    y = targets.reshape(n, -1)
    if n >= x.shape[1]:
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
    else:
        gram = x.T @ x + ridge * np.eye(x.shape[1])
        w = np.linalg.solve(gram, x.T @ y)
    return w[:-1]  # intercept excluded from the deviation statistic


def degree_of_variation(
    dataset: Dataset,
    mask: SpectrumMask,
    lookback: int,
    horizon: int,
    subsets: int = 20,
    stride: int = 1,
    ridge: float = 1e-6,
    keep_weights: bool = False,
) -> DovReport:
    """Cross-period deviation of linear forecast maps, per component.

    The series is cut into ``subsets`` contiguous equal parts. Within each,
    every (T, H) window pair is filtered into its invariant/variant parts
    (targets via the T-length window ending at the target's last row) and a
    linear map lookback -> target is fit per component. The reported value is
    the per-entry standard deviation of those maps across subsets, averaged
    over entries.
    """
    if subsets < 1:
        raise ValueError(f"subsets must be >= 1, got {subsets}")
    vals = dataset.scaled_values
    part_len = vals.shape[0] // subsets
    need = lookback + horizon
    if part_len < need:
        raise ValueError(
            f"each of {subsets} subsets has {part_len} rows; at least {need} are needed"
        )
    if mask.window_length != lookback:
        raise ShapeError(f"mask T={mask.window_length} does not match lookback {lookback}")
    weights = {"inv": [], "var": []}
    for i in range(subsets):
        part = vals[i * part_len : (i + 1) * part_len]
        origins = np.arange(0, part.shape[0] - need + 1, stride)
        look_idx = origins[:, None] + np.arange(lookback)
        shift_idx = origins[:, None] + horizon + np.arange(lookback)
        look_inv, look_var = fourier_filter(part[look_idx], mask)
        tail_inv, tail_var = fourier_filter(part[shift_idx], mask)
        for key, looks, tails in (("inv", look_inv, tail_inv), ("var", look_var, tail_var)):
            weights[key].append(_component_regression(looks, tails[:, -horizon:], ridge))
    stacks = {k: np.stack(v) for k, v in weights.items()}
    report = DovReport(
        subsets=subsets,
        std_invariant=float(stacks["inv"].std(axis=0).mean()),
        std_variant=float(stacks["var"].std(axis=0).mean()),
        weights_invariant=stacks["inv"] if keep_weights else None,
        weights_variant=stacks["var"] if keep_weights else None,
    )
    return report


# ---------------------------------------------------------------------------
# operator stability report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityRow:
    kind: str  # "k_inv" or "k_var"
    ident: str
    stability: float
    eigenvalues: np.ndarray


def stability_report(
    model: KoopaModel, dataset: Dataset, split: Split = "test", sample: int = 16
) -> list[StabilityRow]:
    """Per-block global-operator stability plus first-block local operators
    from an evenly spaced sample of windows."""
    cfg = model.config
    rows = [
        StabilityRow("k_inv", f"block{b}", operator_stability(k), eigenvalues(k))
        for b, k in enumerate(model.k_inv)
    ]
    lo, hi = dataset.split_range(split)
    need = cfg.lookback + cfg.horizon
    max_origin = hi - need
    if max_origin < lo:
        raise MetricError(f"{split} split has no complete windows for T+H={need}")
    origins = np.unique(np.linspace(lo, max_origin, num=min(sample, max_origin - lo + 1), dtype=int))
    vals = dataset.scaled_values
    idx = origins[:, None] + np.arange(cfg.lookback)
    cache = _forward_batch(model, vals[idx])
    for j, origin in enumerate(origins):
        k_var = cache.blocks[0].k_var[j]
        rows.append(StabilityRow("k_var", f"window{origin}", operator_stability(k_var), eigenvalues(k_var)))
    return rows
