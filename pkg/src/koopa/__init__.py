"""Koopa: a Koopman-operator forecaster for non-stationary time series.

The model stacks residual blocks that each split their input window by a
frequency mask, advance the dominant (time-invariant) part with a learned
global operator, and fit a local one-step operator to the remainder's segment
embeddings. Horizons beyond the training length are covered by rolling
forecasts whose local operators adapt online to incoming ground truth.
"""

from .adaptation import AdaptState, adapt_fast, adapt_naive, adaptation_benchmark, scale_up_forecast
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, WindowPair, chronological_split, load_csv, save_csv, synth_generate, windows
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    KoopaError,
    MetricError,
    NumericError,
    ShapeError,
    StateError,
    StreamError,
    TrainingError,
)
from .metrics import (
    DovReport,
    MetricReport,
    degree_of_variation,
    evaluate_model,
    mae,
    mase,
    mse,
    naive_baselines,
    smape,
    stability_report,
)
from .model import (
    ForecastResult,
    KoopaModel,
    ModelConfig,
    edmd_fit,
    explosion_check,
    fit_mask,
    forecast_batch,
    init_k_inv,
    koopa_forward,
    new_model,
    normalize_window,
    operator_stability,
    segment,
    time_inv_forward,
    time_var_forward,
    train,
)
from .neural import AdamState, GradientTape, Mlp, adam_step, gradient_check, mlp_backward, mlp_forward, seeded_rng
from .spectral import (
    AmplitudeStats,
    SpectrumMask,
    accumulate_amplitudes,
    build_mask,
    fourier_filter,
    inverse_rfft,
    rfft,
)

__version__ = "0.1.0"
