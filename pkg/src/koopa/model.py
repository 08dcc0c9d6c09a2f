"""The block-stacked Koopman forecaster.

Each block splits its input window with the spectrum mask, advances the
invariant part with a learned global operator between encoded lookback and
forecast embeddings, fits a local operator to the variant part's segment
embeddings by least squares (pseudoinverse), and hands the unfitted remainder
to the next block. The final forecast is the sum of every block's two
predictions.

Training uses hand-rolled reverse-mode gradients of this exact pipeline,
including the pseudoinverse (an SVD-based product rule), so the encoder of
the variant branch is optimized end to end. A ``detach_kvar`` switch treats
the local operator as data instead, for ablations.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset
from .errors import DataError, NumericError, ShapeError, TrainingError
from .linalg import DEFAULT_RCOND, Matrix
from .linalg import pinv as _pinv_single
from .neural import AdamState, Mlp, adam_step, mlp_backward, mlp_forward, seeded_rng
from .spectral import SpectrumMask, accumulate_amplitudes, build_mask, fourier_filter

log = logging.getLogger("koopa.model")

NORM_STD_FLOOR = 1e-5

# rng stream indices per purpose, so reseeding one part never shifts another
_STREAM_ENC_INV, _STREAM_DEC_INV, _STREAM_ENC_VAR, _STREAM_DEC_VAR = 0, 1, 2, 3
_STREAM_KINV, _STREAM_SHUFFLE = 4, 5

MAX_CONSECUTIVE_EXPLOSIONS = 5


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training hyperparameters.

    The lookback defaults to twice the horizon when built via
    :meth:`for_horizon`; the segment length defaults to half the lookback and
    must leave at least two segments so the local operator fit has a snapshot
    pair.
    """

    lookback: int
    horizon: int
    variates: int
    blocks: int = 3
    segment_len: int | None = None
    embed_dim: int = 64
    alpha: float = 0.2
    hidden_dims: tuple[int, ...] = (128, 128)
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    normalize: bool = True
    activation: str = "relu"
    detach_kvar: bool = False
    kinv_perturb: float = 0.0

    def __post_init__(self):
        if self.segment_len is None:
            object.__setattr__(self, "segment_len", max(1, self.lookback // 2))
        if self.lookback < 2 or self.horizon < 1 or self.variates < 1:
            raise ValueError(
                f"invalid sizes: lookback={self.lookback}, horizon={self.horizon}, variates={self.variates}"
            )
        if not 1 <= self.segment_len < self.lookback:
            raise ValueError(
                f"segment_len={self.segment_len} must lie in [1, lookback) so the "
                f"variant branch gets at least two segments"
            )
        if self.blocks < 1 or self.embed_dim < 2:
            raise ValueError(f"blocks={self.blocks} must be >= 1 and embed_dim={self.embed_dim} >= 2")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha={self.alpha} must be in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must all be >= 1")

    @classmethod
    def for_horizon(cls, horizon: int, variates: int, **overrides) -> "ModelConfig":
        overrides.setdefault("lookback", 2 * horizon)
        return cls(horizon=horizon, variates=variates, **overrides)

    @property
    def n_segments(self) -> int:
        return -(-self.lookback // self.segment_len)

    @property
    def padded_lookback(self) -> int:
        return self.n_segments * self.segment_len

    @property
    def horizon_segments(self) -> int:
        return -(-self.horizon // self.segment_len)


@dataclass
class KoopaModel:
    """Shared encoder/decoder pairs, one invariant operator per block, one mask."""

    config: ModelConfig
    mask: SpectrumMask
    phi_inv_enc: Mlp
    phi_inv_dec: Mlp
    phi_var_enc: Mlp
    phi_var_dec: Mlp
    k_inv: list[np.ndarray]
    scaler: tuple[np.ndarray, np.ndarray] | None = None


@dataclass
class ForecastResult:
    prediction: np.ndarray
    per_block_contributions: list[tuple[np.ndarray, np.ndarray]]
    residual_trace: list[np.ndarray]


def init_k_inv(dim: int, seed: int = 0, perturb_scale: float = 0.0, stream: int = _STREAM_KINV) -> Matrix:
    """Identity operator, optionally with a small Gaussian perturbation.

    The perturbation is scaled by 1/sqrt(dim) so its spectral radius stays
    around 2*perturb_scale regardless of the operator size.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    k = np.eye(dim)
    if perturb_scale:
        rng = seeded_rng(seed, stream=stream)
        k = k + perturb_scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    return k


def fit_mask(config: ModelConfig, training_windows: Iterable[np.ndarray]) -> SpectrumMask:
    """One shared mask from amplitude statistics of all training lookbacks."""
    stats = accumulate_amplitudes(training_windows)
    if stats.window_length != config.lookback:
        raise ShapeError(
            f"stats were accumulated at T={stats.window_length}, config lookback is {config.lookback}"
        )
    return build_mask(stats, config.alpha)


def new_model(config: ModelConfig, mask: SpectrumMask, scaler=None) -> KoopaModel:
    if mask.window_length != config.lookback:
        raise ShapeError(f"mask T={mask.window_length} does not match lookback {config.lookback}")
    t, h, c, d, s = config.lookback, config.horizon, config.variates, config.embed_dim, config.segment_len
    hidden = list(config.hidden_dims)
    act = config.activation
    return KoopaModel(
        config=config,
        mask=mask,
        phi_inv_enc=Mlp.init([t * c] + hidden + [d], act, seeded_rng(config.seed, _STREAM_ENC_INV)),
        phi_inv_dec=Mlp.init([d] + hidden + [h * c], act, seeded_rng(config.seed, _STREAM_DEC_INV)),
        phi_var_enc=Mlp.init([s * c] + hidden + [d], act, seeded_rng(config.seed, _STREAM_ENC_VAR)),
        phi_var_dec=Mlp.init([d] + hidden + [s * c], act, seeded_rng(config.seed, _STREAM_DEC_VAR)),
        k_inv=[
            init_k_inv(d, config.seed + b, config.kinv_perturb) for b in range(config.blocks)
        ],
        scaler=scaler,
    )


def model_parameters(model: KoopaModel) -> list[np.ndarray]:
    """Live parameter arrays in a fixed canonical order."""
    params: list[np.ndarray] = []
    for net in (model.phi_inv_enc, model.phi_inv_dec, model.phi_var_enc, model.phi_var_dec):
        params.extend(net.weights)
        params.extend(net.biases)
    params.extend(model.k_inv)
    return params


def parameter_names(model: KoopaModel) -> list[str]:
    names: list[str] = []
    for label, net in (
        ("phi_inv_enc", model.phi_inv_enc),
        ("phi_inv_dec", model.phi_inv_dec),
        ("phi_var_enc", model.phi_var_enc),
        ("phi_var_dec", model.phi_var_dec),
    ):
        names.extend(f"{label}.w{i}" for i in range(net.n_layers))
        names.extend(f"{label}.b{i}" for i in range(net.n_layers))
    names.extend(f"k_inv.{b}" for b in range(len(model.k_inv)))
    return names


# ---------------------------------------------------------------------------
# window-level primitives
# ---------------------------------------------------------------------------


def normalize_window(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-variate lookback standardization; std is floored by +1e-5."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-2, keepdims=True)
    std = x.std(axis=-2, keepdims=True) + NORM_STD_FLOOR
    return (x - mean) / std, mean, std


def denormalize(y: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return y * std + mean


def segment(x: np.ndarray, seg_len: int) -> np.ndarray:
    """Split (..., T, C) into (..., ceil(T/S), S, C) contiguous segments.

    When S does not divide T the window is left-padded by repeating its
    earliest row, keeping the most recent dynamics untouched.
    """
    if seg_len <= 0:
        raise ValueError(f"segment length must be positive, got {seg_len}")
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[-2]
    if seg_len > t:
        raise ValueError(f"segment length {seg_len} exceeds window length {t}")
    n_seg = -(-t // seg_len)
    pad = n_seg * seg_len - t
    if pad:
        first = np.repeat(x[..., :1, :], pad, axis=-2)
        x = np.concatenate([first, x], axis=-2)
    return x.reshape(x.shape[:-2] + (n_seg, seg_len, x.shape[-1]))


def edmd_fit(z: Matrix, rcond: float = DEFAULT_RCOND) -> Matrix:
    """Least-squares one-step operator from a (D, m) snapshot collection."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"snapshot collection must be 2-D (D, m), got {z.shape}")
    if z.shape[1] < 2:
        raise ValueError(f"need at least 2 snapshots, got {z.shape[1]}")
    return z[:, 1:] @ _pinv_single(z[:, :-1], rcond=rcond)


def explosion_check(k: Matrix) -> Matrix:
    """Replace a non-finite operator with the identity (and log the event)."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ShapeError(f"operator must be square, got {k.shape}")
    if np.all(np.isfinite(k)):
        return k
    log.warning("explosion check: replacing non-finite %dx%d operator with identity", *k.shape)
    return np.eye(k.shape[0])


def _explosion_check_batch(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bad = ~np.isfinite(k).all(axis=(1, 2))
    if bad.any():
        log.warning("explosion check: replacing %d non-finite operator(s) with identity", int(bad.sum()))
        k = k.copy()
        k[bad] = np.eye(k.shape[1])
    return k, bad


def operator_stability(k: Matrix) -> float:
    """Mean distance of the operator's eigenvalue moduli from 1."""
    from .linalg import eigenvalues

    return float(np.mean(np.abs(np.abs(eigenvalues(k)) - 1.0)))


# ---------------------------------------------------------------------------
# batched forward / backward
# ---------------------------------------------------------------------------


@dataclass
class _BlockCache:
    x_var: np.ndarray
    enc_inv_tape: object
    z_back_inv: np.ndarray
    z_fore_inv: np.ndarray
    dec_inv_tape: object
    enc_var_tape: object
    z: np.ndarray  # (n, D, m)
    p: np.ndarray | None  # (n, m-1, D) pseudoinverse of the back collection
    k_var: np.ndarray  # (n, D, D), after explosion replacement
    exploded: np.ndarray  # (n,) bool
    pred_chain: list[np.ndarray]  # p_0 .. p_q, each (n, D)
    dec_var_tape: object
    pad: int
    override: bool


@dataclass
class _ForwardCache:
    x_norm: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    blocks: list[_BlockCache]
    y_norm: np.ndarray
    y_inv: list[np.ndarray]
    y_var: list[np.ndarray]
    residuals: list[np.ndarray]


def _forward_batch(
    model: KoopaModel,
    x: np.ndarray,
    block_overrides: Sequence[tuple[np.ndarray, np.ndarray] | None] | None = None,
) -> _ForwardCache:
    """Run the full pipeline on (n, T, C) windows, caching for backward.

    ``block_overrides`` optionally replaces (operator, anchor embedding) used
    for the variant branch's forward iteration of given blocks; the fitted
    reconstruction and the residual chain always use the window's own fit.
    This is how horizon scale-up swaps in adapted operators.
    """
    cfg = model.config
    n, t, c = x.shape
    if t != cfg.lookback or c != cfg.variates:
        raise ShapeError(f"input shape {x.shape[1:]} does not match (T={cfg.lookback}, C={cfg.variates})")
    if cfg.normalize:
        x_norm, mean, std = normalize_window(x)
    else:
        x_norm, mean, std = np.asarray(x, dtype=np.float64), np.zeros((n, 1, c)), np.ones((n, 1, c))
    s, d, m, q = cfg.segment_len, cfg.embed_dim, cfg.n_segments, cfg.horizon_segments
    pad = cfg.padded_lookback - t
    y_norm = np.zeros((n, cfg.horizon, c))
    blocks: list[_BlockCache] = []
    y_inv_all, y_var_all = [], []
    residuals = [x_norm]
    current = x_norm
    for b in range(cfg.blocks):
        x_inv, x_var = fourier_filter(current, model.mask)
        # invariant branch: lookback embedding -> global operator -> forecast
        z_back, enc_inv_tape = mlp_forward(model.phi_inv_enc, x_inv.reshape(n, t * c))
        z_fore = z_back @ model.k_inv[b].T
        y_inv_flat, dec_inv_tape = mlp_forward(model.phi_inv_dec, z_fore)
        y_inv = y_inv_flat.reshape(n, cfg.horizon, c)
        # variant branch: segment embeddings -> local least-squares operator
        segs = segment(x_var, s)  # (n, m, S, C)
        z_flat, enc_var_tape = mlp_forward(model.phi_var_enc, segs.reshape(n * m, s * c))
        z = z_flat.reshape(n, m, d).transpose(0, 2, 1)  # (n, D, m)
        z_b, z_f = z[:, :, : m - 1], z[:, :, 1:]
        p = np.linalg.pinv(z_b, rcond=DEFAULT_RCOND)
        k_var = z_f @ p
        k_var, exploded = _explosion_check_batch(k_var)
        override = block_overrides is not None and block_overrides[b] is not None
        if override:
            k_fore, anchor = block_overrides[b]
            k_fore = explosion_check(np.asarray(k_fore, dtype=np.float64))
            k_fore = np.broadcast_to(k_fore, (n, d, d))
            p0 = np.broadcast_to(np.asarray(anchor, dtype=np.float64), (n, d))
        else:
            k_fore = k_var
            p0 = z[:, :, m - 1]
        fits = np.concatenate([z[:, :, :1], k_var @ z_b], axis=2)  # (n, D, m)
        chain = [p0]
        for _ in range(q):
            chain.append(np.einsum("nij,nj->ni", k_fore, chain[-1]))
        preds = np.stack(chain[1:], axis=1)  # (n, q, D)
        all_emb = np.concatenate([fits.transpose(0, 2, 1), preds], axis=1)  # (n, m+q, D)
        dec_flat, dec_var_tape = mlp_forward(model.phi_var_dec, all_emb.reshape(n * (m + q), d))
        dec_segs = dec_flat.reshape(n, m + q, s, c)
        x_fit = dec_segs[:, :m].reshape(n, m * s, c)[:, pad:]
        y_var = dec_segs[:, m:].reshape(n, q * s, c)[:, : cfg.horizon]
        y_norm = y_norm + y_inv + y_var
        nxt = x_var - x_fit
        blocks.append(
            _BlockCache(
                x_var=x_var, enc_inv_tape=enc_inv_tape, z_back_inv=z_back, z_fore_inv=z_fore,
                dec_inv_tape=dec_inv_tape, enc_var_tape=enc_var_tape, z=z, p=p, k_var=k_var,
                exploded=exploded, pred_chain=chain, dec_var_tape=dec_var_tape, pad=pad,
                override=override,
            )
        )
        y_inv_all.append(y_inv)
        y_var_all.append(y_var)
        residuals.append(nxt)
        current = nxt
    return _ForwardCache(
        x_norm=x_norm, mean=mean, std=std, blocks=blocks, y_norm=y_norm,
        y_inv=y_inv_all, y_var=y_var_all, residuals=residuals,
    )


def _pinv_vjp(a: np.ndarray, p: np.ndarray, pbar: np.ndarray) -> np.ndarray:
    """Adjoint of the Moore-Penrose inverse, batched over the leading axis.

    ``a`` is (n, k, l), ``p`` its pseudoinverse (n, l, k), ``pbar`` the
    incoming gradient on p. Valid where the rank is locally constant.
    """
    k, l = a.shape[1], a.shape[2]
    pt = p.transpose(0, 2, 1)
    pbar_t = pbar.transpose(0, 2, 1)
    eye_k = np.eye(k)
    eye_l = np.eye(l)
    t1 = -pt @ pbar @ pt
    t2 = (eye_k - a @ p) @ pbar_t @ p @ pt
    t3 = pt @ p @ pbar_t @ (eye_l - p @ a)
    return t1 + t2 + t3


def _mask_project(g: np.ndarray, mask: SpectrumMask) -> np.ndarray:
    """Apply the (symmetric) pass-band projector; it is its own adjoint."""
    spec = np.fft.rfft(g, axis=-2)
    spec[..., ~mask.bins, :] = 0.0
    return np.fft.irfft(spec, n=g.shape[-2], axis=-2)


@dataclass
class ParamGrads:
    by_name: dict[str, np.ndarray] = field(default_factory=dict)

    def as_list(self, names: list[str]) -> list[np.ndarray]:
        return [self.by_name[n] for n in names]


def _backward_batch(model: KoopaModel, cache: _ForwardCache, dy: np.ndarray) -> ParamGrads:
    """Exact reverse pass of :func:`_forward_batch` for the model parameters."""
    cfg = model.config
    n, t, c = cache.x_norm.shape
    s, d, m, q = cfg.segment_len, cfg.embed_dim, cfg.n_segments, cfg.horizon_segments
    names = parameter_names(model)
    grads = ParamGrads({name: np.zeros_like(p) for name, p in zip(names, model_parameters(model))})

    def add_mlp_grads(label: str, dws, dbs):
        for i, (dw, db) in enumerate(zip(dws, dbs)):
            grads.by_name[f"{label}.w{i}"] += dw
            grads.by_name[f"{label}.b{i}"] += db

    g_next = np.zeros((n, t, c))
    for b in reversed(range(cfg.blocks)):
        bc = cache.blocks[b]
        # invariant branch
        d_yinv = dy.reshape(n, cfg.horizon * c)
        dz_fore, dws, dbs = mlp_backward(model.phi_inv_dec, bc.dec_inv_tape, d_yinv)
        add_mlp_grads("phi_inv_dec", dws, dbs)
        grads.by_name[f"k_inv.{b}"] += dz_fore.T @ bc.z_back_inv
        dz_back = dz_fore @ model.k_inv[b]
        dflat_inv, dws, dbs = mlp_backward(model.phi_inv_enc, bc.enc_inv_tape, dz_back)
        add_mlp_grads("phi_inv_enc", dws, dbs)
        g_xinv = dflat_inv.reshape(n, t, c)
        # variant branch: decode adjoint
        g_xvar = g_next.copy()
        g_fit = -g_next
        g_fit_padded = np.zeros((n, m * s, c))
        g_fit_padded[:, bc.pad :] = g_fit
        g_yvar_full = np.zeros((n, q * s, c))
        g_yvar_full[:, : cfg.horizon] = dy
        g_dec_out = np.concatenate(
            [g_fit_padded.reshape(n, m, s * c), g_yvar_full.reshape(n, q, s * c)], axis=1
        )
        g_emb_flat, dws, dbs = mlp_backward(
            model.phi_var_dec, bc.dec_var_tape, g_dec_out.reshape(n * (m + q), s * c)
        )
        add_mlp_grads("phi_var_dec", dws, dbs)
        g_emb = g_emb_flat.reshape(n, m + q, d)
        g_fits = g_emb[:, :m].transpose(0, 2, 1)  # (n, D, m)
        g_preds = g_emb[:, m:]  # (n, q, D)
        z, k_var, p = bc.z, bc.k_var, bc.p
        z_b, z_f = z[:, :, : m - 1], z[:, :, 1:]
        g_z = np.zeros_like(z)
        # forward-iteration chain p_t = K p_{t-1}; the operator/anchor may be overridden
        k_fore = k_var if not bc.override else None
        dk_fore = np.zeros((n, d, d))
        carry = np.zeros((n, d))
        for step in reversed(range(q)):
            g_pt = g_preds[:, step] + carry
            dk_fore += np.einsum("ni,nj->nij", g_pt, bc.pred_chain[step])
            kmat = k_fore if k_fore is not None else None
            if kmat is None:
                carry = np.zeros((n, d))  # overridden operator/anchor are constants
            else:
                carry = np.einsum("nji,nj->ni", kmat, g_pt)
        dk_var = np.zeros((n, d, d))
        if not bc.override:
            g_z[:, :, m - 1] += carry
            dk_var += dk_fore
        # fitted embeddings [z_1, K z_1 .. K z_{m-1}]
        g_z[:, :, 0] += g_fits[:, :, 0]
        gf = g_fits[:, :, 1:]
        dk_var += gf @ z_b.transpose(0, 2, 1)
        g_z[:, :, : m - 1] += k_var.transpose(0, 2, 1) @ gf
        # least-squares operator adjoint (skipped where replaced or detached)
        if not cfg.detach_kvar:
            live = ~bc.exploded
            if live.any():
                dk_live = np.where(live[:, None, None], dk_var, 0.0)
                g_zf = dk_live @ p.transpose(0, 2, 1)
                g_p = z_f.transpose(0, 2, 1) @ dk_live
                g_zb = _pinv_vjp(z_b, p, g_p)
                g_z[:, :, 1:] += g_zf
                g_z[:, :, : m - 1] += g_zb
        # encoder adjoint and un-segmentation
        g_seg_flat, dws, dbs = mlp_backward(
            model.phi_var_enc, bc.enc_var_tape, g_z.transpose(0, 2, 1).reshape(n * m, d)
        )
        add_mlp_grads("phi_var_enc", dws, dbs)
        g_padded = g_seg_flat.reshape(n, m * s, c)
        g_from_segs = g_padded[:, bc.pad :].copy()
        if bc.pad:
            g_from_segs[:, 0] += g_padded[:, : bc.pad].sum(axis=1)
        g_xvar += g_from_segs
        # filter adjoint: x_inv = P x, x_var = (I - P) x with P symmetric
        g_next = _mask_project(g_xinv - g_xvar, model.mask) + g_xvar
    return grads


# ---------------------------------------------------------------------------
# public forward surfaces
# ---------------------------------------------------------------------------


def koopa_forward(model: KoopaModel, x: np.ndarray) -> ForecastResult:
    """Forecast one (T, C) window; raises on non-finite output."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a (T, C) window, got shape {x.shape}")
    cache = _forward_batch(model, x[None])
    pred = denormalize(cache.y_norm, cache.mean, cache.std)[0]
    if not np.all(np.isfinite(pred)):
        raise NumericError("forecast contains non-finite values after explosion checking")
    return ForecastResult(
        prediction=pred,
        per_block_contributions=[(yv[0], yi[0]) for yv, yi in zip(cache.y_var, cache.y_inv)],
        residual_trace=[r[0] for r in cache.residuals],
    )


def forecast_batch(model: KoopaModel, x: np.ndarray) -> np.ndarray:
    """Denormalized (n, H, C) forecasts for (n, T, C) windows."""
    cache = _forward_batch(model, np.asarray(x, dtype=np.float64))
    return denormalize(cache.y_norm, cache.mean, cache.std)


def time_inv_forward(model: KoopaModel, block: int, x_inv: np.ndarray) -> np.ndarray:
    """Invariant-branch forecast of one block for a (T, C) component window."""
    cfg = model.config
    x_inv = np.asarray(x_inv, dtype=np.float64)
    if x_inv.shape != (cfg.lookback, cfg.variates):
        raise ShapeError(f"expected ({cfg.lookback}, {cfg.variates}), got {x_inv.shape}")
    z_back, _ = mlp_forward(model.phi_inv_enc, x_inv.reshape(-1))
    y_flat, _ = mlp_forward(model.phi_inv_dec, model.k_inv[block] @ z_back)
    return y_flat.reshape(cfg.horizon, cfg.variates)


def time_var_forward(model: KoopaModel, x_var: np.ndarray) -> tuple[np.ndarray, np.ndarray, Matrix]:
    """Variant-branch fit and forecast for one (T, C) component window.

    Returns (fitted reconstruction T x C, forecast H x C, local operator).
    """
    cfg = model.config
    x_var = np.asarray(x_var, dtype=np.float64)
    if x_var.shape != (cfg.lookback, cfg.variates):
        raise ShapeError(f"expected ({cfg.lookback}, {cfg.variates}), got {x_var.shape}")
    s, m, q = cfg.segment_len, cfg.n_segments, cfg.horizon_segments
    segs = segment(x_var, s)
    z_flat, _ = mlp_forward(model.phi_var_enc, segs.reshape(m, s * cfg.variates))
    z = z_flat.T  # (D, m)
    k_var = explosion_check(edmd_fit(z))
    fits = np.concatenate([z[:, :1], k_var @ z[:, :-1]], axis=1)
    preds = []
    cur = z[:, -1]
    for _ in range(q):
        cur = k_var @ cur
        preds.append(cur)
    emb = np.concatenate([fits.T, np.stack(preds)], axis=0)
    dec, _ = mlp_forward(model.phi_var_dec, emb)
    dec_segs = dec.reshape(m + q, s, cfg.variates)
    pad = cfg.padded_lookback - cfg.lookback
    x_fit = dec_segs[:m].reshape(m * s, cfg.variates)[pad:]
    y_var = dec_segs[m:].reshape(q * s, cfg.variates)[: cfg.horizon]
    return x_fit, y_var, k_var


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainLogRow:
    epoch: int
    train_mse: float
    val_mse: float
    seconds: float


@dataclass
class TrainResult:
    log: list[TrainLogRow]
    events: list[str]
    best_val: float
    epochs_run: int
    stopped_early: bool


def _gather_windows(values: np.ndarray, origins: np.ndarray, t: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    idx = origins[:, None] + np.arange(t + h)
    both = values[idx]
    return both[:, :t], both[:, t:]


def validation_mse(model: KoopaModel, values: np.ndarray, origins: np.ndarray, chunk: int = 256) -> float:
    """Mean squared error on the normalized scale over the given windows."""
    cfg = model.config
    total, count = 0.0, 0
    for lo in range(0, origins.size, chunk):
        x, y = _gather_windows(values, origins[lo : lo + chunk], cfg.lookback, cfg.horizon)
        cache = _forward_batch(model, x)
        y_norm = (y - cache.mean) / cache.std
        total += float(((cache.y_norm - y_norm) ** 2).sum())
        count += y.size
    return total / count


def train(model: KoopaModel, dataset: Dataset, log_events: list[str] | None = None) -> TrainResult:
    """Adam on the forecast MSE with early stopping on the validation split.

    Non-finite batch losses trigger the explosion policy: non-finite global
    operators are replaced by the identity, the batch is skipped, and training
    aborts after five consecutive events.
    """
    cfg = model.config
    t, h = cfg.lookback, cfg.horizon
    train_vals = dataset.split_values("train")
    val_vals = dataset.split_values("val")
    if train_vals.shape[1] != cfg.variates:
        raise ShapeError(f"dataset has {train_vals.shape[1]} variates, config expects {cfg.variates}")
    n_train = train_vals.shape[0] - t - h + 1
    n_val = val_vals.shape[0] - t - h + 1
    if n_train < 1 or n_val < 1:
        raise DataError(
            f"splits too small: {train_vals.shape[0]} train / {val_vals.shape[0]} val rows "
            f"for at least one window of T+H={t + h}"
        )
    origins = np.arange(n_train)
    val_origins = np.arange(n_val)
    rng = seeded_rng(cfg.seed, _STREAM_SHUFFLE)
    params = model_parameters(model)
    names = parameter_names(model)
    adam = AdamState.init(params, lr=cfg.lr)
    events: list[str] = log_events if log_events is not None else []
    rows: list[TrainLogRow] = []
    best_val = np.inf
    best_snapshot = None
    since_best = 0
    consecutive_bad = 0
    stopped_early = False
    epochs_run = 0
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(origins)
        loss_sum, loss_count = 0.0, 0
        for batch_idx, lo in enumerate(range(0, order.size, cfg.batch_size)):
            x, y = _gather_windows(train_vals, order[lo : lo + cfg.batch_size], t, h)
            cache = _forward_batch(model, x)
            y_norm = (y - cache.mean) / cache.std
            diff = cache.y_norm - y_norm
            loss = float((diff**2).mean())
            if not np.isfinite(loss):
                consecutive_bad += 1
                events.append(f"explosion epoch={epoch} batch={batch_idx} (skipped)")
                log.warning("non-finite loss at epoch %d batch %d; applying explosion policy", epoch, batch_idx)
                for b in range(cfg.blocks):
                    model.k_inv[b][...] = explosion_check(model.k_inv[b])
                if consecutive_bad >= MAX_CONSECUTIVE_EXPLOSIONS:
                    raise TrainingError(
                        f"training diverged: {consecutive_bad} consecutive non-finite losses "
                        f"(epoch {epoch}, batch {batch_idx})", epoch=epoch, batch=batch_idx,
                    )
                continue
            consecutive_bad = 0
            loss_sum += loss * diff.size
            loss_count += diff.size
            grads = _backward_batch(model, cache, 2.0 * diff / diff.size)
            adam_step(params, grads.as_list(names), adam)
        val_mse = validation_mse(model, val_vals, val_origins)
        rows.append(TrainLogRow(epoch, loss_sum / max(loss_count, 1), val_mse, time.perf_counter() - started))
        epochs_run = epoch
        if val_mse < best_val:
            best_val = val_mse
            best_snapshot = [p.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                stopped_early = True
                events.append(f"early stop epoch={epoch} (no val improvement for {cfg.patience} epochs)")
                break
    if best_snapshot is not None:
        for p, snap in zip(params, best_snapshot):
            p[...] = snap
    return TrainResult(rows, events, best_val, epochs_run, stopped_early)
