"""Binary model checkpoints.

Layout (all integers little-endian):

    magic   6 bytes  b"KOOPA\\0"
    version u16      currently 1
    then length-prefixed sections, each:
        u16 name length, ASCII section name,
        u64 payload length, payload bytes.

Sections (written in this order, order not required on read):

    CONFIG  canonical sorted ``key=value`` UTF-8 text, one per line
    MASK    u32 window length, f64 alpha, u32 count, count x u32 indices
    PARAMS  u32 tensor count, then per tensor: u16 name length, UTF-8 name,
            u8 ndim, ndim x u32 dims, row-major float64 data

PARAMS also carries ``scaler.mean`` / ``scaler.std`` tensors when the model
holds a dataset-level scaler. Float64 payloads are written raw, so a load
reproduces forecasts bit for bit.
"""
from __future__ import annotations

import struct
from dataclasses import fields

import numpy as np

from .errors import CheckpointError
from .model import KoopaModel, ModelConfig, model_parameters, parameter_names
from .neural import Mlp
from .spectral import SpectrumMask

MAGIC = b"KOOPA\0"
VERSION = 1

_BOOL_FIELDS = {"normalize", "detach_kvar"}
_FLOAT_FIELDS = {"alpha", "lr", "kinv_perturb"}
_STR_FIELDS = {"activation"}
_TUPLE_FIELDS = {"hidden_dims"}


def _config_to_text(config: ModelConfig) -> str:
    lines = []
    for f in sorted(fields(ModelConfig), key=lambda f: f.name):
        value = getattr(config, f.name)
        if f.name in _TUPLE_FIELDS:
            text = ",".join(str(int(v)) for v in value)
        elif f.name in _BOOL_FIELDS:
            text = "true" if value else "false"
        elif f.name in _FLOAT_FIELDS:
            text = repr(float(value))
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    kwargs = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"CONFIG line {line_no} is not key=value: {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in known:
            raise CheckpointError(f"CONFIG has unknown key {key!r}")
        raw = raw.strip()
        if key in _TUPLE_FIELDS:
            kwargs[key] = tuple(int(v) for v in raw.split(",") if v)
        elif key in _BOOL_FIELDS:
            kwargs[key] = raw == "true"
        elif key in _FLOAT_FIELDS:
            kwargs[key] = float(raw)
        elif key in _STR_FIELDS:
            kwargs[key] = raw
        else:
            kwargs[key] = int(raw)
    missing = known - set(kwargs)
    if missing:
        raise CheckpointError(f"CONFIG is missing keys: {sorted(missing)}")
    return ModelConfig(**kwargs)


def _section(name: str, payload: bytes) -> bytes:
    raw = name.encode("ascii")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload


def _pack_mask(mask: SpectrumMask) -> bytes:
    out = struct.pack("<IdI", mask.window_length, mask.alpha, len(mask.kept))
    return out + struct.pack(f"<{len(mask.kept)}I", *mask.kept)


def _pack_params(model: KoopaModel) -> bytes:
    tensors = list(zip(parameter_names(model), model_parameters(model)))
    if model.scaler is not None:
        tensors.append(("scaler.mean", np.asarray(model.scaler[0], dtype=np.float64)))
        tensors.append(("scaler.std", np.asarray(model.scaler[1], dtype=np.float64)))
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype=np.float64)
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.astype("<f8").tobytes())
    return b"".join(out)


def save_checkpoint(model: KoopaModel, path: str) -> None:
    blob = MAGIC + struct.pack("<H", VERSION)
    blob += _section("CONFIG", _config_to_text(model.config).encode("utf-8"))
    blob += _section("MASK", _pack_mask(model.mask))
    blob += _section("PARAMS", _pack_params(model))
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def _read_sections(reader: _Reader) -> dict[str, bytes]:
    sections: dict[str, bytes] = {}
    while not reader.done:
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("ascii", errors="replace")
        (payload_len,) = reader.unpack("<Q")
        sections[name] = reader.take(payload_len)
    return sections


def _unpack_mask(payload: bytes, path: str) -> SpectrumMask:
    r = _Reader(payload, path)
    window_length, alpha, count = r.unpack("<IdI")
    kept = r.unpack(f"<{count}I")
    return SpectrumMask(window_length=window_length, kept=tuple(int(k) for k in kept), alpha=alpha)


def _unpack_params(payload: bytes, path: str) -> dict[str, np.ndarray]:
    r = _Reader(payload, path)
    (count,) = r.unpack("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(r.take(size * 8), dtype="<f8").reshape(dims).astype(np.float64)
        out[name] = arr
    return out


def load_checkpoint(path: str) -> KoopaModel:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a koopa checkpoint")
    reader = _Reader(data, path)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    sections = _read_sections(reader)
    for required in ("CONFIG", "MASK", "PARAMS"):
        if required not in sections:
            raise CheckpointError(f"{path}: missing required section {required}")
    config = _config_from_text(sections["CONFIG"].decode("utf-8"))
    mask = _unpack_mask(sections["MASK"], path)
    tensors = _unpack_params(sections["PARAMS"], path)
    scaler = None
    if "scaler.mean" in tensors or "scaler.std" in tensors:
        if not ("scaler.mean" in tensors and "scaler.std" in tensors):
            raise CheckpointError(f"{path}: scaler tensors must come in a mean/std pair")
        scaler = (tensors.pop("scaler.mean"), tensors.pop("scaler.std"))

    def build_mlp(label: str, dims: list[int]) -> Mlp:
        weights, biases = [], []
        for i in range(len(dims) - 1):
            for kind, store, shape in (("w", weights, (dims[i + 1], dims[i])), ("b", biases, (dims[i + 1],))):
                key = f"{label}.{kind}{i}"
                if key not in tensors:
                    raise CheckpointError(f"{path}: PARAMS is missing tensor {key}")
                arr = tensors.pop(key)
                if arr.shape != shape:
                    raise CheckpointError(f"{path}: tensor {key} has shape {arr.shape}, expected {shape}")
                store.append(arr)
        return Mlp(tuple(dims), weights, biases, config.activation)

    t, h, c, d, s = config.lookback, config.horizon, config.variates, config.embed_dim, config.segment_len
    hidden = list(config.hidden_dims)
    model = KoopaModel(
        config=config,
        mask=mask,
        phi_inv_enc=build_mlp("phi_inv_enc", [t * c] + hidden + [d]),
        phi_inv_dec=build_mlp("phi_inv_dec", [d] + hidden + [h * c]),
        phi_var_enc=build_mlp("phi_var_enc", [s * c] + hidden + [d]),
        phi_var_dec=build_mlp("phi_var_dec", [d] + hidden + [s * c]),
        k_inv=[],
        scaler=scaler,
    )
    for b in range(config.blocks):
        key = f"k_inv.{b}"
        if key not in tensors:
            raise CheckpointError(f"{path}: PARAMS is missing tensor {key}")
        arr = tensors.pop(key)
        if arr.shape != (d, d):
            raise CheckpointError(f"{path}: tensor {key} has shape {arr.shape}, expected {(d, d)}")
        model.k_inv.append(arr)
    if tensors:
        raise CheckpointError(f"{path}: PARAMS has unexpected tensors {sorted(tensors)}")
    if mask.window_length != t:
        raise CheckpointError(f"{path}: mask window length {mask.window_length} != lookback {t}")
    return model
