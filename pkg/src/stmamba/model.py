"""Model assembly: config, parameter registry, forward pass, checkpoints.

The forecaster embeds a history window into per-(step, sensor) channels,
flattens the step and sensor axes into one mixed sequence, runs one or more
residual state-space blocks over that sequence, unflattens, and regresses
all future steps per sensor in a single linear readout.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import rng
from .embedding import EmbeddingParams, embed_window, init_embedding_params, xavier_uniform
from .errors import ConfigError, DataError, ShapeError
from .ssm import SsmParams, init_ssm_params, ssm_layer_forward
from .tensor import (
    Tensor,
    add,
    as_tensor,
    dropout,
    layer_norm,
    matmul,
    relu,
    reshape,
    transpose,
)

_DTYPES = {"float32": np.float32, "float64": np.float64}

CHECKPOINT_FORMAT = "stmamba-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Everything needed to rebuild the network shape."""

    n_sensors: int
    history: int = 12
    horizon: int = 12
    n_features: int = 1
    d_feat: int = 24
    d_adaptive: int = 80
    n_state: int = 64
    expand: int = 2
    d_conv: int = 4
    n_layers: int = 1
    mlp_hidden: int = 0          # 0 means 4 * d_hidden
    dropout: float = 0.1
    selective_source: str = "input"
    steps_per_day: int = 288
    dtype: str = "float32"

    @property
    def d_hidden(self) -> int:
        return 3 * self.d_feat + self.d_adaptive

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_hidden

    @property
    def seq_len(self) -> int:
        """Length of the mixed step-sensor sequence."""
        return self.history * self.n_sensors

    @property
    def mlp_width(self) -> int:
        return self.mlp_hidden if self.mlp_hidden > 0 else 4 * self.d_hidden

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def validate(self) -> "ModelConfig":
        for name in ("n_sensors", "history", "horizon", "n_features", "d_feat",
                     "d_adaptive", "n_state", "expand", "d_conv", "n_layers",
                     "steps_per_day"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.mlp_hidden < 0:
            raise ConfigError(f"mlp_hidden must be >= 0, got {self.mlp_hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.selective_source not in ("input", "output_feedback"):
            raise ConfigError(
                f"selective_source must be 'input' or 'output_feedback',"
                f" got {self.selective_source!r}"
            )
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        return self


@dataclass
class BlockParams:
    """Post-scan refinement: norm + two-layer MLP with its own residual."""

    ln_gamma: Tensor
    ln_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        order = ("ln_gamma", "ln_beta", "w1", "b1", "w2", "b2")
        return {prefix + name: getattr(self, name) for name in order}


@dataclass
class LayerParams:
    norm_gamma: Tensor
    norm_beta: Tensor
    ssm: SsmParams
    block: BlockParams

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {prefix + "norm_gamma": self.norm_gamma,
               prefix + "norm_beta": self.norm_beta}
        out.update(self.ssm.named(prefix + "ssm."))
        out.update(self.block.named(prefix + "block."))
        return out


@dataclass
class ModelState:
    config: ModelConfig
    embedding: EmbeddingParams
    layers: list[LayerParams]
    decoder_w: Tensor
    decoder_b: Tensor

    def params(self) -> dict[str, Tensor]:
        """Stable name -> tensor map; iteration order is the manifest order."""
        out: dict[str, Tensor] = {}
        for name in ("feature_w", "feature_b", "dow_table", "tod_table", "adaptive"):
            out["embedding." + name] = getattr(self.embedding, name)
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layers.{i}."))
        out["decoder.w"] = self.decoder_w
        out["decoder.b"] = self.decoder_b
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params().values())


def _init_block_params(d_hidden: int, mlp_width: int, gen, dtype) -> BlockParams:
    return BlockParams(
        ln_gamma=Tensor(np.ones(d_hidden, dtype=dtype), requires_grad=True),
        ln_beta=Tensor(np.zeros(d_hidden, dtype=dtype), requires_grad=True),
        w1=xavier_uniform(gen, (d_hidden, mlp_width), d_hidden, mlp_width, dtype),
        b1=Tensor(np.zeros(mlp_width, dtype=dtype), requires_grad=True),
        w2=xavier_uniform(gen, (mlp_width, d_hidden), mlp_width, d_hidden, dtype),
        b2=Tensor(np.zeros(d_hidden, dtype=dtype), requires_grad=True),
    )


def init_model_state(config: ModelConfig, seed: int) -> ModelState:
    """Materialize all parameters from one seeded stream, in manifest order."""
    config.validate()
    dtype = config.np_dtype
    gen = rng.stream(seed, "model-init")
    embedding = init_embedding_params(
        config.n_features, config.d_feat, config.d_adaptive,
        config.history, config.n_sensors, config.steps_per_day, gen, dtype,
    )
    layers = []
    for _ in range(config.n_layers):
        norm_gamma = Tensor(np.ones(config.d_hidden, dtype=dtype), requires_grad=True)
        norm_beta = Tensor(np.zeros(config.d_hidden, dtype=dtype), requires_grad=True)
        ssm = init_ssm_params(
            config.d_hidden, config.n_state, config.expand, config.d_conv, gen, dtype,
        )
        block = _init_block_params(config.d_hidden, config.mlp_width, gen, dtype)
        layers.append(LayerParams(norm_gamma, norm_beta, ssm, block))
    in_dim = config.history * config.d_hidden
    out_dim = config.horizon * config.n_features
    decoder_w = xavier_uniform(gen, (in_dim, out_dim), in_dim, out_dim, dtype)
    decoder_b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
    return ModelState(config, embedding, layers, decoder_w, decoder_b)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter total for a configuration (no allocation)."""
    d_h = config.d_hidden
    d_in = config.d_inner
    s = config.n_state
    embed = (config.n_features * config.d_feat + config.d_feat
             + 7 * config.d_feat + config.steps_per_day * config.d_feat
             + config.history * config.n_sensors * config.d_adaptive)
    ssm = (d_in * s                     # transition log
           + d_in * d_in + d_in        # step-size projection
           + 2 * (d_in * s + s)        # input/output state maps
           + d_in * config.d_conv + d_in
           + d_h * d_in + d_in         # in projection
           + d_in * d_h + d_h)         # out projection
    block = 2 * d_h + d_h * config.mlp_width + config.mlp_width \
        + config.mlp_width * d_h + d_h
    layer = 2 * d_h + ssm + block       # pre-norm + ssm + refinement
    decoder = (config.history * d_h) * (config.horizon * config.n_features) \
        + config.horizon * config.n_features
    return embed + config.n_layers * layer + decoder


# ---------------------------------------------------------------------------
# reshapes between (step, sensor) grid and mixed sequence
# ---------------------------------------------------------------------------

def st_mix(x: Tensor) -> Tensor:
    """(..., H, N, c) -> (..., H*N, c); row h*N + n holds step h, sensor n."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"expected at least (steps, sensors, channels), got {x.shape}")
    lead = x.shape[:-3]
    h, n, c = x.shape[-3:]
    return reshape(x, lead + (h * n, c))


def st_separate(x: Tensor, n_sensors: int) -> Tensor:
    """(..., H*N, c) -> (..., H, N, c); inverse of :func:`st_mix`."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"expected at least (sequence, channels), got {x.shape}")
    lead = x.shape[:-2]
    t1, c = x.shape[-2:]
    if n_sensors < 1 or t1 % n_sensors != 0:
        raise ShapeError(
            f"sequence length {t1} is not divisible by sensor count {n_sensors}"
        )
    return reshape(x, lead + (t1 // n_sensors, n_sensors, c))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def residual_block(y: Tensor, x_in: Tensor, params: BlockParams,
                   drop_p: float, train: bool, drop_rng) -> Tensor:
    """r = drop(y) + x_in; out = drop(mlp(norm(r))) + r."""
    r = add(dropout(y, drop_p, drop_rng, train), x_in)
    m = layer_norm(r, params.ln_gamma, params.ln_beta)
    m = relu(add(matmul(m, params.w1), params.b1))
    m = add(matmul(m, params.w2), params.b2)
    return add(dropout(m, drop_p, drop_rng, train), r)


def decode(x: Tensor, state: ModelState) -> Tensor:
    """Per-sensor readout: (B, H, N, d_h) -> (B, Z, N, d).

    Each sensor's whole history of hidden channels is flattened and mapped to
    all horizon steps at once by a single linear layer shared across sensors.
    """
    cfg = state.config
    b, h, n, c = x.shape
    per_node = transpose(x, (0, 2, 1, 3))            # (B, N, H, d_h)
    flat = reshape(per_node, (b, n, h * c))          # (B, N, H*d_h)
    out = add(matmul(flat, state.decoder_w), state.decoder_b)
    out = reshape(out, (b, n, cfg.horizon, cfg.n_features))
    return transpose(out, (0, 2, 1, 3))              # (B, Z, N, d)


def forward(state: ModelState, window, dow, tod,
            train: bool = False, drop_rng=None) -> Tensor:
    """Run the full network on a batch of standardized history windows.

    window: (B, H, N, d) or (H, N, d); dow/tod: matching (B, H) or (H,)
    calendar indices.  Returns standardized predictions (B, Z, N, d) (or
    unbatched (Z, N, d) for unbatched input).
    """
    cfg = state.config
    window = as_tensor(window, dtype=cfg.np_dtype)
    unbatched = window.ndim == 3
    if unbatched:
        window = reshape(window, (1,) + window.shape)
        dow = np.asarray(dow)[None]
        tod = np.asarray(tod)[None]
    if window.ndim != 4:
        raise ShapeError(
            f"window must be (batch, steps, sensors, features), got {window.shape}"
        )
    b, h, n, d = window.shape
    if (h, n, d) != (cfg.history, cfg.n_sensors, cfg.n_features):
        raise ShapeError(
            f"window shape {(h, n, d)} does not match configured"
            f" {(cfg.history, cfg.n_sensors, cfg.n_features)}"
        )
    if train and cfg.dropout > 0.0 and drop_rng is None:
        raise ValueError("training forward with dropout needs a random stream")

    x = embed_window(window, dow, tod, state.embedding)   # (B, H, N, d_h)
    x = st_mix(x)                                         # (B, T1, d_h)
    for layer in state.layers:
        normed = layer_norm(x, layer.norm_gamma, layer.norm_beta)
        y = ssm_layer_forward(normed, layer.ssm, cfg.selective_source)
        x = residual_block(y, x, layer.block, cfg.dropout, train, drop_rng)
    x = st_separate(x, cfg.n_sensors)                     # (B, H, N, d_h)
    out = decode(x, state)
    if unbatched:
        out = reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_items(config: ModelConfig):
    for f in fields(ModelConfig):
        yield f.name, getattr(config, f.name)


def save_checkpoint(path, state: ModelState) -> None:
    """Plain-text header (format, version, config, manifest) + raw f32 payload."""
    lines = [f"format={CHECKPOINT_FORMAT}", f"version={CHECKPOINT_VERSION}"]
    for name, value in _config_items(state.config):
        lines.append(f"config.{name}={value}")
    params = state.params()
    for name, tensor in params.items():
        shape = "x".join(str(s) for s in tensor.shape) if tensor.ndim else "scalar"
        lines.append(f"param={name}:{shape}")
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for tensor in params.values():
            fh.write(np.ascontiguousarray(
                tensor.data.astype("<f4", copy=False)).tobytes())


def _parse_config_value(name: str, raw: str):
    for f in fields(ModelConfig):
        if f.name == name:
            if f.type in ("int", int):
                return int(raw)
            if f.type in ("float", float):
                return float(raw)
            return raw
    raise DataError(f"checkpoint names unknown config field {name!r}")


def load_checkpoint(path) -> ModelState:
    """Rebuild a model from a checkpoint file; exact inverse of save."""
    try:
        blob = open(path, "rb").read()
    except OSError as err:
        raise DataError(f"cannot read checkpoint {path}: {err}") from err
    marker = b"end_header\n"
    cut = blob.find(marker)
    if cut < 0:
        raise DataError(f"checkpoint {path} has no header terminator")
    header = blob[:cut].decode("ascii").splitlines()
    payload = blob[cut + len(marker):]

    config_kv: dict[str, object] = {}
    manifest: list[tuple[str, tuple[int, ...]]] = []
    for line in header:
        key, _, value = line.partition("=")
        if key == "format":
            if value != CHECKPOINT_FORMAT:
                raise DataError(f"not a model checkpoint: format {value!r}")
        elif key == "version":
            if int(value) != CHECKPOINT_VERSION:
                raise DataError(f"unsupported checkpoint version {value}")
        elif key.startswith("config."):
            name = key[len("config."):]
            config_kv[name] = _parse_config_value(name, value)
        elif key == "param":
            name, _, shape_s = value.partition(":")
            shape = () if shape_s == "scalar" else tuple(
                int(s) for s in shape_s.split("x"))
            manifest.append((name, shape))
        else:
            raise DataError(f"unrecognized checkpoint header line {line!r}")

    config = ModelConfig(**config_kv).validate()
    state = init_model_state(config, seed=0)
    params = state.params()
    if [m[0] for m in manifest] != list(params):
        raise DataError("checkpoint manifest does not match this model layout")
    expected = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in manifest) * 4
    if len(payload) != expected:
        raise DataError(
            f"checkpoint payload holds {len(payload)} bytes, manifest expects {expected}"
        )
    offset = 0
    for name, shape in manifest:
        tensor = params[name]
        if tensor.shape != shape:
            raise DataError(
                f"parameter {name} has shape {tensor.shape}, checkpoint says {shape}"
            )
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        tensor.data = values.reshape(shape).astype(config.np_dtype)
    return state


def clone_state(state: ModelState) -> ModelState:
    """Deep copy of all parameter buffers (config is shared; treat it as frozen)."""
    params = state.params()
    new = init_model_state(state.config, seed=0)
    for name, tensor in new.params().items():
        tensor.data = params[name].data.copy()
    return new
