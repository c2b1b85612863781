"""Input embedding: feature projection, calendar dictionaries, adaptive grid.

The hidden representation of a history window concatenates three pieces along
the channel axis: a learned affine map of the raw features (width d_f), the
day-of-week and time-of-day dictionary rows for each timestep (width 2*d_f,
shared across sensors), and a learnable position grid over (timestep, sensor)
cells (width d_a). The hidden width is therefore always 3*d_f + d_a.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, broadcast_to, concat, embedding_lookup, matmul, reshape

N_WEEKDAYS = 7


def xavier_uniform(gen: np.random.Generator, shape: tuple, fan_in: int,
                   fan_out: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(gen.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


@dataclass
class EmbeddingParams:
    feature_w: Tensor    # (d, d_f)
    feature_b: Tensor    # (d_f,)
    dow_table: Tensor    # (7, d_f)
    tod_table: Tensor    # (steps_per_day, d_f)
    adaptive: Tensor     # (H, N, d_a)

    @property
    def d_feat(self) -> int:
        return self.feature_w.shape[1]

    @property
    def d_adaptive(self) -> int:
        return self.adaptive.shape[2]

    @property
    def d_hidden(self) -> int:
        return 3 * self.d_feat + self.d_adaptive


def init_embedding_params(n_features: int, d_feat: int, d_adaptive: int,
                          history: int, n_sensors: int, steps_per_day: int,
                          gen: np.random.Generator, dtype=np.float32) -> EmbeddingParams:
    """Xavier-uniform everywhere; the adaptive grid uses fan_in = fan_out = d_a."""
    return EmbeddingParams(
        feature_w=xavier_uniform(gen, (n_features, d_feat), n_features, d_feat, dtype),
        feature_b=Tensor(np.zeros(d_feat, dtype=dtype), requires_grad=True),
        dow_table=xavier_uniform(gen, (N_WEEKDAYS, d_feat), d_feat, N_WEEKDAYS, dtype),
        tod_table=xavier_uniform(gen, (steps_per_day, d_feat), d_feat, steps_per_day, dtype),
        adaptive=xavier_uniform(gen, (history, n_sensors, d_adaptive),
                                d_adaptive, d_adaptive, dtype),
    )


def embed_features(window: Tensor, params: EmbeddingParams) -> Tensor:
    """Affine map applied at every (batch, timestep, sensor) position."""
    if window.shape[-1] != params.feature_w.shape[0]:
        raise ShapeError(
            f"embed_features: window features {window.shape[-1]} != "
            f"projection input {params.feature_w.shape[0]}")
    return matmul(window, params.feature_w) + params.feature_b


def lookup_periodicity(dow, tod, params: EmbeddingParams) -> Tensor:
    """Concatenated calendar rows, one per timestep: (..., H, 2*d_f)."""
    dow = np.asarray(dow)
    tod = np.asarray(tod)
    if dow.size and (dow.min() < 0 or dow.max() >= N_WEEKDAYS):
        raise IndexError(f"day-of-week index out of range [0, {N_WEEKDAYS})")
    n_d = params.tod_table.shape[0]
    if tod.size and (tod.min() < 0 or tod.max() >= n_d):
        raise IndexError(f"time-of-day index out of range [0, {n_d})")
    return concat([embedding_lookup(params.dow_table, dow),
                   embedding_lookup(params.tod_table, tod)], axis=-1)


def assemble_embedding(feat: Tensor, period: Tensor, adaptive: Tensor) -> Tensor:
    """Concatenate (feature || periodicity || adaptive) along the channel axis.

    ``feat`` is (B, H, N, d_f), ``period`` (B, H, 2*d_f) broadcast across
    sensors, ``adaptive`` (H, N, d_a) broadcast across the batch.
    """
    b, h, n, d_f = feat.shape
    if period.shape[-1] != 2 * d_f:
        raise ShapeError(
            f"assemble_embedding: periodicity width {period.shape[-1]} != 2*d_f = {2 * d_f}")
    period_full = broadcast_to(reshape(period, (b, h, 1, 2 * d_f)), (b, h, n, 2 * d_f))
    adaptive_full = broadcast_to(reshape(adaptive, (1,) + adaptive.shape),
                                 (b,) + adaptive.shape)
    return concat([feat, period_full, adaptive_full], axis=-1)


def embed_window(window: Tensor, dow, tod, params: EmbeddingParams) -> Tensor:
    """Full embedding of a batch of history windows: (B, H, N, d_h)."""
    feat = embed_features(window, params)
    period = lookup_periodicity(dow, tod, params)
    return assemble_embedding(feat, period, params.adaptive)
