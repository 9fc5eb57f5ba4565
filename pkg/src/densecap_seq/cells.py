"""GRU and LSTM cells built on the autodiff primitives.

Gate weights are stored fused: one input-to-hidden matrix (in_dim, G*H) and
one hidden-to-hidden matrix (H, G*H) per cell, G gates stacked along columns,
plus a single bias on the input path. Column blocks are

    GRU:  [update | reset | candidate]
    LSTM: [input | forget | cell | output]

The GRU candidate applies the reset gate to the recurrent contribution,
n = tanh(Wx_n x + b_n + r * (Wh_n h)). Steps accept a single vector or a
(B, dim) row matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore, uniform_init


@dataclass
class GruCellParams:
    w_x: Tensor  # (in_dim, 3H)
    w_h: Tensor  # (H, 3H)
    b: Tensor  # (3H,)

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]


@dataclass
class LstmCellParams:
    w_x: Tensor  # (in_dim, 4H)
    w_h: Tensor  # (H, 4H)
    b: Tensor  # (4H,)

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]


def init_gru(store: ParamStore, prefix: str, input_dim: int, hidden_dim: int,
             rng: np.random.Generator, scale: float = 0.08) -> GruCellParams:
    return GruCellParams(
        w_x=uniform_init(store, f"{prefix}.w_x", (input_dim, 3 * hidden_dim), rng, scale),
        w_h=uniform_init(store, f"{prefix}.w_h", (hidden_dim, 3 * hidden_dim), rng, scale),
        b=uniform_init(store, f"{prefix}.b", (3 * hidden_dim,), rng, scale),
    )


def init_lstm(store: ParamStore, prefix: str, input_dim: int, hidden_dim: int,
              rng: np.random.Generator, scale: float = 0.08) -> LstmCellParams:
    return LstmCellParams(
        w_x=uniform_init(store, f"{prefix}.w_x", (input_dim, 4 * hidden_dim), rng, scale),
        w_h=uniform_init(store, f"{prefix}.w_h", (hidden_dim, 4 * hidden_dim), rng, scale),
        b=uniform_init(store, f"{prefix}.b", (4 * hidden_dim,), rng, scale),
    )


def gru_cell(store: ParamStore, prefix: str) -> GruCellParams:
    return GruCellParams(store[f"{prefix}.w_x"], store[f"{prefix}.w_h"], store[f"{prefix}.b"])


def lstm_cell(store: ParamStore, prefix: str) -> LstmCellParams:
    return LstmCellParams(store[f"{prefix}.w_x"], store[f"{prefix}.w_h"], store[f"{prefix}.b"])


def _check_dims(kind: str, params, x: Tensor, h: Tensor):
    if x.shape[-1] != params.input_dim:
        raise ValueError(
            f"{kind} input dim {x.shape[-1]} != expected {params.input_dim}"
        )
    if h.shape[-1] != params.hidden_dim:
        raise ValueError(
            f"{kind} hidden dim {h.shape[-1]} != expected {params.hidden_dim}"
        )


def gru_step(params: GruCellParams, x: Tensor, h: Tensor) -> Tensor:
    _check_dims("gru", params, x, h)
    hd = params.hidden_dim
    xx = ad.add(ad.matmul(x, params.w_x), params.b)
    hh = ad.matmul(h, params.w_h)
    z = ad.sigmoid(ad.add(ad.narrow(xx, 0, hd), ad.narrow(hh, 0, hd)))
    r = ad.sigmoid(ad.add(ad.narrow(xx, hd, hd), ad.narrow(hh, hd, hd)))
    n = ad.tanh(ad.add(ad.narrow(xx, 2 * hd, hd), ad.mul(r, ad.narrow(hh, 2 * hd, hd))))
    # h' = (1 - z) * n + z * h
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


def lstm_step(params: LstmCellParams, x: Tensor,
              state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    h, c = state
    _check_dims("lstm", params, x, h)
    hd = params.hidden_dim
    s = ad.add(ad.add(ad.matmul(x, params.w_x), params.b), ad.matmul(h, params.w_h))
    gate_i = ad.sigmoid(ad.narrow(s, 0, hd))
    gate_f = ad.sigmoid(ad.narrow(s, hd, hd))
    cand = ad.tanh(ad.narrow(s, 2 * hd, hd))
    gate_o = ad.sigmoid(ad.narrow(s, 3 * hd, hd))
    c_new = ad.add(ad.mul(gate_f, c), ad.mul(gate_i, cand))
    h_new = ad.mul(gate_o, ad.tanh(c_new))
    return h_new, c_new


def zero_state(hidden_dim: int, batch: int | None = None) -> tuple[Tensor, Tensor]:
    shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
    return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))
