"""Recurrent cells, additive attention, embeddings and dropout.

All weights follow the (out, in) convention and are applied to row-major
batches, so a cell step maps ``x: (B, in)`` and ``h: (B, H)`` to ``(B, H)``.
Gates are stacked along the output axis of a single matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


@dataclass
class LSTMCellParams:
    """Gate order along rows: input, forget, candidate, output."""

    w_ih: Tensor  # (4H, in)
    w_hh: Tensor  # (4H, H)
    b: Tensor  # (4H,)

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_ih.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.w_ih, self.w_hh, self.b]

    @classmethod
    def init(cls, rng, input_dim: int, hidden: int, prefix: str = "") -> "LSTMCellParams":
        return cls(
            uniform_init(rng, (4 * hidden, input_dim), hidden, prefix + "w_ih"),
            uniform_init(rng, (4 * hidden, hidden), hidden, prefix + "w_hh"),
            uniform_init(rng, (4 * hidden,), hidden, prefix + "b"),
        )


@dataclass
class GRUCellParams:
    """Gate order along rows: reset, update, candidate."""

    w_ih: Tensor  # (3H, in)
    w_hh: Tensor  # (3H, H)
    b_ih: Tensor  # (3H,)
    b_hh: Tensor  # (3H,)

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.w_ih, self.w_hh, self.b_ih, self.b_hh]

    @classmethod
    def init(cls, rng, input_dim: int, hidden: int, prefix: str = "") -> "GRUCellParams":
        return cls(
            uniform_init(rng, (3 * hidden, input_dim), hidden, prefix + "w_ih"),
            uniform_init(rng, (3 * hidden, hidden), hidden, prefix + "w_hh"),
            uniform_init(rng, (3 * hidden,), hidden, prefix + "b_ih"),
            uniform_init(rng, (3 * hidden,), hidden, prefix + "b_hh"),
        )


@dataclass
class AttentionParams:
    w_k: Tensor  # (A, D) key projection
    w_q: Tensor  # (A, Dq) query projection
    v: Tensor  # (A,) score vector

    def tensors(self) -> list[Tensor]:
        return [self.w_k, self.w_q, self.v]

    @classmethod
    def init(cls, rng, key_dim: int, query_dim: int, att_dim: int, prefix: str = "") -> "AttentionParams":
        return cls(
            uniform_init(rng, (att_dim, key_dim), key_dim, prefix + "w_k"),
            uniform_init(rng, (att_dim, query_dim), query_dim, prefix + "w_q"),
            uniform_init(rng, (att_dim,), att_dim, prefix + "v"),
        )


# ---------------------------------------------------------------------------
# recurrent cells


def _cell_input(x: Tensor, w: Tensor, what: str) -> None:
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"{what}: input width {x.shape[-1]} does not match weight {w.shape}")


def _sig(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_pointwise(gates: Tensor, c: Tensor) -> Tensor:
    """Fused gate nonlinearities and state update; returns ``[h' | c']``."""
    H = c.shape[-1]
    a = gates.data
    i, f, o = _sig(a[..., :H]), _sig(a[..., H : 2 * H]), _sig(a[..., 3 * H :])
    g = np.tanh(a[..., 2 * H : 3 * H])
    c_new = f * c.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(G):
        gh, gc = G[..., :H], G[..., H:] + G[..., :H] * o * (1.0 - tc * tc)
        da = np.concatenate(
            [gc * g * i * (1.0 - i), gc * c.data * f * (1.0 - f), gc * i * (1.0 - g * g), gh * tc * o * (1.0 - o)],
            axis=-1,
        )
        return da, gc * f

    return T.apply_op(np.concatenate([h_new, c_new], axis=-1), (gates, c), backward, "lstm_pointwise")


def _lstm_step_fused(x_proj: Tensor, hc: Tensor, params: LSTMCellParams) -> Tensor:
    H = params.hidden
    gates = x_proj + T.linear(hc[..., :H], params.w_hh, params.b)
    return _lstm_pointwise(gates, hc[..., H:])


def lstm_cell_step(x, state, params: LSTMCellParams, x_proj: Tensor | None = None, layer: int | None = None):
    """One LSTM step.

    Args:
        x: (B, in) input, ignored when ``x_proj`` (precomputed ``x @ w_ih.T``) is given.
        state: ``(h, c)`` each (B, H).
        params: cell weights.
        x_proj: optional precomputed input projection.
        layer: layer index, only used in error messages.

    Returns:
        ``(h', c')``.
    """
    h, c = state
    H = params.hidden
    if x_proj is None:
        if x.shape[-1] != params.input_dim:
            where = f"layer {layer}" if layer is not None else "lstm cell"
            raise DimensionError(
                f"{where}: input width {x.shape[-1]} does not match weight {params.w_ih.shape}"
            )
        x_proj = T.linear(x, params.w_ih)
    hc = _lstm_pointwise(x_proj + T.linear(h, params.w_hh, params.b), c)
    return hc[..., :H], hc[..., H:]


def _gru_pointwise(gi: Tensor, gh: Tensor, h: Tensor) -> Tensor:
    H = h.shape[-1]
    a, b = gi.data, gh.data
    r = _sig(a[..., :H] + b[..., :H])
    z = _sig(a[..., H : 2 * H] + b[..., H : 2 * H])
    bn = b[..., 2 * H :]
    n = np.tanh(a[..., 2 * H :] + r * bn)

    def backward(G):
        dpre_n = G * (1.0 - z) * (1.0 - n * n)
        dr = dpre_n * bn * r * (1.0 - r)
        dz = G * (h.data - n) * z * (1.0 - z)
        return (np.concatenate([dr, dz, dpre_n], axis=-1),
                np.concatenate([dr, dz, dpre_n * r], axis=-1),
                G * z)

    return T.apply_op(n + z * (h.data - n), (gi, gh, h), backward, "gru_pointwise")


def gru_cell_step(x: Tensor, h: Tensor, params: GRUCellParams) -> Tensor:
    """One GRU step: ``h' = z*h + (1-z)*n`` with the reset gate applied to
    the recurrent candidate term."""
    _cell_input(x, params.w_ih, "gru cell")
    gi = T.linear(x, params.w_ih, params.b_ih)
    gh = T.linear(h, params.w_hh, params.b_hh)
    return _gru_pointwise(gi, gh, h)


def _run_direction(x_proj: Tensor, params: LSTMCellParams, h0: Tensor, reverse: bool, step_mask, layer: int):
    B, steps, _ = x_proj.shape
    H = params.hidden
    hc = T.concat([h0, Tensor(np.zeros((B, H)))], axis=1)
    outs: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        hc_new = _lstm_step_fused(x_proj[:, t, :], hc, params)
        if step_mask is not None and not step_mask[:, t].all():
            # padded frames leave the state untouched
            hc_new = T.where(step_mask[:, t][:, None], hc_new, hc)
        hc = hc_new
        outs[t] = hc
    return T.stack(outs, axis=1)[..., :H]


def bilstm_encoder(
    features: Tensor,
    layers: Sequence[tuple[LSTMCellParams, LSTMCellParams]],
    h0: Tensor | None = None,
    lengths: Sequence[int] | None = None,
) -> Tensor:
    """Stacked bidirectional LSTM, each layer followed by ``tanh``.

    Args:
        features: (T, F) or (B, T, F).
        layers: ``(forward, backward)`` cell params per layer.
        h0: optional (H,) or (B, H) initial hidden state, given to both
            directions of the first layer only.
        lengths: valid frame count per batch row; padding is skipped.

    Returns:
        (T, 2H) or (B, T, 2H) encoder states.
    """
    single = features.ndim == 2
    if single:
        features = T.reshape(features, (1,) + features.shape)
        if h0 is not None and h0.ndim == 1:
            h0 = T.reshape(h0, (1, h0.shape[0]))
    B, steps, _ = features.shape
    if steps == 0:
        raise ValueError("empty feature sequence")
    step_mask = None
    if lengths is not None:
        step_mask = np.arange(steps)[None, :] < np.asarray(lengths)[:, None]
        if step_mask.all():
            step_mask = None

    x = features
    for li, (fwd, bwd) in enumerate(layers):
        H = fwd.hidden
        if x.shape[-1] != fwd.input_dim:
            raise DimensionError(
                f"layer {li}: input width {x.shape[-1]} does not match weight {fwd.w_ih.shape}"
            )
        if li == 0 and h0 is not None:
            init = h0
        else:
            init = Tensor(np.zeros((B, H)))
        # input projections for every frame at once, sliced per step
        out_f = _run_direction(T.linear(x, fwd.w_ih), fwd, init, False, step_mask, li)
        out_b = _run_direction(T.linear(x, bwd.w_ih), bwd, init, True, step_mask, li)
        x = T.tanh(T.concat([out_f, out_b], axis=2))
    if single:
        x = T.reshape(x, x.shape[1:])
    return x


# ---------------------------------------------------------------------------
# attention


def _additive_attention(keys: Tensor, q: Tensor, v: Tensor, values: Tensor, mask):
    """Fused score/softmax/context op. The returned weights are constants."""
    hidden = np.tanh(keys.data + q.data[:, None, :])
    scores = hidden @ v.data
    if mask is not None:
        scores = scores + np.where(mask, 0.0, -1e30)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    context = np.einsum("bn,bnd->bd", w, values.data)

    def backward(G):
        dw = np.einsum("bnd,bd->bn", values.data, G)
        ds = w * (dw - (w * dw).sum(axis=1, keepdims=True))
        dpre = ds[:, :, None] * v.data * (1.0 - hidden * hidden)
        dv = np.einsum("bn,bna->a", ds, hidden)
        return dpre, dpre.sum(axis=1), dv, w[:, :, None] * G[:, None, :]

    return T.apply_op(context, (keys, q, v, values), backward, "attention"), Tensor(w)


def attention(candidates: Tensor, query: Tensor, params: AttentionParams, mask=None, keys: Tensor | None = None):
    """Additive attention ``score_i = v . tanh(W_k c_i + W_q q)``.

    Args:
        candidates: (N, D) or batched (B, N, D).
        query: (Dq,) or (B, Dq).
        params: projection weights.
        mask: optional boolean (B, N); False entries get zero weight.
        keys: optional precomputed ``linear(candidates, W_k)``.

    Returns:
        ``(context, weights)``: (D,)/(B, D) and (N,)/(B, N).
    """
    single = candidates.ndim == 2
    if single:
        candidates = T.reshape(candidates, (1,) + candidates.shape)
        query = T.reshape(query, (1, query.shape[0]))
        if keys is not None:
            keys = T.reshape(keys, (1,) + keys.shape)
    B, N, _ = candidates.shape
    if N == 0:
        raise ValueError("attention over zero candidates")
    if keys is None:
        keys = T.linear(candidates, params.w_k)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.all():
            mask = None
    context, weights = _additive_attention(keys, T.linear(query, params.w_q), params.v, candidates, mask)
    if single:
        return T.reshape(context, context.shape[1:]), T.reshape(weights, (N,))
    return context, weights


# ---------------------------------------------------------------------------
# dropout and embeddings


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in ``"eval"`` mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    return x * Tensor(keep / (1.0 - p))


def embed(token_id, table: Tensor) -> Tensor:
    """Row lookup; a scalar id gives (D,), an id array gives (B, D)."""
    return T.take_rows(table, token_id)


def output_logits(h: Tensor, table: Tensor, w_o: Tensor, b_o: Tensor) -> Tensor:
    """Vocabulary scores through the tied table: ``table . tanh(W_o h + b_o)``."""
    proj = T.tanh(T.linear(h, w_o, b_o))
    return T.linear(proj, table)
