"""Streaming self-attention weights.

Batched, differentiable forms operate on ``Tensor`` values with layout
``[batch, heads, target, source]`` for source scores and
``[batch, heads, target, target]`` for target scores. The allocation ``p``
is per layer, ``[batch, target, source]``, and is shared by all heads.

Row-level helpers at the bottom take and return plain numpy vectors and run
through the same batched code.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

EXPECTED = "expected"
MAX = "max"
ALLOCATION_MODES = (EXPECTED, MAX)


def allocation(pooled_t: Tensor, pooled_s: Tensor, u_q: Tensor, u_k: Tensor) -> Tensor:
    """Prefix allocation probabilities ``sigmoid(t U_Q (s U_K)^T / sqrt(d))``.

    ``pooled_t`` is ``[B, I, d]`` (target prefix means), ``pooled_s`` is
    ``[B, J, d]`` (source prefix means). Returns ``[B, I, J]``.
    """
    d = pooled_t.shape[-1]
    q = pooled_t @ u_q
    k = pooled_s @ u_k
    return T.sigmoid((q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(d)))


def effective_allocation(p: Tensor, valid: np.ndarray, mode: str = EXPECTED) -> Tensor:
    """Allocation restricted to available prefixes.

    In max mode the whole available mass sits on the most probable prefix
    (ties go to the shorter prefix, as ``argmax`` returns the first hit).
    """
    p_v = T.where(valid, p, 0.0)
    if mode == EXPECTED:
        return p_v
    if mode != MAX:
        raise ValueError(f"unknown allocation mode {mode!r}")
    best = np.where(valid, p_v.data, -1.0).argmax(axis=-1)
    onehot = np.zeros(p.shape, dtype=p.data.dtype)
    np.put_along_axis(onehot, best[..., None], 1.0, axis=-1)
    return p_v.sum(axis=-1, keepdims=True) * onehot


def ssa_weights(p: Tensor, e_s: Tensor, e_t: Tensor, valid: np.ndarray,
                causal: np.ndarray, mode: str = EXPECTED) -> tuple[Tensor, Tensor]:
    """Expected attention over source tokens and preceding target tokens.

    ``valid[b, i, j]`` marks source tokens visible to target row ``i`` (a
    prefix, so column 0 is always set). Source attention for token ``j`` sums
    ``p[m] * softmax(e_s[:m])[j]`` over visible prefixes ``m >= j``; this is
    done with one prefix sum for the partition functions and one suffix sum
    of ``p[m] / Z[m]``, so a row costs O(J).

    Returns ``(alpha_s [B,H,I,J], alpha_t [B,H,I,I])``.
    """
    p_eff = effective_allocation(p, valid, mode)
    vh = valid[:, None]
    shift = np.where(vh, e_s.data, -np.inf).max(axis=-1, keepdims=True)
    scores = T.where(vh, e_s - shift, 0.0)
    weights = T.where(vh, T.exp(scores), 0.0)
    partition = T.cumsum(weights, axis=-1)
    per_prefix = T.reshape(p_eff, (p.shape[0], 1) + p.shape[1:]) / partition
    alpha_s = weights * T.cumsum(per_prefix, axis=-1, reverse=True)

    source_mass = p_eff.sum(axis=-1)
    w_t = T.masked_softmax(e_t, causal)
    rest = T.reshape(1.0 - source_mass, (p.shape[0], 1, p.shape[1], 1))
    return alpha_s, rest * w_t


def joint_weights(e_s: Tensor, e_t: Tensor, valid: np.ndarray,
                  causal: np.ndarray) -> tuple[Tensor, Tensor]:
    """Plain masked self-attention over ``[source; target prefix]``.

    One softmax spans both segments; it is split back into source and target
    parts so the caller can reuse the SSA context code.
    """
    vh = np.broadcast_to(valid[:, None], e_s.shape)
    ch = np.broadcast_to(causal, e_t.shape)
    shift = np.maximum(
        np.where(vh, e_s.data, -np.inf).max(axis=-1, keepdims=True),
        np.where(ch, e_t.data, -np.inf).max(axis=-1, keepdims=True),
    )
    ws = T.where(vh, T.exp(T.where(vh, e_s - shift, 0.0)), 0.0)
    wt = T.where(ch, T.exp(T.where(ch, e_t - shift, 0.0)), 0.0)
    denom = ws.sum(axis=-1, keepdims=True) + wt.sum(axis=-1, keepdims=True)
    return ws / denom, wt / denom


def source_mass(e_s: np.ndarray, e_t: np.ndarray, valid: np.ndarray,
                causal: np.ndarray) -> np.ndarray:
    """Share of plain soft attention landing on the source, averaged over heads.

    Plain numpy: used as a fixed target for the summation constraint.
    Returns ``[B, I]``.
    """
    vh = np.broadcast_to(valid[:, None], e_s.shape)
    ch = np.broadcast_to(causal, e_t.shape)
    shift = np.maximum(
        np.where(vh, e_s, -np.inf).max(axis=-1, keepdims=True),
        np.where(ch, e_t, -np.inf).max(axis=-1, keepdims=True),
    )
    ws = np.where(vh, np.exp(np.where(vh, e_s - shift, 0.0)), 0.0).sum(axis=-1)
    wt = np.where(ch, np.exp(np.where(ch, e_t - shift, 0.0)), 0.0).sum(axis=-1)
    return (ws / (ws + wt)).mean(axis=1)


def context(alpha_s: Tensor, alpha_t: Tensor, v_s: Tensor, v_t: Tensor) -> Tensor:
    """``c_i = sum_j alpha_s[i,j] v_s[j] + sum_k alpha_t[i,k] v_t[k]``."""
    return alpha_s @ v_s + alpha_t @ v_t


# ---------------------------------------------------------------------------
# row-level helpers (numpy in, numpy out)
# ---------------------------------------------------------------------------

def _row(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=T.get_default_dtype()).reshape(1, 1, 1, -1))


def _row_weights(p_row, e_s_row, e_t_row, m: int | None, mode: str):
    p_row = np.asarray(p_row, dtype=T.get_default_dtype())
    J = p_row.size
    if J < 1:
        raise ValueError("need at least one source token")
    m = J if m is None else m
    if not 1 <= m <= J:
        raise ValueError(f"available source length {m} outside 1..{J}")
    if e_t_row is None:
        e_t_row = np.zeros(1)
    e_t_row = np.asarray(e_t_row, dtype=T.get_default_dtype())
    valid = (np.arange(J) < m).reshape(1, 1, J)
    causal = np.ones((1, e_t_row.size), dtype=bool)
    with T.no_grad():
        a_s, a_t = ssa_weights(
            Tensor(p_row.reshape(1, 1, J)), _row(e_s_row), _row(e_t_row), valid, causal, mode
        )
    return a_s.data.reshape(-1), a_t.data.reshape(-1)


def expected_source_attention(p_row, e_s_row) -> np.ndarray:
    """Expected source attention of one target row over all ``J`` prefixes."""
    return _row_weights(p_row, e_s_row, None, None, EXPECTED)[0]


def expected_source_attention_max(p_row, e_s_row) -> np.ndarray:
    """Max-allocation variant: all mass on the most probable prefix."""
    return _row_weights(p_row, e_s_row, None, None, MAX)[0]


def expected_target_attention(p_row, e_t_row) -> np.ndarray:
    """``(1 - sum(p)) * softmax(e_t)`` over the ``i`` visible targets."""
    e_t_row = np.asarray(e_t_row, dtype=T.get_default_dtype())
    if e_t_row.size < 1:
        raise ValueError("target row needs at least one position")
    return (1.0 - float(np.sum(p_row))) * T.softmax(e_t_row)


def truncated_ssa(p_row, e_s_row, e_t_row, m: int, mode: str = EXPECTED):
    """Source/target expected attention when only ``m`` source tokens are read.

    Returns ``(alpha_s[:m], alpha_t)``. Allocation to prefixes longer than
    ``m`` is dropped, not renormalised.
    """
    if m < 1:
        raise ValueError("at least one source token must be read before writing")
    a_s, a_t = _row_weights(p_row, e_s_row, e_t_row, m, mode)
    return a_s[:m], a_t


def ssa_context(alpha_s, alpha_t, v_s, v_t) -> np.ndarray:
    alpha_s, alpha_t = np.asarray(alpha_s), np.asarray(alpha_t)
    v_s, v_t = np.asarray(v_s), np.asarray(v_t)
    if alpha_s.shape[-1] != len(v_s) or alpha_t.shape[-1] != len(v_t):
        raise ValueError("attention and value lengths disagree")
    return alpha_s @ v_s + alpha_t @ v_t


def prefix_allocation(pooled_t, pooled_s, u_q, u_k, d: int) -> float:
    score = (np.asarray(pooled_t) @ np.asarray(u_q)) @ (np.asarray(pooled_s) @ np.asarray(u_k))
    return float(T._sigmoid(np.atleast_1d(score / math.sqrt(d)))[0])


def masked_self_attention(states, w_q, w_k, w_v) -> tuple[np.ndarray, np.ndarray]:
    """Causal single-head attention; returns ``(weights [L,L], context [L,d_v])``."""
    states = np.asarray(states, dtype=T.get_default_dtype())
    if states.ndim != 2 or len(states) == 0:
        raise ValueError("states must be a non-empty [L, d] matrix")
    q, k, v = states @ w_q, states @ w_k, states @ w_v
    L = len(states)
    causal = np.tril(np.ones((L, L), dtype=bool))
    with T.no_grad():
        w = T.masked_softmax(Tensor((q @ k.T) / math.sqrt(q.shape[-1])), causal).data
    return w, w @ v
