"""Decoder-only streaming transformer.

Source and target share one token embedding but use separate position
tables, so a target token's encoding never depends on how much source has
been read. Source tokens attend causally among themselves. Each target row
attends to the source through the prefix-allocation mechanism (``ssa`` mode)
or through a single softmax over ``[source; target prefix]`` (``pretrain``
mode).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import attention as A
from . import tensor as T
from .tensor import Parameter, Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

PRETRAIN = "pretrain"
SSA = "ssa"

READ = "READ"
WRITE = "WRITE"


class CacheConsistencyError(RuntimeError):
    """Streaming caches disagree with the tokens appended so far."""


@dataclass
class ModelConfig:
    vocab_size: int = 24
    model_dim: int = 64
    ffn_dim: int = 128
    layers: int = 4
    heads: int = 1
    decision_layers: int = 2
    epsilon: float = 1.0
    T: float = 500.0
    delta_infer: float = 0.5
    max_source_len: int = 64
    max_target_len: int = 64
    seed: int = 1
    allocation_mode: str = A.EXPECTED
    dtype: str = "float64"
    pos_init: str = "sinusoidal"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.vocab_size <= len(SPECIALS):
            raise ValueError("vocab_size must exceed the 4 reserved ids")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if not 1 <= self.decision_layers <= self.layers:
            raise ValueError("decision_layers must lie in 1..layers")
        if not 0.0 < self.delta_infer < 1.0:
            raise ValueError("delta_infer must lie in (0, 1)")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.allocation_mode not in A.ALLOCATION_MODES:
            raise ValueError(f"allocation_mode must be one of {A.ALLOCATION_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.pos_init not in ("sinusoidal", "normal"):
            raise ValueError("pos_init must be sinusoidal or normal")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in names:
                continue
            default = getattr(cls, k)
            kwargs[k] = type(default)(v) if not isinstance(v, type(default)) else v
        return cls(**kwargs)


@dataclass
class Batch:
    """Right-padded source/target id matrices plus true lengths."""

    src: np.ndarray        # [B, J]
    src_len: np.ndarray    # [B]
    tgt_in: np.ndarray     # [B, I]  <s> y_1 .. y_{I-1}
    tgt_out: np.ndarray    # [B, I]  y_1 .. y_I (last is </s>)
    tgt_len: np.ndarray    # [B]

    @property
    def size(self) -> int:
        return len(self.src)

    def target_mask(self) -> np.ndarray:
        return np.arange(self.tgt_in.shape[1])[None, :] < self.tgt_len[:, None]

    def source_mask(self) -> np.ndarray:
        """``[B, I, J]`` visibility of real (non-pad) source tokens."""
        J = self.src.shape[1]
        m = np.arange(J)[None, :] < self.src_len[:, None]
        return np.broadcast_to(m[:, None, :], (self.size, self.tgt_in.shape[1], J))


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    """Pad ``(source, target)`` pairs. Both sides must already end in ``</s>``."""
    if not pairs:
        raise ValueError("empty batch")
    B = len(pairs)
    J = max(len(s) for s, _ in pairs)
    I = max(len(t) for _, t in pairs)
    src = np.full((B, J), PAD, dtype=np.int64)
    tgt_in = np.full((B, I), PAD, dtype=np.int64)
    tgt_out = np.full((B, I), PAD, dtype=np.int64)
    for b, (s, t) in enumerate(pairs):
        if len(s) == 0 or len(t) == 0:
            raise ValueError("empty sentence in batch")
        src[b, : len(s)] = s
        tgt_out[b, : len(t)] = t
        tgt_in[b, 0] = BOS
        tgt_in[b, 1: len(t)] = t[:-1]
    return Batch(
        src, np.array([len(s) for s, _ in pairs]), tgt_in, tgt_out,
        np.array([len(t) for _, t in pairs]),
    )


@dataclass
class LayerRecord:
    p: Tensor | None          # [B, I, J] allocation (ssa mode)
    e_s: np.ndarray           # [B, H, I, J] raw source scores
    e_t: np.ndarray           # [B, H, I, I] raw target scores
    alpha_s: np.ndarray
    alpha_t: np.ndarray


@dataclass
class ForwardOutput:
    logits: Tensor                        # [B, I, V]
    layers: list[LayerRecord]
    valid: np.ndarray                     # [B, I, J] visibility actually used

    @property
    def allocations(self) -> list[Tensor]:
        return [rec.p for rec in self.layers if rec.p is not None]


def _sinusoid(n: int, d: int) -> np.ndarray:
    """Starting values for a learned position table; low frequencies vary
    almost linearly with position, which survives prefix mean pooling."""
    pos = np.arange(n)[:, None]
    freq = 1.0 / (10000.0 ** (np.arange(0, d, 2) / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)[:, : d // 2]
    return out


@dataclass
class SourceLayer:
    k: Tensor            # [B, H, J, dh]
    v: Tensor            # [B, H, J, dh]
    pooled: Tensor       # [B, J, d] prefix means of the layer input


def _select(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(batch.src[idx], batch.src_len[idx], batch.tgt_in[idx], batch.tgt_out[idx],
                 batch.tgt_len[idx])


def _select_source(layers: list[SourceLayer], idx: np.ndarray) -> list[SourceLayer]:
    return [SourceLayer(Tensor(sl.k.data[idx]), Tensor(sl.v.data[idx]), Tensor(sl.pooled.data[idx]))
            for sl in layers]


def _causal(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


class DST:
    """Parameters plus batch and streaming forward passes."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter] | None = None):
        config.validate()
        self.config = config
        self.params = params if params is not None else self._init_params()

    # -- parameters --------------------------------------------------------------
    def _init_params(self) -> dict[str, Parameter]:
        c = self.config
        rng = np.random.default_rng(c.seed)
        dt = np.dtype(c.dtype)
        d, f, V = c.model_dim, c.ffn_dim, c.vocab_size
        out: dict[str, Parameter] = {}

        def add(name, arr):
            out[name] = Parameter(np.asarray(arr, dtype=dt), name=name)

        def dense(n_in, n_out):
            return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

        add("embed.tokens", rng.normal(0.0, 1.0, size=(V, d)))
        if c.pos_init == "sinusoidal":
            add("embed.source_pos", _sinusoid(c.max_source_len, d))
            add("embed.target_pos", _sinusoid(c.max_target_len, d))
        else:
            add("embed.source_pos", rng.normal(0.0, 1.0, size=(c.max_source_len, d)))
            add("embed.target_pos", rng.normal(0.0, 1.0, size=(c.max_target_len, d)))
        add("embed.segment", rng.normal(0.0, 1.0, size=(2, d)))
        for n in range(c.layers):
            pre = f"layer{n}."
            add(pre + "ln1.gain", np.ones(d))
            add(pre + "ln1.bias", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                add(pre + w, dense(d, d))
            add(pre + "uq", dense(d, d))
            add(pre + "uk", dense(d, d))
            add(pre + "ln2.gain", np.ones(d))
            add(pre + "ln2.bias", np.zeros(d))
            add(pre + "ffn.w1", dense(d, f))
            add(pre + "ffn.b1", np.zeros(f))
            add(pre + "ffn.w2", dense(f, d))
            add(pre + "ffn.b2", np.zeros(d))
        add("final_ln.gain", np.ones(d))
        add("final_ln.bias", np.zeros(d))
        add("out.w", dense(d, V))
        add("out.b", np.zeros(V))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def policy_parameters(self) -> list[Parameter]:
        return [p for name, p in self.params.items() if name.endswith((".uq", ".uk"))]

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    # -- building blocks ------------------------------------------------------------
    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[prefix + ".gain"], self.params[prefix + ".bias"])

    def _ffn(self, x: Tensor, pre: str) -> Tensor:
        P = self.params
        hidden = T.relu(x @ P[pre + "ffn.w1"] + P[pre + "ffn.b1"])
        return hidden @ P[pre + "ffn.w2"] + P[pre + "ffn.b2"]

    def _split_heads(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        H = self.config.heads
        return x.reshape(B, L, H, d // H).transpose(0, 2, 1, 3)

    def _merge_heads(self, x: Tensor) -> Tensor:
        B, H, L, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError("token id out of vocabulary")

    def _embed(self, ids: np.ndarray, segment: int, positions: np.ndarray) -> Tensor:
        P = self.params
        table = P["embed.source_pos"] if segment == 0 else P["embed.target_pos"]
        if positions.size and positions.max() >= table.shape[0]:
            raise ValueError("sequence longer than the position table")
        h = T.embedding(P["embed.tokens"], ids) + T.embedding(table, positions)
        return h + P["embed.segment"][segment]

    # -- batch forward ----------------------------------------------------------------
    def forward(self, batch: Batch, mode: str = SSA, bounds: np.ndarray | None = None,
                allocation_mode: str | None = None) -> ForwardOutput:
        """Full-sentence forward with optional per-target source bounds.

        ``bounds[b, i]`` is the number of source tokens visible to target row
        ``i`` (1-based count). Rows never see source padding.
        """
        c = self.config
        if mode not in (PRETRAIN, SSA):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == PRETRAIN and bounds is not None:
            raise ValueError("pretrain mode uses the full source")
        self._check_ids(batch.src)
        self._check_ids(batch.tgt_in)
        alloc_mode = allocation_mode or c.allocation_mode
        B, J = batch.src.shape
        I = batch.tgt_in.shape[1]

        valid = batch.source_mask()
        if bounds is not None:
            bounds = np.asarray(bounds)
            if bounds.shape != (B, I):
                raise ValueError(f"bounds shape {bounds.shape} != {(B, I)}")
            if (bounds < 1).any():
                raise ValueError("every target row needs at least one source token")
            valid = valid & (np.arange(J)[None, None, :] < bounds[:, :, None])
        src = self._source_stack(batch)
        return self._target_stack(batch, src, valid, mode, alloc_mode)

    def _source_stack(self, batch: Batch) -> list["SourceLayer"]:
        """Per-layer source keys, values and pooled prefix means.

        The source segment attends only to itself, so these do not depend on
        how much of it any target row may see.
        """
        c = self.config
        P = self.params
        J = batch.src.shape[1]
        scale = 1.0 / math.sqrt(c.model_dim // c.heads)
        causal_s = _causal(J)
        count_s = np.arange(1, J + 1, dtype=np.dtype(c.dtype)).reshape(1, J, 1)
        h_s = self._embed(batch.src, 0, np.arange(J))
        layers = []
        for n in range(c.layers):
            pre = f"layer{n}."
            a_s = self._ln(h_s, pre + "ln1")
            k_s = self._split_heads(a_s @ P[pre + "wk"])
            v_s = self._split_heads(a_s @ P[pre + "wv"])
            layers.append(SourceLayer(k_s, v_s, T.cumsum(a_s, axis=1) / count_s))
            if n < c.layers - 1:
                q_s = self._split_heads(a_s @ P[pre + "wq"])
                w_s = T.masked_softmax((q_s @ k_s.transpose(0, 1, 3, 2)) * scale, causal_s)
                h_s = h_s + self._merge_heads(w_s @ v_s) @ P[pre + "wo"]
                h_s = h_s + self._ffn(self._ln(h_s, pre + "ln2"), pre)
        return layers

    def _target_stack(self, batch: Batch, src: list["SourceLayer"], valid: np.ndarray,
                      mode: str, alloc_mode: str) -> ForwardOutput:
        c = self.config
        P = self.params
        I = batch.tgt_in.shape[1]
        scale = 1.0 / math.sqrt(c.model_dim // c.heads)
        causal_t = _causal(I)
        count_t = np.arange(1, I + 1, dtype=np.dtype(c.dtype)).reshape(1, I, 1)
        h_t = self._embed(batch.tgt_in, 1, np.arange(I))
        records = []
        for n, sl in enumerate(src):
            pre = f"layer{n}."
            a_t = self._ln(h_t, pre + "ln1")
            q_t = self._split_heads(a_t @ P[pre + "wq"])
            k_t = self._split_heads(a_t @ P[pre + "wk"])
            v_t = self._split_heads(a_t @ P[pre + "wv"])
            e_s = (q_t @ sl.k.transpose(0, 1, 3, 2)) * scale
            e_t = (q_t @ k_t.transpose(0, 1, 3, 2)) * scale
            if mode == SSA:
                pooled_t = T.cumsum(a_t, axis=1) / count_t
                p = A.allocation(pooled_t, sl.pooled, P[pre + "uq"], P[pre + "uk"])
                alpha_s, alpha_t = A.ssa_weights(p, e_s, e_t, valid, causal_t, alloc_mode)
            else:
                p = None
                alpha_s, alpha_t = A.joint_weights(e_s, e_t, valid, causal_t)
            ctx_t = self._merge_heads(A.context(alpha_s, alpha_t, sl.v, v_t))
            h_t = h_t + ctx_t @ P[pre + "wo"]
            h_t = h_t + self._ffn(self._ln(h_t, pre + "ln2"), pre)
            records.append(LayerRecord(p, e_s.data, e_t.data, alpha_s.data, alpha_t.data))

        out = self._ln(h_t, "final_ln") @ P["out.w"] + P["out.b"]
        return ForwardOutput(out, records, valid)

    def replay_bounds(self, batch: Batch, delta: float) -> np.ndarray:
        """Source bounds chosen by replaying streaming reads on teacher-forced targets.

        Candidate prefixes ``m = 1, 2, ...`` are tried in order. At each ``m``
        every undecided row is evaluated with ``m`` source tokens visible
        while decided rows keep their own bounds, which is the state a
        streaming decoder would be in. Rows are then committed in order for
        as long as the mean cumulative allocation of the decision layers
        exceeds ``delta``; a row that fails blocks the rows after it. Once a
        sentence's source is exhausted its remaining rows take the full
        length. Returns ``[B, I]`` bounds (padding rows get the full length).
        """
        c = self.config
        B, J = batch.src.shape
        I = batch.tgt_in.shape[1]
        src_len, tgt_len = batch.src_len, batch.tgt_len
        bounds = np.broadcast_to(src_len[:, None], (B, I)).copy()
        decided = np.zeros(B, dtype=np.int64)
        with T.no_grad():
            src = self._source_stack(batch)
            for m in range(1, J + 1):
                done = src_len <= m
                decided[done] = tgt_len[done]
                active = np.flatnonzero(decided < tgt_len)
                if active.size == 0:
                    break
                sub = _select(batch, active)
                rows = np.arange(I)[None, :]
                cur = np.where(rows < decided[active, None], bounds[active], m)
                valid = sub.source_mask() & (np.arange(J)[None, None, :] < cur[:, :, None])
                out = self._target_stack(sub, _select_source(src, active), valid, SSA, c.allocation_mode)
                ps = [p.data for p in out.allocations[-c.decision_layers:]]
                cumulative = sum(p[:, :, :m].sum(axis=-1) for p in ps) / len(ps)
                for r, b in enumerate(active):
                    i = decided[b]
                    while i < tgt_len[b] and cumulative[r, i] > delta:
                        bounds[b, i] = m
                        i += 1
                    decided[b] = i
        return bounds

    def forward_train(self, x: Sequence[int], y: Sequence[int], mode: str = SSA,
                      mask: Sequence[int] | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
        """Single-pair convenience wrapper returning ``(logits [I,V], [p per layer])``.

        ``y`` is the full target including ``</s>``; ``mask`` gives one source
        bound per target row.
        """
        batch = make_batch([(list(x), list(y))])
        bounds = None if mask is None else np.asarray(mask).reshape(1, -1)
        with T.no_grad():
            out = self.forward(batch, mode, bounds)
        return out.logits.data[0], [p.data[0] for p in out.allocations]

    # -- streaming ----------------------------------------------------------------------
    def new_stream(self) -> "StreamState":
        return StreamState(self.config)

    def stream_source(self, state: "StreamState", token: int) -> None:
        """Append one source token to every layer's caches."""
        c = self.config
        P = self.params
        self._check_ids(np.array([token]))
        state.check()
        j = state.m
        dh = c.model_dim // c.heads
        scale = 1.0 / math.sqrt(dh)
        with T.no_grad():
            h = self._embed(np.array([[token]]), 0, np.array([j]))
            for n in range(c.layers):
                pre = f"layer{n}."
                cache = state.layers[n]
                a = self._ln(h, pre + "ln1")
                q = self._split_heads(a @ P[pre + "wq"])
                k = self._split_heads(a @ P[pre + "wk"])
                v = self._split_heads(a @ P[pre + "wv"])
                pooled = cache.source_sum.push(a.data[0, 0])
                cache.src_k.append(k.data[0, :, 0])
                cache.src_v.append(v.data[0, :, 0])
                cache.src_pool.append((pooled @ P[pre + "uk"].data))
                state.count_scores(n, j + 1)
                if n == c.layers - 1:
                    continue
                keys = Tensor(cache.src_k.view()[None])
                vals = Tensor(cache.src_v.view()[None])
                w = T.masked_softmax((q @ keys.transpose(0, 1, 3, 2)) * scale)
                h = h + self._merge_heads(w @ vals) @ P[pre + "wo"]
                h = h + self._ffn(self._ln(h, pre + "ln2"), pre)
        state.m += 1
        state.check()

    def stream_peek(self, state: "StreamState", token: int) -> "PendingTarget":
        """Run ``token`` as the next target input against the current source.

        Nothing is cached; call ``stream_commit`` to keep the result.
        """
        c = self.config
        P = self.params
        self._check_ids(np.array([token]))
        state.check()
        m, i = state.m, state.n_target
        if m < 1:
            raise ValueError("read at least one source token before writing")
        dh = c.model_dim // c.heads
        scale = 1.0 / math.sqrt(dh)
        causal = np.ones((1, i + 1), dtype=bool)
        valid = np.ones((1, 1, m), dtype=bool)
        entries, cumulative = [], []
        with T.no_grad():
            h = self._embed(np.array([[token]]), 1, np.array([i]))
            for n in range(c.layers):
                pre = f"layer{n}."
                cache = state.layers[n]
                a = self._ln(h, pre + "ln1")
                q = self._split_heads(a @ P[pre + "wq"])
                k = self._split_heads(a @ P[pre + "wk"])
                v = self._split_heads(a @ P[pre + "wv"])
                k_t = np.concatenate([cache.tgt_k.view(), k.data[0]], axis=1)[None]
                v_t = np.concatenate([cache.tgt_v.view(), v.data[0]], axis=1)[None]
                k_s = cache.src_k.view()[None]
                v_s = Tensor(cache.src_v.view()[None])
                e_s = (q @ Tensor(k_s.transpose(0, 1, 3, 2))) * scale
                e_t = (q @ Tensor(k_t.transpose(0, 1, 3, 2))) * scale
                state.count_scores(n, m + i + 1)
                pooled_t = (cache.target_sum + a.data[0, 0]) / (i + 1)
                pool_q = pooled_t @ P[pre + "uq"].data
                score = (cache.src_pool.view() @ pool_q) / math.sqrt(c.model_dim)
                p = Tensor(T._sigmoid(score).reshape(1, 1, m))
                alpha_s, alpha_t = A.ssa_weights(p, e_s, e_t, valid, causal, c.allocation_mode)
                ctx = self._merge_heads(A.context(alpha_s, alpha_t, v_s, Tensor(v_t)))
                h = h + ctx @ P[pre + "wo"]
                h = h + self._ffn(self._ln(h, pre + "ln2"), pre)
                entries.append((k.data[0, :, 0], v.data[0, :, 0], a.data[0, 0]))
                cumulative.append(float(p.data.sum()))
            logits = self._ln(h, "final_ln") @ P["out.w"] + P["out.b"]
        return PendingTarget(token, m, i, logits.data[0, 0], np.array(cumulative), entries)

    def stream_commit(self, state: "StreamState", pending: "PendingTarget") -> None:
        if pending.m != state.m or pending.position != state.n_target:
            raise CacheConsistencyError("pending target computed against a stale state")
        for cache, (k, v, a) in zip(state.layers, pending.entries):
            cache.tgt_k.append(k)
            cache.tgt_v.append(v)
            cache.target_sum = cache.target_sum + a
        state.n_target += 1
        state.target_inputs.append(pending.token)
        state.check()

    def forward_stream_step(self, state: "StreamState", token: int, segment: str):
        """Append one token. Target steps return ``(logits, cumulative allocation)``."""
        if segment == "source":
            self.stream_source(state, token)
            return None, None
        if segment != "target":
            raise ValueError(f"unknown segment {segment!r}")
        pending = self.stream_peek(state, token)
        self.stream_commit(state, pending)
        return pending.logits, pending.cumulative

    def decision_values(self, pending: "PendingTarget") -> np.ndarray:
        return pending.cumulative[-self.config.decision_layers:]


def decision_aggregate(cumulative: Sequence[float], delta: float) -> str:
    """WRITE iff strictly more than half of the layers exceed ``delta``."""
    values = np.asarray(cumulative, dtype=float)
    if values.size == 0:
        raise ValueError("no decision layers")
    return WRITE if 2 * int((values > delta).sum()) > values.size else READ


class _Growable:
    """Append-only buffer along axis ``axis`` with amortised doubling."""

    def __init__(self, inner_shape: tuple, axis: int, dtype):
        self.axis = axis
        shape = list(inner_shape)
        shape.insert(axis, 8)
        self.buf = np.zeros(shape, dtype=dtype)
        self.n = 0

    def append(self, row: np.ndarray) -> None:
        if self.n == self.buf.shape[self.axis]:
            self.buf = np.concatenate([self.buf, np.zeros_like(self.buf)], axis=self.axis)
        idx = [slice(None)] * self.buf.ndim
        idx[self.axis] = self.n
        self.buf[tuple(idx)] = row
        self.n += 1

    def view(self) -> np.ndarray:
        idx = [slice(None)] * self.buf.ndim
        idx[self.axis] = slice(0, self.n)
        return self.buf[tuple(idx)]

    def __len__(self) -> int:
        return self.n


class LayerCache:
    def __init__(self, heads: int, head_dim: int, dim: int, dtype):
        self.src_k = _Growable((heads, head_dim), 1, dtype)
        self.src_v = _Growable((heads, head_dim), 1, dtype)
        self.src_pool = _Growable((dim,), 0, dtype)   # pooled source prefix @ U_K
        self.source_sum = T.RunningMean(dim, dtype)
        self.tgt_k = _Growable((heads, head_dim), 1, dtype)
        self.tgt_v = _Growable((heads, head_dim), 1, dtype)
        self.target_sum = np.zeros(dim, dtype=dtype)


class StreamState:
    """Per-stream caches: source read so far, committed target positions."""

    def __init__(self, config: ModelConfig):
        dt = np.dtype(config.dtype)
        dh = config.model_dim // config.heads
        self.layers = [LayerCache(config.heads, dh, config.model_dim, dt)
                       for _ in range(config.layers)]
        self.m = 0
        self.n_target = 0
        self.target_inputs: list[int] = []
        self.score_counts = np.zeros(config.layers, dtype=np.int64)

    def count_scores(self, layer: int, n: int) -> None:
        self.score_counts[layer] += n

    def check(self) -> None:
        for cache in self.layers:
            if not (len(cache.src_k) == len(cache.src_v) == len(cache.src_pool)
                    == cache.source_sum.count == self.m):
                raise CacheConsistencyError("source cache length != tokens read")
            if not len(cache.tgt_k) == len(cache.tgt_v) == self.n_target:
                raise CacheConsistencyError("target cache length != tokens written")


@dataclass
class PendingTarget:
    token: int
    m: int
    position: int
    logits: np.ndarray
    cumulative: np.ndarray                 # sum_{j<=m} p per layer
    entries: list = field(repr=False)
