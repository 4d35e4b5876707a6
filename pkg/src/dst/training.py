"""Training objective, curriculum and the two-stage training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attention as A
from . import tensor as T
from .checkpoint import Checkpoint
from .model import DST, PRETRAIN, SSA, Batch, ForwardOutput, ModelConfig, make_batch
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

STAGE_PRETRAIN = "pretrain"
STAGE_FINETUNE = "finetune"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 5e-4
    warmup: int = 100
    warmup_init_lr: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    label_smoothing: float = 0.1
    use_sum: bool = True
    use_lat: bool = True
    use_con: bool = True
    curriculum: bool = True
    policy_warmup: int = 0
    seed: int = 1
    log_every: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            default = getattr(cls, f.name)
            if isinstance(default, bool) and isinstance(v, str):
                v = v.strip().lower() in ("1", "true", "yes", "on")
            kwargs[f.name] = type(default)(v)
        return cls(**kwargs)


@dataclass
class LossBreakdown:
    l_simt: float
    l_sum: float
    l_lat: float
    l_con: float
    total: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def cross_entropy(logits, targets, mask: np.ndarray | None = None,
                  label_smoothing: float = 0.0) -> Tensor:
    """Summed token negative log-likelihood, averaged over sentences.

    ``logits`` is ``[I, V]`` (one sentence) or ``[B, I, V]``.
    """
    logits = T.tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        targets = targets.reshape(1, -1)
        mask = None if mask is None else np.asarray(mask).reshape(1, -1)
    B, I, V = logits.shape
    if targets.min() < 0 or targets.max() >= V:
        raise ValueError("target id out of vocabulary")
    if mask is None:
        mask = np.ones((B, I), dtype=bool)
    logp = T.log_softmax(logits, axis=-1)
    weights = np.zeros(logits.shape, dtype=logits.data.dtype)
    np.put_along_axis(weights, targets[..., None], 1.0 - label_smoothing, axis=-1)
    weights += label_smoothing / V
    weights *= mask[..., None]
    return -(logp * weights).sum() * (1.0 / B)


def cost_matrix(I: int, J: int, epsilon: float) -> np.ndarray:
    """Distance of each (target, source-prefix) cell from the diagonal, minus a tolerance."""
    if I < 1 or J < 1:
        raise ValueError("I and J must be positive")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    i = np.arange(1, I + 1, dtype=float)[:, None]
    j = np.arange(1, J + 1, dtype=float)[None, :]
    return np.maximum(np.abs(j - i * J / I) - epsilon, 0.0) / max(I, J)


def batch_cost(batch: Batch, epsilon: float, dtype=np.float64) -> np.ndarray:
    B, I, J = batch.size, batch.tgt_in.shape[1], batch.src.shape[1]
    out = np.zeros((B, I, J), dtype=dtype)
    for b in range(B):
        ib, jb = batch.tgt_len[b], batch.src_len[b]
        out[b, :ib, :jb] = cost_matrix(ib, jb, epsilon)
    return out


def _real_cells(batch: Batch) -> np.ndarray:
    return batch.source_mask() & batch.target_mask()[:, :, None]


def summation_constraint(allocations: Sequence[Tensor], betas: Sequence[np.ndarray],
                         cells: np.ndarray) -> Tensor:
    """``sum_i |sum_j p[i,j] - beta_i|``, summed over layers, mean over the batch.

    ``cells`` marks real (target row, source token) pairs, ``[B, I, J]``.
    ``betas`` are constants: no gradient reaches the soft-attention scores.
    """
    rows = cells.any(axis=-1)
    B = cells.shape[0]
    total = None
    for p, beta in zip(allocations, betas):
        mass = T.where(cells, p, 0.0).sum(axis=-1)
        term = T.tabs(T.where(rows, mass - beta, 0.0)).sum()
        total = term if total is None else total + term
    return total * (1.0 / B)


def latency_constraint(allocations: Sequence[Tensor], cost: np.ndarray) -> Tensor:
    """``sum_ij p[i,j] C[i,j]`` summed over layers, mean over the batch.

    ``cost`` is zero outside real cells, so padding contributes nothing.
    """
    B = cost.shape[0]
    total = None
    for p in allocations:
        term = (p * cost).sum()
        total = term if total is None else total + term
    return total * (1.0 / B)


def consistency_constraint(allocations: Sequence[Tensor], cells: np.ndarray) -> Tensor:
    """Mean absolute deviation of each layer's allocation from the layer mean."""
    N = len(allocations)
    B = cells.shape[0]
    masked = [T.where(cells, p, 0.0) for p in allocations]
    mean = masked[0]
    for p in masked[1:]:
        mean = mean + p
    mean = mean * (1.0 / N)
    total = None
    for p in masked:
        term = T.tabs(p - mean).sum()
        total = term if total is None else total + term
    return total * (1.0 / (N * B))


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------

def curriculum_delta(update: float, T_const: float, delta_infer: float) -> float:
    """Training threshold decaying from 1 toward ``delta_infer``."""
    if update < 0 or T_const <= 0:
        raise ValueError("need update >= 0 and T > 0")
    return delta_infer + (1.0 - delta_infer) * math.exp(-update / T_const)


def prefix_mask(p_bar: np.ndarray, delta_train: float,
                src_len: np.ndarray | int | None = None) -> np.ndarray:
    """Shortest source prefix whose cumulative allocation exceeds ``delta_train``.

    ``p_bar`` is ``[I, J]`` or ``[B, I, J]``; returns 1-based bounds of the
    same leading shape. Rows that never exceed the threshold get the full
    (unpadded) source length.
    """
    p_bar = np.asarray(p_bar, dtype=float)
    squeeze = p_bar.ndim == 2
    if squeeze:
        p_bar = p_bar[None]
    B, I, J = p_bar.shape
    if src_len is None:
        src_len = np.full(B, J)
    src_len = np.broadcast_to(np.asarray(src_len), (B,))
    real = np.arange(J)[None, None, :] < src_len[:, None, None]
    over = (np.cumsum(np.where(real, p_bar, 0.0), axis=-1) > delta_train) & real
    first = np.where(over.any(axis=-1), over.argmax(axis=-1) + 1, src_len[:, None])
    return first[0] if squeeze else first


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    """Adam with linear warmup followed by inverse-square-root decay."""

    def __init__(self, params: Sequence[Parameter], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def lr(self, step: int | None = None) -> float:
        c = self.cfg
        step = self.step_count if step is None else step
        if step < c.warmup:
            return c.warmup_init_lr + (c.lr - c.warmup_init_lr) * step / c.warmup
        return c.lr * math.sqrt(c.warmup / step) if c.warmup else c.lr

    def clip(self) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params))
        if self.cfg.clip_norm > 0 and norm > self.cfg.clip_norm:
            scale = self.cfg.clip_norm / (norm + 1e-12)
            for p in self.params:
                p.grad *= scale
        return norm

    def step(self) -> None:
        c = self.cfg
        self.step_count += 1
        lr = self.lr()
        b1, b2 = c.beta1, c.beta2
        bc1 = 1 - b1 ** self.step_count
        bc2 = 1 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def decision_mean(out: ForwardOutput, decision_layers: int) -> np.ndarray:
    ps = [p.data for p in out.allocations[-decision_layers:]]
    return sum(ps) / len(ps)


def curriculum_bounds(model: DST, batch: Batch, delta_train: float) -> np.ndarray:
    """Per-row source bounds for the current threshold.

    Allocation in the upper layers depends on how much source the lower
    layers saw, so bounds are found by replaying streaming reads rather than
    from one full-source pass (whose allocations nothing constrains).
    """
    return model.replay_bounds(batch, delta_train)


@dataclass
class Objective:
    total: Tensor
    parts: LossBreakdown
    frac_sum_gt_1: float
    output: ForwardOutput


def source_masses(out: ForwardOutput, batch: Batch) -> list[np.ndarray]:
    """Soft-attention source mass per layer, ``[B, I]`` each."""
    causal = np.tril(np.ones((batch.tgt_in.shape[1],) * 2, dtype=bool))
    return [A.source_mass(rec.e_s, rec.e_t, batch.source_mask(), causal) for rec in out.layers]


def objective(model: DST, batch: Batch, stage: str, cfg: TrainConfig,
              bounds: np.ndarray | None = None,
              betas: Sequence[np.ndarray] | None = None) -> Objective:
    """Cross-entropy plus, in finetuning, the three allocation constraints.

    ``betas`` pins the per-layer source-mass targets; by default they are
    measured from this forward pass. Finite-difference checks pin them so
    the constant is not perturbed along with the parameters.
    """
    mc = model.config
    if stage == STAGE_PRETRAIN:
        out = model.forward(batch, PRETRAIN)
    else:
        out = model.forward(batch, SSA, bounds)
    l_simt = cross_entropy(out.logits, batch.tgt_out, batch.target_mask(), cfg.label_smoothing)
    if stage == STAGE_PRETRAIN:
        v = l_simt.item()
        return Objective(l_simt, LossBreakdown(v, 0.0, 0.0, 0.0, v), 0.0, out)

    cells = _real_cells(batch)
    ps = out.allocations
    terms = [l_simt]
    vals = {"l_sum": 0.0, "l_lat": 0.0, "l_con": 0.0}
    if cfg.use_sum:
        if betas is None:
            betas = source_masses(out, batch)
        t = summation_constraint(ps, betas, cells)
        terms.append(t)
        vals["l_sum"] = t.item()
    if cfg.use_lat:
        t = latency_constraint(ps, batch_cost(batch, mc.epsilon, ps[0].data.dtype))
        terms.append(t)
        vals["l_lat"] = t.item()
    if cfg.use_con:
        t = consistency_constraint(ps, cells)
        terms.append(t)
        vals["l_con"] = t.item()
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    l_simt_v = l_simt.item()
    parts = LossBreakdown(l_simt_v, vals["l_sum"], vals["l_lat"], vals["l_con"],
                          l_simt_v + vals["l_sum"] + vals["l_lat"] + vals["l_con"])
    rows = cells.any(axis=-1)
    over = 0
    for p in ps:
        over += int(((np.where(cells, p.data, 0.0).sum(-1) > 1.0) & rows).sum())
    frac = over / max(1, int(rows.sum()) * len(ps))
    return Objective(total, parts, frac, out)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def iterate_batches(pairs: Sequence, batch_size: int, rng: np.random.Generator):
    """Endless shuffled batches; lengths are bucketed inside pools of 8 batches."""
    n = len(pairs)
    while True:
        order = rng.permutation(n)
        pool = batch_size * 8
        for start in range(0, n, pool):
            chunk = sorted(order[start:start + pool], key=lambda k: len(pairs[k][0]))
            batches = [chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size)]
            for idx in rng.permutation(len(batches)):
                yield [pairs[k] for k in batches[idx]]


def _dump_bad_batch(path: Path | None, batch_pairs, parts) -> None:
    if path is None:
        return
    with open(path, "w") as f:
        json.dump({"pairs": [[list(map(int, s)), list(map(int, t))] for s, t in batch_pairs],
                   "loss": parts}, f)


def train_stage(model_config: ModelConfig, cfg: TrainConfig, pairs: Sequence,
                stage: str, init: Checkpoint | None = None,
                log_path: str | Path | None = None,
                callback: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run one training stage and return the final checkpoint plus the step log.

    ``pairs`` hold ``(source ids, target ids)``, both ending in ``</s>``.
    Finetuning starts from a pretrain checkpoint and restarts the update
    counter that drives the curriculum.
    """
    if stage not in (STAGE_PRETRAIN, STAGE_FINETUNE):
        raise ValueError(f"unknown stage {stage!r}")
    if not pairs:
        raise ValueError("empty corpus")
    if stage == STAGE_FINETUNE:
        if init is None or init.stage != STAGE_PRETRAIN:
            raise ValueError("finetuning needs a pretrain checkpoint")
        model = init.to_model(model_config)
    elif init is not None:
        model = init.to_model(model_config)
    else:
        model = DST(model_config)

    mc = model.config
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg)
    batches = iterate_batches(pairs, cfg.batch_size, rng)
    log_file = open(log_path, "w") if log_path else None
    dump_path = Path(log_path).with_suffix(".bad_batch.json") if log_path else None
    records = []
    try:
        for update in range(cfg.steps):
            chunk = next(batches)
            batch = make_batch(chunk)
            bounds = None
            delta_train = 1.0
            if stage == STAGE_FINETUNE:
                if cfg.curriculum:
                    delta_train = curriculum_delta(update, mc.T, mc.delta_infer)
                else:
                    delta_train = mc.delta_infer
                bounds = curriculum_bounds(model, batch, delta_train)
            opt.zero_grad()
            try:
                obj = objective(model, batch, stage, cfg, bounds)
            except T.NonFiniteError as err:
                _dump_bad_batch(dump_path, chunk, None)
                raise TrainingDivergedError(f"non-finite value at update {update}") from err
            if not math.isfinite(obj.parts.total):
                _dump_bad_batch(dump_path, chunk, obj.parts.to_dict())
                raise TrainingDivergedError(f"non-finite loss at update {update}")
            obj.total.backward()
            grad_norm = opt.clip()
            if not math.isfinite(grad_norm):
                _dump_bad_batch(dump_path, chunk, obj.parts.to_dict())
                raise TrainingDivergedError(f"non-finite gradient at update {update}")
            if stage == STAGE_FINETUNE and update < cfg.policy_warmup:
                for p in opt.params:
                    if p.name.endswith((".uq", ".uk")):
                        continue
                    p.grad[...] = 0.0
            opt.step()
            if not all(np.isfinite(p.data).all() for p in opt.params):
                _dump_bad_batch(dump_path, chunk, obj.parts.to_dict())
                raise TrainingDivergedError(f"non-finite parameters after update {update}")
            rec = {"update": update, "delta_train": delta_train, **obj.parts.to_dict(),
                   "grad_norm": grad_norm, "frac_rows_sum_p_gt_1": obj.frac_sum_gt_1}
            records.append(rec)
            if log_file and update % cfg.log_every == 0:
                log_file.write(json.dumps(rec) + "\n")
            if callback:
                callback(rec)
    finally:
        if log_file:
            log_file.close()
    ckpt = Checkpoint.from_model(model, stage=stage, update=cfg.steps)
    return ckpt, records
