"""InfoNCE objective, dense training and mask-respecting retraining."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterator, Optional, Sequence

import numpy as np

from gaprune import numcore as nc
from gaprune.data import TripletRecord
from gaprune.encoder import ParamRegistry, bind, forward, tokenize
from gaprune.errors import ConfigError, DimensionError, EmptyDatasetError, TrainingError

if TYPE_CHECKING:
    from gaprune.analysis import PruneMask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InfoNceConfig:
    # not fixed by the method; a conventional value for unit-norm embeddings
    temperature: float = 0.05
    in_batch_negatives: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("nce.temperature must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")


def infonce_loss(q: nc.Var, p: nc.Var, negs: Sequence[nc.Var], config: InfoNceConfig) -> nc.Var:
    """Mean InfoNCE over a batch of (query, positive, negatives) rows.

    Each argument is a [batch, dim] matrix of unit-norm embeddings.  Without
    in-batch negatives, row i competes only against its own negatives.
    """
    if not negs:
        raise DimensionError("infonce_loss needs at least one negative")
    shapes = {q.shape, p.shape, *(n.shape for n in negs)}
    if len(shapes) != 1 or q.value.ndim != 2:
        raise DimensionError(f"infonce_loss: embedding shapes differ: {sorted(shapes)}")
    b = q.shape[0]
    cands = nc.concat_rows([p, *negs])
    if config.in_batch_negatives:
        valid = np.ones((b, cands.shape[0]), dtype=bool)
    else:
        valid = np.zeros((b, cands.shape[0]), dtype=bool)
        for block in range(len(negs) + 1):
            valid[np.arange(b), block * b + np.arange(b)] = True
    return nc.info_nce(q, cands, np.arange(b), valid, config.temperature)


def infonce_value(q, p, negs, config: InfoNceConfig) -> float:
    """Loss for a single triplet given plain vectors."""
    tape = nc.Tape()
    row = lambda v: tape.variable(np.asarray(v, dtype=float).reshape(1, -1))
    return float(infonce_loss(row(q), row(p), [row(n) for n in negs], config).value)


# --- batched loss and gradients -------------------------------------------


TokTriplet = tuple[list[int], list[int], list[int]]


def tokenize_triplets(registry: ParamRegistry, records: Sequence[TripletRecord]) -> list[TokTriplet]:
    cfg = registry.config
    return [(tokenize(r.query, cfg), tokenize(r.positive, cfg), tokenize(r.negative, cfg)) for r in records]


def loss_and_grads(registry: ParamRegistry, batch: Sequence[TokTriplet], nce: InfoNceConfig,
                   names: Optional[Sequence[str]] = None) -> tuple[float, dict[str, np.ndarray]]:
    """Batch-mean loss and its gradient for the named tensors (all by default)."""
    if not batch:
        raise EmptyDatasetError("empty batch")
    tape = nc.Tape()
    params = bind(registry, tape)
    b = len(batch)
    seqs = [t[0] for t in batch] + [t[1] for t in batch] + [t[2] for t in batch]
    emb, _ = forward(params, registry.config, seqs)
    q = nc.gather_rows(emb, range(b))
    p = nc.gather_rows(emb, range(b, 2 * b))
    n = nc.gather_rows(emb, range(2 * b, 3 * b))
    loss = infonce_loss(q, p, [n], nce)
    names = list(names) if names is not None else [e.name for e in registry.entries]
    grads = tape.backward(loss, [params[k] for k in names])
    return float(loss.value), dict(zip(names, grads))


def per_triplet_gradients(registry: ParamRegistry, batch: Sequence[TokTriplet], nce: InfoNceConfig,
                          names: Sequence[str]) -> Iterator[dict[str, np.ndarray]]:
    for t in batch:
        yield loss_and_grads(registry, [t], nce, names)[1]


def avg_batch_gradients(registry: ParamRegistry, batches: Sequence[Sequence[TokTriplet]], nce: InfoNceConfig,
                        names: Optional[Sequence[str]] = None) -> dict[str, np.ndarray]:
    """Arithmetic mean over batches of each batch's mean-loss gradient."""
    if not batches:
        raise ValueError("avg_batch_gradients needs at least one batch")
    total: dict[str, np.ndarray] = {}
    for batch in batches:
        _, g = loss_and_grads(registry, batch, nce, names)
        for k, v in g.items():
            if k in total:
                total[k] += v
            else:
                total[k] = v.copy()
    return {k: v / len(batches) for k, v in total.items()}


def make_batches(items: Sequence, batch_size: int) -> list[list]:
    return [list(items[i:i + batch_size]) for i in range(0, len(items), batch_size)]


# --- training -------------------------------------------------------------


@dataclass
class TrainResult:
    registry: ParamRegistry
    losses: list[float]

    def save_trace(self, path: Path | str) -> None:
        write_loss_trace(self.losses, path)


def write_loss_trace(losses: Sequence[float], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])


StepHook = Callable[[int, ParamRegistry], None]


def batch_schedule(n: int, steps: int, batch_size: int, seed: int) -> list[np.ndarray]:
    """Seeded epoch-wise shuffles cut into ``steps`` batches."""
    rng = np.random.default_rng(seed)
    order: list[int] = []
    out = []
    for _ in range(steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(n).tolist())
        out.append(np.array(order[:batch_size]))
        del order[:batch_size]
    return out


def _train(registry: ParamRegistry, corpus: Sequence[TripletRecord], cfg: TrainConfig, nce: InfoNceConfig,
           bits: Optional[dict[str, np.ndarray]], on_step: Optional[StepHook] = None) -> TrainResult:
    if not corpus:
        raise EmptyDatasetError("training corpus is empty")
    toks = tokenize_triplets(registry, corpus)
    values = {k: v.copy() for k, v in registry.values().items()}
    m = {k: np.zeros_like(v) for k, v in values.items()}
    v2 = {k: np.zeros_like(v) for k, v in values.items()}
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    losses = []
    current = registry.with_values(values)
    for step, idx in enumerate(batch_schedule(len(toks), cfg.steps, cfg.batch_size, cfg.seed), start=1):
        loss, grads = loss_and_grads(current, [toks[i] for i in idx], nce)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {step}")
        losses.append(loss)
        c1 = 1.0 - b1 ** step
        c2 = 1.0 - b2 ** step
        for k, g in grads.items():
            keep = bits.get(k) if bits is not None else None
            if keep is not None:
                g = np.where(keep, g, 0.0)
                m[k] = np.where(keep, m[k], 0.0)
                v2[k] = np.where(keep, v2[k], 0.0)
            m[k] = b1 * m[k] + (1.0 - b1) * g
            v2[k] = b2 * v2[k] + (1.0 - b2) * g * g
            values[k] = values[k] - cfg.learning_rate * (m[k] / c1) / (np.sqrt(v2[k] / c2) + cfg.adam_eps)
            if keep is not None:
                values[k] = np.where(keep, values[k], 0.0)
        current = registry.with_values(values)
        if on_step is not None:
            on_step(step, current)
        if step % 50 == 0:
            logger.info("step %d loss %.4f", step, loss)
    return TrainResult(current, losses)


def train_dense(registry: ParamRegistry, corpus: Sequence[TripletRecord], train_config: TrainConfig,
                nce_config: InfoNceConfig, on_step: Optional[StepHook] = None) -> TrainResult:
    """Adam on every parameter; deterministic for a fixed seed.

    ``on_step(step, registry)`` sees the parameters after every update.
    """
    return _train(registry, corpus, train_config, nce_config, None, on_step)


def retrain_masked(registry: ParamRegistry, mask: "PruneMask", corpus: Sequence[TripletRecord],
                   train_config: TrainConfig, nce_config: InfoNceConfig,
                   on_step: Optional[StepHook] = None) -> TrainResult:
    """Adam with gradients and optimizer moments zeroed at dropped positions.

    The mask must already be applied, so pruned weights start at 0 and stay there.
    """
    bits = mask.bits
    for e in registry.prunable():
        if np.any(e.value[~bits[e.name]] != 0.0):
            raise ValueError(f"mask not applied to {e.name}: pruned positions are nonzero")
    return _train(registry, corpus, train_config, nce_config, bits, on_step)
