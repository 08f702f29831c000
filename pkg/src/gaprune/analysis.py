"""Fisher/alignment statistics, importance scoring and top-k masks.

Scores and masks cover only the prunable tensors of a registry and are
always kept in registry order, so flattening is well defined.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from gaprune.artifacts import read_envelope, write_envelope
from gaprune.data import SampleSelection, TripletRecord, embed_queries, kmeans_sample
from gaprune.encoder import ParamRegistry
from gaprune.errors import ConfigError, DimensionError, IntegrityError, StateError
from gaprune.objective import (
    InfoNceConfig,
    TokTriplet,
    avg_batch_gradients,
    make_batches,
    per_triplet_gradients,
    tokenize_triplets,
)

logger = logging.getLogger(__name__)

METHODS = ("random", "magnitude", "fisher_gen", "fisher_dom", "dai")
SIDES = ("general", "domain")
GRANULARITIES = ("element", "row", "tensor")


@dataclass(frozen=True)
class DaiConfig:
    alpha: float = 0.2
    beta: float = 1.0
    gamma: float = 0.5
    epsilon: float = 1e-8
    alignment_granularity: str = "row"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("alpha, beta, gamma must be >= 0")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.alignment_granularity not in GRANULARITIES:
            raise ConfigError(f"alignment_granularity must be one of {GRANULARITIES}")


# --- statistics -----------------------------------------------------------


@dataclass
class GradStats:
    """Per-tensor diagonal Fisher and mean gradients for both sides."""

    names: list[str]
    shapes: dict[str, tuple[int, ...]]
    fisher: dict[str, dict[str, np.ndarray]] = field(default_factory=lambda: {s: {} for s in SIDES})
    mean_grad: dict[str, dict[str, np.ndarray]] = field(default_factory=lambda: {s: {} for s in SIDES})
    counts: dict[str, int] = field(default_factory=lambda: {s: 0 for s in SIDES})

    @classmethod
    def for_registry(cls, registry: ParamRegistry) -> "GradStats":
        ps = registry.prunable()
        return cls([e.name for e in ps], {e.name: e.value.shape for e in ps})

    def _check(self, arrays: Mapping[str, np.ndarray]) -> None:
        for n in self.names:
            if n not in arrays or arrays[n].shape != self.shapes[n]:
                raise DimensionError(f"statistic for {n} missing or mis-shaped")

    def set_fisher(self, side: str, fisher: Mapping[str, np.ndarray], n: int) -> None:
        self._check(fisher)
        self.fisher[side] = {k: np.asarray(fisher[k], dtype=np.float64) for k in self.names}
        self.counts[side] = int(n)

    def set_mean_grad(self, side: str, grads: Mapping[str, np.ndarray]) -> None:
        self._check(grads)
        self.mean_grad[side] = {k: np.asarray(grads[k], dtype=np.float64) for k in self.names}

    def has_fisher(self, side: str) -> bool:
        return len(self.fisher[side]) == len(self.names)

    def has_mean_grad(self, side: str) -> bool:
        return len(self.mean_grad[side]) == len(self.names)

    @property
    def fisher_gen(self):
        return self.fisher["general"]

    @property
    def fisher_dom(self):
        return self.fisher["domain"]

    @property
    def n_gen(self) -> int:
        return self.counts["general"]

    @property
    def n_dom(self) -> int:
        return self.counts["domain"]

    def save(self, path: Path | str, fingerprint: str) -> None:
        tensors, chunks, offset = [], [], 0
        for kind, table in (("fisher", self.fisher), ("mean_grad", self.mean_grad)):
            for side in SIDES:
                for name in self.names:
                    if name not in table[side]:
                        continue
                    raw = np.ascontiguousarray(table[side][name], dtype="<f8").tobytes()
                    tensors.append({"field": kind, "side": side, "name": name,
                                    "shape": list(self.shapes[name]), "offset": offset})
                    chunks.append(raw)
                    offset += len(raw)
        header = {"kind": "gradstats", "fingerprint": fingerprint, "names": self.names,
                  "counts": self.counts, "tensors": tensors}
        write_envelope(path, header, b"".join(chunks))

    @classmethod
    def load(cls, path: Path | str) -> tuple["GradStats", str]:
        header, payload = read_envelope(path)
        if header.get("kind") != "gradstats":
            raise IntegrityError(f"{path}: not a gradstats dump")
        shapes = {t["name"]: tuple(t["shape"]) for t in header["tensors"]}
        stats = cls(list(header["names"]), shapes)
        stats.counts = {s: int(header["counts"][s]) for s in SIDES}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, "<f8", n, t["offset"]).astype(np.float64).reshape(t["shape"])
            getattr(stats, t["field"])[t["side"]][t["name"]] = arr
        return stats, header["fingerprint"]


def fisher_from_gradients(per_sample: Iterable[Mapping[str, np.ndarray]]) -> tuple[dict[str, np.ndarray], int]:
    """Mean of squared per-sample gradients, accumulated in sample order."""
    acc: dict[str, np.ndarray] = {}
    n = 0
    for grads in per_sample:
        for k, g in grads.items():
            sq = g * g
            if k in acc:
                acc[k] += sq
            else:
                acc[k] = sq.copy()
        n += 1
    if n == 0:
        raise ValueError("Fisher estimate needs at least one sample")
    return {k: v / n for k, v in acc.items()}, n


def merge_fisher(shards: Sequence[tuple[Mapping[str, np.ndarray], int]]) -> tuple[dict[str, np.ndarray], int]:
    """Count-weighted average of shard estimates, merged in shard order."""
    total = sum(n for _, n in shards)
    if total == 0:
        raise ValueError("no samples in shards")
    out: dict[str, np.ndarray] = {}
    for f, n in shards:
        for k, v in f.items():
            out[k] = out[k] + v * n if k in out else v * n
    return {k: v / total for k, v in out.items()}, total


def estimate_fisher(registry: ParamRegistry, triplets: Sequence[TripletRecord] | Sequence[TokTriplet], side: str,
                    nce_config: InfoNceConfig, stats: Optional[GradStats] = None) -> GradStats:
    """Diagonal Fisher from per-triplet InfoNCE gradients (batch size 1)."""
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}")
    if not triplets:
        raise ValueError("estimate_fisher needs at least one triplet")
    toks = _as_tokens(registry, triplets)
    stats = stats if stats is not None else GradStats.for_registry(registry)
    fisher, n = fisher_from_gradients(per_triplet_gradients(registry, toks, nce_config, stats.names))
    stats.set_fisher(side, fisher, n)
    return stats


def estimate_mean_gradient(registry: ParamRegistry, triplets, side: str, nce_config: InfoNceConfig,
                           batch_size: int, stats: GradStats) -> GradStats:
    toks = _as_tokens(registry, triplets)
    stats.set_mean_grad(side, avg_batch_gradients(registry, make_batches(toks, batch_size), nce_config, stats.names))
    return stats


def _as_tokens(registry: ParamRegistry, triplets) -> list[TokTriplet]:
    if triplets and isinstance(triplets[0], TripletRecord):
        return tokenize_triplets(registry, triplets)
    return list(triplets)


# --- alignment and DAI ----------------------------------------------------


def _cosine(a: np.ndarray, b: np.ndarray, eps: float, axis) -> np.ndarray:
    dot = (a * b).sum(axis=axis, keepdims=True)
    na = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=axis, keepdims=True))
    return dot / (na * nb + eps)


def alignment_scores(stats: GradStats, config: DaiConfig) -> dict[str, np.ndarray]:
    """Cosine between general and domain mean gradients, broadcast per group.

    ``element`` treats each scalar as its own vector, ``row`` groups each
    output neuron's incoming weights, ``tensor`` uses the whole matrix.
    """
    if not (stats.has_mean_grad("general") and stats.has_mean_grad("domain")):
        raise StateError("alignment needs mean gradients on both sides")
    out = {}
    for name in stats.names:
        g, h = stats.mean_grad["general"][name], stats.mean_grad["domain"][name]
        gran = config.alignment_granularity
        if gran == "element":
            s = g * h / (np.abs(g) * np.abs(h) + config.epsilon)
        elif gran == "row":
            if g.ndim != 2:
                raise RuntimeError(f"row granularity needs a matrix, {name} has shape {g.shape}")
            s = np.broadcast_to(_cosine(g, h, config.epsilon, axis=1), g.shape)
        else:
            s = np.broadcast_to(_cosine(g, h, config.epsilon, axis=None), g.shape)
        # Cauchy-Schwarz bounds |s| < 1; clip guards the last ulp
        out[name] = np.clip(np.array(s, dtype=np.float64), -1.0, 1.0)
    return out


@dataclass
class ImportanceMap:
    method: str
    scores: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        for k, v in self.scores.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite scores in {k}")

    @property
    def names(self) -> list[str]:
        return list(self.scores)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.scores.values()])

    def save(self, path: Path | str, fingerprint: str) -> None:
        tensors, chunks, offset = [], [], 0
        for name, v in self.scores.items():
            raw = np.ascontiguousarray(v, dtype="<f8").tobytes()
            tensors.append({"name": name, "shape": list(v.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        header = {"kind": "scores", "method": self.method, "config": self.config,
                  "fingerprint": fingerprint, "tensors": tensors}
        write_envelope(path, header, b"".join(chunks))

    @classmethod
    def load(cls, path: Path | str) -> tuple["ImportanceMap", str]:
        header, payload = read_envelope(path)
        if header.get("kind") != "scores":
            raise IntegrityError(f"{path}: not a score dump")
        scores = {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"], dtype=np.int64))
            if t["offset"] + 8 * n > len(payload):
                raise IntegrityError(f"{path}: truncated payload")
            scores[t["name"]] = np.frombuffer(payload, "<f8", n, t["offset"]).astype(np.float64).reshape(t["shape"])
        return cls(header["method"], scores, header["config"]), header["fingerprint"]


def dai_scores(stats: GradStats, magnitudes: Mapping[str, np.ndarray], s_g: Mapping[str, np.ndarray],
               config: DaiConfig) -> ImportanceMap:
    """((F_dom - beta F_gen) |w| + gamma sqrt|w|) * (1 + alpha s_g), elementwise."""
    if not (stats.has_fisher("general") and stats.has_fisher("domain")):
        raise StateError("DAI needs Fisher estimates on both sides")
    out = {}
    for name in stats.names:
        fd, fg = stats.fisher_dom[name], stats.fisher_gen[name]
        w = np.abs(magnitudes[name])
        s = s_g[name]
        if not (fd.shape == fg.shape == w.shape == s.shape):
            raise DimensionError(f"{name}: inputs are not shape-aligned")
        out[name] = ((fd - config.beta * fg) * w + config.gamma * np.sqrt(w)) * (1.0 + config.alpha * s)
    return ImportanceMap("dai", out, dataclasses.asdict(config))


def baseline_scores(registry: ParamRegistry, stats: Optional[GradStats], method: str, seed: int = 0) -> ImportanceMap:
    if method == "random":
        rng = np.random.default_rng(seed)
        return ImportanceMap(method, {e.name: rng.random(e.value.shape) for e in registry.prunable()}, {"seed": seed})
    if method == "magnitude":
        return ImportanceMap(method, {e.name: np.abs(e.value) for e in registry.prunable()})
    if method in ("fisher_gen", "fisher_dom"):
        side = "general" if method == "fisher_gen" else "domain"
        if stats is None or not stats.has_fisher(side):
            raise StateError(f"{method} needs {side} Fisher statistics")
        return ImportanceMap(method, {e.name: stats.fisher[side][e.name] * np.abs(e.value)
                                      for e in registry.prunable()})
    raise ValueError(f"unknown baseline {method!r}")


# --- masks ----------------------------------------------------------------


def retained_count(sparsity: float, d: int) -> int:
    """floor((1 - s) * d), evaluated exactly on the decimal value of s."""
    return math.floor((1 - Fraction(repr(float(sparsity)))) * d)


@dataclass
class PruneMask:
    bits: dict[str, np.ndarray]
    target_sparsity: float
    k: int
    fingerprint: str
    method: str = ""

    @property
    def d(self) -> int:
        return sum(b.size for b in self.bits.values())

    def popcount(self) -> int:
        return int(sum(int(b.sum()) for b in self.bits.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([b.reshape(-1) for b in self.bits.values()])

    def save(self, path: Path | str) -> None:
        tensors, offset = [], 0
        for name, b in self.bits.items():
            tensors.append({"name": name, "shape": list(b.shape), "offset": offset})
            offset += b.size
        header = {"kind": "mask", "method": self.method, "target_sparsity": self.target_sparsity, "k": self.k,
                  "fingerprint": self.fingerprint, "tensors": tensors, "bit_order": "big"}
        write_envelope(path, header, np.packbits(self.flat().astype(np.uint8)).tobytes())

    @classmethod
    def load(cls, path: Path | str) -> "PruneMask":
        header, payload = read_envelope(path)
        if header.get("kind") != "mask":
            raise IntegrityError(f"{path}: not a mask")
        total = sum(int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"])
        flat = np.unpackbits(np.frombuffer(payload, np.uint8), count=total).astype(bool)
        bits = {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"], dtype=np.int64))
            bits[t["name"]] = flat[t["offset"]:t["offset"] + n].reshape(t["shape"])
        return cls(bits, header["target_sparsity"], header["k"], header["fingerprint"], header["method"])


def build_mask(scores: ImportanceMap, sparsity: float, fingerprint: str) -> PruneMask:
    """Keep the global top-k scores; equal scores favour earlier elements."""
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    flat = scores.flat()
    k = retained_count(sparsity, flat.size)
    order = np.argsort(-flat, kind="stable")
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:k]] = True
    bits, offset = {}, 0
    for name, v in scores.scores.items():
        bits[name] = keep[offset:offset + v.size].reshape(v.shape)
        offset += v.size
    return PruneMask(bits, float(sparsity), k, fingerprint, scores.method)


# --- end to end -----------------------------------------------------------


@dataclass(frozen=True)
class SamplingConfig:
    k: int = 256
    iterations: int = 20
    seed: int = 0
    grad_batch_size: int = 16

    def __post_init__(self):
        if self.k < 1 or self.iterations < 1 or self.grad_batch_size < 1:
            raise ConfigError("sampling.k, sampling.iterations and sampling.grad_batch_size must be >= 1")


@dataclass
class GAPruneResult:
    selection_gen: SampleSelection
    selection_dom: SampleSelection
    stats: GradStats
    alignment: dict[str, np.ndarray]
    scores: ImportanceMap
    mask: PruneMask


def select_calibration(registry: ParamRegistry, records: Sequence[TripletRecord],
                       sampling: SamplingConfig) -> SampleSelection:
    k = min(sampling.k, len(records))
    return kmeans_sample(embed_queries(registry, records), k, sampling.iterations, sampling.seed)


def analyze(registry: ParamRegistry, general: Sequence[TripletRecord], domain: Sequence[TripletRecord],
            nce_config: InfoNceConfig, batch_size: int = 16) -> GradStats:
    """Fisher and batch-averaged gradients on both calibration sets."""
    stats = GradStats.for_registry(registry)
    for side, records in (("general", general), ("domain", domain)):
        if not records:
            raise ValueError(f"{side} calibration set is empty")
        toks = tokenize_triplets(registry, records)
        estimate_fisher(registry, toks, side, nce_config, stats)
        estimate_mean_gradient(registry, toks, side, nce_config, batch_size, stats)
    return stats


def run_gaprune(registry: ParamRegistry, general_triplets: Sequence[TripletRecord],
                domain_triplets: Sequence[TripletRecord], dai_config: DaiConfig, sparsity: float,
                nce_config: InfoNceConfig = InfoNceConfig(), sampling: SamplingConfig = SamplingConfig()) -> GAPruneResult:
    """Sample, analyze, score and mask in one call."""
    if not general_triplets or not domain_triplets:
        raise ValueError("both calibration sets must be non-empty")
    sel_gen = select_calibration(registry, general_triplets, sampling)
    sel_dom = select_calibration(registry, domain_triplets, sampling)
    stats = analyze(registry, [general_triplets[i] for i in sel_gen.indices],
                    [domain_triplets[i] for i in sel_dom.indices], nce_config, sampling.grad_batch_size)
    s_g = alignment_scores(stats, dai_config)
    scores = dai_scores(stats, {e.name: e.value for e in registry.prunable()}, s_g, dai_config)
    mask = build_mask(scores, sparsity, registry.fingerprint())
    return GAPruneResult(sel_gen, sel_dom, stats, s_g, scores, mask)
