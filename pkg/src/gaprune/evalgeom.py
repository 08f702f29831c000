"""Task metrics, report aggregation, embedding geometry and score analyses."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from gaprune.analysis import ImportanceMap
from gaprune.data import ClassificationTask, EvalSuite, RetrievalTask, STSTask, TripletRecord
from gaprune.encoder import ParamRegistry, encode_texts
from gaprune.errors import IntegrityError, ReportError, SplitError, UndefinedMetricError

logger = logging.getLogger(__name__)

GROUPS = ("retrieval", "classification", "sts")
MAX_EXACT_PAIRS_N = 1024


# --- task metrics ---------------------------------------------------------


def ndcg_at_10(ranked_ids: Sequence, relevant_ids) -> float:
    """Binary-relevance nDCG over the first 10 ranked ids."""
    relevant = set(relevant_ids)
    if not relevant:
        raise UndefinedMetricError("nDCG@10 is undefined without relevant ids")
    dcg = sum(1.0 / math.log2(i + 2) for i, doc in enumerate(list(ranked_ids)[:10]) if doc in relevant)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(10, len(relevant))))
    return dcg / idcg


def _rank_by_cosine(queries: np.ndarray, docs: np.ndarray) -> np.ndarray:
    sims = queries @ docs.T
    # stable sort: equal similarities keep pool order
    return np.argsort(-sims, axis=1, kind="stable")


def eval_retrieval(registry: ParamRegistry, queries: Sequence[str], docs: Sequence[str],
                   relevant: Sequence[int], layer: Optional[int] = None) -> float:
    """Mean nDCG@10 of cosine ranking over the doc pool."""
    if not queries:
        raise UndefinedMetricError("no queries")
    q = encode_texts(registry, queries, layer)
    d = encode_texts(registry, docs, layer)
    ranking = _rank_by_cosine(q, d)
    scores = [ndcg_at_10(ranking[i, :10], [relevant[i]]) for i in range(len(queries))]
    return float(np.mean(scores))


def knn_predict(train: np.ndarray, labels: Sequence[int], test: np.ndarray, k: int) -> list[int]:
    """Majority vote of the k cosine-nearest train points.

    Ties between classes go to the class of the nearest single neighbour
    among the tied classes.
    """
    labels = np.asarray(labels)
    order = _rank_by_cosine(test, train)[:, :k]
    preds = []
    for row in order:
        votes: dict[int, int] = {}
        for j in row:
            votes[int(labels[j])] = votes.get(int(labels[j]), 0) + 1
        best = max(votes.values())
        tied = {c for c, v in votes.items() if v == best}
        preds.append(next(int(labels[j]) for j in row if int(labels[j]) in tied))
    return preds


def eval_classification(registry: ParamRegistry, train_texts: Sequence[str], train_labels: Sequence[int],
                        test_texts: Sequence[str], test_labels: Sequence[int], k: int = 5,
                        layer: Optional[int] = None) -> float:
    classes = set(train_labels)
    if len(classes) < 2:
        raise SplitError("classification needs at least two classes in the train split")
    if len(train_texts) < k:
        raise SplitError(f"need at least k={k} train points")
    missing = set(test_labels) - classes
    if missing:
        raise SplitError(f"test classes absent from train split: {sorted(missing)}")
    tr = encode_texts(registry, train_texts, layer)
    te = encode_texts(registry, test_texts, layer)
    preds = knn_predict(tr, train_labels, te, k)
    return float(np.mean([p == t for p, t in zip(preds, test_labels)]))


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("pearson needs two equal-length inputs of length >= 2")
    da, db = a - a.mean(), b - b.mean()
    na, nb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if na == 0 or nb == 0:
        raise UndefinedMetricError("correlation undefined for constant input")
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def spearman(scores_pred: Sequence[float], scores_gold: Sequence[float]) -> float:
    """Pearson correlation of average-tie ranks."""
    if len(scores_pred) != len(scores_gold) or len(scores_pred) < 2:
        raise ValueError("spearman needs two equal-length inputs of length >= 2")
    return pearson(rankdata(scores_pred), rankdata(scores_gold))


def eval_sts(registry: ParamRegistry, left: Sequence[str], right: Sequence[str], gold: Sequence[float],
             layer: Optional[int] = None) -> float:
    a = encode_texts(registry, left, layer)
    b = encode_texts(registry, right, layer)
    return spearman(np.einsum("ij,ij->i", a, b), gold)


@dataclass
class TaskScore:
    name: str
    group: str
    score: float


def eval_suite(registry: ParamRegistry, suite: EvalSuite, knn_k: int = 5) -> list[TaskScore]:
    out = []
    for t in suite.retrieval:
        out.append(TaskScore(t.name, "retrieval", eval_retrieval(registry, t.queries, t.docs, t.relevant)))
    for t in suite.classification:
        out.append(TaskScore(t.name, "classification", eval_classification(
            registry, t.train_texts, t.train_labels, t.test_texts, t.test_labels, knn_k)))
    for t in suite.sts:
        out.append(TaskScore(t.name, "sts", eval_sts(registry, t.left, t.right, t.gold)))
    return out


# --- reports --------------------------------------------------------------


def delta_pct(avg: float, dense_avg: float) -> float:
    return 100.0 * (avg - dense_avg) / dense_avg


@dataclass
class EvalReport:
    name: str
    tasks: dict[str, float]
    groups: dict[str, float]
    average: float
    delta_pct: Optional[float] = None
    reference: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def aggregate_report(task_scores: Sequence[TaskScore], dense_reference: Optional[EvalReport] = None,
                     name: str = "", meta: Optional[dict] = None) -> EvalReport:
    """Group means, their unweighted mean, and percent change versus dense."""
    if not task_scores:
        raise ReportError("no task scores")
    tasks = {t.name: float(t.score) for t in task_scores}
    groups = {}
    for g in GROUPS:
        vals = [t.score for t in task_scores if t.group == g]
        if vals:
            groups[g] = float(np.mean(vals))
    average = float(np.mean(list(groups.values())))
    report = EvalReport(name, tasks, groups, average, meta=dict(meta or {}))
    if dense_reference is not None:
        if set(dense_reference.tasks) != set(tasks):
            raise ReportError("task sets differ from the dense reference")
        report.delta_pct = delta_pct(average, dense_reference.average)
        report.reference = dense_reference.name
    return report


def format_report_table(rows: Sequence[EvalReport], title: str = "") -> str:
    """Aligned plain-text table: one row per report, best non-dense value starred."""
    header = ["Method", "Sparsity", "Retr.", "Cla.", "STS", "Avg.", "Delta%"]
    body = []
    for r in rows:
        sp = r.meta.get("sparsity")
        body.append([
            r.meta.get("method", r.name),
            "--" if sp is None else f"{round(100 * sp)}%",
            *(f"{r.groups[g]:.4f}" if g in r.groups else "--" for g in GROUPS),
            f"{r.average:.4f}",
            "--" if r.delta_pct is None else f"{r.delta_pct:+.2f}%",
        ])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = ([title] if title else []) + [fmt(header), fmt(["-" * w for w in widths])]
    lines += [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


# --- geometry -------------------------------------------------------------


def _pair_sample(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    m = MAX_EXACT_PAIRS_N * MAX_EXACT_PAIRS_N
    i = rng.integers(0, n, m)
    j = (i + rng.integers(1, n, m)) % n
    return i, j


def uniformity_loss(embeddings, t: float = 2.0, seed: int = 0) -> float:
    """log E_{i != j} exp(-t ||z_i - z_j||^2)."""
    z = np.asarray(embeddings, dtype=np.float64)
    n = len(z)
    if n < 2:
        raise ValueError("uniformity needs at least two embeddings")
    if n <= MAX_EXACT_PAIRS_N:
        # direct differences, so coincident points give exactly zero distance
        vals = np.concatenate([
            -t * np.einsum("ij,ij->i", z[i] - np.delete(z, i, axis=0), z[i] - np.delete(z, i, axis=0))
            for i in range(n)
        ])
    else:
        i, j = _pair_sample(n, seed)
        diff = z[i] - z[j]
        vals = -t * np.einsum("ij,ij->i", diff, diff)
    return float(min(logsumexp(vals) - math.log(vals.size), 0.0))


def alignment_loss(q_embs, p_embs, power: float = 2.0) -> float:
    q = np.asarray(q_embs, dtype=np.float64)
    p = np.asarray(p_embs, dtype=np.float64)
    if q.shape != p.shape:
        raise ValueError(f"alignment needs paired embeddings, got {q.shape} and {p.shape}")
    return float(np.mean(np.linalg.norm(q - p, axis=1) ** power))


def cross_dim_corr(q_embs, p_embs, return_skipped: bool = False):
    """Mean |Pearson| between matching dimensions of queries and positives.

    Dimensions with zero variance on either side are skipped.
    """
    q = np.asarray(q_embs, dtype=np.float64)
    p = np.asarray(p_embs, dtype=np.float64)
    if q.shape != p.shape or len(q) < 2:
        raise ValueError("cross_dim_corr needs >= 2 paired embeddings")
    qc, pc = q - q.mean(axis=0), p - p.mean(axis=0)
    nq, npn = np.sqrt((qc * qc).sum(axis=0)), np.sqrt((pc * pc).sum(axis=0))
    ok = (nq > 0) & (npn > 0)
    skipped = int((~ok).sum())
    if not ok.any():
        raise UndefinedMetricError("every dimension has zero variance")
    if skipped:
        logger.warning("cross_dim_corr: skipped %d zero-variance dimensions", skipped)
    corr = np.abs((qc[:, ok] * pc[:, ok]).sum(axis=0) / (nq[ok] * npn[ok]))
    value = float(np.clip(corr.mean(), 0.0, 1.0))
    return (value, skipped) if return_skipped else value


def effective_dim(embeddings, threshold: float = 0.95) -> int:
    """Fewest top-variance dimensions holding ``threshold`` of total variance."""
    z = np.asarray(embeddings, dtype=np.float64)
    if len(z) < 2:
        raise ValueError("effective_dim needs at least two embeddings")
    var = np.sort(z.var(axis=0))[::-1]
    total = var.sum()
    if total <= 0:
        raise UndefinedMetricError("total variance is zero")
    share = np.cumsum(var) / total
    # 1e-12 absorbs summation rounding at exact-share boundaries
    return int(np.argmax(share >= threshold - 1e-12)) + 1


def cosine_to_dense(pruned_embs, dense_embs) -> float:
    a = np.asarray(pruned_embs, dtype=np.float64)
    b = np.asarray(dense_embs, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cosine_to_dense needs paired embeddings, got {a.shape} and {b.shape}")
    cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return float(np.clip(cos.mean(), -1.0, 1.0))


@dataclass
class GeometryReport:
    name: str
    uniformity_loss: float
    alignment_loss: float
    cross_dim_corr: float
    effective_dim: int
    cosine_to_dense: Optional[float]
    sample_size: int
    embed_dim: int
    skipped_dims: int = 0
    t: float = 2.0
    power: float = 2.0
    threshold: float = 0.95

    def to_json(self) -> dict:
        return asdict(self)


def geometry_report(name: str, registry: ParamRegistry, triplets: Sequence[TripletRecord],
                    dense: Optional[ParamRegistry] = None, t: float = 2.0, power: float = 2.0,
                    threshold: float = 0.95, seed: int = 0) -> GeometryReport:
    q = encode_texts(registry, [r.query for r in triplets])
    p = encode_texts(registry, [r.positive for r in triplets])
    cdc, skipped = cross_dim_corr(q, p, return_skipped=True)
    cos = None if dense is None else cosine_to_dense(q, encode_texts(dense, [r.query for r in triplets]))
    return GeometryReport(name, uniformity_loss(q, t, seed), alignment_loss(q, p, power), cdc,
                          effective_dim(q, threshold), cos, len(triplets), registry.config.embed_dim,
                          skipped, t, power, threshold)


def format_geometry_table(rows: Sequence[GeometryReport]) -> str:
    header = ["Model", "Uniformity", "Alignment", "CrossDimCorr", "CosineSim", "EffectiveDim"]
    body = [[r.name, f"{r.uniformity_loss:.4f}", f"{r.alignment_loss:.4f}", f"{r.cross_dim_corr:.4f}",
             "--" if r.cosine_to_dense is None else f"{r.cosine_to_dense:.4f}",
             f"{r.effective_dim}/{r.embed_dim}"] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]) + "\n"


# --- score analyses -------------------------------------------------------


def rank_normalize(scores: ImportanceMap | np.ndarray) -> np.ndarray:
    """Average-tie ascending ranks scaled to [0, 1]."""
    flat = scores.flat() if isinstance(scores, ImportanceMap) else np.asarray(scores, dtype=np.float64).reshape(-1)
    d = flat.size
    if d < 2:
        raise ValueError("rank normalization needs at least two scores")
    return (rankdata(flat, method="average") - 1.0) / (d - 1)


def method_correlation(maps: Sequence[ImportanceMap]) -> np.ndarray:
    """Pearson matrix of rank-normalized scores; symmetric with unit diagonal."""
    layout = [(n, v.shape) for n, v in maps[0].scores.items()]
    for m in maps[1:]:
        if [(n, v.shape) for n, v in m.scores.items()] != layout:
            raise IntegrityError(f"{m.method} covers a different element set than {maps[0].method}")
    ranks = [rank_normalize(m) for m in maps]
    k = len(maps)
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = pearson(ranks[i], ranks[j])
    return out


def layer_avg_importance(scores: ImportanceMap, registry: ParamRegistry) -> dict[int, float]:
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for e in registry.prunable():
        v = scores.scores[e.name]
        sums[e.layer_index] = sums.get(e.layer_index, 0.0) + float(v.sum())
        counts[e.layer_index] = counts.get(e.layer_index, 0) + v.size
    return {layer: sums[layer] / counts[layer] for layer in sorted(sums)}


def layer_probe_eval(registry: ParamRegistry, tasks: Sequence[RetrievalTask]) -> list[float]:
    """Mean retrieval nDCG@10 using each block's pooled hidden state."""
    out = []
    for layer in range(registry.config.num_layers):
        out.append(float(np.mean([eval_retrieval(registry, t.queries, t.docs, t.relevant, layer) for t in tasks])))
    return out
