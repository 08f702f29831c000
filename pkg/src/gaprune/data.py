"""Triplet data: JSONL I/O, a synthetic two-domain corpus, k-means sampling.

The synthetic world is a set of concept tokens partitioned into clusters.
General and domain corpora draw from overlapping token sets; *polysemy*
tokens are shared tokens that the domain side files under a different
cluster than the general side, so the two corpora pull them in
different directions during training.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from gaprune.encoder import ParamRegistry, encode_texts
from gaprune.errors import ConfigError, EmptyDatasetError, ParseError

logger = logging.getLogger(__name__)

FILLERS = ("the", "of", "a", "and", "in", "to", "for", "on")


@dataclass(frozen=True)
class TripletRecord:
    query: str
    positive: str
    negative: str

    def __post_init__(self):
        for name in ("query", "positive", "negative"):
            v = getattr(self, name)
            if not isinstance(v, str) or not v.strip():
                raise ParseError(f"triplet field {name!r} must be non-empty text")

    def to_json(self) -> dict:
        return {"query": self.query, "pos": self.positive, "neg": self.negative}


def load_triplets(path: Path | str) -> list[TripletRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in ("query", "pos", "neg") if k not in obj]
            if missing:
                raise ParseError(f"{path}:{lineno}: missing key(s) {', '.join(missing)}")
            try:
                records.append(TripletRecord(obj["query"], obj["pos"], obj["neg"]))
            except ParseError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not records:
        raise EmptyDatasetError(f"{path}: no triplets")
    return records


def save_triplets(records: Iterable[TripletRecord], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


# --- synthetic concept world ----------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    kind: str
    size: int
    seed: int = 0
    overlap_ratio: float = 0.5
    polysemy_tokens: int = 8
    n_clusters: int = 12
    world_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("general", "domain"):
            raise ConfigError(f"corpus kind must be general or domain, got {self.kind!r}")
        if self.size < 1:
            raise ConfigError("corpus size must be >= 1")
        if not 0.0 <= self.overlap_ratio <= 1.0:
            raise ConfigError("overlap_ratio must lie in [0, 1]")
        if self.polysemy_tokens < 0 or self.n_clusters < 2:
            raise ConfigError("polysemy_tokens must be >= 0 and n_clusters >= 2")


@dataclass(frozen=True)
class ConceptSpace:
    """Token -> cluster assignment for both sides of the world."""

    vocab: int
    n_clusters: int
    shared: tuple[str, ...]
    polysemy: tuple[str, ...]
    clusters: dict = field(hash=False)  # kind -> list[list[str]]

    @classmethod
    def build(cls, vocab: int, overlap_ratio: float, polysemy_tokens: int, n_clusters: int,
              seed: int = 0) -> "ConceptSpace":
        n_shared = math.ceil(overlap_ratio * vocab)
        if polysemy_tokens > n_shared:
            raise ConfigError(f"polysemy_tokens={polysemy_tokens} exceeds the {n_shared} shared tokens")
        if vocab < 2 * n_clusters:
            raise ConfigError("vocab must provide at least two tokens per cluster")
        rng = np.random.default_rng(seed)
        shared = [f"s{i:04d}" for i in range(n_shared)]
        own = {"general": [f"g{i:04d}" for i in range(vocab - n_shared)],
               "domain": [f"d{i:04d}" for i in range(vocab - n_shared)]}
        # both sides agree on where non-polysemous shared tokens live
        shared_cluster = {t: int(c) for t, c in zip(shared, rng.permutation(vocab)[:n_shared] % n_clusters)}
        poly = [shared[i] for i in sorted(rng.choice(n_shared, polysemy_tokens, replace=False))] if polysemy_tokens else []
        moved = {t: (shared_cluster[t] + 1 + int(rng.integers(n_clusters - 1))) % n_clusters for t in poly}
        clusters = {}
        for kind in ("general", "domain"):
            groups: list[list[str]] = [[] for _ in range(n_clusters)]
            for t in shared:
                c = moved[t] if (kind == "domain" and t in moved) else shared_cluster[t]
                groups[c].append(t)
            # fill the sparsest clusters first so sizes stay balanced
            for t in own[kind]:
                c = min(range(n_clusters), key=lambda j: (len(groups[j]), j))
                groups[c].append(t)
            clusters[kind] = [sorted(g) for g in groups]
        return cls(vocab, n_clusters, tuple(shared), tuple(poly), clusters)

    def tokens(self, kind: str) -> set[str]:
        return {t for g in self.clusters[kind] for t in g}

    def cluster_of(self, kind: str) -> dict[str, int]:
        return {t: c for c, g in enumerate(self.clusters[kind]) for t in g}


def concept_tokens(text: str) -> set[str]:
    return {w for w in text.split() if w not in FILLERS}


def concept_distance(a: str, b: str) -> float:
    """1 - Jaccard overlap of concept-token sets."""
    sa, sb = concept_tokens(a), concept_tokens(b)
    union = sa | sb
    return 1.0 - (len(sa & sb) / len(union) if union else 0.0)


def _text(rng: np.random.Generator, tokens: Sequence[str]) -> str:
    words = list(tokens)
    for _ in range(int(rng.integers(0, 3))):
        words.insert(int(rng.integers(0, len(words) + 1)), FILLERS[int(rng.integers(len(FILLERS)))])
    return " ".join(words)


def _pick(rng: np.random.Generator, pool: Sequence[str], n: int, exclude: set[str] = frozenset()) -> list[str]:
    cand = [t for t in pool if t not in exclude]
    n = min(n, len(cand))
    return [cand[i] for i in rng.choice(len(cand), n, replace=False)]


def synth_corpus(spec: CorpusSpec, vocab: int = 96, space: ConceptSpace | None = None) -> list[TripletRecord]:
    """Deterministic triplets for one side of the world.

    Query and positive come from the same cluster and share at least one
    concept token; the negative comes from another cluster and shares none.
    """
    if space is None:
        space = ConceptSpace.build(vocab, spec.overlap_ratio, spec.polysemy_tokens, spec.n_clusters, spec.world_seed)
    groups = space.clusters[spec.kind]
    rng = np.random.default_rng([spec.seed, 0 if spec.kind == "general" else 1])
    out = []
    for _ in range(spec.size):
        c = int(rng.integers(space.n_clusters))
        q = _pick(rng, groups[c], 3)
        p = [q[int(rng.integers(len(q)))]] + _pick(rng, groups[c], 3, exclude=set(q))
        rng.shuffle(p)
        other = (c + 1 + int(rng.integers(space.n_clusters - 1))) % space.n_clusters
        n = _pick(rng, groups[other], 4, exclude=set(q))
        out.append(TripletRecord(_text(rng, q), _text(rng, p), _text(rng, n)))
    return out


@dataclass
class RetrievalTask:
    name: str
    queries: list[str]
    docs: list[str]
    relevant: list[int]  # index into docs for each query


@dataclass
class ClassificationTask:
    name: str
    train_texts: list[str]
    train_labels: list[int]
    test_texts: list[str]
    test_labels: list[int]


@dataclass
class STSTask:
    name: str
    left: list[str]
    right: list[str]
    gold: list[float]


@dataclass
class EvalSuite:
    retrieval: list[RetrievalTask]
    classification: list[ClassificationTask]
    sts: list[STSTask]

    def to_json(self) -> dict:
        return {"retrieval": [asdict(t) for t in self.retrieval],
                "classification": [asdict(t) for t in self.classification],
                "sts": [asdict(t) for t in self.sts]}

    @classmethod
    def from_json(cls, obj: dict) -> "EvalSuite":
        return cls([RetrievalTask(**t) for t in obj["retrieval"]],
                   [ClassificationTask(**t) for t in obj["classification"]],
                   [STSTask(**t) for t in obj["sts"]])


def synth_eval_suite(space: ConceptSpace, kind: str = "domain", seed: int = 1, n_queries: int = 120,
                     n_class: int = 240, n_sts: int = 160) -> EvalSuite:
    """Held-out tasks whose positives share a cluster but no tokens with the query.

    Because relevant pairs never overlap lexically, an untrained encoder sits
    near chance and scores reflect learned cluster structure.
    """
    groups = space.clusters[kind]
    k = space.n_clusters
    rng = np.random.default_rng([seed, 7])

    def retrieval(name: str, q_len: int) -> RetrievalTask:
        # one doc per cluster, so the relevant doc is the only same-topic doc
        docs = [_text(rng, _pick(rng, g, 3)) for g in groups]
        queries, rel = [], []
        for _ in range(n_queries):
            c = int(rng.integers(k))
            queries.append(_text(rng, _pick(rng, groups[c], q_len, exclude=concept_tokens(docs[c]))))
            rel.append(c)
        return RetrievalTask(name, queries, docs, rel)

    def classification(name: str, label_of) -> ClassificationTask:
        # stratified: every cluster puts half its texts in each split
        per = max(2, n_class // k)
        split = {"train": ([], []), "test": ([], [])}
        for c in range(k):
            texts = [_text(rng, _pick(rng, groups[c], 2)) for _ in range(per)]
            for i in rng.permutation(per):
                side = split["train" if i < per // 2 else "test"]
                side[0].append(texts[i])
                side[1].append(label_of(c))
        return ClassificationTask(name, *split["train"], *split["test"])

    def sts(name: str) -> STSTask:
        left, right, gold = [], [], []
        for _ in range(n_sts):
            c = int(rng.integers(k))
            a = _pick(rng, groups[c], 4)
            same = int(rng.integers(0, 5))
            b = _pick(rng, groups[c], same, exclude=set(a))
            while len(b) < 4:
                o = (c + 1 + int(rng.integers(k - 1))) % k
                b += _pick(rng, groups[o], 1, exclude=set(a) | set(b))
            rng.shuffle(b)
            left.append(_text(rng, a))
            right.append(_text(rng, b))
            gold.append(sum(1 for t in b if t in set(groups[c])) / 4.0)
        return STSTask(name, left, right, gold)

    return EvalSuite(
        retrieval=[retrieval("retr_query_doc", 3), retrieval("retr_short_query", 2)],
        classification=[classification("cls_topic", lambda c: c),
                        classification("cls_coarse", lambda c: c % max(2, k // 3))],
        sts=[sts("sts_graded")],
    )


# --- representative sampling ----------------------------------------------


@dataclass
class SampleSelection:
    indices: list[int]
    k: int
    iterations: int
    seed: int = 0

    def __post_init__(self):
        if len(self.indices) != self.k or len(set(self.indices)) != self.k:
            raise ValueError("selection must hold exactly k distinct indices")

    def to_json(self) -> dict:
        return {"k": self.k, "iterations": self.iterations, "seed": self.seed, "indices": list(self.indices)}

    @classmethod
    def from_json(cls, obj: dict) -> "SampleSelection":
        return cls([int(i) for i in obj["indices"]], int(obj["k"]), int(obj["iterations"]), int(obj.get("seed", 0)))


def _sq_dists(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = points - center
    return np.einsum("ij,ij->i", diff, diff)


def _all_sq_dists(points: np.ndarray, centroids: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = np.empty((len(points), len(centroids)))
    for s in range(0, len(centroids), chunk):
        diff = points[:, None, :] - centroids[None, s:s + chunk, :]
        out[:, s:s + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def lloyd(points: np.ndarray, k: int, iterations: int, seed: int) -> np.ndarray:
    """Exactly ``iterations`` Lloyd passes from k seeded distinct data points.

    Empty clusters keep their previous centroid; assignment ties go to the
    lowest centroid index.
    """
    rng = np.random.default_rng(seed)
    centroids = points[np.sort(rng.choice(len(points), k, replace=False))].copy()
    for _ in range(iterations):
        dist = _all_sq_dists(points, centroids)
        assign = dist.argmin(axis=1)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    return centroids


def kmeans_sample(embeddings: Sequence[np.ndarray] | np.ndarray, k: int, iterations: int = 20,
                  seed: int = 0) -> SampleSelection:
    """Pick the data point nearest each k-means centroid.

    Centroids are visited in index order; when a centroid's nearest point
    is already taken, the next-nearest unselected point is used instead.
    """
    points = np.asarray(embeddings, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    centroids = lloyd(points, k, iterations, seed)
    taken = np.zeros(n, dtype=bool)
    chosen = []
    for c in centroids:
        d = np.where(taken, np.inf, _sq_dists(points, c))
        j = int(np.argmin(d))
        taken[j] = True
        chosen.append(j)
    collisions = k - len({int(np.argmin(_sq_dists(points, c))) for c in centroids})
    if collisions:
        logger.debug("kmeans_sample: %d centroid collisions resolved by next-nearest", collisions)
    return SampleSelection(chosen, k, iterations, seed)


def embed_queries(registry: ParamRegistry, records: Sequence[TripletRecord]) -> np.ndarray:
    return encode_texts(registry, [r.query for r in records])
