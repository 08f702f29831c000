"""Run directory, stage graph and manifest bookkeeping.

A run directory holds every artifact of one experiment plus ``manifest.json``,
which records the materialized config, per-stage completion and the sha256 of
every artifact written.  A stage runs only when its prerequisites completed
under the current config and their artifacts still match their recorded
fingerprints.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from gaprune import __version__
from gaprune.analysis import (GradStats, ImportanceMap, PruneMask, alignment_scores, analyze,
                              baseline_scores, build_mask, dai_scores, retained_count, select_calibration)
from gaprune.artifacts import canonical_json, file_sha256, fnv1a64_hex, read_arrays, write_arrays
from gaprune.config import ExperimentConfig, build_config
from gaprune.data import (ConceptSpace, CorpusSpec, EvalSuite, SampleSelection, TripletRecord, load_triplets,
                          save_triplets, synth_corpus, synth_eval_suite)
from gaprune.encoder import apply_mask, init_encoder, load_checkpoint, save_checkpoint
from gaprune.errors import DependencyError, GAPruneError, IntegrityError
from gaprune.evalgeom import (EvalReport, GeometryReport, aggregate_report, delta_pct, eval_suite,
                              format_geometry_table, format_report_table, geometry_report,
                              layer_avg_importance, layer_probe_eval, method_correlation, rank_normalize)
from gaprune.objective import retrain_masked, train_dense, write_loss_trace

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class Stage:
    name: str
    requires: tuple[str, ...]
    config_keys: tuple[str, ...]  # "section" or "section.key" read by this stage
    soft: tuple[str, ...] = ()  # optional inputs: picked up when current


STAGES: dict[str, Stage] = {s.name: s for s in [
    Stage("synth", (), ("world", "data")),
    Stage("train-dense", ("synth",), ("encoder", "nce", "train")),
    Stage("sample", ("train-dense",), ("sampling",)),
    Stage("analyze", ("sample",), ("dai", "experiment.methods", "experiment.random_seed")),
    Stage("prune", ("analyze",), ("experiment.sparsities",)),
    Stage("retrain", ("prune",), ("retrain",)),
    Stage("eval", ("prune",), ("eval",), soft=("retrain",)),
    Stage("geom", ("prune",), ("geometry",)),
    Stage("correlate", ("analyze",), ()),
    Stage("layer-probe", ("analyze",), ()),
    Stage("report", ("eval",), ()),
]}
ORDER = tuple(STAGES)


def _upstream(name: str) -> list[str]:
    seen: list[str] = []
    stack = [name]
    while stack:
        for dep in STAGES[stack.pop()].requires:
            if dep not in seen:
                seen.append(dep)
                stack.append(dep)
    return seen


def _downstream(name: str) -> list[str]:
    return [s for s in ORDER if s != name and (name in _upstream(s) or
                                               any(name == x or name in _upstream(x) for x in STAGES[s].soft))]


def mask_tag(method: str, sparsity: float) -> str:
    return f"{method}_s{sparsity:g}"


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Run:
    """One experiment directory and its manifest."""

    def __init__(self, root: Path | str, config: ExperimentConfig, manifest: dict):
        self.root = Path(root)
        self.config = config
        self.manifest = manifest

    # --- manifest ---------------------------------------------------------

    @classmethod
    def open(cls, root: Path | str, config: Optional[ExperimentConfig] = None) -> "Run":
        """Open or create a run; a given config replaces the stored one."""
        root = Path(root)
        path = root / MANIFEST
        if path.exists():
            try:
                manifest = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise IntegrityError(f"{path}: corrupt manifest ({exc.msg})") from None
            if config is None:
                config = build_config(manifest["config"])
        else:
            manifest = {"stages": {}, "artifacts": {}}
            config = config if config is not None else build_config({})
        run = cls(root, config, manifest)
        run._sync_manifest()
        return run

    def _sync_manifest(self) -> None:
        cfg = self.config.to_dict()
        self.manifest.update({
            "run_id": fnv1a64_hex(canonical_json(cfg)),
            "tool_version": __version__,
            "config": cfg,
            "seeds": {f"{sec}.{k}": v for sec, d in cfg.items() for k, v in d.items() if k.endswith("seed")},
        })
        self.save_manifest()

    def save_manifest(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / MANIFEST).write_text(_json_text(self.manifest), encoding="utf-8")

    def stage_hash(self, name: str) -> str:
        """Fingerprint of the config this stage and all its prerequisites read."""
        cfg = self.config.to_dict()
        picked = {}
        for stage in [name, *_upstream(name)]:
            for key in STAGES[stage].config_keys:
                sec, _, field = key.partition(".")
                picked[key] = cfg[sec][field] if field else cfg[sec]
        return fnv1a64_hex(canonical_json(picked))

    def is_current(self, name: str) -> bool:
        rec = self.manifest["stages"].get(name)
        return bool(rec) and rec["config_hash"] == self.stage_hash(name)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def check_artifact(self, rel: str) -> Path:
        expected = self.manifest["artifacts"].get(rel)
        p = self.path(rel)
        if expected is None:
            raise IntegrityError(f"{rel} is not recorded in the manifest")
        if not p.exists():
            raise IntegrityError(f"{rel} is missing")
        if file_sha256(p) != expected:
            raise IntegrityError(f"{rel} fingerprint mismatch")
        return p

    def check_ready(self, name: str) -> None:
        for dep in STAGES[name].requires:
            if not self.is_current(dep):
                raise DependencyError(name, dep)
        for dep in _upstream(name):
            for rel in self.manifest["stages"][dep]["outputs"]:
                self.check_artifact(rel)

    # --- execution --------------------------------------------------------

    def run_stage(self, name: str) -> list[str]:
        if name not in STAGES:
            raise ValueError(f"unknown stage {name!r}")
        self.check_ready(name)
        logger.info("stage %s", name)
        outputs = STAGE_FUNCS[name](self)
        changed = False
        for rel in outputs:
            digest = file_sha256(self.path(rel))
            changed |= self.manifest["artifacts"].get(rel) != digest
            self.manifest["artifacts"][rel] = digest
        old = self.manifest["stages"].get(name)
        if old:
            for rel in set(old["outputs"]) - set(outputs):
                self.manifest["artifacts"].pop(rel, None)
        if changed or (old and old["config_hash"] != self.stage_hash(name)):
            for down in _downstream(name):
                self.manifest["stages"].pop(down, None)
        self.manifest["stages"][name] = {"config_hash": self.stage_hash(name), "outputs": sorted(outputs)}
        self.save_manifest()
        return outputs

    def run_all(self, stages: tuple[str, ...] = ORDER) -> None:
        for name in stages:
            self.run_stage(name)

    # --- typed loaders ----------------------------------------------------

    def triplets(self, rel: str) -> list[TripletRecord]:
        return load_triplets(self.check_artifact(rel))

    def suite(self) -> EvalSuite:
        return EvalSuite.from_json(json.loads(self.check_artifact("data/eval_suite.json").read_text(encoding="utf-8")))

    def dense(self):
        return load_checkpoint(self.check_artifact("models/dense.ckpt"))

    def stats(self, fingerprint: str) -> GradStats:
        stats, fp = GradStats.load(self.check_artifact("stats/grad_stats.bin"))
        if fp != fingerprint:
            raise IntegrityError("gradient statistics were computed for a different parameter layout")
        return stats

    def scores(self, method: str, fingerprint: str) -> ImportanceMap:
        m, fp = ImportanceMap.load(self.check_artifact(f"scores/{method}.bin"))
        if fp != fingerprint:
            raise IntegrityError(f"scores/{method}.bin belongs to a different parameter layout")
        return m

    def mask(self, method: str, sparsity: float, fingerprint: str) -> PruneMask:
        m = PruneMask.load(self.check_artifact(f"masks/{mask_tag(method, sparsity)}.bin"))
        if m.fingerprint != fingerprint:
            raise IntegrityError(f"mask {mask_tag(method, sparsity)} belongs to a different parameter layout")
        return m

    def cells(self) -> list[tuple[str, float]]:
        e = self.config.experiment
        return [(m, s) for s in e.sparsities for m in e.methods]

    def write_text(self, rel: str, text: str) -> str:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        return rel


# --- stages -----------------------------------------------------------------


def _world(cfg: ExperimentConfig) -> ConceptSpace:
    w = cfg.world
    return ConceptSpace.build(w.vocab, w.overlap_ratio, w.polysemy_tokens, w.n_clusters, w.seed)


def stage_synth(run: Run) -> list[str]:
    cfg = run.config
    space = _world(cfg)
    d = cfg.data
    sets = {
        "general_train": ("general", d.train_size, d.train_seed),
        "domain_train": ("domain", d.train_size, d.train_seed),
        "general_pool": ("general", d.pool_size, d.pool_seed),
        "domain_pool": ("domain", d.pool_size, d.pool_seed),
        "domain_geometry": ("domain", d.geometry_size, d.geometry_seed),
    }
    out = []
    for name, (kind, size, seed) in sets.items():
        rel = f"data/{name}.jsonl"
        save_triplets(synth_corpus(CorpusSpec(kind, size, seed=seed), space=space), run.path(rel))
        out.append(rel)
    suite = synth_eval_suite(space, "domain", d.eval_seed, d.eval_queries, d.eval_class, d.eval_sts)
    out.append(run.write_text("data/eval_suite.json", _json_text(suite.to_json())))
    world = {"vocab": space.vocab, "n_clusters": space.n_clusters, "shared": list(space.shared),
             "polysemy": list(space.polysemy), "clusters": space.clusters}
    out.append(run.write_text("data/world.json", _json_text(world)))
    return out


def stage_train_dense(run: Run) -> list[str]:
    cfg = run.config
    gen = run.triplets("data/general_train.jsonl")
    dom = run.triplets("data/domain_train.jsonl")
    # interleave so every batch sees both sides
    mix = [x for pair in zip(gen, dom) for x in pair] + gen[len(dom):] + dom[len(gen):]
    init = init_encoder(cfg.encoder)
    save_checkpoint(init, run.path("models/init.ckpt"))
    res = train_dense(init, mix, cfg.train, cfg.nce)
    save_checkpoint(res.registry, run.path("models/dense.ckpt"))
    write_loss_trace(res.losses, run.path("traces/dense_loss.csv"))
    return ["models/init.ckpt", "models/dense.ckpt", "traces/dense_loss.csv"]


def stage_sample(run: Run) -> list[str]:
    dense = run.dense()
    out = []
    for side in ("general", "domain"):
        sel = select_calibration(dense, run.triplets(f"data/{side}_pool.jsonl"), run.config.sampling)
        out.append(run.write_text(f"selection/{side}.json", _json_text(sel.to_json())))
    return out


def _selected(run: Run, side: str) -> list[TripletRecord]:
    pool = run.triplets(f"data/{side}_pool.jsonl")
    sel = SampleSelection.from_json(json.loads(run.check_artifact(f"selection/{side}.json").read_text(encoding="utf-8")))
    if max(sel.indices) >= len(pool):
        raise IntegrityError(f"selection/{side}.json indexes past the calibration pool")
    return [pool[i] for i in sel.indices]


def stage_analyze(run: Run) -> list[str]:
    cfg = run.config
    dense = run.dense()
    fp = dense.fingerprint()
    stats = analyze(dense, _selected(run, "general"), _selected(run, "domain"), cfg.nce, cfg.sampling.grad_batch_size)
    stats.save(run.path("stats/grad_stats.bin"), fp)
    s_g = alignment_scores(stats, cfg.dai)
    write_arrays(run.path("stats/alignment.bin"),
                 {"kind": "alignment", "fingerprint": fp, "granularity": cfg.dai.alignment_granularity}, s_g)
    out = ["stats/grad_stats.bin", "stats/alignment.bin"]
    for method in cfg.experiment.methods:
        if method == "dai":
            scores = dai_scores(stats, {e.name: e.value for e in dense.prunable()}, s_g, cfg.dai)
        else:
            scores = baseline_scores(dense, stats, method, cfg.experiment.random_seed)
        scores.save(run.path(f"scores/{method}.bin"), fp)
        out.append(f"scores/{method}.bin")
    return out


def stage_prune(run: Run) -> list[str]:
    dense = run.dense()
    fp = dense.fingerprint()
    out = []
    for method, s in run.cells():
        mask = build_mask(run.scores(method, fp), s, fp)
        rel = f"masks/{mask_tag(method, s)}.bin"
        mask.save(run.path(rel))
        out.append(rel)
    return out


def stage_retrain(run: Run) -> list[str]:
    cfg = run.config
    dense = run.dense()
    fp = dense.fingerprint()
    corpus = run.triplets("data/domain_train.jsonl")
    out = []
    for method, s in run.cells():
        mask = run.mask(method, s, fp)
        res = retrain_masked(apply_mask(dense, mask), mask, corpus, cfg.retrain, cfg.nce)
        tag = mask_tag(method, s)
        save_checkpoint(res.registry, run.path(f"models/retrain_{tag}.ckpt"))
        write_loss_trace(res.losses, run.path(f"traces/retrain_{tag}.csv"))
        out += [f"models/retrain_{tag}.ckpt", f"traces/retrain_{tag}.csv"]
    return out


def stage_eval(run: Run) -> list[str]:
    cfg = run.config
    suite = run.suite()
    dense = run.dense()
    fp = dense.fingerprint()
    k = cfg.eval.knn_k
    dense_rep = aggregate_report(eval_suite(dense, suite, k), name="dense", meta={"method": "dense"})
    oneshot, retrained = [], []
    with_retrain = run.is_current("retrain")
    for method, s in run.cells():
        tag = mask_tag(method, s)
        pruned = apply_mask(dense, run.mask(method, s, fp))
        meta = {"method": method, "sparsity": s}
        oneshot.append(aggregate_report(eval_suite(pruned, suite, k), dense_rep, tag,
                                        {**meta, "protocol": "one-shot"}))
        if with_retrain:
            reg = load_checkpoint(run.check_artifact(f"models/retrain_{tag}.ckpt"))
            retrained.append(aggregate_report(eval_suite(reg, suite, k), dense_rep, tag,
                                              {**meta, "protocol": "retrain", "steps": cfg.retrain.steps}))
    doc = {"dense": dense_rep.to_json(), "one_shot": [r.to_json() for r in oneshot],
           "retrain": [r.to_json() for r in retrained]}
    return [run.write_text("reports/eval.json", _json_text(doc))]


def stage_geom(run: Run) -> list[str]:
    g = run.config.geometry
    dense = run.dense()
    fp = dense.fingerprint()
    triplets = run.triplets("data/domain_geometry.jsonl")
    rows = [geometry_report("dense", dense, triplets, None, g.t, g.power, g.threshold, g.seed)]
    for method, s in run.cells():
        pruned = apply_mask(dense, run.mask(method, s, fp))
        rows.append(geometry_report(mask_tag(method, s), pruned, triplets, dense, g.t, g.power, g.threshold, g.seed))
    return [run.write_text("reports/geometry.json", _json_text([r.to_json() for r in rows])),
            run.write_text("reports/geometry.txt", format_geometry_table(rows))]


def _csv_text(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def stage_correlate(run: Run) -> list[str]:
    methods = run.config.experiment.methods
    fp = run.dense().fingerprint()
    corr = method_correlation([run.scores(m, fp) for m in methods])
    rows = [["method", *methods]] + [[m, *(repr(float(x)) for x in corr[i])] for i, m in enumerate(methods)]
    return [run.write_text("reports/correlation.csv", _csv_text(rows))]


def stage_layer_probe(run: Run) -> list[str]:
    methods = run.config.experiment.methods
    dense = run.dense()
    fp = dense.fingerprint()
    per_method = {}
    for m in methods:
        scores = run.scores(m, fp)
        ranks, off = {}, 0
        flat = rank_normalize(scores)
        for name, v in scores.scores.items():
            ranks[name] = flat[off:off + v.size].reshape(v.shape)
            off += v.size
        per_method[m] = layer_avg_importance(ImportanceMap(m, ranks), dense)
    probe = layer_probe_eval(dense, run.suite().retrieval)
    rows = [["layer", *(f"{m}_rank_importance" for m in methods), "retrieval_ndcg10"]]
    for layer in range(dense.config.num_layers):
        rows.append([layer, *(repr(per_method[m].get(layer, float("nan"))) for m in methods), repr(probe[layer])])
    return [run.write_text("reports/layers.csv", _csv_text(rows))]


def _report_from_json(d: dict) -> EvalReport:
    return EvalReport(**d)


def stage_report(run: Run) -> list[str]:
    doc = json.loads(run.check_artifact("reports/eval.json").read_text(encoding="utf-8"))
    dense = _report_from_json(doc["dense"])
    parts = [format_report_table([dense] + [_report_from_json(r) for r in doc["one_shot"]],
                                 "One-shot pruning")]
    if doc["retrain"]:
        steps = doc["retrain"][0]["meta"].get("steps")
        parts.append(format_report_table([dense] + [_report_from_json(r) for r in doc["retrain"]],
                                         f"Prune and retrain ({steps} steps)"))
    summary = {"dense_average": dense.average,
               "rows": [{"protocol": r["meta"]["protocol"], "method": r["meta"]["method"],
                         "sparsity": r["meta"]["sparsity"], "average": r["average"], "delta_pct": r["delta_pct"],
                         "groups": r["groups"]} for r in doc["one_shot"] + doc["retrain"]]}
    return [run.write_text("reports/report.json", _json_text(summary)),
            run.write_text("reports/report.txt", "\n".join(parts))]


STAGE_FUNCS: dict[str, Callable[[Run], list[str]]] = {
    "synth": stage_synth,
    "train-dense": stage_train_dense,
    "sample": stage_sample,
    "analyze": stage_analyze,
    "prune": stage_prune,
    "retrain": stage_retrain,
    "eval": stage_eval,
    "geom": stage_geom,
    "correlate": stage_correlate,
    "layer-probe": stage_layer_probe,
    "report": stage_report,
}


# --- verification -----------------------------------------------------------


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


def _guard(name: str, fn: Callable[[], tuple[bool, str]]) -> Check:
    try:
        ok, detail = fn()
    except (GAPruneError, OSError, ValueError, KeyError) as exc:
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return Check(name, ok, detail)


def verify_run(root: Path | str) -> list[Check]:
    """Re-check stored artifacts against the invariants they must satisfy."""
    run = Run.open(root)
    stages = run.manifest["stages"]
    checks = []

    def fingerprints():
        bad = []
        for rel in sorted(run.manifest["artifacts"]):
            try:
                run.check_artifact(rel)
            except IntegrityError as exc:
                bad.append(str(exc))
        return not bad, "; ".join(bad) or f"{len(run.manifest['artifacts'])} artifacts"
    checks.append(_guard("fingerprints", fingerprints))

    def dense_fp():
        return run.dense().fingerprint()

    if "prune" in stages:
        def cardinality():
            fp, bad = dense_fp(), []
            for method, s in run.cells():
                m = PruneMask.load(run.path(f"masks/{mask_tag(method, s)}.bin"))
                want = retained_count(s, m.d)
                if m.popcount() != want or m.k != want or m.fingerprint != fp:
                    bad.append(f"{mask_tag(method, s)} keeps {m.popcount()} of {m.d}, expected {want}")
            return not bad, "; ".join(bad) or f"{len(run.cells())} masks"
        checks.append(_guard("mask_cardinality", cardinality))

        def sparsity():
            dense, bad = run.dense(), []
            retrained = "retrain" in stages
            for method, s in run.cells():
                tag = mask_tag(method, s)
                m = PruneMask.load(run.path(f"masks/{tag}.bin"))
                regs = [("one-shot", apply_mask(dense, m))]
                if retrained:
                    regs.append(("retrain", load_checkpoint(run.path(f"models/retrain_{tag}.ckpt"))))
                for label, reg in regs:
                    for e in reg.prunable():
                        if np.any(e.value[~m.bits[e.name]] != 0.0):
                            bad.append(f"{tag} {label}: {e.name} has nonzero pruned weights")
            return not bad, "; ".join(bad)
        checks.append(_guard("sparsity", sparsity))

    if "analyze" in stages:
        def fisher():
            stats = run.stats(dense_fp())
            bad = [f"{side}:{n}" for side in stats.fisher for n, v in stats.fisher[side].items()
                   if not (np.all(np.isfinite(v)) and np.all(v >= 0))]
            return not bad, ", ".join(bad)
        checks.append(_guard("fisher_nonnegative", fisher))

        def alignment():
            header, s_g = read_arrays(run.path("stats/alignment.bin"), "alignment")
            worst = max(float(np.max(np.abs(v))) for v in s_g.values())
            return worst <= 1.0, f"max |s_g| = {worst:.6g}"
        checks.append(_guard("alignment_range", alignment))

    if "eval" in stages:
        def deltas():
            doc = json.loads(run.path("reports/eval.json").read_text(encoding="utf-8"))
            base = doc["dense"]["average"]
            bad = []
            for r in [doc["dense"]] + doc["one_shot"] + doc["retrain"]:
                avg = float(np.mean(list(r["groups"].values())))
                if abs(avg - r["average"]) > 1e-12:
                    bad.append(f"{r['name']}: average is not the mean of group averages")
                if r["delta_pct"] is not None and abs(delta_pct(r["average"], base) - r["delta_pct"]) > 1e-9:
                    bad.append(f"{r['name']}: delta% {r['delta_pct']} disagrees with its averages")
            return not bad, "; ".join(bad)
        checks.append(_guard("delta_arithmetic", deltas))
    return checks


def read_geometry(path: Path | str) -> list[GeometryReport]:
    return [GeometryReport(**d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
