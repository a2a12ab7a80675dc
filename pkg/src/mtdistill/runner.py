"""Experiment orchestration: data, noise, teachers, distillation rounds, label improvement, reports."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bilevel, cleanselect, labelimprove, noise, student, teachers
from .config import RunConfig, with_param
from .graphdata import Graph, LabelState, generate_sbm, load_graph, make_splits
from .optim import Adam

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["seed", "round", "window", "lower_loss", "upper_loss", "upper_loss_after",
                  "val_acc", "weights"]
ROUND_FIELDS = ["seed", "round", "supervising", "label_precision", "clean_size", "clean_precision",
                "removed", "removed_corrupted", "added", "added_correct", "best_val"]
AUDIT_FIELDS = ["seed", "round", "node", "action", "label", "true_label", "correct"]


@dataclass
class SeedResult:
    seed: int
    test_acc: float | None = None
    val_acc: float | None = None
    error: str | None = None
    history: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    audit: list = field(default_factory=list)
    weights: np.ndarray | None = None


@dataclass
class RunReport:
    mode: str
    seeds: list
    results: list
    wall_time: float = 0.0

    @property
    def accuracies(self) -> list:
        return [r.test_acc for r in self.results if r.test_acc is not None]

    @property
    def mean(self) -> float:
        acc = self.accuracies
        return float(np.mean(acc)) if acc else float("nan")

    @property
    def std(self) -> float:
        acc = self.accuracies
        return float(np.std(acc)) if acc else float("nan")

    @property
    def failed(self) -> list:
        return [r for r in self.results if r.error is not None]


def build_dataset(config: RunConfig, seed: int):
    ds = config.dataset
    if ds.kind == "files":
        return load_graph(ds.edges, ds.features, ds.labels, ds.num_classes)
    return generate_sbm(ds.n, ds.c, ds.p_intra, ds.p_inter, ds.d, ds.feature_noise, seed)


def train_gcn_baseline(graph: Graph, labels: LabelState, config: RunConfig, seed: int, val):
    """Plain student on the (noisy) labels: Adam, dropout, weight decay, early stopping on val accuracy."""
    bc = config.baseline
    params = student.init_params(graph.d, config.student.h, labels.c, seed, config.student.dropout)
    target = labels.one_hot()
    mask = labels.supervising_mask()
    opt = Adam([params.W0, params.W1], lr=bc.lr, weight_decay=bc.weight_decay)
    rng = np.random.default_rng(seed)
    val_mask, val_labels = val
    best_acc, best, stale = -1.0, params.copy(), 0
    for _ in range(bc.epochs):
        drop = student.dropout_mask(graph.n, params.h, params.dropout, rng.integers(2**32))
        _, grads = student.loss_and_grads(params, graph, target, mask, drop)
        opt.step(list(grads))
        pred = student.predict(params, graph)
        acc = float(np.mean(pred[val_mask] == val_labels[val_mask]))
        if acc > best_acc:
            best_acc, best, stale = acc, params.copy(), 0
        else:
            stale += 1
            if stale >= bc.patience:
                break
    return best, best_acc


def _encoders_for(config: RunConfig, seed: int):
    tc = config.teachers
    encs = [
        teachers.PropagationEncoder(tc.dim, seed=seed),
        teachers.ContrastiveEncoder(tc.dim, seed=seed + 1, epochs=tc.encoder_epochs, lr=tc.encoder_lr),
        teachers.ReconstructionEncoder(tc.dim, seed=seed + 2, epochs=tc.encoder_epochs, lr=tc.encoder_lr),
    ]
    if config.mode == "single-teacher":
        encs = [encs[tc.single_teacher_index]]
    return encs


def _distill_config(config: RunConfig) -> bilevel.DistillConfig:
    bc = config.bilevel
    return bilevel.DistillConfig(
        window_length=bc.window_length, windows=bc.windows, eta_mu=bc.eta_mu,
        eta_upper=bc.eta_lr_upper, w_init=bc.w_init,
        fusion="mean" if config.mode == "coattention-off-ablation" else "weighted",
        learn_weights=config.mode not in ("mean-fusion", "coattention-off-ablation"))


def _fmt_weights(W) -> str:
    return ";".join(repr(float(v)) for v in np.asarray(W).ravel())


def _precision(pred, truth) -> float | None:
    return float(np.mean(pred == truth)) if len(pred) else None


def run_bonnc(graph: Graph, labels: LabelState, config: RunConfig, seed: int, val, truth,
              result: SeedResult):
    """The multi-round teacher / distillation / label-improvement loop. Returns the selected student.

    ``truth`` is only used to write audit metrics, never to train.
    """
    encoders = [enc.fit(graph) for enc in _encoders_for(config, seed)]
    embeddings = [enc.embed(graph) for enc in encoders]
    dcfg = _distill_config(config)
    tc, cs, li = config.teachers, config.cleanselect, config.labelimprove
    params = student.init_params(graph.d, config.student.h, labels.c, seed, config.student.dropout)
    weights = None
    best_val, best_params = -1.0, params.copy()
    for rnd in range(config.rounds):
        classifiers = [teachers.train_classifier(H, labels, None, tc.epochs, tc.lr) for H in embeddings]
        ens = teachers.TeacherEnsemble(embeddings, classifiers)
        clean = cleanselect.clean_set_for(ens, labels, cs.beta1, cs.beta2, cs.alpha_percent)
        if not config.bilevel.warm_start:
            params = student.init_params(graph.d, config.student.h, labels.c, seed + rnd,
                                         config.student.dropout)
            weights = None
        res = bilevel.run_distillation(ens, graph, labels, clean, dcfg, params, weights, val)
        params, weights = res.params, res.weights
        if res.best_val > best_val:
            best_val, best_params = res.best_val, res.best_params.copy()
        for rec in res.history:
            result.history.append({
                "seed": seed, "round": rnd, "window": rec.window, "lower_loss": rec.lower_loss,
                "upper_loss": rec.upper_loss, "upper_loss_after": rec.upper_loss_after,
                "val_acc": rec.val_acc, "weights": _fmt_weights(rec.weights)})
        sup = np.flatnonzero(labels.supervising_mask())
        row = {
            "seed": seed, "round": rnd, "supervising": len(sup),
            "label_precision": _precision(labels.labels[sup], truth.labels[sup]),
            "clean_size": len(clean),
            "clean_precision": _precision(clean.labels, truth.labels[clean.nodes]),
            "removed": 0, "removed_corrupted": 0, "added": 0, "added_correct": 0,
            "best_val": res.best_val,
        }
        if config.mode != "no-label-improve-ablation":
            _, P_S = student.forward(params, graph)
            labels, removed = labelimprove.filter_noisy(P_S, labels, None, li.r)
            old = labels.labels[removed].copy()
            s_cands = labelimprove.pseudo_select_student(P_S, labels, li.rho)
            t_cands = labelimprove.pseudo_select_teacher(ens, labels, li.rho)
            labels, added = labelimprove.apply_pseudo(labels, s_cands, t_cands, rnd)
            row.update(removed=len(removed), removed_corrupted=int(np.sum(old != truth.labels[removed])),
                       added=len(added), added_correct=int(np.sum(labels.labels[added] == truth.labels[added])))
            for node, y in zip(removed, old):
                result.audit.append({"seed": seed, "round": rnd, "node": int(node), "action": "filtered",
                                     "label": int(y), "true_label": int(truth.labels[node]),
                                     "correct": int(y == truth.labels[node])})
            for node in added:
                result.audit.append({"seed": seed, "round": rnd, "node": int(node), "action": "pseudo",
                                     "label": int(labels.labels[node]), "true_label": int(truth.labels[node]),
                                     "correct": int(labels.labels[node] == truth.labels[node])})
        result.rounds.append(row)
    result.weights = None if weights is None else weights.W.copy()
    return best_params, best_val


def run_seed(config: RunConfig, seed: int) -> SeedResult:
    result = SeedResult(seed)
    try:
        graph, full = build_dataset(config, seed)
        splits = make_splits(full, config.splits, seed)
        truth = noise.GroundTruth(full.labels.copy())
        clean_train = full.restricted_to(splits.train)
        spec = noise.build_transition(config.noise.kind, config.noise.rate, full.c, config.noise.pair_map)
        labels, _ = noise.corrupt(clean_train, splits.train, spec, seed)
        val = (splits.val, truth.labels)
        if config.mode == "gcn-baseline":
            params, best_val = train_gcn_baseline(graph, labels, config, seed, val)
        else:
            params, best_val = run_bonnc(graph, labels, config, seed, val, truth, result)
        result.val_acc = best_val
        result.test_acc = truth.accuracy(student.predict(params, graph), splits.test)
    except Exception as exc:  # recorded per seed; other seeds continue
        log.exception("seed %s aborted", seed)
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def run_experiment(config: RunConfig, jobs: int = 1) -> RunReport:
    config.validate()
    start = time.perf_counter()
    if jobs > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_seed, [config] * len(config.seeds), config.seeds))
    else:
        results = [run_seed(config, s) for s in config.seeds]
    return RunReport(config.mode, list(config.seeds), results, time.perf_counter() - start)


def run_sweep(config: RunConfig, param: str, grid, jobs: int = 1) -> list:
    """One experiment per grid value with shared seeds; returns [(value, RunReport)]."""
    configs = [(v, with_param(config, param, v)) for v in grid]
    return [(v, run_experiment(cfg, jobs)) for v, cfg in configs]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, fields, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_cell(row.get(f)) for f in fields])


def emit_report(report: RunReport, path) -> dict:
    """Write results/history/rounds/audit CSVs and an aligned text summary into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"seed": r.seed, "test_acc": r.test_acc, "val_acc": r.val_acc, "error": r.error}
            for r in report.results]
    rows.append({"seed": "mean", "test_acc": report.mean, "val_acc": None, "error": None})
    rows.append({"seed": "std", "test_acc": report.std, "val_acc": None, "error": None})
    files = {
        "results": out / "results.csv",
        "history": out / "history.csv",
        "rounds": out / "rounds.csv",
        "audit": out / "audit.csv",
        "summary": out / "summary.txt",
    }
    _write_csv(files["results"], ["seed", "test_acc", "val_acc", "error"], rows)
    _write_csv(files["history"], HISTORY_FIELDS, [h for r in report.results for h in r.history])
    _write_csv(files["rounds"], ROUND_FIELDS, [h for r in report.results for h in r.rounds])
    _write_csv(files["audit"], AUDIT_FIELDS, [h for r in report.results for h in r.audit])
    files["summary"].write_text(format_summary(report), encoding="utf-8")
    return files


def format_summary(report: RunReport) -> str:
    lines = [f"mode: {report.mode}", f"{'seed':>6}  {'test_acc':>9}  {'val_acc':>8}  status"]
    for r in report.results:
        acc = "-" if r.test_acc is None else f"{r.test_acc:.4f}"
        val = "-" if r.val_acc is None else f"{r.val_acc:.4f}"
        lines.append(f"{r.seed:>6}  {acc:>9}  {val:>8}  {r.error or 'ok'}")
    lines.append(f"{'mean':>6}  {report.mean:>9.4f}")
    lines.append(f"{'std':>6}  {report.std:>9.4f}")
    lines.append(f"wall time: {report.wall_time:.1f}s")
    return "\n".join(lines) + "\n"


def emit_sweep(param: str, table, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"param": param, "value": v, "mean": rep.mean, "std": rep.std,
             "seeds_ok": len(rep.accuracies), "seeds_failed": len(rep.failed)} for v, rep in table]
    target = out / "sweep.csv"
    _write_csv(target, ["param", "value", "mean", "std", "seeds_ok", "seeds_failed"], rows)
    for v, rep in table:
        emit_report(rep, out / f"{param}={v}")
    return target


def read_results_csv(path) -> dict:
    """Parse results.csv back into {seed: test_acc} plus 'mean'/'std' entries."""
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            key = row["seed"] if row["seed"] in ("mean", "std") else int(row["seed"])
            out[key] = float(row["test_acc"]) if row["test_acc"] else None
    return out
