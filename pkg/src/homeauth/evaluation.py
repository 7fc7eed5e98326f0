"""Session-wise cross-validation, classification metrics, ROC curves, reports.

The evaluation unit is the session: each test session gets one prediction by
majority vote over its window argmaxes (ties by summed probability, then by
user order). Window-level metrics are reported alongside. Agreement-ensemble
cells score a session only when both members' session votes coincide;
abstentions are excluded from precision/recall and surfaced as coverage.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import DataError
from .ingest import DeviceRegistry, read_records
from .sessions import SessionLog, generate_windows, read_sessions
from .features import (
    FeatureSchema,
    KIND_BOTH,
    KIND_DEVICE,
    KIND_DOMAIN,
    build_domain_vocab,
    extract,
    feature_matrix,
)
from .models import (
    AuthScore,
    TrainingSet,
    fit_grad_boost,
    fit_logreg_l1,
    fit_random_forest,
    predict_proba_matrix,
)

MODEL_NAMES = ("logreg", "rf", "gb")


class ConfusionMatrix:
    """Row = true user, column = predicted user, plus an abstention column."""

    def __init__(self, user_set: Sequence[str]):
        self.user_set = tuple(user_set)
        m = len(self.user_set)
        self.counts = np.zeros((m, m), dtype=np.int64)
        self.abstained = np.zeros(m, dtype=np.int64)
        self._index = {u: i for i, u in enumerate(self.user_set)}

    def add(self, true_user: str, predicted_user: str, n: int = 1) -> None:
        self.counts[self._index[true_user], self._index[predicted_user]] += n

    def add_abstain(self, true_user: str, n: int = 1) -> None:
        self.abstained[self._index[true_user]] += n

    @property
    def evaluated(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricReport:
    """Per-user and averaged precision/recall/F1.

    micro_* pool all evaluated units (so precision = recall = accuracy for
    single-label multi-class without abstention); weighted_* average the
    per-user values by true-class support, which is the convention behind
    published per-user summary rows.
    """

    per_user: dict[str, dict[str, float]]
    micro_precision: float
    micro_recall: float
    micro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    coverage: float
    units: int

    def to_dict(self) -> dict:
        return asdict(self)


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def compute_metrics(conf: ConfusionMatrix) -> MetricReport:
    counts = conf.counts
    diag = np.diag(counts).astype(float)
    col = counts.sum(axis=0).astype(float)
    row = counts.sum(axis=1).astype(float)

    per_user = {}
    for i, user in enumerate(conf.user_set):
        p = diag[i] / col[i] if col[i] > 0 else 0.0
        r = diag[i] / row[i] if row[i] > 0 else 0.0
        per_user[user] = {
            "precision": p,
            "recall": r,
            "f1": _f1(p, r),
            "support": float(row[i]),
        }

    total = counts.sum()
    correct = diag.sum()
    micro = correct / total if total > 0 else 0.0

    support = row.sum()
    if support > 0:
        w_p = sum(per_user[u]["precision"] * per_user[u]["support"] for u in conf.user_set) / support
        w_r = sum(per_user[u]["recall"] * per_user[u]["support"] for u in conf.user_set) / support
        w_f = sum(per_user[u]["f1"] * per_user[u]["support"] for u in conf.user_set) / support
    else:
        w_p = w_r = w_f = 0.0

    denom = total + conf.abstained.sum()
    coverage = float(total / denom) if denom > 0 else 0.0
    return MetricReport(
        per_user=per_user,
        micro_precision=float(micro),
        micro_recall=float(micro),
        micro_f1=float(micro),
        weighted_precision=float(w_p),
        weighted_recall=float(w_r),
        weighted_f1=float(w_f),
        coverage=coverage,
        units=int(total),
    )


def _binary_roc(scores: np.ndarray, positive: np.ndarray):
    """Threshold sweep with score ties processed as one block."""
    n_pos = int(positive.sum())
    n_neg = int(positive.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = positive[order].astype(float)
    tp = np.cumsum(p)
    fp = np.cumsum(1.0 - p)
    block_end = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tpr = np.concatenate([[0.0], tp[block_end] / n_pos])
    fpr = np.concatenate([[0.0], fp[block_end] / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return fpr, tpr, auc


@dataclass(frozen=True)
class RocCurve:
    """Per-user one-vs-rest curves and the micro-averaged pooled curve."""

    per_user: dict[str, dict]
    micro: dict

    @property
    def micro_auc(self) -> float | None:
        return self.micro.get("auc")


def roc_curves(y_true: Sequence[str], scores: np.ndarray, user_set: Sequence[str]) -> RocCurve:
    """One-vs-rest curves per user plus the micro-average over pooled pairs.

    A user with no positives or no negatives gets an undefined curve
    (auc None); its pairs still enter the micro pool.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_true)
    per_user = {}
    pool_scores, pool_pos = [], []
    for i, user in enumerate(user_set):
        s = scores[:, i]
        pos = y == user
        pool_scores.append(s)
        pool_pos.append(pos)
        out = _binary_roc(s, pos)
        if out is None:
            per_user[user] = {"fpr": [], "tpr": [], "auc": None}
        else:
            fpr, tpr, auc = out
            per_user[user] = {"fpr": fpr.tolist(), "tpr": tpr.tolist(), "auc": auc}
    micro_out = (
        _binary_roc(np.concatenate(pool_scores), np.concatenate(pool_pos))
        if pool_scores
        else None
    )
    if micro_out is None:
        micro = {"fpr": [], "tpr": [], "auc": None}
    else:
        fpr, tpr, auc = micro_out
        micro = {"fpr": fpr.tolist(), "tpr": tpr.tolist(), "auc": auc}
    return RocCurve(per_user=per_user, micro=micro)


def kfold_by_session(sessions: Sequence[SessionLog], k: int, seed: int):
    """k folds where each user contributes exactly one test session per fold.

    Users with fewer than k sessions have sessions reused round-robin across
    folds as evenly as possible. Whole sessions move between train and test,
    never individual windows.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    by_user: dict[str, list[SessionLog]] = {}
    for s in sessions:
        by_user.setdefault(s.user, []).append(s)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    shuffled: dict[str, list[SessionLog]] = {}
    for user in sorted(by_user):
        group = sorted(by_user[user], key=lambda s: s.session_id)
        shuffled[user] = [group[i] for i in rng.permutation(len(group))]
    folds = []
    for f in range(k):
        test = [shuffled[user][f % len(shuffled[user])] for user in sorted(by_user)]
        test_ids = {s.session_id for s in test}
        train = [s for s in sessions if s.session_id not in test_ids]
        folds.append((train, test))
    return folds


def session_prediction(window_scores: Sequence[AuthScore]) -> str:
    """Majority vote over window argmaxes; ties by summed probability, then
    by user order."""
    if not window_scores:
        raise ValueError("session_prediction needs at least one window score")
    users = list(window_scores[0].scores)
    votes = {u: 0 for u in users}
    sums = {u: 0.0 for u in users}
    for sc in window_scores:
        votes[sc.argmax_user] += 1
        for u, p in sc.scores.items():
            sums[u] += p
    return max(users, key=lambda u: (votes[u], sums[u], -users.index(u)))


@dataclass
class ExperimentConfig:
    records: str
    sessions: str
    registry: str
    representations: list[str] = field(default_factory=lambda: [KIND_DEVICE])
    deltas_min: list[float] = field(default_factory=lambda: [25.0])
    models: list[str] = field(default_factory=lambda: ["rf"])
    ensemble: list[str] = field(default_factory=list)
    k: int = 7
    seed: int = 7
    min_sessions: int = 0
    stride_s: float = 60.0
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.representations:
            if r not in (KIND_DEVICE, KIND_DOMAIN, KIND_BOTH):
                raise DataError(f"unknown representation {r!r}")
        for mdl in list(self.models) + list(self.ensemble):
            if mdl not in MODEL_NAMES:
                raise DataError(f"unknown model {mdl!r} (choose from {MODEL_NAMES})")
        if not self.deltas_min or any(d <= 0 for d in self.deltas_min):
            raise DataError("deltas_min must be positive")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        doc = load_config_file(path)
        base = os.path.dirname(os.path.abspath(path))
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown experiment config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        for attr in ("records", "sessions", "registry"):
            p = getattr(cfg, attr)
            if not os.path.isabs(p):
                setattr(cfg, attr, os.path.join(base, p))
        return cfg


def load_config_file(path) -> dict:
    """Parse a JSON or TOML config document into a plain dict."""
    if str(path).endswith(".json"):
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    try:
        import tomllib as _toml  # Python >= 3.11
    except ModuleNotFoundError:
        import tomli as _toml
    with open(path, "rb") as fh:
        return _toml.load(fh)


def fit_model(name: str, train: TrainingSet, hyperparams: dict, seed: int):
    hp = hyperparams.get(name, {})
    if name == "logreg":
        return fit_logreg_l1(
            train,
            lam=hp.get("lam", 1e-3),
            epochs=hp.get("epochs", 300),
            lr=hp.get("lr", 0.1),
            seed=seed,
        )
    if name == "rf":
        return fit_random_forest(train, n_trees=hp.get("n_trees", 200), seed=seed)
    if name == "gb":
        return fit_grad_boost(
            train,
            n_stages=hp.get("n_stages", 200),
            lr=hp.get("lr", 0.01),
            max_depth=hp.get("max_depth", 3),
            seed=seed,
        )
    raise DataError(f"unknown model {name!r}")


class _CellAgg:
    def __init__(self, user_set):
        self.conf_session = ConfusionMatrix(user_set)
        self.conf_window = ConfusionMatrix(user_set)
        self.roc_labels: list[str] = []
        self.roc_scores: list[np.ndarray] = []

    def roc(self, user_set) -> RocCurve | None:
        if not self.roc_labels:
            return None
        return roc_curves(self.roc_labels, np.stack(self.roc_scores), user_set)


def _scores_from_matrix(probs: np.ndarray, user_set, t_end) -> list[AuthScore]:
    out = []
    for row, t in zip(probs, t_end):
        arg = int(np.argmax(row))
        out.append(
            AuthScore(
                t=float(t),
                scores={u: float(p) for u, p in zip(user_set, row)},
                argmax_user=user_set[arg],
            )
        )
    return out


def run_experiment(config: ExperimentConfig, out_dir) -> dict:
    """Run the full CV grid and write the report bundle.

    Emits metrics.csv (one row per cell and level), confusion_<cell>.csv
    (session level, with an abstained column), confusion_<cell>_window.csv,
    roc_<cell>.csv (micro-averaged fpr,tpr), and summary.json. Returns the
    summary document.
    """
    os.makedirs(out_dir, exist_ok=True)
    registry = DeviceRegistry.from_json(config.registry)
    records = sorted(read_records(config.records), key=lambda r: r.timestamp)
    sessions = read_sessions(config.sessions)
    if config.min_sessions > 0:
        per_user: dict[str, int] = {}
        for s in sessions:
            per_user[s.user] = per_user.get(s.user, 0) + 1
        sessions = [s for s in sessions if per_user[s.user] >= config.min_sessions]
    if not sessions:
        raise DataError("no sessions left to evaluate")
    user_set = tuple(sorted({s.user for s in sessions}))
    if len(user_set) < 2:
        raise DataError("classification needs at least 2 users")

    folds = kfold_by_session(sessions, config.k, config.seed)
    fold_seeds = [int(x) for x in np.random.SeedSequence(config.seed).generate_state(len(folds))]

    cells: dict[str, dict] = {}
    aggs: dict[str, _CellAgg] = {}

    for delta_min in config.deltas_min:
        delta_s = float(delta_min) * 60.0
        all_windows = []
        sess_slice: dict[str, tuple[int, int]] = {}
        for s in sessions:
            ws = generate_windows(s, records, delta_s, config.stride_s)
            sess_slice[s.session_id] = (len(all_windows), len(all_windows) + len(ws))
            all_windows.extend(ws)
        labels = np.array([w.label for w in all_windows])
        t_end = np.array([w.t_end for w in all_windows])

        device_schema = FeatureSchema(KIND_DEVICE, device_order=registry.device_order)
        mat_dev = feature_matrix(extract(all_windows, device_schema))

        needs_domain = (
            KIND_DOMAIN in config.representations
            or KIND_BOTH in config.representations
            or bool(config.ensemble)
        )

        def cell_key(repr_name: str, model_name: str) -> str:
            return f"{repr_name}-d{delta_min:g}-{model_name}"

        tracked = {(r, mdl) for r in config.representations for mdl in config.models}
        wanted = [(r, mdl) for r in config.representations for mdl in config.models]
        for member in config.ensemble:
            for r in (KIND_DEVICE, KIND_DOMAIN):
                if (r, member) not in wanted:
                    wanted.append((r, member))

        for fold_i, (train_s, test_s) in enumerate(folds):
            train_idx = np.concatenate(
                [np.arange(*sess_slice[s.session_id]) for s in train_s]
            )
            if needs_domain:
                vocab = build_domain_vocab(all_windows[i] for i in train_idx)
                domain_schema = FeatureSchema(KIND_DOMAIN, domain_vocab=vocab)
                mat_dom = feature_matrix(extract(all_windows, domain_schema))
            else:
                domain_schema = None
                mat_dom = None

            def repr_matrix(repr_name: str) -> np.ndarray:
                if repr_name == KIND_DEVICE:
                    return mat_dev
                if repr_name == KIND_DOMAIN:
                    return mat_dom
                return np.hstack([mat_dev, mat_dom])

            # per-(repr, model): window scores grouped by test session
            fold_scores: dict[tuple[str, str], dict[str, list[AuthScore]]] = {}
            for repr_name, model_name in wanted:
                key = cell_key(repr_name, model_name)
                try:
                    mat = repr_matrix(repr_name)
                    train = TrainingSet(
                        matrix=mat[train_idx],
                        labels=tuple(labels[train_idx]),
                        user_set=user_set,
                    )
                    model = fit_model(model_name, train, config.hyperparams, fold_seeds[fold_i])
                    per_session: dict[str, list[AuthScore]] = {}
                    track = (repr_name, model_name) in tracked
                    agg = aggs.get(key)
                    if track and agg is None:
                        agg = aggs[key] = _CellAgg(user_set)
                        cells[key] = {
                            "representation": repr_name,
                            "delta_min": delta_min,
                            "model": model_name,
                        }
                    for s in test_s:
                        lo, hi = sess_slice[s.session_id]
                        probs = predict_proba_matrix(model, mat[lo:hi])
                        scores = _scores_from_matrix(probs, user_set, t_end[lo:hi])
                        per_session[s.session_id] = scores
                        if track:
                            for sc in scores:
                                agg.conf_window.add(s.user, sc.argmax_user)
                                agg.roc_labels.append(s.user)
                                agg.roc_scores.append(
                                    np.array([sc.scores[u] for u in user_set])
                                )
                            agg.conf_session.add(s.user, session_prediction(scores))
                    fold_scores[(repr_name, model_name)] = per_session
                except Exception as exc:
                    raise RuntimeError(
                        f"cell {key} failed in fold {fold_i}: {exc}"
                    ) from exc

            for member in config.ensemble:
                key = f"ensemble-d{delta_min:g}-{member}+{member}"
                agg = aggs.get(key)
                if agg is None:
                    agg = aggs[key] = _CellAgg(user_set)
                    cells[key] = {
                        "representation": "ensemble",
                        "delta_min": delta_min,
                        "model": f"{member}+{member}",
                    }
                dev_scores = fold_scores[(KIND_DEVICE, member)]
                dom_scores = fold_scores[(KIND_DOMAIN, member)]
                for s in test_s:
                    d_list, g_list = dev_scores[s.session_id], dom_scores[s.session_id]
                    # window-level agreement
                    for dv, dm in zip(d_list, g_list):
                        if dv.argmax_user == dm.argmax_user:
                            agg.conf_window.add(s.user, dv.argmax_user)
                            combined = np.array(
                                [(dv.scores[u] + dm.scores[u]) / 2.0 for u in user_set]
                            )
                            agg.roc_labels.append(s.user)
                            agg.roc_scores.append(combined / combined.sum())
                        else:
                            agg.conf_window.add_abstain(s.user)
                    # session-level agreement between the two member votes
                    dvote = session_prediction(d_list)
                    gvote = session_prediction(g_list)
                    if dvote == gvote:
                        agg.conf_session.add(s.user, dvote)
                    else:
                        agg.conf_session.add_abstain(s.user)

    summary = {"config": _config_doc(config), "user_set": list(user_set), "cells": {}}
    _write_bundle(out_dir, user_set, cells, aggs, summary)
    return summary


def _config_doc(config: ExperimentConfig) -> dict:
    doc = asdict(config)
    for attr in ("records", "sessions", "registry"):
        doc[attr] = os.path.basename(doc[attr])
    return doc


def _write_confusion_csv(path, conf: ConfusionMatrix, with_abstain: bool) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = ["true\\pred", *conf.user_set]
        if with_abstain:
            header.append("abstained")
        writer.writerow(header)
        for i, user in enumerate(conf.user_set):
            row = [user, *conf.counts[i].tolist()]
            if with_abstain:
                row.append(int(conf.abstained[i]))
            writer.writerow(row)


def _write_bundle(out_dir, user_set, cells, aggs, summary) -> None:
    metrics_path = os.path.join(out_dir, "metrics.csv")
    fields = [
        "cell",
        "representation",
        "delta_min",
        "model",
        "level",
        "units",
        "abstained",
        "coverage",
        "micro_precision",
        "micro_recall",
        "micro_f1",
        "weighted_precision",
        "weighted_recall",
        "weighted_f1",
        "micro_auc",
    ]
    with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for key in sorted(cells):
            info = cells[key]
            agg = aggs[key]
            roc = agg.roc(user_set)
            cell_doc = dict(info)
            for level, conf in (("session", agg.conf_session), ("window", agg.conf_window)):
                report = compute_metrics(conf)
                cell_doc[level] = report.to_dict()
                auc = roc.micro_auc if (roc is not None and level == "window") else None
                writer.writerow(
                    [
                        key,
                        info["representation"],
                        f"{info['delta_min']:g}",
                        info["model"],
                        level,
                        report.units,
                        int(conf.abstained.sum()),
                        f"{report.coverage:.6f}",
                        f"{report.micro_precision:.6f}",
                        f"{report.micro_recall:.6f}",
                        f"{report.micro_f1:.6f}",
                        f"{report.weighted_precision:.6f}",
                        f"{report.weighted_recall:.6f}",
                        f"{report.weighted_f1:.6f}",
                        "" if auc is None else f"{auc:.6f}",
                    ]
                )
            is_ens = info["representation"] == "ensemble"
            _write_confusion_csv(
                os.path.join(out_dir, f"confusion_{key}.csv"), agg.conf_session, is_ens
            )
            _write_confusion_csv(
                os.path.join(out_dir, f"confusion_{key}_window.csv"), agg.conf_window, is_ens
            )
            if roc is not None and roc.micro["auc"] is not None:
                with open(
                    os.path.join(out_dir, f"roc_{key}.csv"), "w", encoding="utf-8", newline=""
                ) as fh:
                    writer2 = csv.writer(fh)
                    writer2.writerow(["fpr", "tpr"])
                    for f_, t_ in zip(roc.micro["fpr"], roc.micro["tpr"]):
                        writer2.writerow([repr(f_), repr(t_)])
                cell_doc["roc"] = {
                    "micro_auc": roc.micro["auc"],
                    "per_user_auc": {u: roc.per_user[u]["auc"] for u in user_set},
                }
            summary["cells"][key] = cell_doc
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
