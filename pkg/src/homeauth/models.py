"""Multi-class probabilistic classifiers behind one training/prediction contract.

Three kinds are implemented from first principles on numpy: multinomial
logistic regression with L1 regularization (proximal gradient), a random
forest of Gini CART trees, and gradient boosting on multinomial deviance.
All randomness flows through PCG64 generators derived from the recorded
seed via SeedSequence spawning, so per-tree work is schedule-independent.
Models serialize to a versioned canonical-JSON document; loading reproduces
predictions bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import DataError
from .features import FeatureSchema, FeatureVector
from .trees import (
    build_classification_tree,
    build_regression_tree,
    tree_predict_proba,
    tree_predict_value,
)

MODEL_FORMAT_VERSION = 1
RNG_ALGO = "pcg64-seedseq"

KIND_LOGREG = "logreg_l1"
KIND_FOREST = "random_forest"
KIND_BOOST = "grad_boost"


@dataclass(frozen=True)
class TrainingSet:
    """Feature matrix with labels and the fixed user ordering."""

    matrix: np.ndarray
    labels: tuple[str, ...]
    user_set: tuple[str, ...]
    schema: FeatureSchema | None = None

    def __post_init__(self):
        X = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", X)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "user_set", tuple(self.user_set))
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("training matrix must be non-empty and 2-D")
        if len(self.labels) != X.shape[0]:
            raise ValueError("labels length does not match matrix rows")
        known = set(self.user_set)
        for lab in self.labels:
            if lab not in known:
                raise ValueError(f"label {lab!r} not in user_set")
        if self.schema is not None and self.schema.width != X.shape[1]:
            raise ValueError(
                f"schema width {self.schema.width} does not match matrix width {X.shape[1]}"
            )

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector]) -> "TrainingSet":
        labels = []
        for fv in vectors:
            if fv.label is None:
                raise ValueError("training vectors must be labeled")
            labels.append(fv.label)
        return cls(
            matrix=np.stack([fv.values for fv in vectors]),
            labels=tuple(labels),
            user_set=tuple(sorted(set(labels))),
            schema=vectors[0].schema,
        )

    @property
    def label_indices(self) -> np.ndarray:
        index = {u: i for i, u in enumerate(self.user_set)}
        return np.array([index[lab] for lab in self.labels], dtype=np.intp)


@dataclass(frozen=True, slots=True)
class AuthScore:
    """Per-user probability vector at time t; probabilities sum to one."""

    t: float
    scores: dict[str, float]
    argmax_user: str


@dataclass
class TrainedModel:
    kind: str
    user_set: tuple[str, ...]
    schema: FeatureSchema | None
    n_features: int
    params: dict
    hyperparams: dict
    seed: int
    norm_mean: np.ndarray | None = None
    norm_scale: np.ndarray | None = None


def _softmax(raw: np.ndarray) -> np.ndarray:
    shifted = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce_loss_grad(W: np.ndarray, Xb: np.ndarray, y_idx: np.ndarray):
    """Mean cross-entropy of softmax(Xb W^T) and its gradient wrt W.

    This is the smooth part of the L1 objective; the penalty is handled by
    the proximal step, not here.
    """
    n = Xb.shape[0]
    probs = _softmax(Xb @ W.T)
    loss = -np.log(probs[np.arange(n), y_idx] + 1e-300).mean()
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y_idx] = 1.0
    grad = (probs - onehot).T @ Xb / n
    return loss, grad


def fit_logreg_l1(
    train: TrainingSet,
    lam: float = 1e-3,
    epochs: int = 300,
    lr: float = 0.1,
    seed: int = 0,
) -> TrainedModel:
    """Multinomial softmax regression via proximal gradient descent.

    Columns are z-scored with training statistics (constant columns stay at
    zero); the bias column is never penalized. Each epoch takes one full
    gradient step and then soft-thresholds the non-bias weights by lr*lam.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    X = train.matrix
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    Z = (X - mean) / scale
    n, d = Z.shape
    Xb = np.hstack([Z, np.ones((n, 1))])
    y_idx = train.label_indices
    m = len(train.user_set)

    W = np.zeros((m, d + 1))
    for _ in range(epochs):
        loss, grad = softmax_ce_loss_grad(W, Xb, y_idx)
        if not math.isfinite(loss):
            raise FloatingPointError(
                "logistic regression training diverged; try a smaller lr"
            )
        W = W - lr * grad
        W[:, :d] = np.sign(W[:, :d]) * np.maximum(np.abs(W[:, :d]) - lr * lam, 0.0)

    return TrainedModel(
        kind=KIND_LOGREG,
        user_set=train.user_set,
        schema=train.schema,
        n_features=d,
        params={"weights": W},
        hyperparams={"lam": lam, "epochs": epochs, "lr": lr},
        seed=seed,
        norm_mean=mean,
        norm_scale=scale,
    )


def fit_random_forest(
    train: TrainingSet, n_trees: int = 200, seed: int = 0
) -> TrainedModel:
    """Bootstrap-aggregated Gini CART trees, ceil(sqrt(d)) features per split.

    Per-tree seeds are spawned up front from the root seed, so results do not
    depend on any execution schedule.
    """
    if n_trees < 1:
        raise ValueError("n_trees must be at least 1")
    X = train.matrix
    n, d = X.shape
    if d == 0:
        raise ValueError("training matrix has zero features")
    y = train.label_indices
    m = len(train.user_set)
    k = math.isqrt(d)
    if k * k < d:
        k += 1

    trees = []
    for child in np.random.SeedSequence(seed).spawn(n_trees):
        rng = np.random.Generator(np.random.PCG64(child))
        boot = rng.integers(0, n, size=n)
        trees.append(build_classification_tree(X[boot], y[boot], m, k, rng))

    return TrainedModel(
        kind=KIND_FOREST,
        user_set=train.user_set,
        schema=train.schema,
        n_features=d,
        params={"trees": trees},
        hyperparams={"n_trees": n_trees, "max_features": k},
        seed=seed,
    )


def _boost_leaf_value(m: int):
    # standard multinomial leaf estimate ((m-1)/m) * sum(r) / sum(|r|(1-|r|))
    factor = (m - 1) / m if m > 0 else 0.0

    def leaf_value(residuals: np.ndarray) -> float:
        den = float(np.sum(np.abs(residuals) * (1.0 - np.abs(residuals))))
        if den == 0.0:
            return 0.0
        return factor * float(residuals.sum()) / den

    return leaf_value


def fit_grad_boost(
    train: TrainingSet,
    n_stages: int = 200,
    lr: float = 0.01,
    max_depth: int = 3,
    seed: int = 0,
) -> TrainedModel:
    """Staged one-tree-per-class boosting on multinomial deviance.

    Raw scores start at zero; every stage fits squared-error regression trees
    to the softmax residuals (one-hot minus probability) and advances the raw
    scores by lr times the Newton leaf value. The training deviance after
    each stage is kept in params["train_loss"].
    """
    if n_stages < 1:
        raise ValueError("n_stages must be at least 1")
    if not 0 < lr <= 1:
        raise ValueError("lr must be in (0, 1]")
    X = train.matrix
    n, d = X.shape
    y_idx = train.label_indices
    m = len(train.user_set)
    onehot = np.zeros((n, m))
    onehot[np.arange(n), y_idx] = 1.0
    leaf_value = _boost_leaf_value(m)

    raw = np.zeros((n, m))
    stages: list[list[dict]] = []
    losses = []
    rows = np.arange(n)
    sort_idx = np.argsort(X, axis=0, kind="stable")  # shared by every stage tree
    for _ in range(n_stages):
        probs = _softmax(raw)
        stage_trees = []
        for c in range(m):
            residual = onehot[:, c] - probs[:, c]
            tree, fitted = build_regression_tree(X, residual, max_depth, leaf_value, sort_idx)
            raw[:, c] += lr * fitted
            stage_trees.append(tree)
        stages.append(stage_trees)
        probs = _softmax(raw)
        losses.append(float(-np.log(probs[rows, y_idx] + 1e-300).mean()))

    return TrainedModel(
        kind=KIND_BOOST,
        user_set=train.user_set,
        schema=train.schema,
        n_features=d,
        params={"stages": stages, "learning_rate": lr, "train_loss": losses},
        hyperparams={"n_stages": n_stages, "lr": lr, "max_depth": max_depth},
        seed=seed,
    )


def predict_proba_matrix(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    """Probability matrix (rows on the user_set simplex) for a feature matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise ValueError(
            f"feature width mismatch: model expects {model.n_features}, got {X.shape[1]}"
        )
    m = len(model.user_set)
    if model.kind == KIND_LOGREG:
        Z = (X - model.norm_mean) / model.norm_scale
        Xb = np.hstack([Z, np.ones((X.shape[0], 1))])
        return _softmax(Xb @ model.params["weights"].T)
    if model.kind == KIND_FOREST:
        trees = model.params["trees"]
        acc = np.zeros((X.shape[0], m))
        for tree in trees:
            acc += tree_predict_proba(tree, X, m)
        return acc / len(trees)
    if model.kind == KIND_BOOST:
        lr = model.params["learning_rate"]
        raw = np.zeros((X.shape[0], m))
        for stage in model.params["stages"]:
            for c, tree in enumerate(stage):
                raw[:, c] += lr * tree_predict_value(tree, X)
        return _softmax(raw)
    raise ValueError(f"unknown model kind {model.kind!r}")


def predict_proba(model: TrainedModel, x) -> AuthScore:
    """Score one window; x is a FeatureVector or a raw feature array."""
    if isinstance(x, FeatureVector):
        if (
            model.schema is not None
            and x.schema is not None
            and x.schema.width != model.n_features
        ):
            raise ValueError(
                f"schema mismatch: model expects width {model.n_features}, "
                f"vector has width {x.schema.width}"
            )
        values, t = x.values, x.t
    else:
        values, t = np.asarray(x, dtype=np.float64), 0.0
    probs = predict_proba_matrix(model, values.reshape(1, -1))[0]
    arg = int(np.argmax(probs))  # first max, i.e. user_set order breaks ties
    return AuthScore(
        t=t,
        scores={u: float(p) for u, p in zip(model.user_set, probs)},
        argmax_user=model.user_set[arg],
    )


def _schema_to_doc(schema: FeatureSchema | None):
    return None if schema is None else schema.to_dict()


def save_model(path, model: TrainedModel) -> None:
    """Write the versioned canonical-JSON model document (sorted keys)."""
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "kind": model.kind,
        "user_set": list(model.user_set),
        "schema": _schema_to_doc(model.schema),
        "n_features": model.n_features,
        "hyperparams": model.hyperparams,
        "seed": model.seed,
        "rng": RNG_ALGO,
        "normalization": (
            None
            if model.norm_mean is None
            else {"mean": model.norm_mean.tolist(), "scale": model.norm_scale.tolist()}
        ),
        "params": _params_to_doc(model),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))
        fh.write("\n")


def _params_to_doc(model: TrainedModel) -> dict:
    if model.kind == KIND_LOGREG:
        return {"weights": model.params["weights"].tolist()}
    if model.kind == KIND_FOREST:
        return {"trees": model.params["trees"]}
    if model.kind == KIND_BOOST:
        return {
            "stages": model.params["stages"],
            "learning_rate": model.params["learning_rate"],
            "train_loss": model.params["train_loss"],
        }
    raise ValueError(f"unknown model kind {model.kind!r}")


def load_model(path) -> TrainedModel:
    """Load a model document; predictions match the saved model bit for bit."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: truncated or invalid model JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: model document must be a JSON object")
    version = doc.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported model format version {version!r} "
            f"(expected {MODEL_FORMAT_VERSION})"
        )
    for key in ("kind", "user_set", "n_features", "params", "hyperparams", "seed"):
        if key not in doc:
            raise DataError(f"{path}: model document missing key '{key}'")
    kind = doc["kind"]
    if kind not in (KIND_LOGREG, KIND_FOREST, KIND_BOOST):
        raise DataError(f"{path}: unknown model kind {kind!r}")

    params = doc["params"]
    if kind == KIND_LOGREG:
        params = {"weights": np.asarray(params["weights"], dtype=np.float64)}
    norm = doc.get("normalization")
    schema_doc = doc.get("schema")
    return TrainedModel(
        kind=kind,
        user_set=tuple(doc["user_set"]),
        schema=None if schema_doc is None else FeatureSchema.from_dict(schema_doc),
        n_features=int(doc["n_features"]),
        params=params,
        hyperparams=doc["hyperparams"],
        seed=doc["seed"],
        norm_mean=None if norm is None else np.asarray(norm["mean"], dtype=np.float64),
        norm_scale=None if norm is None else np.asarray(norm["scale"], dtype=np.float64),
    )
