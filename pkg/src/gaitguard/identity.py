"""Subject identification from gait feature rows.

A from-scratch multinomial gradient-boosted decision-tree classifier:
per class, each stage fits a small regression tree to the log-loss
pseudo-residuals; prediction is a softmax over the accumulated scores.
Evaluation is repeated stratified k-fold cross-validation scored by the
support-weighted F1, the same protocol run with and without the two
step-length columns.

Everything is deterministic given (data, hyperparameters, seed):
missing values are imputed with training-fold medians, and all ties
(argmax, equal-gain splits) break toward the lowest index.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateDatasetError,
    ShapeError,
    StratificationError,
    UndefinedMetricError,
    ValidationError,
)
from .gait_extract import FEATURE_NAMES, LENGTH_FEATURES, GaitFeatureRow


@dataclass
class Dataset:
    """Feature matrix (NaN = absent) with one subject label per row."""

    features: np.ndarray
    labels: list[str]
    feature_names: tuple[str, ...]
    include_step_length: bool = True

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError("feature matrix must be 2-D")
        if self.features.shape[0] != len(self.labels):
            raise ShapeError(
                f"{self.features.shape[0]} rows vs {len(self.labels)} labels")
        if self.features.shape[1] != len(self.feature_names):
            raise ShapeError(
                f"{self.features.shape[1]} columns vs "
                f"{len(self.feature_names)} feature names")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def classes(self) -> list[str]:
        return sorted(set(self.labels))


def dataset_from_rows(rows: list[GaitFeatureRow], include_step_length: bool = True) -> Dataset:
    """Build a Dataset from extraction rows, optionally dropping the two
    step-length columns (the fully automated, calibration-free variant)."""
    names = FEATURE_NAMES if include_step_length else tuple(
        n for n in FEATURE_NAMES if n not in LENGTH_FEATURES)
    mat = np.full((len(rows), len(names)), np.nan)
    labels = []
    for i, row in enumerate(rows):
        values = row.values()
        for j, name in enumerate(names):
            v = values[name]
            if v is not None:
                mat[i, j] = v
        labels.append(row.subject_id)
    return Dataset(mat, labels, names, include_step_length)


@dataclass
class Hyperparams:
    n_stages: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3

    def __post_init__(self):
        if self.n_stages < 1:
            raise ValidationError(f"n_stages must be >= 1, got {self.n_stages}")
        if self.learning_rate < 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass(frozen=True)
class TreeNode:
    """Regression tree node; leaves carry a score, splits a (feature,
    threshold) pair with <= going left."""

    value: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.is_leaf:
            return np.full(X.shape[0], self.value)
        out = np.empty(X.shape[0])
        go_left = X[:, self.feature] <= self.threshold
        out[go_left] = self.left.predict(X[go_left])
        out[~go_left] = self.right.predict(X[~go_left])
        return out


@dataclass
class GbmModel:
    classes: list[str]
    feature_names: tuple[str, ...]
    hyper: Hyperparams
    init_scores: np.ndarray
    medians: np.ndarray
    stages: list[list[TreeNode]] = field(default_factory=list)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def impute(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        was_1d = X.ndim == 1
        if was_1d:
            X = X[None, :]
        if X.shape[1] != len(self.feature_names):
            raise ShapeError(
                f"vector arity {X.shape[1]} != model arity {len(self.feature_names)}")
        out = X.copy()
        nan = np.isnan(out)
        out[nan] = np.take(self.medians, np.nonzero(nan)[1])
        return out[0] if was_1d else out

    def decision_scores(self, X: np.ndarray) -> np.ndarray:
        X = self.impute(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        scores = np.tile(self.init_scores, (X.shape[0], 1))
        lr = self.hyper.learning_rate
        for stage in self.stages:
            for k, tree in enumerate(stage):
                scores[:, k] += lr * tree.predict(X)
        return scores

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _softmax(self.decision_scores(X))

    def predict_labels(self, X: np.ndarray) -> list[str]:
        proba = self.predict_proba(X)
        return [self.classes[i] for i in np.argmax(proba, axis=1)]


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _best_split(X: np.ndarray, residual: np.ndarray):
    """Exact greedy split maximizing the squared-error reduction.

    Returns (feature, threshold, gain) with ties broken toward the lowest
    feature index and lowest threshold, or None when nothing improves.
    """
    n = X.shape[0]
    total = residual.sum()
    best = None  # (gain, feature, threshold)
    base = total * total / n
    for j in range(X.shape[1]):
        col = X[:, j]
        order = np.argsort(col, kind="stable")
        sorted_col = col[order]
        csum = np.cumsum(residual[order])
        # split after position i (1-based count on the left)
        counts = np.arange(1, n)
        left = csum[:-1]
        right = total - left
        gains = left * left / counts + right * right / (n - counts) - base
        distinct = sorted_col[:-1] < sorted_col[1:]
        if not distinct.any():
            continue
        gains = np.where(distinct, gains, -np.inf)
        i = int(np.argmax(gains))
        gain = float(gains[i])
        if gain <= 1e-12:
            continue
        threshold = (sorted_col[i] + sorted_col[i + 1]) / 2.0
        if best is None or gain > best[0] + 1e-12:
            best = (gain, j, threshold)
    if best is None:
        return None
    return best[1], best[2], best[0]


def _leaf_value(residual: np.ndarray, n_classes: int) -> float:
    # Newton step for the multinomial log-loss on one-vs-rest residuals.
    num = residual.sum()
    den = np.sum(np.abs(residual) * (1.0 - np.abs(residual)))
    if den < 1e-150:
        return 0.0
    return float((n_classes - 1) / n_classes * num / den)


def _build_tree(X, residual, depth, max_depth, n_classes) -> TreeNode:
    if depth >= max_depth or X.shape[0] < 2:
        return TreeNode(value=_leaf_value(residual, n_classes))
    split = _best_split(X, residual)
    if split is None:
        return TreeNode(value=_leaf_value(residual, n_classes))
    feature, threshold, _ = split
    go_left = X[:, feature] <= threshold
    return TreeNode(
        feature=feature,
        threshold=threshold,
        left=_build_tree(X[go_left], residual[go_left], depth + 1, max_depth, n_classes),
        right=_build_tree(X[~go_left], residual[~go_left], depth + 1, max_depth, n_classes),
    )


def train_gbm(data: Dataset, hyper: Hyperparams | None = None, seed: int = 0) -> GbmModel:
    """Fit the boosted model; raw scores start at the log class priors so
    a zero learning rate predicts the priors exactly."""
    hyper = hyper or Hyperparams()
    classes = data.classes
    if len(classes) < 2:
        raise DegenerateDatasetError(
            f"need >=2 classes to train, got {classes}")
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[label] for label in data.labels])
    n, k = data.n_rows, len(classes)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns
        medians = np.nanmedian(data.features, axis=0)
    medians = np.where(np.isnan(medians), 0.0, medians)
    X = data.features.copy()
    nan = np.isnan(X)
    X[nan] = np.take(medians, np.nonzero(nan)[1])

    priors = np.bincount(y, minlength=k) / n
    init = np.log(np.clip(priors, 1e-12, None))
    model = GbmModel(classes, data.feature_names, hyper, init, medians)

    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    scores = np.tile(init, (n, 1))
    for _ in range(hyper.n_stages):
        proba = _softmax(scores)
        residual = onehot - proba
        stage = []
        for c in range(k):
            tree = _build_tree(X, residual[:, c], 0, hyper.max_depth, k)
            stage.append(tree)
            scores[:, c] += hyper.learning_rate * tree.predict(X)
        model.stages.append(stage)
    return model


def predict(model: GbmModel, vector) -> tuple[str, list[float]]:
    """Label (argmax, ties to the lowest class index) and the class
    probability list for one feature vector."""
    proba = model.predict_proba(np.asarray(vector, dtype=np.float64)[None, :])[0]
    return model.classes[int(np.argmax(proba))], proba.tolist()


# --- evaluation ---------------------------------------------------------------

@dataclass
class EvalReport:
    classes: list[str]
    weighted_f1_mean: float
    weighted_f1_std: float
    per_fold: list[float]
    confusion_matrix: np.ndarray  # mean over repeats of fold-summed counts
    per_class_accuracy: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "weighted_f1_mean": self.weighted_f1_mean,
            "weighted_f1_std": self.weighted_f1_std,
            "per_fold": self.per_fold,
            "confusion_matrix": self.confusion_matrix.tolist(),
            "per_class_accuracy": self.per_class_accuracy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def weighted_f1(confusion: np.ndarray) -> float:
    """Support-weighted mean of per-class F1 scores; per-class F1 is 0
    when precision + recall is 0."""
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {confusion.shape}")
    if (confusion < 0).any():
        raise ValidationError("confusion matrix has negative counts")
    support = confusion.sum(axis=1)
    total = support.sum()
    if total <= 0:
        raise UndefinedMetricError("confusion matrix has zero total support")
    predicted = confusion.sum(axis=0)
    diag = np.diag(confusion)
    f1 = np.zeros(len(diag))
    for i in range(len(diag)):
        p = diag[i] / predicted[i] if predicted[i] > 0 else 0.0
        r = diag[i] / support[i] if support[i] > 0 else 0.0
        f1[i] = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return float(np.sum(f1 * support) / total)


def stratified_folds(labels: list[str], folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold assignment preserving class proportions: per class, rows are
    shuffled then dealt round-robin."""
    labels_arr = np.asarray(labels)
    assignment = np.empty(len(labels), dtype=np.int64)
    for cls in sorted(set(labels)):
        idx = np.nonzero(labels_arr == cls)[0]
        if len(idx) < folds:
            raise StratificationError(
                f"class {cls!r} has {len(idx)} rows, fewer than {folds} folds")
        idx = idx[rng.permutation(len(idx))]
        for pos, row in enumerate(idx):
            assignment[row] = pos % folds
    return assignment


def evaluate_cv(
    data: Dataset,
    hyper: Hyperparams | None = None,
    folds: int = 3,
    repeats: int = 2,
    seed: int = 0,
) -> EvalReport:
    """Repeated stratified k-fold evaluation aggregated over all
    folds x repeats."""
    hyper = hyper or Hyperparams()
    classes = data.classes
    if len(classes) < 2:
        raise DegenerateDatasetError(f"need >=2 classes, got {classes}")
    class_index = {c: i for i, c in enumerate(classes)}
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, folds, repeats])

    per_fold = []
    repeat_confusions = []
    for _ in range(repeats):
        assignment = stratified_folds(data.labels, folds, rng)
        confusion = np.zeros((len(classes), len(classes)))
        for fold in range(folds):
            test = assignment == fold
            train = ~test
            train_data = Dataset(
                data.features[train],
                [l for l, t in zip(data.labels, train) if t],
                data.feature_names,
                data.include_step_length,
            )
            model = train_gbm(train_data, hyper, seed)
            fold_confusion = np.zeros((len(classes), len(classes)))
            predicted = model.predict_labels(data.features[test])
            truth = [l for l, t in zip(data.labels, test) if t]
            for t_label, p_label in zip(truth, predicted):
                fold_confusion[class_index[t_label], class_index[p_label]] += 1
            per_fold.append(weighted_f1(fold_confusion))
            confusion += fold_confusion
        repeat_confusions.append(confusion)
    mean_confusion = np.mean(repeat_confusions, axis=0)
    support = mean_confusion.sum(axis=1)
    per_class = {
        cls: float(mean_confusion[i, i] / support[i]) if support[i] > 0 else 0.0
        for i, cls in enumerate(classes)
    }
    scores = np.asarray(per_fold)
    return EvalReport(
        classes=classes,
        weighted_f1_mean=float(scores.mean()),
        weighted_f1_std=float(scores.std()),
        per_fold=per_fold,
        confusion_matrix=mean_confusion,
        per_class_accuracy=per_class,
    )


def write_confusion_csv(report: EvalReport, path) -> None:
    lines = ["true\\predicted," + ",".join(report.classes)]
    for i, cls in enumerate(report.classes):
        row = ",".join(repr(float(v)) for v in report.confusion_matrix[i])
        lines.append(f"{cls},{row}")
    Path(path).write_text("\n".join(lines) + "\n")
