"""Late-fusion classification over per-modality out-of-fold logits: logit-space
averaging baselines and a stratified 5-fold MLP stacker with neutral imputation
and training-fold oversampling, reported with the full fold-averaged metric
suite (Accuracy, Precision, Recall, F1-Score, AUC, MCC).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRIC_COLUMNS = ["Accuracy", "Precision", "Recall", "F1-Score", "AUC", "MCC"]

CONFIGURATIONS = {
    "smri": {"prefixes": ["smri."], "d_in": 3},
    "pet": {"prefixes": ["pet."], "d_in": 3},
    "smri_pet": {"prefixes": ["smri.", "pet."], "d_in": 6},
    "four": {"prefixes": ["smri.", "pet.", "fmri.", "tabular."], "d_in": 8},
}


class EnsembleError(Exception):
    pass


@dataclass
class LogitTable:
    subject_ids: list[str]
    labels: np.ndarray  # (n,) in {0, 1}
    columns: list[str]  # "<modality>.<source>"
    matrix: np.ndarray  # (n, d), NaN = missing

    def __post_init__(self) -> None:
        n = len(self.subject_ids)
        if self.labels.shape != (n,) or self.matrix.shape != (n, len(self.columns)):
            raise EnsembleError("inconsistent logit table shapes")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise EnsembleError("labels must be binary 0/1")
        if np.any(np.all(np.isnan(self.matrix), axis=1)):
            raise EnsembleError("every subject needs at least one non-missing logit")

    @classmethod
    def from_csv(cls, path: Path) -> "LogitTable":
        with Path(path).open("r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["subject_id", "label"]:
                raise EnsembleError(
                    f"logits CSV must start with subject_id,label columns, got {header[:2]}"
                )
            columns = header[2:]
            subject_ids, labels, rows = [], [], []
            for record in reader:
                if not record or not record[0].strip():
                    continue
                subject_ids.append(record[0].strip())
                labels.append(int(record[1]))
                rows.append(
                    [float(cell) if cell.strip() != "" else math.nan for cell in record[2:]]
                )
        return cls(
            subject_ids=subject_ids,
            labels=np.array(labels, dtype=int),
            columns=columns,
            matrix=np.array(rows, dtype=float),
        )

    def select(self, columns: list[str]) -> np.ndarray:
        indices = [self.columns.index(c) for c in columns]
        return self.matrix[:, indices]


def impute_neutral(matrix: np.ndarray) -> np.ndarray:
    """Missing logits become 0 (probability 0.5), applied before averaging or
    stacking."""
    out = np.array(matrix, dtype=float, copy=True)
    out[np.isnan(out)] = 0.0
    return out


def logistic(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    expz = np.exp(z[~pos])
    out[~pos] = expz / (1.0 + expz)
    return out


def average_logits(matrix: np.ndarray, column_indices: list[int] | None = None) -> np.ndarray:
    """Arithmetic mean in logit space over the selected columns."""
    selected = matrix if column_indices is None else matrix[:, column_indices]
    if selected.ndim == 1:
        return selected.astype(float)
    return selected.mean(axis=1)


@dataclass
class FoldAssignment:
    folds: np.ndarray  # (n,) fold index per subject position
    seed: int
    k: int = 5

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = np.where(self.folds == fold)[0]
        train = np.where(self.folds != fold)[0]
        return train, test


def stratified_kfold(labels: np.ndarray, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Group by label, seeded-shuffle each group, deal round-robin: per-fold
    class counts differ by at most one from perfect stratification."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.full(len(labels), -1, dtype=int)
    for value in sorted(np.unique(labels)):
        indices = np.where(labels == value)[0]
        rng.shuffle(indices)
        for position, idx in enumerate(indices):
            folds[idx] = position % k
    return FoldAssignment(folds=folds, seed=seed, k=k)


def oversample_training(labels: np.ndarray, train_indices: np.ndarray, seed: int) -> np.ndarray:
    """Duplicate minority-class training rows (seeded, with replacement) until
    class counts are equal. Held-out rows are never touched."""
    rng = np.random.default_rng(seed)
    train_labels = labels[train_indices]
    counts = {value: int((train_labels == value).sum()) for value in (0, 1)}
    if counts[0] == counts[1] or min(counts.values()) == 0:
        return np.array(train_indices, copy=True)
    minority = 0 if counts[0] < counts[1] else 1
    deficit = abs(counts[0] - counts[1])
    pool = train_indices[train_labels == minority]
    extra = rng.choice(pool, size=deficit, replace=True)
    return np.concatenate([train_indices, extra])


class StackerModel:
    """Fixed-architecture MLP: [d_in, 16, 8, 1], ReLU hidden, logistic output,
    trained by seeded full-batch gradient descent on binary cross-entropy."""

    HIDDEN = (16, 8)

    def __init__(self, d_in: int, hidden: tuple[int, int] = HIDDEN, seed: int = 0):
        if tuple(hidden) != self.HIDDEN:
            raise EnsembleError(f"hidden layer sizes are fixed at {self.HIDDEN}, got {hidden}")
        if d_in < 1:
            raise EnsembleError("d_in must be >= 1")
        self.d_in = d_in
        self.seed = seed
        rng = np.random.default_rng(seed)
        sizes = [d_in, *self.HIDDEN, 1]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    # -- forward/backward --------------------------------------------------

    def _forward(self, X: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        activations = [X]
        for layer, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = activations[-1] @ W + b
            if layer < len(self.weights) - 1:
                activations.append(np.maximum(z, 0.0))
            else:
                activations.append(z)  # output kept as logit
        return activations, activations[-1].reshape(-1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        _, z = self._forward(np.asarray(X, dtype=float))
        return logistic(z)

    def loss(self, X: np.ndarray, y: np.ndarray) -> float:
        _, z = self._forward(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        # log(1+exp(-|z|)) form is stable for large |z|
        per_sample = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        return float(per_sample.mean())

    def gradients(self, X: np.ndarray, y: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        activations, z = self._forward(X)
        n = len(y)
        delta = ((logistic(z) - y) / n).reshape(-1, 1)
        grads_w = [np.zeros_like(W) for W in self.weights]
        grads_b = [np.zeros_like(b) for b in self.biases]
        for layer in range(len(self.weights) - 1, -1, -1):
            grads_w[layer] = activations[layer].T @ delta
            grads_b[layer] = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ self.weights[layer].T) * (activations[layer] > 0)
        return grads_w, grads_b

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases


def train_stacker(
    features: np.ndarray,
    labels: np.ndarray,
    d_in: int | None = None,
    seed: int = 0,
    epochs: int = 500,
    learning_rate: float = 0.05,
) -> StackerModel:
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float)
    model = StackerModel(d_in=d_in or features.shape[1], seed=seed)
    if features.shape[1] != model.d_in:
        raise EnsembleError(f"feature width {features.shape[1]} != d_in {model.d_in}")
    for epoch in range(epochs):
        grads_w, grads_b = model.gradients(features, labels)
        for W, gW in zip(model.weights, grads_w):
            W -= learning_rate * gW
        for b, gb in zip(model.biases, grads_b):
            b -= learning_rate * gb
        if epoch % 50 == 0:
            loss = model.loss(features, labels)
            if not math.isfinite(loss):
                raise EnsembleError(f"non-finite training loss at epoch {epoch}: {loss}")
    return model


def predict_stacker(model: StackerModel, features: np.ndarray) -> np.ndarray:
    return model.predict(features)


def grad_check(model: StackerModel, features: np.ndarray, labels: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences."""
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float)
    grads_w, grads_b = model.gradients(features, labels)
    analytic = grads_w + grads_b
    worst = 0.0
    for param, grad in zip(model.parameters(), analytic):
        flat_p = param.reshape(-1)
        flat_g = grad.reshape(-1)
        for i in range(flat_p.size):
            original = flat_p[i]
            flat_p[i] = original + h
            up = model.loss(features, labels)
            flat_p[i] = original - h
            down = model.loss(features, labels)
            flat_p[i] = original
            numeric = (up - down) / (2 * h)
            denom = max(abs(numeric) + abs(flat_g[i]), 1e-8)
            worst = max(worst, abs(numeric - flat_g[i]) / denom)
    return worst


# -- metrics ---------------------------------------------------------------------


def auc_score(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney rank AUC; ties contribute 1/2. Defined 0.5 when a fold has
    a single class (stratification normally prevents this)."""
    probabilities = np.asarray(probabilities, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(probabilities, kind="mergesort")
    ranks = np.empty(len(probabilities), dtype=float)
    sorted_probs = probabilities[order]
    i = 0
    while i < len(sorted_probs):
        j = i
        while j + 1 < len(sorted_probs) and sorted_probs[j + 1] == sorted_probs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mcc_score(tp: int, fp: int, fn: int, tn: int) -> float:
    """Closed-form Matthews correlation; 0 when any marginal factor is 0."""
    denominator = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denominator == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denominator)


def compute_metrics(probabilities: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> dict:
    """Positive-class precision/recall/F1 with zero-denominator conventions
    (a fold that predicts one class only scores 0, not NaN)."""
    probabilities = np.asarray(probabilities, dtype=float)
    labels = np.asarray(labels, dtype=int)
    predictions = (probabilities >= threshold).astype(int)
    tp = int(((predictions == 1) & (labels == 1)).sum())
    fp = int(((predictions == 1) & (labels == 0)).sum())
    fn = int(((predictions == 0) & (labels == 1)).sum())
    tn = int(((predictions == 0) & (labels == 0)).sum())
    accuracy = (tp + tn) / max(len(labels), 1)
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return {
        "Accuracy": accuracy,
        "Precision": precision,
        "Recall": recall,
        "F1-Score": f1,
        "AUC": auc_score(probabilities, labels),
        "MCC": mcc_score(tp, fp, fn, tn),
    }


@dataclass
class MetricReport:
    model: str
    per_fold: list[dict] = field(default_factory=list)
    averaged: dict = field(default_factory=dict)

    def finalize(self) -> "MetricReport":
        self.averaged = {
            column: float(np.mean([fold[column] for fold in self.per_fold]))
            for column in METRIC_COLUMNS
        }
        return self


# -- configuration runner -----------------------------------------------------


def _baseline_groups(columns: list[str]) -> dict[str, list[str]]:
    """Per-architecture baseline rows: an imaging architecture's columns across
    modalities, plus every single-source non-imaging column (their logits join
    each architecture's average, mirroring the per-model multimodal rows)."""
    imaging = [c for c in columns if c.split(".", 1)[0] in ("smri", "pet")]
    non_imaging = [c for c in columns if c.split(".", 1)[0] not in ("smri", "pet")]
    architectures = sorted({c.split(".", 1)[1] for c in imaging})
    if not architectures:
        return {"average": list(columns)}
    return {
        arch: [c for c in imaging if c.split(".", 1)[1] == arch] + non_imaging
        for arch in architectures
    }


def run_configuration(
    table: LogitTable,
    config_name: str,
    seed: int = 0,
    epochs: int = 500,
    learning_rate: float = 0.05,
    cohort: str = "UNION",
) -> dict[str, MetricReport]:
    """Evaluate all baseline column-group averages and the MLP stacker for one
    modality configuration with subject-level stratified 5-fold CV.

    The stacker consumes the raw per-source logits of the configuration, never
    the per-architecture averages.
    """
    if config_name not in CONFIGURATIONS:
        raise EnsembleError(f"unknown configuration {config_name!r}")
    spec = CONFIGURATIONS[config_name]
    columns = [c for c in table.columns if any(c.startswith(p) for p in spec["prefixes"])]
    if len(columns) != spec["d_in"]:
        raise EnsembleError(
            f"configuration {config_name!r} expects {spec['d_in']} logit columns, "
            f"found {len(columns)}: {columns}"
        )
    raw = table.select(columns)
    if cohort == "UNION":
        keep = np.arange(len(table.subject_ids))
    elif cohort == "INTERSECTION":
        keep = np.where(~np.isnan(raw).any(axis=1))[0]
    else:
        raise EnsembleError(f"unknown cohort mode {cohort!r}")
    raw = raw[keep]
    labels = table.labels[keep]
    features = impute_neutral(raw)

    assignment = stratified_kfold(labels, k=5, seed=seed)
    groups = _baseline_groups(columns)
    reports: dict[str, MetricReport] = {name: MetricReport(model=name) for name in groups}
    reports["stacker"] = MetricReport(model="stacker")

    for fold in range(assignment.k):
        train_idx, test_idx = assignment.train_test(fold)
        assert not set(train_idx) & set(test_idx)
        for name, group_columns in groups.items():
            indices = [columns.index(c) for c in group_columns]
            fused = average_logits(features[test_idx], indices)
            reports[name].per_fold.append(compute_metrics(logistic(fused), labels[test_idx]))
        sampled = oversample_training(labels, train_idx, seed=seed + 1000 * (fold + 1))
        model = train_stacker(
            features[sampled],
            labels[sampled],
            seed=seed + fold,
            epochs=epochs,
            learning_rate=learning_rate,
        )
        probabilities = model.predict(features[test_idx])
        reports["stacker"].per_fold.append(compute_metrics(probabilities, labels[test_idx]))

    return {name: report.finalize() for name, report in reports.items()}


def write_metrics_csv(reports: dict[str, MetricReport], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["Model", "Fold"] + METRIC_COLUMNS)
        for name in sorted(reports):
            report = reports[name]
            for fold, metrics in enumerate(report.per_fold):
                writer.writerow(
                    [name, fold] + [f"{metrics[c]:.6f}" for c in METRIC_COLUMNS]
                )
            writer.writerow(
                [name, "AVG"] + [f"{report.averaged[c]:.6f}" for c in METRIC_COLUMNS]
            )
