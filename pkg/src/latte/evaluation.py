"""Metrics, baselines, the multi-seed experiment runner and report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import rankdata

from .data import CATEGORICAL, CLASSIFICATION, TabularDataset, normalize_target, normalize_value, sample_few_shot
from .pipeline import CellResult, VariantFlags, run_cell


class UndefinedMetricError(ValueError):
    """The metric is not defined on this input (e.g. single-class labels)."""


class AblationMarginError(AssertionError):
    """A required ablation margin was not met; carries the per-seed table."""


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties 1/2.

    Computed from average ranks; numerically identical to the pairwise
    formulation because all intermediate sums are exact half-integers.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def multiclass_auc(score_matrix, labels) -> float:
    """One-vs-rest macro average; reduces to plain AUC for two classes."""
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels)
    if score_matrix.shape[1] == 2:
        return auc(score_matrix[:, 1], (labels == 1).astype(int))
    per_class = [
        auc(score_matrix[:, c], (labels == c).astype(int))
        for c in range(score_matrix.shape[1])
        if (labels == c).any() and (labels != c).any()
    ]
    if not per_class:
        raise UndefinedMetricError("no class admits a one-vs-rest AUC")
    return float(np.mean(per_class))


def mse(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError("predictions and targets must have equal length")
    if predictions.size == 0:
        raise ValueError("need at least one prediction")
    return float(np.mean((predictions - targets) ** 2))


@dataclass(frozen=True)
class MetricResult:
    metric: str  # "auc" | "mse"
    value: float | None
    shot: int
    seed: int
    dataset: str
    variant: str
    error: str = ""


@dataclass
class ExperimentReport:
    results: list = field(default_factory=list)
    llm_call_summary: dict | None = None
    references: dict = field(default_factory=dict)  # (dataset, shot) -> paper value, display only

    def aggregate(self):
        """(dataset, shot, variant, metric) -> (mean, population std or None, n)."""
        groups: dict[tuple, list[float]] = {}
        for r in self.results:
            if r.value is None:
                continue
            groups.setdefault((r.dataset, r.shot, r.variant, r.metric), []).append(r.value)
        out = {}
        for key, values in groups.items():
            arr = np.array(values, dtype=np.float64)
            std = float(arr.std()) if arr.size >= 2 else None  # population std
            out[key] = (float(arr.mean()), std, int(arr.size))
        return out


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def _design_matrix(dataset: TabularDataset, samples, vocab=None):
    """One-hot categoricals + z-scored numericals; returns (X, vocab)."""
    if vocab is None:
        pool = list(dataset.labeled) + list(dataset.unlabeled)
        vocab = {}
        for feat in dataset.metadata.features:
            if feat.kind == CATEGORICAL:
                seen: dict[str, int] = {}
                for s in pool:
                    v = str(s.values[feat.name])
                    if v not in seen:
                        seen[v] = len(seen)
                vocab[feat.name] = seen
    width = sum(
        len(vocab[f.name]) if f.kind == CATEGORICAL else 1 for f in dataset.metadata.features
    )
    X = np.zeros((len(samples), width), dtype=np.float64)
    for i, s in enumerate(samples):
        col = 0
        for feat in dataset.metadata.features:
            if feat.kind == CATEGORICAL:
                idx = vocab[feat.name].get(str(s.values[feat.name]))
                if idx is not None:
                    X[i, col + idx] = 1.0
                col += len(vocab[feat.name])
            else:
                X[i, col] = normalize_value(dataset.norm_stats, feat.name, s.values[feat.name])
                col += 1
    return X, vocab


def logistic_baseline(dataset: TabularDataset, labeled_indices, l2: float = 1e-3) -> float:
    """L2-regularized multinomial logistic regression; returns test AUC.

    The objective is mean cross-entropy plus l2 * ||W||^2 (bias excluded), so
    duplicating every training row leaves the fitted model unchanged.
    """
    if dataset.metadata.task_type != CLASSIFICATION:
        raise ValueError("logistic baseline is defined for classification tasks")
    train = [dataset.labeled[i] for i in labeled_indices]
    y = np.array([int(s.label) for s in train])
    n_classes = dataset.metadata.n_classes
    if len(set(y.tolist())) < 2:
        raise UndefinedMetricError("single-class training set")
    X, vocab = _design_matrix(dataset, train)
    X = np.hstack([X, np.ones((X.shape[0], 1))])  # bias column
    d = X.shape[1]

    def objective(flat):
        W = flat.reshape(n_classes, d)
        logits = X @ W.T
        logits -= logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(logits).sum(axis=1))
        log_p = logits - log_z[:, None]
        nll = -log_p[np.arange(len(y)), y].mean()
        reg = l2 * float((W[:, :-1] ** 2).sum())
        p = np.exp(log_p)
        onehot = np.zeros_like(p)
        onehot[np.arange(len(y)), y] = 1.0
        grad = (p - onehot).T @ X / len(y)
        grad[:, :-1] += 2 * l2 * W[:, :-1]
        return nll + reg, grad.ravel()

    res = optimize.minimize(
        objective, np.zeros(n_classes * d), jac=True, method="L-BFGS-B",
        options={"maxiter": 500, "ftol": 1e-12, "gtol": 1e-10},
    )
    W = res.x.reshape(n_classes, d)
    X_test, _ = _design_matrix(dataset, list(dataset.test), vocab)
    X_test = np.hstack([X_test, np.ones((X_test.shape[0], 1))])
    logits = X_test @ W.T
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    test_labels = np.array([int(s.label) for s in dataset.test])
    return multiclass_auc(probs, test_labels)


def linear_regression_baseline(dataset: TabularDataset, labeled_indices, l2: float = 1e-6) -> float:
    """Ridge linear head on the same features; returns normalized-space test MSE."""
    train = [dataset.labeled[i] for i in labeled_indices]
    y = np.array([normalize_target(dataset.norm_stats, s.label) for s in train])
    X, vocab = _design_matrix(dataset, train)
    X = np.hstack([X, np.ones((X.shape[0], 1))])
    d = X.shape[1]
    reg = l2 * np.eye(d)
    reg[-1, -1] = 0.0  # bias unregularized
    w = np.linalg.solve(X.T @ X / len(y) + reg, X.T @ y / len(y))
    X_test, _ = _design_matrix(dataset, list(dataset.test), vocab)
    X_test = np.hstack([X_test, np.ones((X_test.shape[0], 1))])
    targets = np.array([normalize_target(dataset.norm_stats, s.label) for s in dataset.test])
    return mse(X_test @ w, targets)


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    dataset: TabularDataset
    dataset_name: str
    provider: object
    knowledge: object  # KnowledgeVector or None
    encoder_cfg: object
    adapter_cfg: object
    pretrain_cfg: object
    finetune_cfg: object
    shots: tuple = (4,)
    seeds: tuple = (0, 1, 2)
    variant: VariantFlags = field(default_factory=VariantFlags)
    references: dict = field(default_factory=dict)
    llm_counter: object = None


def score_cell(dataset: TabularDataset, cell: CellResult) -> float:
    if dataset.metadata.task_type == CLASSIFICATION:
        return multiclass_auc(cell.scores, cell.test_labels)
    return mse(cell.predictions, cell.test_labels)


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Shot x seed sweep for one variant; failures are recorded per cell and
    do not abort the remaining cells."""
    metric_name = "auc" if config.dataset.metadata.task_type == CLASSIFICATION else "mse"
    report = ExperimentReport(references=dict(config.references))
    stage1_cache: dict = {}
    for shot in config.shots:
        for seed in config.seeds:
            try:
                cell = run_cell(
                    config.dataset,
                    config.provider,
                    config.knowledge,
                    config.encoder_cfg,
                    config.adapter_cfg,
                    config.pretrain_cfg,
                    config.finetune_cfg,
                    shot,
                    seed,
                    config.variant,
                    stage1_cache,
                )
                value = score_cell(config.dataset, cell)
                error = ""
            except Exception as exc:  # noqa: BLE001 - recorded per cell by contract
                value, error = None, f"{type(exc).__name__}: {exc}"
            report.results.append(
                MetricResult(
                    metric=metric_name,
                    value=value,
                    shot=shot,
                    seed=seed,
                    dataset=config.dataset_name,
                    variant=config.variant.label(),
                    error=error,
                )
            )
    if config.llm_counter is not None:
        report.llm_call_summary = config.llm_counter.snapshot()
    return report


def variant_seed_table(reports: dict) -> str:
    lines = ["variant".ljust(28) + "  " + "per-seed values"]
    for label, rep in reports.items():
        values = ", ".join(
            f"s{r.seed}={r.value:.4f}" if r.value is not None else f"s{r.seed}=ERR"
            for r in rep.results
        )
        lines.append(label.ljust(28) + "  " + values)
    return "\n".join(lines)


def compare_variants(
    base_config: ExperimentConfig,
    variant_a: VariantFlags,
    variant_b: VariantFlags,
    min_margin: float,
    higher_is_better: bool = True,
):
    """Run two ablation variants and require mean(A) - mean(B) >= min_margin.

    Raises :class:`AblationMarginError` with the per-seed table otherwise.
    Returns (report_a, report_b, margin).
    """
    import dataclasses as dc

    rep_a = run_experiment(dc.replace(base_config, variant=variant_a))
    rep_b = run_experiment(dc.replace(base_config, variant=variant_b))
    vals_a = [r.value for r in rep_a.results if r.value is not None]
    vals_b = [r.value for r in rep_b.results if r.value is not None]
    if not vals_a or not vals_b:
        raise AblationMarginError(
            "variant produced no successful cells\n"
            + variant_seed_table({variant_a.label(): rep_a, variant_b.label(): rep_b})
        )
    mean_a, mean_b = float(np.mean(vals_a)), float(np.mean(vals_b))
    margin = (mean_a - mean_b) if higher_is_better else (mean_b - mean_a)
    if margin < min_margin:
        raise AblationMarginError(
            f"margin {margin:.4f} below required {min_margin:.4f} "
            f"(mean {variant_a.label()}={mean_a:.4f}, {variant_b.label()}={mean_b:.4f})\n"
            + variant_seed_table({variant_a.label(): rep_a, variant_b.label(): rep_b})
        )
    return rep_a, rep_b, margin


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

RAW_FIELDS = ["dataset", "metric", "shot", "seed", "variant", "value", "error"]


def emit_report(report: ExperimentReport, raw_path, aggregate_path, llm_path=None) -> None:
    if not report.results:
        raise ValueError("refusing to emit an empty report")
    with open(raw_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RAW_FIELDS)
        writer.writeheader()
        for r in report.results:
            writer.writerow(
                {
                    "dataset": r.dataset,
                    "metric": r.metric,
                    "shot": r.shot,
                    "seed": r.seed,
                    "variant": r.variant,
                    "value": "" if r.value is None else repr(r.value),
                    "error": r.error,
                }
            )
    with open(aggregate_path, "w", encoding="utf-8") as fh:
        fh.write(render_aggregate(report))
    if llm_path is not None and report.llm_call_summary is not None:
        with open(llm_path, "w", encoding="utf-8") as fh:
            json.dump(report.llm_call_summary, fh, indent=2, sort_keys=True)


def render_aggregate(report: ExperimentReport) -> str:
    """Human-readable dataset x shot grid of "mean ± std" cells.

    Paper reference values, when configured, appear side by side and are
    never asserted against.
    """
    agg = report.aggregate()
    lines = ["# aggregate report (std: population)"]
    keys = sorted(agg, key=lambda k: (k[0], k[2], k[3], k[1]))
    current_block = None
    for dataset, shot, variant, metric in keys:
        block = (dataset, variant, metric)
        if block != current_block:
            lines.append(f"## {dataset} [{metric}] ({variant})")
            current_block = block
        mean, std, n = agg[(dataset, shot, variant, metric)]
        cell = f"{mean:.2f} ± {std:.2f}" if std is not None else f"{mean:.2f} (n={n})"
        ref = report.references.get((dataset, shot))
        ref_txt = f"  reference={ref}" if ref is not None else ""
        lines.append(f"shot {shot}: {cell}{ref_txt}")
    return "\n".join(lines) + "\n"


def parse_raw_report(raw_path) -> ExperimentReport:
    """Parse an emitted raw table back into a report (aggregates regenerate)."""
    report = ExperimentReport()
    with open(raw_path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            report.results.append(
                MetricResult(
                    metric=row["metric"],
                    value=None if row["value"] == "" else float(row["value"]),
                    shot=int(row["shot"]),
                    seed=int(row["seed"]),
                    dataset=row["dataset"],
                    variant=row["variant"],
                    error=row["error"],
                )
            )
    return report
