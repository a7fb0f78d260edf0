"""Seeded synthetic datasets for tests, smoke runs and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .data import (
    CLASSIFICATION,
    REGRESSION,
    FeatureDescriptor,
    Metadata,
    NormStats,
    Sample,
    TabularDataset,
    compute_norm_stats,
)
from dataclasses import replace


def _finalize(metadata, labeled, unlabeled, test) -> TabularDataset:
    ds = TabularDataset(
        metadata=metadata,
        labeled=tuple(labeled),
        unlabeled=tuple(unlabeled),
        test=tuple(test),
    )
    return replace(ds, norm_stats=compute_norm_stats(ds))


def make_blobs_classification(
    n_labeled: int = 64,
    n_unlabeled: int = 400,
    n_test: int = 200,
    n_features: int = 4,
    separation: float = 3.0,
    noise: float = 1.0,
    seed: int = 0,
) -> TabularDataset:
    """Two Gaussian blobs rendered as numerical features.

    Class means sit ``separation`` * ``noise`` apart along every feature axis,
    so the classes are (near-)linearly separable at separation 3.
    """
    rng = np.random.default_rng(seed)
    names = [f"measurement_{i}" for i in range(n_features)]
    features = tuple(
        FeatureDescriptor(name=n, description=f"sensor reading {i}", kind="numerical")
        for i, n in enumerate(names)
    )
    metadata = Metadata(
        task_description="Predict which of two processes produced the measurement row.",
        features=features,
        task_type=CLASSIFICATION,
        class_names=("process_a", "process_b"),
    )

    def draw(n, with_labels):
        samples = []
        for _ in range(n):
            y = int(rng.integers(2))
            center = (separation * noise / 2.0) * (1 if y == 1 else -1)
            vals = rng.normal(center, noise, size=n_features)
            samples.append(
                Sample(values=dict(zip(names, vals.tolist())), label=y if with_labels else None)
            )
        return samples

    return _finalize(metadata, draw(n_labeled, True), draw(n_unlabeled, False), draw(n_test, True))


def make_identity_ablation_dataset(
    n_labeled: int = 64,
    n_unlabeled: int = 300,
    n_test: int = 200,
    n_decoys: int = 1,
    separation: float = 3.0,
    seed: int = 0,
) -> TabularDataset:
    """Labels depend on one feature; decoys share its marginal distribution.

    Every feature is N(+/- separation/2, 1) mixed 50/50, but only
    ``signal_level`` mixes in step with the label; decoys flip independently.
    Telling signal from decoy requires a stable notion of feature identity.
    """
    rng = np.random.default_rng(seed)
    names = ["signal_level"] + [f"decoy_level_{i}" for i in range(n_decoys)]
    features = tuple(
        FeatureDescriptor(
            name=n,
            description="level reading tied to the outcome" if n == "signal_level" else "level reading",
            kind="numerical",
        )
        for n in names
    )
    metadata = Metadata(
        task_description="Predict the binary outcome from the level readings.",
        features=features,
        task_type=CLASSIFICATION,
        class_names=("low", "high"),
    )

    def draw(n, with_labels):
        samples = []
        for _ in range(n):
            y = int(rng.integers(2))
            vals = {"signal_level": rng.normal(separation / 2 * (1 if y == 1 else -1), 1.0)}
            for i in range(n_decoys):
                flip = int(rng.integers(2))
                vals[f"decoy_level_{i}"] = rng.normal(separation / 2 * (1 if flip == 1 else -1), 1.0)
            samples.append(Sample(values=vals, label=y if with_labels else None))
        return samples

    return _finalize(metadata, draw(n_labeled, True), draw(n_unlabeled, False), draw(n_test, True))


def make_linear_regression_dataset(
    n_labeled: int = 64,
    n_unlabeled: int = 300,
    n_test: int = 200,
    n_features: int = 3,
    noise: float = 0.05,
    seed: int = 0,
) -> TabularDataset:
    """Targets linear in the features plus Gaussian noise.

    The noise level is expressed in normalized target space: raw targets are
    built so that min-max scaling maps the noise std close to ``noise``.
    """
    rng = np.random.default_rng(seed)
    names = [f"input_{i}" for i in range(n_features)]
    features = tuple(
        FeatureDescriptor(name=n, description=f"driver variable {i}", kind="numerical")
        for i, n in enumerate(names)
    )
    metadata = Metadata(
        task_description="Predict the response value from the driver variables.",
        features=features,
        task_type=REGRESSION,
    )
    weights = rng.normal(0.0, 1.0, size=n_features)
    weights /= np.abs(weights).sum()  # clean signal spans roughly [-1, 1]

    def draw(n, with_labels):
        samples = []
        for _ in range(n):
            x = rng.uniform(-1.0, 1.0, size=n_features)
            y = float(weights @ x) + rng.normal(0.0, 2 * noise)  # span ~2 in raw units
            samples.append(
                Sample(values=dict(zip(names, x.tolist())), label=y if with_labels else None)
            )
        return samples

    return _finalize(metadata, draw(n_labeled, True), draw(n_unlabeled, False), draw(n_test, True))
