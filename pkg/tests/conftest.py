import numpy as np
import pytest
import torch

from latte.data import (
    CLASSIFICATION,
    REGRESSION,
    FeatureDescriptor,
    Metadata,
    Sample,
    TabularDataset,
    compute_norm_stats,
)
from dataclasses import replace


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def build_dataset(metadata, labeled=(), unlabeled=(), test=()):
    ds = TabularDataset(
        metadata=metadata, labeled=tuple(labeled), unlabeled=tuple(unlabeled), test=tuple(test)
    )
    return replace(ds, norm_stats=compute_norm_stats(ds))


@pytest.fixture
def binary_metadata():
    return Metadata(
        task_description="Predict heart disease",
        features=(
            FeatureDescriptor("Gender", "patient gender", "categorical"),
            FeatureDescriptor("Age", "age in years", "numerical"),
            FeatureDescriptor("Cholesterol", "serum cholesterol", "numerical"),
        ),
        task_type=CLASSIFICATION,
        class_names=("no", "yes"),
    )


@pytest.fixture
def binary_dataset(binary_metadata):
    rng = np.random.default_rng(7)
    labeled = []
    for i in range(20):
        y = i % 2
        labeled.append(
            Sample(
                values={
                    "Gender": "Male" if i % 3 else "Female",
                    "Age": float(40 + 20 * y + rng.normal()),
                    "Cholesterol": float(200 - 40 * y + rng.normal()),
                },
                label=y,
            )
        )
    unlabeled = [
        Sample(
            values={
                "Gender": "Male",
                "Age": float(rng.uniform(30, 70)),
                "Cholesterol": float(rng.uniform(150, 250)),
            },
            label=None,
        )
        for _ in range(30)
    ]
    return build_dataset(binary_metadata, labeled, unlabeled, labeled[:10])


@pytest.fixture
def regression_metadata():
    return Metadata(
        task_description="Predict the age of abalone",
        features=(
            FeatureDescriptor("Length", "shell length", "numerical"),
            FeatureDescriptor("Diameter", "shell diameter", "numerical"),
        ),
        task_type=REGRESSION,
    )
