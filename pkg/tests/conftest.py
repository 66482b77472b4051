import numpy as np
import pytest

from simtransfer.model import Category, CategoryRegistry, HeadKind, HeadMatrix, Split


def make_registry(splits):
    """Registry from a string like "SSW" (S = strong, W = weak)."""
    return CategoryRegistry(
        tuple(
            Category(i, f"cat{i}", (f"cat{i}",), Split.STRONG if s == "S" else Split.WEAK)
            for i, s in enumerate(splits)
        )
    )


def random_heads(rng, registry, dim):
    """Classifier over all K rows and a strong-only detector with background."""
    K = registry.K
    clf = HeadMatrix(HeadKind.CLASSIFIER, tuple(range(K)), rng.standard_normal((K, dim + 1)))
    strong = registry.strong_ids
    det = HeadMatrix(
        HeadKind.DETECTOR,
        strong,
        rng.standard_normal((len(strong), dim + 1)),
        background=rng.standard_normal(dim + 1),
    )
    return clf, det


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def registry3():
    return make_registry("SSW")
