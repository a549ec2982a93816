import math

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_dist(X):
    """Euclidean distances by explicit loops over rows and coordinates."""
    n = len(X)
    D = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            D[i][j] = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(X[i], X[j])))
    return D


def brute_order(X, i):
    """Other indices sorted by (distance to X[i], index)."""
    return sorted((j for j in range(len(X)) if j != i), key=lambda j: (math.dist(X[i], X[j]), j))
