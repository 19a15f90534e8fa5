"""Shared independent oracles for the test suite.

These deliberately avoid the library's own code paths: Gaussian moments
come from the double-factorial formula, and tail statistics from a plain
Python walk over the sorted samples.
"""

import math

import numpy as np


def gaussian_moment(power: int) -> float:
    """E[Z^power] for a standard normal: (power-1)!! for even powers."""
    if power % 2 == 1:
        return 0.0
    out = 1.0
    for k in range(power - 1, 0, -2):
        out *= k
    return out


def analytic_gaussian_gram(index_set) -> np.ndarray:
    """Exact moment matrix of independent standard normals."""
    idx = index_set.indices
    size = len(index_set)
    gram = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            gram[i, j] = math.prod(
                gaussian_moment(int(a + b)) for a, b in zip(idx[i], idx[j])
            )
    return gram


def brute_force_var_cvar(values, probabilities, beta):
    """Tail statistics by an explicit walk of the descending sort."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    cumulative = 0.0
    var = None
    for i in order:
        cumulative += probabilities[i]
        if cumulative > 1.0 - beta:
            var = values[i]
            break
    if var is None:
        raise ValueError("not enough probability mass for the requested level")
    excess = 0.0
    for i in order:
        if values[i] > var:
            excess += probabilities[i] * (values[i] - var)
    return var, var + excess / (1.0 - beta)
