"""Orthonormal polynomial bases consistent with a dependent input measure.

The basis is built in three steps: enumerate a reduced multi-index set
(at most ``S`` interacting coordinates, total degree at most ``m``),
estimate the monomial moment matrix ``G = E[M(X) M(X)^T]`` by quasi-Monte
Carlo, and whiten: with ``G = W^{-1} W^{-T}`` (lower Cholesky), the vector
``Psi(x) = W M(x)`` is orthonormal under the input measure.

The number of basis functions is ``1 + sum_{s=1}^{S} C(N,s) C(m,s)``,
which collapses to ``C(N+m, m)`` when ``S = N``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .exceptions import MomentMatrixError, PositiveDefinitenessError
from .inputs import InputModel, iter_sample_blocks

__all__ = [
    "MultiIndexSet",
    "OrthonormalBasis",
    "cardinality",
    "multi_index_set",
    "monomial_vector",
    "monomial_matrix",
    "moment_matrix",
    "whiten",
    "build_basis",
]

DEFAULT_QUADRATURE = 1_000_000
_QUADRATURE_BLOCK = 1 << 17

ARTIFACT_FORMAT = "tailrisk-basis"
ARTIFACT_VERSION = 1


def cardinality(dimension: int, interaction_order: int, degree: int) -> int:
    """Number of multi-indices with at most S nonzero entries and degree <= m."""
    return 1 + sum(
        math.comb(dimension, s) * math.comb(degree, s)
        for s in range(1, interaction_order + 1)
    )


@dataclass(frozen=True)
class MultiIndexSet:
    """Ordered reduced multi-index set.

    ``indices`` is an ``(L, dimension)`` integer array in graded order
    (total degree first, descending-lexicographic within a grade), with the
    zero index first.  The graded order makes lower-degree sets prefixes of
    higher-degree ones, which triangular whitening preserves.
    """

    dimension: int
    interaction_order: int
    degree: int
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return self.indices.shape[0]

    def __iter__(self):
        return (tuple(row) for row in self.indices)


def multi_index_set(dimension: int, interaction_order: int, degree: int) -> MultiIndexSet:
    """Enumerate the reduced multi-index set for (N, S, m).

    Raises
    ------
    ValueError
        If ``S > N``, ``S < 0``, or ``m < S``.
    """
    n, s_max, m = dimension, interaction_order, degree
    if n < 1:
        raise ValueError(f"dimension must be >= 1, got {n}")
    if not 0 <= s_max <= n:
        raise ValueError(f"interaction order must be in [0, {n}], got {s_max}")
    if m < s_max:
        raise ValueError(f"degree must be >= interaction order, got m={m} < S={s_max}")

    indices = [(0,) * n]
    for s in range(1, s_max + 1):
        for support in itertools.combinations(range(n), s):
            for total in range(s, m + 1):
                for cuts in itertools.combinations(range(1, total), s - 1):
                    parts = [b - a for a, b in zip((0,) + cuts, cuts + (total,))]
                    j = [0] * n
                    for coord, exponent in zip(support, parts):
                        j[coord] = exponent
                    indices.append(tuple(j))
    indices.sort(key=lambda j: (sum(j), tuple(-e for e in j)))

    out = MultiIndexSet(n, s_max, m, np.array(indices, dtype=int))
    assert len(out) == cardinality(n, s_max, m)
    return out


def monomial_matrix(points, index_set: MultiIndexSet) -> np.ndarray:
    """Evaluate every monomial of the set at every point: ``(Q, L)`` array."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    idx = index_set.indices
    out = np.ones((pts.shape[0], idx.shape[0]))
    for k in range(index_set.dimension):
        degs = idx[:, k]
        max_deg = int(degs.max())
        if max_deg == 0:
            continue
        powers = pts[:, k, None] ** np.arange(max_deg + 1)
        out *= powers[:, degs]
    return out


def monomial_vector(x, index_set: MultiIndexSet) -> np.ndarray:
    """Monomial vector ``M(x)`` with entries ``prod_k x_k**j_k``."""
    return monomial_matrix(np.asarray(x, dtype=float)[None, :], index_set)[0]


def _scale_diagonal(index_set: MultiIndexSet, coordinate_scales) -> np.ndarray:
    """Diagonal ``D`` rescaling each monomial by ``prod_k s_k**-j_k``."""
    scales = np.asarray(coordinate_scales, dtype=float)
    if scales.shape != (index_set.dimension,):
        raise ValueError("need one scale per coordinate")
    if np.any(scales <= 0.0):
        raise ValueError("coordinate scales must be positive")
    return np.exp(-index_set.indices @ np.log(scales))


def moment_matrix(
    index_set: MultiIndexSet,
    model: InputModel,
    quadrature: int = DEFAULT_QUADRATURE,
    seed: int = 0,
    skip: int = 0,
) -> np.ndarray:
    """Estimate ``G = E[M(X) M(X)^T]`` with a Sobol quasi-MC stream.

    Accumulation is blockwise in a fixed order, so the result does not
    depend on memory limits or threading.  The returned matrix is exactly
    symmetric.

    Raises
    ------
    ValueError
        If ``quadrature`` is below the basis cardinality (the estimate
        could not have full rank).
    MomentMatrixError
        If the symmetrized estimate is numerically non-positive-definite
        even after conditioning scaling; increase ``quadrature`` or lower
        the degree.
    """
    size = len(index_set)
    if quadrature < size:
        raise ValueError(
            f"quadrature count {quadrature} is below the basis size {size}"
        )
    gram = np.zeros((size, size))
    for block in iter_sample_blocks(
        model, "sobol", quadrature, seed, _QUADRATURE_BLOCK, skip=skip
    ):
        m = monomial_matrix(block, index_set)
        gram += m.T @ m
    gram /= quadrature
    gram = 0.5 * (gram + gram.T)

    scale = _scale_diagonal(index_set, model.marginal_stddevs)
    probe = gram * np.outer(scale, scale)
    _, info = lapack.dpotrf(probe, lower=1)
    if info != 0:
        raise MomentMatrixError(
            "moment matrix estimate is not positive definite; "
            "increase the quadrature count or reduce the polynomial degree"
        )
    return gram


@dataclass(frozen=True)
class OrthonormalBasis:
    """Whitening matrix plus its multi-index set.

    ``whitening`` is lower triangular with positive diagonal and satisfies
    ``W G W^T = I`` for the moment matrix it was built from; evaluating
    ``W M(x)`` yields the orthonormal polynomial vector, whose first entry
    is identically 1.
    """

    index_set: MultiIndexSet
    whitening: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.whitening, dtype=float)
        size = len(self.index_set)
        if w.shape != (size, size):
            raise ValueError("whitening matrix does not match the index set")
        w.setflags(write=False)
        object.__setattr__(self, "whitening", w)

    def __len__(self):
        return len(self.index_set)

    def evaluate(self, points) -> np.ndarray:
        """Orthonormal polynomial values; ``(Q, L)`` for a batch, ``(L,)`` for one point."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        values = monomial_matrix(pts, self.index_set) @ self.whitening.T
        return values[0] if single else values

    def to_dict(self) -> dict:
        return {
            "format": ARTIFACT_FORMAT,
            "version": ARTIFACT_VERSION,
            "dimension": self.index_set.dimension,
            "interaction_order": self.index_set.interaction_order,
            "degree": self.index_set.degree,
            "indices": self.index_set.indices.tolist(),
            "whitening": self.whitening.tolist(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "OrthonormalBasis":
        from .exceptions import ArtifactError

        if payload.get("format") != ARTIFACT_FORMAT:
            raise ArtifactError(f"not a basis artifact: {payload.get('format')!r}")
        if payload.get("version") != ARTIFACT_VERSION:
            raise ArtifactError(
                f"basis artifact version {payload.get('version')} is not supported "
                f"(expected {ARTIFACT_VERSION})"
            )
        index_set = MultiIndexSet(
            payload["dimension"],
            payload["interaction_order"],
            payload["degree"],
            np.array(payload["indices"], dtype=int),
        )
        return cls(
            index_set=index_set,
            whitening=np.array(payload["whitening"], dtype=float),
            provenance=dict(payload.get("provenance", {})),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "OrthonormalBasis":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _lower_cholesky(matrix: np.ndarray):
    """LAPACK Cholesky returning (factor, failing 1-based pivot or 0)."""
    factor, info = lapack.dpotrf(matrix, lower=1)
    if info != 0:
        return None, info
    return np.tril(factor), 0


def whiten(
    moment: np.ndarray,
    index_set: MultiIndexSet,
    coordinate_scales=None,
    provenance: dict | None = None,
) -> OrthonormalBasis:
    """Whitening transformation of a monomial moment matrix.

    With ``coordinate_scales`` given, the Cholesky factorization runs on
    the rescaled matrix ``D G D`` (``D`` from per-coordinate scales) and
    the scaling is folded back into the returned whitening matrix, so the
    basis is mathematically unchanged but the factorization is far better
    conditioned for wide inputs at high degree.

    Raises
    ------
    PositiveDefinitenessError
        If the (scaled) matrix fails Cholesky even after one retry with a
        relative diagonal jitter of ``1e-12 * trace / L``; carries the
        failing pivot index.
    """
    gram = np.asarray(moment, dtype=float)
    size = len(index_set)
    if gram.shape != (size, size):
        raise ValueError("moment matrix does not match the index set")

    if coordinate_scales is None:
        scale = np.ones(size)
    else:
        scale = _scale_diagonal(index_set, coordinate_scales)
    scaled = gram * np.outer(scale, scale)

    jittered = False
    factor, pivot = _lower_cholesky(scaled)
    if factor is None:
        jitter = 1e-12 * np.trace(scaled) / size
        factor, pivot = _lower_cholesky(scaled + jitter * np.eye(size))
        jittered = True
        if factor is None:
            raise PositiveDefinitenessError(
                f"moment matrix is not positive definite (pivot {pivot})",
                pivot=pivot,
            )

    inv_factor = solve_triangular(factor, np.eye(size), lower=True)
    whitening = inv_factor * scale[None, :]

    prov = dict(provenance or {})
    prov["jittered"] = jittered
    if coordinate_scales is not None:
        prov["coordinate_scales"] = [float(s) for s in np.asarray(coordinate_scales)]
    return OrthonormalBasis(index_set=index_set, whitening=whitening, provenance=prov)


def build_basis(
    model: InputModel,
    interaction_order: int,
    degree: int,
    quadrature: int = DEFAULT_QUADRATURE,
    seed: int = 0,
) -> OrthonormalBasis:
    """Full pipeline: index set, quasi-MC moment matrix, whitening.

    Conditioning scaling uses the model's marginal standard deviations.
    """
    index_set = multi_index_set(model.dimension, interaction_order, degree)
    gram = moment_matrix(index_set, model, quadrature=quadrature, seed=seed)
    return whiten(
        gram,
        index_set,
        coordinate_scales=model.marginal_stddevs,
        provenance={"quadrature": int(quadrature), "seed": int(seed), "skip": 0},
    )
