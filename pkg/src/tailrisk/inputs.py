"""Joint input models with dependence, samplers, and density evaluation.

An :class:`InputModel` couples per-coordinate marginal distributions
(Gaussian, uniform, lognormal) through a correlation matrix applied in an
underlying standard-Gaussian space: a draw is ``X_i = T_i(Z_i)`` where
``Z ~ N(0, C)`` and ``T_i`` maps a standard normal through the marginal's
inverse CDF.  For Gaussian marginals the entries of ``C`` are exactly the
correlations of ``X``; lognormal correlations are applied in log space,
which guarantees a valid joint law for any admissible target matrix.

Three sampling schemes are supported: plain Monte Carlo (``mc``), the Sobol
sequence (``sobol``, unscrambled, initial all-zeros point skipped), and
Latin hypercube sampling (``lhs``).  All samplers are deterministic given
``(scheme, size, seed)`` and return immutable :class:`SampleSet` objects.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from .exceptions import InvalidModelError, UnsupportedDimensionError

__all__ = [
    "Gaussian",
    "Uniform",
    "Lognormal",
    "InputModel",
    "SampleSet",
    "sample",
    "log_density",
]

_LOG_2PI = math.log(2.0 * math.pi)

# scipy's Sobol direction-number table (Joe & Kuo) tops out here.
_SOBOL_MAX_DIMENSION = 21201

_SCHEMES = ("mc", "sobol", "lhs")


@dataclass(frozen=True)
class Gaussian:
    """Normal marginal with the given mean and standard deviation."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0.0:
            raise InvalidModelError(f"gaussian std must be positive, got {self.std}")

    def from_gauss(self, z):
        return self.mean + self.std * z

    def to_gauss(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def log_pdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mean) / self.std
        return -0.5 * z * z - math.log(self.std) - 0.5 * _LOG_2PI

    def cdf(self, x):
        return ndtr((np.asarray(x, dtype=float) - self.mean) / self.std)

    @property
    def stddev(self):
        return self.std


@dataclass(frozen=True)
class Uniform:
    """Uniform marginal on ``[lower, upper]``."""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise InvalidModelError(
                f"uniform bounds must satisfy lower < upper, got [{self.lower}, {self.upper}]"
            )

    def from_gauss(self, z):
        return self.lower + (self.upper - self.lower) * ndtr(z)

    def to_gauss(self, x):
        u = (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)
        with np.errstate(invalid="ignore"):
            z = ndtri(np.clip(u, 0.0, 1.0))
        return np.where(u < 0.0, -np.inf, np.where(u > 1.0, np.inf, z))

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lower) & (x <= self.upper)
        return np.where(inside, -math.log(self.upper - self.lower), -np.inf)

    def cdf(self, x):
        u = (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)
        return np.clip(u, 0.0, 1.0)

    @property
    def stddev(self):
        return (self.upper - self.lower) / math.sqrt(12.0)


@dataclass(frozen=True)
class Lognormal:
    """Lognormal marginal given its mean and coefficient of variation in percent.

    The underlying normal parameters are moment-matched:
    ``sigma_log**2 = ln(1 + cov**2)`` and ``mu_log = ln(mean) - sigma_log**2 / 2``
    with ``cov = cov_percent / 100``.
    """

    mean: float
    cov_percent: float

    def __post_init__(self):
        if not self.mean > 0.0:
            raise InvalidModelError(f"lognormal mean must be positive, got {self.mean}")
        if not self.cov_percent > 0.0:
            raise InvalidModelError(
                f"lognormal cov_percent must be positive, got {self.cov_percent}"
            )

    @property
    def sigma_log(self):
        cov = self.cov_percent / 100.0
        return math.sqrt(math.log1p(cov * cov))

    @property
    def mu_log(self):
        return math.log(self.mean) - 0.5 * self.sigma_log**2

    def from_gauss(self, z):
        return np.exp(self.mu_log + self.sigma_log * z)

    def to_gauss(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (np.log(x) - self.mu_log) / self.sigma_log
        return np.where(x > 0.0, z, -np.inf)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (np.log(x) - self.mu_log) / self.sigma_log
            val = -0.5 * z * z - np.log(x) - math.log(self.sigma_log) - 0.5 * _LOG_2PI
        return np.where(x > 0.0, val, -np.inf)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(np.maximum(x, 0.0)) - self.mu_log) / self.sigma_log
        return np.where(x > 0.0, ndtr(z), 0.0)

    @property
    def stddev(self):
        return self.mean * self.cov_percent / 100.0


class InputModel:
    """Joint law of an N-dimensional input vector.

    Parameters
    ----------
    marginals : sequence
        One marginal (:class:`Gaussian`, :class:`Uniform`,
        :class:`Lognormal`) per coordinate.
    correlation : (N, N) array_like, optional
        Correlation matrix of the underlying Gaussian vector.  Must be
        symmetric with unit diagonal and strictly positive definite;
        defaults to the identity (independent coordinates).

    Raises
    ------
    InvalidModelError
        If a marginal parameter is out of range or the correlation matrix
        fails symmetry, unit-diagonal, or Cholesky (positive-definiteness)
        checks.  Degenerate correlations (``|rho| = 1``) are rejected here.
    """

    def __init__(self, marginals, correlation=None):
        marginals = tuple(marginals)
        if not marginals:
            raise InvalidModelError("at least one marginal is required")
        for m in marginals:
            if not isinstance(m, (Gaussian, Uniform, Lognormal)):
                raise InvalidModelError(f"unsupported marginal type: {m!r}")
        n = len(marginals)

        self._marginals = marginals
        if correlation is None:
            # Independent coordinates; skip the dense matrices entirely so
            # very high-dimensional models stay cheap.
            self._corr = None
            self._chol = None
            self._blocks = tuple((i,) for i in range(n))
            self._block_chols = {}
            return

        corr = np.array(correlation, dtype=float)
        if corr.shape != (n, n):
            raise InvalidModelError(
                f"correlation must be {n}x{n}, got shape {corr.shape}"
            )
        if not np.allclose(corr, corr.T, rtol=0.0, atol=1e-12):
            raise InvalidModelError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(corr), 1.0, rtol=0.0, atol=1e-12):
            raise InvalidModelError("correlation matrix must have a unit diagonal")
        corr = 0.5 * (corr + corr.T)
        try:
            chol = np.linalg.cholesky(corr)
        except np.linalg.LinAlgError as exc:
            raise InvalidModelError(
                "correlation matrix is not positive definite"
            ) from exc

        self._corr = corr
        self._chol = chol
        self._corr.setflags(write=False)
        self._chol.setflags(write=False)
        self._blocks = _dependence_blocks(corr)
        self._block_chols = {
            b: np.linalg.cholesky(corr[np.ix_(list(b), list(b))])
            for b in self._blocks
            if len(b) > 1
        }

    @property
    def dimension(self) -> int:
        return len(self._marginals)

    @property
    def marginals(self):
        return self._marginals

    @property
    def correlation(self) -> np.ndarray:
        if self._corr is None:
            return np.eye(self.dimension)
        return self._corr

    @property
    def marginal_stddevs(self) -> np.ndarray:
        return np.array([m.stddev for m in self._marginals])

    def transform_gauss(self, z: np.ndarray) -> np.ndarray:
        """Map uncorrelated standard-normal draws to model space."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        colored = z if self._chol is None else z @ self._chol.T
        out = np.empty_like(colored)
        for i, m in enumerate(self._marginals):
            out[:, i] = m.from_gauss(colored[:, i])
        return out

    def __repr__(self):
        return f"InputModel(dimension={self.dimension})"


def _dependence_blocks(corr: np.ndarray):
    """Connected components of the nonzero off-diagonal graph."""
    n = corr.shape[0]
    seen = [False] * n
    blocks = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in range(n):
                if not seen[j] and corr[i, j] != 0.0:
                    seen[j] = True
                    stack.append(j)
        blocks.append(tuple(sorted(comp)))
    return tuple(blocks)


@dataclass(frozen=True)
class SampleSet:
    """Realizations of an input vector with per-point probabilities.

    ``points`` is an ``(L, N)`` array and ``probabilities`` a length-``L``
    vector of nonnegative weights; a freshly drawn empirical measure carries
    ``1/L`` each.  ``provenance`` records the sampler kind, seed, and skip
    count so the set can be regenerated bit-for-bit.
    """

    points: np.ndarray
    probabilities: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        probs = np.asarray(self.probabilities, dtype=float)
        if pts.shape[0] < 1:
            raise ValueError("a sample set needs at least one point")
        if probs.shape != (pts.shape[0],):
            raise ValueError("probabilities must match the number of points")
        if np.any(probs < 0.0):
            raise ValueError("probabilities must be nonnegative")
        pts.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "probabilities", probs)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    def to_csv(self, path):
        """Write ``x1,...,xN,p`` rows."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i + 1}" for i in range(self.dimension)] + ["p"])
            for row, p in zip(self.points, self.probabilities):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(p))])


def _uniform_stream(scheme: str, dimension: int, seed: int, skip: int):
    """Stateful generator of uniform/(standard normal) block draws.

    Returns a callable ``draw(count) -> (count, N) standard-normal block``.
    Consecutive calls continue one underlying stream, so blockwise
    generation concatenates to the one-shot result.
    """
    if scheme == "mc":
        rng = np.random.default_rng(seed)

        def draw(count):
            return rng.standard_normal((count, dimension))

    elif scheme == "sobol":
        if dimension > _SOBOL_MAX_DIMENSION:
            raise UnsupportedDimensionError(
                f"sobol supports up to {_SOBOL_MAX_DIMENSION} dimensions, got {dimension}"
            )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            engine = qmc.Sobol(d=dimension, scramble=False)
        # Skip the initial all-zeros point: it maps to -inf under ndtri.
        engine.fast_forward(1 + skip)

        def draw(count):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                u = engine.random(count)
            return ndtri(u)

    elif scheme == "lhs":
        engine = qmc.LatinHypercube(d=dimension, seed=seed)

        def draw(count):
            return ndtri(engine.random(count))

    else:
        raise ValueError(f"unknown sampling scheme {scheme!r}; expected one of {_SCHEMES}")
    return draw


def sample(model: InputModel, scheme: str, size: int, seed: int, skip: int = 0) -> SampleSet:
    """Draw ``size`` points from the joint law of ``model``.

    Parameters
    ----------
    model : InputModel
    scheme : {"mc", "sobol", "lhs"}
        Plain Monte Carlo, the (unscrambled, zero-skipped) Sobol sequence,
        or Latin hypercube sampling.  Sobol and LHS uniforms are mapped
        through the inverse normal transform, colored by the correlation
        Cholesky factor, and pushed through the marginal transforms.
    size : int
        Number of points, at least 1.
    seed : int
        Drives ``mc`` and ``lhs``; recorded but inert for the deterministic
        ``sobol`` stream.
    skip : int, optional
        Extra points of the Sobol sequence to skip (beyond the initial
        zero point); lets callers carve disjoint quasi-MC streams.  Only
        valid with ``scheme="sobol"``.

    Returns
    -------
    SampleSet
        With uniform probabilities ``1/size``.
    """
    if size < 1:
        raise ValueError(f"sample size must be >= 1, got {size}")
    if skip and scheme != "sobol":
        raise ValueError("skip is only meaningful for the sobol scheme")
    draw = _uniform_stream(scheme, model.dimension, seed, skip)
    points = model.transform_gauss(draw(size))
    probs = np.full(size, 1.0 / size)
    return SampleSet(
        points=points,
        probabilities=probs,
        provenance={"scheme": scheme, "seed": int(seed), "skip": int(skip), "size": int(size)},
    )


def iter_sample_blocks(model, scheme, size, seed, block_size, skip=0):
    """Yield the :func:`sample` point array in consecutive blocks.

    Blockwise output concatenates exactly to the one-shot ``sample``
    points; used to keep large quadratures out of memory.
    """
    draw = _uniform_stream(scheme, model.dimension, seed, skip)
    produced = 0
    while produced < size:
        count = min(block_size, size - produced)
        yield model.transform_gauss(draw(count))
        produced += count


def log_density(model: InputModel, x) -> float:
    """Natural log of the joint density at ``x``.

    Returns ``-inf`` (not an exception) outside the support, e.g. beyond a
    uniform marginal's bounds.  Independent groups factor; correlated
    groups use the Gaussian dependence structure of the model.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dimension,):
        raise ValueError(f"expected a {model.dimension}-vector, got shape {x.shape}")

    total = 0.0
    for block in model._blocks:
        idx = list(block)
        lp = sum(float(model.marginals[i].log_pdf(x[i])) for i in idx)
        if len(block) > 1:
            z = np.array([float(model.marginals[i].to_gauss(x[i])) for i in idx])
            if not np.all(np.isfinite(z)):
                return -np.inf
            chol = model._block_chols[block]
            v = np.linalg.solve(chol, z)
            log_mvn = (
                -0.5 * float(v @ v)
                - float(np.sum(np.log(np.diag(chol))))
                - 0.5 * len(idx) * _LOG_2PI
            )
            log_std_norm = float(np.sum(-0.5 * z * z - 0.5 * _LOG_2PI))
            lp += log_mvn - log_std_norm
        total += lp
        if total == -np.inf:
            return -np.inf
    return float(total)
