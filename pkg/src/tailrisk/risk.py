"""VaR/CVaR estimators: weighted empirical tails, CI-inflated risk regions,
and the multifidelity importance-sampling estimator.

The empirical estimator sorts outputs in descending order, finds the
smallest index whose cumulative probability exceeds ``1 - beta`` (the
value there is the VaR), and adds the weighted positive exceedances:

    CVaR = VaR + sum_l p_l (y_l - VaR)_+ / (1 - beta).

The importance-sampling path inflates the surrogate-predicted tail by a
confidence half-width ``eps(x) = Q_{1-alpha/2} sigma(x)``, collects the
candidate samples whose upper limit clears the deflated tail threshold,
and then evaluates the expensive model only on a uniform subsample of
that region; each evaluation carries probability ``mass / M`` so the
weighted estimator remains unbiased regardless of surrogate quality.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .exceptions import InsufficientMassError, TailriskError
from .inputs import SampleSet
from .models import evaluate_model
from .surrogate import FittedSurrogate

__all__ = [
    "WeightedOutputs",
    "RiskRegion",
    "RiskReport",
    "var_cvar",
    "empirical_var_cvar",
    "ci_half_width",
    "epsilon_risk_region",
    "mcs_estimate",
    "surrogate_mcs_estimate",
    "mfis_estimate",
]

METHODS = ("mcs", "surrogate_mcs", "is", "mfis_hf", "mfis_lf")

REPORT_CSV_HEADER = (
    "method,interaction_order,degree,cvar_estimate,mrd_pct,nrmsd_pct,"
    "hf_evals,lf_evals,surrogate_evals"
)


@dataclass(frozen=True)
class WeightedOutputs:
    """Output realizations with nonnegative probabilities.

    The total weight need not be 1: region-restricted samples carry only
    the region mass.  ``sample_indices`` optionally keeps the original
    sample identity for deterministic tie-breaking and back-reference.
    """

    values: np.ndarray
    probabilities: np.ndarray
    sample_indices: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        probs = np.asarray(self.probabilities, dtype=float)
        if values.ndim != 1 or probs.shape != values.shape:
            raise ValueError("values and probabilities must be matching 1-D arrays")
        if np.any(probs < 0.0):
            raise ValueError("probabilities must be nonnegative")
        values.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probabilities", probs)

    def __len__(self):
        return len(self.values)

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.probabilities))


def var_cvar(values, probabilities, beta: float) -> tuple[float, float]:
    """Weighted empirical VaR and CVaR at risk level ``beta``.

    Values are sorted in descending order (ties broken by position);
    the VaR is the value at the smallest index whose cumulative weight
    exceeds ``1 - beta``, and the CVaR adds the weighted mean exceedance.

    Raises
    ------
    ValueError
        Empty input or ``beta`` outside (0, 1).
    InsufficientMassError
        Total weight below ``1 - beta`` (the tail is not covered).
    """
    values = np.asarray(values, dtype=float)
    probs = np.asarray(probabilities, dtype=float)
    if values.size == 0:
        raise ValueError("cannot estimate a tail from zero outputs")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must be in (0, 1), got {beta}")
    tail = 1.0 - beta
    # Cumulative weights that equal 1 - beta up to roundoff (e.g. 0.1 + 0.1
    # against beta = 0.8) must not count as exceeding it, or the tail index
    # lands one sample early.
    snapped = tail * (1.0 + 1e-12)

    order = np.argsort(-values, kind="stable")
    sorted_values = values[order]
    sorted_probs = probs[order]
    cumulative = np.cumsum(sorted_probs)
    if not cumulative[-1] > snapped:
        raise InsufficientMassError(
            f"total weight {cumulative[-1]:.6g} does not exceed 1 - beta = {tail:.6g}"
        )
    k = int(np.searchsorted(cumulative, snapped, side="right"))
    var = float(sorted_values[k])

    exceeding = sorted_values > var
    excess = float(
        np.sum(sorted_probs[exceeding] * (sorted_values[exceeding] - var))
    )
    return var, var + excess / tail


def empirical_var_cvar(outputs: WeightedOutputs, beta: float) -> tuple[float, float]:
    """VaR/CVaR of a :class:`WeightedOutputs`."""
    return var_cvar(outputs.values, outputs.probabilities, beta)


def ci_half_width(surrogate: FittedSurrogate, x, alpha: float):
    """Half-width ``Q_{1-alpha/2} * sigma(x)`` of the predictor's CI.

    Accepts a single point or a batch; a ``chaos``-mode surrogate (zero
    predictive variance) yields zero everywhere, as does ``alpha = 1``.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    _, variances = surrogate.predict_batch(pts)
    quantile = float(ndtri(1.0 - alpha / 2.0))
    eps = quantile * np.sqrt(variances)
    return float(eps[0]) if np.asarray(x).ndim == 1 else eps


@dataclass(frozen=True)
class RiskRegion:
    """Discrete CI-inflated risk region over a candidate sample set."""

    member_indices: np.ndarray
    mass: float
    threshold: float
    beta: float
    alpha: float

    def __post_init__(self):
        members = np.asarray(self.member_indices, dtype=int)
        if members.size < 1:
            raise ValueError("a risk region must contain at least one sample")
        members.setflags(write=False)
        object.__setattr__(self, "member_indices", members)

    def __len__(self):
        return len(self.member_indices)


def epsilon_risk_region(
    surrogate: FittedSurrogate, samples: SampleSet, beta: float, alpha: float
) -> RiskRegion:
    """CI-based risk region of the surrogate over candidate samples.

    Sorts ``mean - eps`` in descending order, locates the tail index for
    level ``beta`` over the sample probabilities, takes the predictor mean
    there as threshold, and keeps every sample whose ``mean + eps``
    reaches it.  With ``eps == 0`` this collapses to the plain discrete
    risk region ``{ l : mean_l >= VaR_beta }``.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must be in (0, 1), got {beta}")
    means, variances = surrogate.predict_batch(samples.points)
    quantile = float(ndtri(1.0 - alpha / 2.0))
    eps = quantile * np.sqrt(variances)
    if not np.any(np.isfinite(eps)):
        raise TailriskError("every confidence half-width is non-finite")

    score = means - eps
    finite = np.isfinite(score)
    score = np.where(finite, score, -np.inf)
    order = np.argsort(-score, kind="stable")
    cumulative = np.cumsum(samples.probabilities[order])
    snapped = (1.0 - beta) * (1.0 + 1e-12)
    k = int(np.searchsorted(cumulative, snapped, side="right"))
    if k >= len(samples):
        raise InsufficientMassError(
            "candidate samples do not carry enough mass for the requested level"
        )
    threshold = float(means[order[k]])

    with np.errstate(invalid="ignore"):
        member_mask = (means + eps >= threshold) & finite
    members = np.flatnonzero(member_mask)
    return RiskRegion(
        member_indices=members,
        mass=len(members) / len(samples),
        threshold=threshold,
        beta=beta,
        alpha=alpha,
    )


@dataclass
class RiskReport:
    """One estimator run: estimates, method tag, evaluation accounting."""

    var_estimate: float
    cvar_estimate: float
    method: str
    beta: float
    alpha: float | None = None
    evaluations: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        for key in ("hf", "lf", "surrogate"):
            self.evaluations.setdefault(key, 0)

    def to_json(self) -> str:
        return json.dumps(
            {
                "var_estimate": self.var_estimate,
                "cvar_estimate": self.cvar_estimate,
                "method": self.method,
                "beta": self.beta,
                "alpha": self.alpha,
                "evaluations": self.evaluations,
                "wall_clock": self.wall_clock,
                "seed": self.seed,
                "metadata": self.metadata,
            }
        )

    def csv_row(self, interaction_order="", degree="", mrd="", nrmsd="") -> str:
        """Row for the report table; column layout in ``REPORT_CSV_HEADER``."""
        fmt = lambda v: "" if v == "" else format(float(v), ".10g")
        return ",".join(
            [
                self.method,
                str(interaction_order),
                str(degree),
                fmt(self.cvar_estimate),
                fmt(mrd),
                fmt(nrmsd),
                str(self.evaluations.get("hf", 0)),
                str(self.evaluations.get("lf", 0)),
                str(self.evaluations.get("surrogate", 0)),
            ]
        )


def mcs_estimate(model, samples: SampleSet, beta: float, seed=None) -> RiskReport:
    """Standard Monte Carlo estimate: evaluate the model at every sample."""
    start = time.perf_counter()
    outputs = evaluate_model(model, samples.points)
    var, cvar = var_cvar(outputs, samples.probabilities, beta)
    return RiskReport(
        var_estimate=var,
        cvar_estimate=cvar,
        method="mcs",
        beta=beta,
        evaluations={"hf": len(samples), "lf": 0, "surrogate": 0},
        wall_clock=time.perf_counter() - start,
        seed=seed,
    )


def surrogate_mcs_estimate(
    surrogate: FittedSurrogate, samples: SampleSet, beta: float, seed=None
) -> RiskReport:
    """Monte Carlo estimate sampling the surrogate predictor mean."""
    start = time.perf_counter()
    means, _ = surrogate.predict_batch(samples.points)
    var, cvar = var_cvar(means, samples.probabilities, beta)
    return RiskReport(
        var_estimate=var,
        cvar_estimate=cvar,
        method="surrogate_mcs",
        beta=beta,
        evaluations={"hf": 0, "lf": 0, "surrogate": len(samples)},
        wall_clock=time.perf_counter() - start,
        seed=seed,
    )


def _fresh_region_points(surrogate, input_model, region, count, seed):
    """Rejection-sample fresh in-region points from the input law."""
    from .inputs import sample as draw_sample

    quantile = float(ndtri(1.0 - region.alpha / 2.0))
    collected = []
    got = 0
    block = 8192
    for attempt in range(512):
        batch = draw_sample(
            input_model, "mc", block, np.random.SeedSequence((seed, attempt)).generate_state(1)[0]
        )
        means, variances = surrogate.predict_batch(batch.points)
        keep = means + quantile * np.sqrt(variances) >= region.threshold
        accepted = batch.points[keep]
        if len(accepted):
            collected.append(accepted)
            got += len(accepted)
        if got >= count:
            return np.vstack(collected)[:count]
    raise TailriskError(
        "could not draw enough fresh in-region samples; the region is too thin"
    )


def mfis_estimate(
    region: RiskRegion,
    samples: SampleSet,
    hf_model,
    subsample_size: int,
    beta: float,
    seed: int,
    method: str = "mfis_hf",
    surrogate: FittedSurrogate | None = None,
    input_model=None,
) -> RiskReport:
    """Importance-sampling CVaR estimate from a risk region.

    Draws ``subsample_size`` members uniformly without replacement from
    the region (the discrete optimal biasing density), evaluates the
    high-fidelity model there, and assigns each output the probability
    ``mass / subsample_size``; the weighted empirical estimator then
    yields the tail statistics.  Selected samples are re-ordered by their
    original index so the result is independent of scheduling.

    A very accurate surrogate can shrink the region to the bare tail,
    leaving fewer members than the requested subsample.  When
    ``surrogate`` and ``input_model`` are provided, the shortfall is made
    up by rejection-sampling fresh points from the input law that satisfy
    the region's membership rule (same biasing density, new candidates);
    otherwise a larger subsample than the region is an argument error.

    Raises
    ------
    ValueError
        ``subsample_size`` below 1, or above the region size without a
        surrogate/input model to draw fresh candidates from.
    InsufficientMassError
        Region mass below ``1 - beta``.
    """
    start = time.perf_counter()
    m = int(subsample_size)
    fresh_points = None
    if m < 1:
        raise ValueError(f"subsample size must be >= 1, got {subsample_size}")
    if m > len(region):
        if surrogate is None or input_model is None:
            raise ValueError(
                f"subsample size must be in [1, {len(region)}], got {subsample_size}"
            )
        fresh_points = _fresh_region_points(
            surrogate, input_model, region, m - len(region), seed
        )
    if region.mass < 1.0 - beta:
        raise InsufficientMassError(
            f"region mass {region.mass:.6g} is below 1 - beta = {1.0 - beta:.6g}"
        )

    rng = np.random.default_rng(seed)
    if fresh_points is None:
        chosen = np.sort(rng.choice(region.member_indices, size=m, replace=False))
        points = samples.points[chosen]
    else:
        chosen = np.sort(region.member_indices)
        points = np.vstack([samples.points[chosen], fresh_points])
    outputs = evaluate_model(hf_model, points)
    # Grouped so that m == |region| gives back exactly the original 1/L.
    weight = (len(region) / m) / len(samples)
    weighted = WeightedOutputs(
        values=outputs,
        probabilities=np.full(m, weight),
        sample_indices=chosen if fresh_points is None else None,
    )
    var, cvar = empirical_var_cvar(weighted, beta)
    return RiskReport(
        var_estimate=var,
        cvar_estimate=cvar,
        method=method,
        beta=beta,
        alpha=region.alpha,
        evaluations={"hf": m, "lf": 0, "surrogate": 0},
        wall_clock=time.perf_counter() - start,
        seed=seed,
        metadata={
            "region_size": len(region),
            "region_mass": region.mass,
            "fresh_points": 0 if fresh_points is None else int(len(fresh_points)),
        },
    )
