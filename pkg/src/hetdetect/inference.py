"""Heterogeneity tests across data blocks, one parameter dimension at a time.

Three statistics are provided, each asymptotically N(0, 1) under the null
of equal values across blocks:

* the re-normalized Wald statistic, a centred and scaled chi-square
  quadratic form in the block estimates;
* the extreme contrast statistic (ECT), which locates the blocks with the
  largest and smallest estimates on one half of each block's data and
  contrasts those two blocks on the other half;
* their weighted combination.

All p-values are one-sided upper tails, ``1 - Phi(stat)``.  Dimension
labels in reports are 1-based.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import KTooSmall, MissingFit, NonPositiveVariance, SplitTooSmall
from .glm_core import BlockData, LocalFit
from .normal import norm_ppf, upper_p_value

FAMILIES = ("wald", "ect", "combined")
WEIGHT_PRESETS = ("theory", "simulation")
SPLIT_MODES = ("prefix", "seeded-shuffle")


class LargeKWarning(UserWarning):
    """K is not small relative to the smallest block size."""


@dataclass(frozen=True)
class DimensionSlice:
    dim: int
    estimates: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        est = np.asarray(self.estimates, dtype=float).reshape(-1)
        var = np.asarray(self.variances, dtype=float).reshape(-1)
        if est.shape != var.shape:
            raise ValueError("estimates and variances must have equal length")
        object.__setattr__(self, "estimates", est)
        object.__setattr__(self, "variances", var)

    @property
    def K(self) -> int:
        return self.estimates.shape[0]

    @classmethod
    def from_fits(cls, fits: Sequence[LocalFit], dim: int) -> "DimensionSlice":
        """Build the slice for 1-based dimension ``dim`` from full-sample fits."""
        j = dim - 1
        est = np.array([f.theta_hat[j] for f in fits])
        var = np.array([f.sigma_hat[j] ** 2 / f.n_used for f in fits])
        return cls(dim, est, var)


@dataclass(frozen=True)
class WaldOutcome:
    statistic: float
    p_value: float
    quad_form: float
    df_equiv: int


@dataclass(frozen=True)
class EctOutcome:
    statistic: float
    p_value: float
    k_max: int
    k_min: int
    gamma: float


@dataclass(frozen=True)
class CombinedOutcome:
    statistic: float
    p_value: float
    weight: float


@dataclass
class HeterogeneityReport:
    alpha: float
    p: int
    per_dim: dict[int, dict[str, object]]
    rejected: dict[str, list[int]]
    p_threshold: float
    critical_value: float
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Wald
# ---------------------------------------------------------------------------


def _check_variances(variances) -> np.ndarray:
    v = np.asarray(variances, dtype=float)
    if v.shape[-1] < 2:
        raise KTooSmall(f"need at least 2 blocks, got {v.shape[-1]}")
    if not np.all(v > 0) or not np.all(np.isfinite(v)):
        raise NonPositiveVariance("block variances must be finite and strictly positive")
    return v


def pairwise_weights(variances) -> Callable[[int, int], float]:
    """Weights of the pairwise squared differences in the Wald quadratic form.

    With precisions ``w_k = 1 / lambda_k^2`` the quadratic form equals
    ``sum_{k1<k2} r(k1, k2) (theta_k1 - theta_k2)^2`` where
    ``r(k1, k2) = w_k1 w_k2 / sum_l w_l``.  The returned accessor takes
    1-based block positions and is symmetric.
    """
    v = _check_variances(variances)
    prec = 1.0 / v
    total = prec.sum()

    def weight(k1: int, k2: int) -> float:
        return float(prec[k1 - 1] * prec[k2 - 1] / total)

    return weight


def wald_quad_form(estimates, variances):
    """Quadratic form ``theta' R'(R Lambda R')^{-1} R theta`` in O(K).

    Uses the precision-weighted identity
    ``sum_k w_k (theta_k - theta_bar_w)^2``.  Broadcasts over leading axes;
    blocks are on the last axis.
    """
    v = _check_variances(variances)
    est = np.asarray(estimates, dtype=float)
    prec = 1.0 / v
    center = (prec * est).sum(axis=-1, keepdims=True) / prec.sum(axis=-1, keepdims=True)
    dev = est - center
    return (prec * dev * dev).sum(axis=-1)


def renormalize_wald(quad_form, K: int):
    return (quad_form - (K - 1)) / math.sqrt(2 * K - 2)


def wald_statistic(slice: DimensionSlice, n_min: int | None = None) -> WaldOutcome:
    """Re-normalized Wald statistic for one dimension.

    If ``n_min`` is given and ``K >= n_min`` a :class:`LargeKWarning` is
    emitted: the statistic's normal approximation needs K small relative
    to the block sizes.
    """
    K = slice.K
    q = float(wald_quad_form(slice.estimates, slice.variances))
    if n_min is not None and K >= n_min:
        warnings.warn(
            f"K={K} is not small relative to n_min={n_min}; the Wald statistic may be biased",
            LargeKWarning,
            stacklevel=2,
        )
    stat = float(renormalize_wald(q, K))
    return WaldOutcome(statistic=stat, p_value=upper_p_value(stat), quad_form=q, df_equiv=K - 1)


# ---------------------------------------------------------------------------
# Sample splitting and ECT
# ---------------------------------------------------------------------------


def first_part_size(n: int, gamma: float) -> int:
    # the epsilon absorbs representation error in gamma, e.g. (1 - 0.9) * 10
    return int(math.floor((1.0 - gamma) * n + 1e-9))


def split_block(
    data: BlockData,
    gamma: float,
    mode: str = "prefix",
    seed: int | None = None,
    p: int | None = None,
) -> tuple[BlockData, BlockData]:
    """Split a block into a selection part and a testing part.

    The first part holds ``floor((1 - gamma) n)`` rows and the second the
    rest.  ``prefix`` keeps the input order; ``seeded-shuffle`` permutes the
    rows with a generator seeded by ``seed`` first.  Each part must have at
    least ``p`` rows (default: the number of design columns).
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}")
    n = data.n
    p = data.p if p is None else p
    n1 = first_part_size(n, gamma)
    if n < 2 or n1 < max(p, 1) or n - n1 < max(p, 1):
        raise SplitTooSmall(
            f"block {data.block_id}: n={n}, gamma={gamma:g} gives parts of "
            f"{n1} and {n - n1} rows; each needs at least {max(p, 1)}"
        )
    if mode == "prefix":
        order = np.arange(n)
    else:
        if seed is None:
            raise ValueError("seeded-shuffle mode needs a seed")
        rng = np.random.Generator(np.random.Philox(seed))
        order = rng.permutation(n)
    return data.take(order[:n1]), data.take(order[n1:])


def _extreme_labels(values: np.ndarray, labels: np.ndarray) -> tuple[int, int]:
    top = values.max()
    bottom = values.min()
    k_max = int(labels[values == top].min())
    if top == bottom:
        # all estimates tie: keep the smallest label for max, next one for min
        k_min = int(np.sort(labels)[1])
    else:
        k_min = int(labels[values == bottom].min())
    return k_max, k_min


def ect_from_arrays(first_est, second_est, second_se):
    """Vectorized ECT over leading axes, blocks on the last axis.

    Blocks are identified by position; ties go to the lowest position.
    Returns ``(statistic, idx_max, idx_min)`` with 0-based positions.
    """
    first_est = np.asarray(first_est, dtype=float)
    if first_est.shape[-1] < 2:
        raise KTooSmall("need at least 2 blocks")
    second_est = np.asarray(second_est, dtype=float)
    second_se = np.asarray(second_se, dtype=float)
    i_max = np.argmax(first_est, axis=-1)
    i_min = np.argmin(first_est, axis=-1)
    same = i_max == i_min
    if np.any(same):
        i_min = np.where(same, np.where(i_max == 0, 1, 0), i_min)
    take = lambda a, i: np.take_along_axis(a, i[..., None], axis=-1)[..., 0]
    num = take(second_est, i_max) - take(second_est, i_min)
    den = np.sqrt(take(second_se, i_max) ** 2 + take(second_se, i_min) ** 2)
    if np.any(den <= 0):
        raise NonPositiveVariance("zero standard error in a selected block")
    return num / den, i_max, i_min


def ect_statistic(
    first_fits: Sequence[LocalFit],
    second_fits: Sequence[LocalFit],
    dim: int,
    gamma: float = 2.0 / 3.0,
) -> EctOutcome:
    """Extreme contrast statistic for 1-based dimension ``dim``.

    Blocks are matched between the two lists by ``block_id``.  The
    extremes are chosen from the first-split estimates (ties go to the
    smallest block label); the contrast uses only the second-split
    estimates and standard errors of those two blocks.  Standard errors
    use the actual size of each second part.
    """
    if len(first_fits) < 2:
        raise KTooSmall(f"need at least 2 blocks, got {len(first_fits)}")
    second = {f.block_id: f for f in second_fits}
    for f in first_fits:
        if f.block_id not in second:
            raise MissingFit(f"no second-split fit for block {f.block_id}")
        if not (f.converged and second[f.block_id].converged):
            raise MissingFit(f"block {f.block_id} has an unconverged fit")
    j = dim - 1
    labels = np.array([f.block_id for f in first_fits])
    values = np.array([f.theta_hat[j] for f in first_fits])
    k_max, k_min = _extreme_labels(values, labels)
    a, b = second[k_max], second[k_min]
    se2 = a.se(j) ** 2 + b.se(j) ** 2
    if not se2 > 0:
        raise NonPositiveVariance(f"zero standard error for blocks {k_max}, {k_min}")
    stat = float((a.theta_hat[j] - b.theta_hat[j]) / math.sqrt(se2))
    return EctOutcome(stat, upper_p_value(stat), k_max, k_min, gamma)


# ---------------------------------------------------------------------------
# Combined
# ---------------------------------------------------------------------------


def combined_weight(n_min: int, K: int, preset: str = "theory") -> float:
    """Weight of the Wald statistic in the combination, clamped to at most 1.

    ``theory``: ``min(n_min / (K ln K), 1)``; ``simulation``:
    ``min(n_min / K**1.1, 1)``.
    """
    if K < 2:
        raise KTooSmall(f"need at least 2 blocks, got {K}")
    if n_min < 1:
        raise ValueError("n_min must be positive")
    if preset == "theory":
        r = n_min / (K * math.log(K))
    elif preset == "simulation":
        r = n_min / K ** 1.1
    else:
        raise ValueError(f"unknown weight preset {preset!r}")
    return min(r, 1.0)


def combine(wald_stat, ect_stat, weight):
    return (wald_stat * weight + ect_stat) / math.sqrt(weight * weight + 1.0)


def combined_statistic(wald: WaldOutcome, ect: EctOutcome, weight: float) -> CombinedOutcome:
    if not weight > 0:
        raise ValueError("weight must be positive")
    stat = float(combine(wald.statistic, ect.statistic, weight))
    return CombinedOutcome(stat, upper_p_value(stat), weight)


# ---------------------------------------------------------------------------
# Bonferroni decisions
# ---------------------------------------------------------------------------


def decide(
    outcomes: Mapping[int, Mapping[str, object]],
    alpha: float,
    p: int | None = None,
) -> HeterogeneityReport:
    """Reject dimension j for a family when its p-value is below ``alpha / p``.

    ``outcomes`` maps a 1-based dimension to ``{family: outcome}``; any
    object with a ``p_value`` attribute works as an outcome.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    p = len(outcomes) if p is None else p
    thresh = alpha / p
    families = sorted({f for d in outcomes.values() for f in d}, key=_family_order)
    rejected = {f: [] for f in (families or FAMILIES)}
    for j in sorted(outcomes):
        for fam, out in outcomes[j].items():
            if out.p_value < thresh:
                rejected[fam].append(j)
    return HeterogeneityReport(
        alpha=alpha,
        p=p,
        per_dim={j: dict(outcomes[j]) for j in sorted(outcomes)},
        rejected=rejected,
        p_threshold=thresh,
        critical_value=norm_ppf(1.0 - thresh),
    )


def _family_order(name: str):
    return (FAMILIES.index(name) if name in FAMILIES else len(FAMILIES), name)


# ---------------------------------------------------------------------------
# End to end on fitted blocks
# ---------------------------------------------------------------------------


def evaluate_dimensions(
    full_fits: Sequence[LocalFit],
    first_fits: Sequence[LocalFit],
    second_fits: Sequence[LocalFit],
    alpha: float = 0.05,
    gamma: float = 2.0 / 3.0,
    weight_preset: str = "theory",
) -> HeterogeneityReport:
    """Run all three tests on every dimension and apply the Bonferroni rule."""
    K = len(full_fits)
    if K < 2:
        raise KTooSmall(f"need at least 2 blocks, got {K}")
    p = full_fits[0].theta_hat.shape[0]
    n_min = min(f.n_used for f in full_fits)
    weight = combined_weight(n_min, K, weight_preset)
    notes = []
    if K >= n_min:
        notes.append(
            f"K={K} >= n_min={n_min}: the Wald statistic's normal approximation is unreliable"
        )
    outcomes = {}
    for dim in range(1, p + 1):
        sl = DimensionSlice.from_fits(full_fits, dim)
        try:
            w = wald_statistic(sl)
        except NonPositiveVariance as exc:
            raise exc.with_context(f"dimension {dim}")
        e = ect_statistic(first_fits, second_fits, dim, gamma)
        c = combined_statistic(w, e, weight)
        outcomes[dim] = {"wald": w, "ect": e, "combined": c}
    report = decide(outcomes, alpha, p)
    report.warnings.extend(notes)
    return report


