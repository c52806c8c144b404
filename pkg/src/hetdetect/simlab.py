"""Monte Carlo harness for family-wise error, power and coverage.

Each replicate draws K parameter vectors (a sparse two-point mixture on
one dimension, constant elsewhere), generates a GLM dataset per block
with i.i.d. Pareto covariates, fits every block on the full sample and on
both splits, and evaluates the three heterogeneity statistics on every
dimension.

Randomness comes from numpy's counter-based Philox generator.  Replicate
``r`` of phase ``ph`` uses ``SeedSequence(seed, spawn_key=(ph, r))``, so
streams never overlap and results do not depend on how replicates are
scheduled across threads.
"""

from __future__ import annotations

import logging
import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericalError, SplitTooSmall
from .glm_core import BlockData, SolverSettings, fit_stack, get_loss
from .inference import (
    FAMILIES,
    WEIGHT_PRESETS,
    combine,
    combined_weight,
    ect_from_arrays,
    first_part_size,
    renormalize_wald,
    wald_quad_form,
)
from .normal import norm_ppf, upper_p_value

log = logging.getLogger(__name__)

PHASE_MAIN = 0
PHASE_NULL = 1
CALIBRATIONS = ("nominal", "empirical")
DEFAULT_LEVELS = (0.95, 0.9, 0.1, 0.05)


# ---------------------------------------------------------------------------
# Distributions and data generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParetoSpec:
    """Pareto (type I) with density ``eta zeta^eta / x^(eta+1)`` on ``x >= zeta``."""

    eta: float = 4.1
    zeta: float = 2.0

    def __post_init__(self):
        if not (self.eta > 0 and self.zeta > 0):
            raise ConfigError("Pareto shape and scale must be positive")

    @property
    def mean(self) -> float:
        if self.eta <= 1:
            return math.inf
        return self.eta * self.zeta / (self.eta - 1.0)


def pareto_from_uniform(spec: ParetoSpec, u):
    """Inverse CDF: ``zeta * u^(-1/eta)`` for ``u`` in (0, 1]."""
    return spec.zeta * np.power(u, -1.0 / spec.eta)


def pareto_draws(spec: ParetoSpec, rng: np.random.Generator, size=None):
    u = 1.0 - rng.random(size)  # (0, 1]
    return pareto_from_uniform(spec, u)


def pareto_sample(spec: ParetoSpec, rng: np.random.Generator) -> float:
    return float(pareto_draws(spec, rng))


@dataclass(frozen=True)
class HeterogeneitySpec:
    """Two-point mixture on one dimension.

    Each block independently takes ``base_value + shift`` with probability
    ``K^-beta`` and ``base_value`` otherwise, where
    ``shift = shift_scale * K^((beta - 0.5) / 2) / sqrt(n)``.
    ``hetero_dim`` is 1-based.
    """

    beta: float = 0.5
    hetero_dim: int = 3
    base_value: float = 1.0
    shift_scale: float = 4.5

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if self.hetero_dim < 1:
            raise ConfigError("hetero_dim is 1-based")

    def mixing_prob(self, K: int) -> float:
        return K ** (-self.beta)

    def shift(self, K: int, n: int) -> float:
        return self.shift_scale * K ** ((self.beta - 0.5) / 2.0) / math.sqrt(n)


def gen_params(
    spec: HeterogeneitySpec | None,
    K: int,
    n: int,
    rng: np.random.Generator,
    p: int = 3,
    base_value: float = 1.0,
) -> tuple[np.ndarray, frozenset]:
    """Draw K parameter vectors; ``spec=None`` gives the homogeneous null.

    Returns ``(thetas, S)`` with ``thetas`` of shape ``(K, p)``.  ``S``
    holds the heterogeneous dimension only if at least two distinct values
    were realized.
    """
    if spec is None:
        return np.full((K, p), float(base_value)), frozenset()
    if spec.hetero_dim > p:
        raise ConfigError(f"hetero_dim {spec.hetero_dim} exceeds p={p}")
    thetas = np.full((K, p), float(spec.base_value))
    hit = rng.random(K) < spec.mixing_prob(K)
    thetas[hit, spec.hetero_dim - 1] += spec.shift(K, n)
    column = thetas[:, spec.hetero_dim - 1]
    S = frozenset({spec.hetero_dim}) if np.unique(column).size > 1 else frozenset()
    return thetas, S


def gen_block(
    theta,
    kind: str,
    n: int,
    pareto: ParetoSpec,
    rng: np.random.Generator,
    block_id: int = 1,
) -> BlockData:
    """Simulate one block: Pareto covariates, then a linear or logistic response.

    Linear noise is a Pareto draw minus the Pareto mean, so it has mean zero.
    """
    theta = np.asarray(theta, dtype=float)
    X = pareto_draws(pareto, rng, (n, theta.shape[0]))
    eta = X @ theta
    if kind == "linear":
        y = eta + (pareto_draws(pareto, rng, n) - pareto.mean)
    elif kind == "logistic":
        y = (rng.random(n) < expit(eta)).astype(float)
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    return BlockData(block_id, X, y)


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """One Monte Carlo experiment.  ``beta=None`` means the homogeneous null."""

    K: int = 25
    n: int = 500
    p: int = 3
    model: str = "linear"
    beta: float | None = None
    alpha: float = 0.05
    B: int = 500
    seed: int = 0
    gamma: float = 2.0 / 3.0
    weight: str = "theory"
    calibration: str = "nominal"
    hetero_dim: int = 3
    base_value: float = 1.0
    shift_scale: float = 4.5
    eta: float = 4.1
    zeta: float = 2.0
    coverage_dim: int = 1

    def __post_init__(self):
        problems = []
        if self.K < 2:
            problems.append("K must be at least 2")
        if self.n < 1 or self.p < 1:
            problems.append("n and p must be positive")
        if self.B < 1:
            problems.append("B must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            problems.append("alpha must lie in (0, 1)")
        if not 0.0 < self.gamma < 1.0:
            problems.append("gamma must lie in (0, 1)")
        if self.beta is not None and not 0.0 < self.beta <= 1.0:
            problems.append("beta must lie in (0, 1]")
        if self.model not in ("linear", "logistic"):
            problems.append(f"unknown model {self.model!r}")
        if self.weight not in WEIGHT_PRESETS:
            problems.append(f"unknown weight preset {self.weight!r}")
        if self.calibration not in CALIBRATIONS:
            problems.append(f"unknown calibration {self.calibration!r}")
        if not 1 <= self.hetero_dim <= self.p or not 1 <= self.coverage_dim <= self.p:
            problems.append("hetero_dim and coverage_dim must lie in 1..p")
        if not 0 <= self.seed < 2**64:
            problems.append("seed must be an unsigned 64-bit integer")
        if problems:
            raise ConfigError("; ".join(problems))
        n1 = first_part_size(self.n, self.gamma)
        if min(n1, self.n - n1) < self.p:
            raise SplitTooSmall(
                f"n={self.n}, gamma={self.gamma:g} leaves a split smaller than p={self.p}"
            )

    @property
    def is_null(self) -> bool:
        return self.beta is None

    def hetero_spec(self) -> HeterogeneitySpec | None:
        if self.beta is None:
            return None
        return HeterogeneitySpec(self.beta, self.hetero_dim, self.base_value, self.shift_scale)

    def pareto(self) -> ParetoSpec:
        return ParetoSpec(self.eta, self.zeta)

    def null_version(self) -> "SimConfig":
        return SimConfig(**{**asdict(self), "beta": None})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulation settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ReplicateOutcome:
    stats: dict[str, np.ndarray]  # family -> (p,)
    S: frozenset


@dataclass
class StatBatch:
    """Per-replicate statistics of the replicates that completed."""

    stats: dict[str, np.ndarray]  # family -> (B_valid, p)
    S: list[frozenset]
    failed: int
    failures: dict[str, int]

    @property
    def valid(self) -> int:
        return len(self.S)


@dataclass
class SimResult:
    config: SimConfig
    fwer: dict[str, float | None]
    power: dict[str, float | None]
    critical_values: dict[str, list[float]]
    replicates: int
    valid: int
    failed: int
    failures: dict[str, int]
    power_replicates: int
    null_valid: int | None = None
    coverage: dict[str, dict[str, float | None]] | None = None
    elapsed: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = self.config.to_dict()
        d.pop("elapsed")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimResult":
        d = dict(d)
        d["config"] = SimConfig.from_dict(d["config"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------

ReplicateFn = Callable[[SimConfig, np.random.SeedSequence], ReplicateOutcome]


def statistics_from_fits(full, first, second, K, n, weight):
    """Per-dimension W, T and TW from stacked fit arrays.

    ``full``/``first``/``second`` are ``(theta, var)`` pairs with shape
    ``(K, p)``; ``var`` is the squared standard error of each estimate.
    """
    th, var = full
    W = renormalize_wald(wald_quad_form(th.T, var.T), K)
    T, _, _ = ect_from_arrays(first[0].T, second[0].T, np.sqrt(second[1]).T)
    TW = combine(W, T, weight)
    return {"wald": W, "ect": T, "combined": TW}


def _fit_arrays(X, y, model, settings, split):
    fits = fit_stack(X, y, model, settings, split=split)
    theta = np.stack([f.theta_hat for f in fits])
    var = np.stack([f.sigma_hat**2 / f.n_used for f in fits])
    return theta, var


def simulate_replicate(config: SimConfig, ss: np.random.SeedSequence) -> ReplicateOutcome:
    """Generate, fit and test one replicate."""
    param_ss, block_ss = ss.spawn(2)
    thetas, S = gen_params(
        config.hetero_spec(), config.K, config.n,
        np.random.Generator(np.random.Philox(param_ss)),
        p=config.p, base_value=config.base_value,
    )
    pareto = config.pareto()
    blocks = [
        gen_block(thetas[k], config.model, config.n, pareto,
                  np.random.Generator(np.random.Philox(child)), block_id=k + 1)
        for k, child in enumerate(block_ss.spawn(config.K))
    ]
    X = np.stack([b.design for b in blocks])
    y = np.stack([b.response for b in blocks])
    n1 = first_part_size(config.n, config.gamma)
    settings = SolverSettings()
    full = _fit_arrays(X, y, config.model, settings, "full")
    first = _fit_arrays(X[:, :n1], y[:, :n1], config.model, settings, "first")
    second = _fit_arrays(X[:, n1:], y[:, n1:], config.model, settings, "second")
    weight = combined_weight(config.n, config.K, config.weight)
    stats = statistics_from_fits(full, first, second, config.K, config.n, weight)
    return ReplicateOutcome(stats, S)


def _run_one(args):
    config, phase, r, replicate_fn = args
    ss = np.random.SeedSequence(config.seed, spawn_key=(phase, r))
    try:
        return replicate_fn(config, ss)
    except NumericalError as exc:
        return type(exc).__name__


def simulate_statistics(
    config: SimConfig,
    phase: int = PHASE_MAIN,
    threads: int = 1,
    replicate_fn: ReplicateFn = simulate_replicate,
) -> StatBatch:
    """Run ``config.B`` replicates and collect the statistics of those that completed.

    Replicates that hit a numerical failure (typically separated logistic
    data) are dropped and counted by error type.
    """
    jobs = [(config, phase, r, replicate_fn) for r in range(config.B)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_run_one, jobs))
    else:
        outcomes = [_run_one(j) for j in jobs]

    good = [o for o in outcomes if isinstance(o, ReplicateOutcome)]
    failures = Counter(o for o in outcomes if isinstance(o, str))
    stats = {
        fam: (np.stack([o.stats[fam] for o in good]) if good else np.empty((0, config.p)))
        for fam in FAMILIES
    }
    return StatBatch(stats, [o.S for o in good], sum(failures.values()), dict(sorted(failures.items())))


def _rejections(stats: np.ndarray, alpha: float, p: int, crit: np.ndarray | None):
    if crit is None:
        return upper_p_value(stats) < alpha / p
    return stats > crit[None, :]


def empirical_critical_values(null_stats: np.ndarray, alpha: float, p: int) -> np.ndarray:
    """Per-dimension ``(1 - alpha/p)`` quantile of null statistics (linear interpolation)."""
    if null_stats.shape[0] == 0:
        raise NumericalError("no completed null replicates to calibrate against")
    return np.quantile(null_stats, 1.0 - alpha / p, axis=0)


def summarize(batch: StatBatch, alpha: float, p: int, crit: dict[str, np.ndarray] | None = None):
    """Return ``(fwer, power, power_replicates)`` dicts keyed by family.

    FWER is the fraction of replicates with at least one rejected
    homogeneous dimension.  Power averages ``|rejected & S| / |S|`` over
    the replicates whose realized ``S`` is non-empty.
    """
    fwer, power = {}, {}
    B = batch.valid
    truth = np.zeros((B, p), dtype=bool)
    for i, S in enumerate(batch.S):
        for j in S:
            truth[i, j - 1] = True
    has_signal = truth.any(axis=1)
    for fam in FAMILIES:
        rej = _rejections(batch.stats[fam], alpha, p, None if crit is None else crit[fam])
        fwer[fam] = float(np.mean((rej & ~truth).any(axis=1))) if B else None
        if has_signal.any():
            hits = (rej & truth).sum(axis=1)[has_signal] / truth.sum(axis=1)[has_signal]
            power[fam] = float(np.mean(hits))
        else:
            power[fam] = None
    return fwer, power, int(has_signal.sum())


def run_experiment(
    config: SimConfig,
    threads: int = 1,
    replicate_fn: ReplicateFn = simulate_replicate,
    levels: Sequence[float] | None = None,
) -> SimResult:
    """Estimate FWER and power for every test family.

    With ``calibration="empirical"`` a separate batch of null replicates is
    run first and each family/dimension is rejected above the empirical
    ``(1 - alpha/p)`` quantile of its null statistics instead of the normal
    quantile.  If ``levels`` is given, coverage at those nominal levels is
    added (computed on the main batch, dimension ``config.coverage_dim``).
    """
    t0 = time.perf_counter()
    crit = None
    null_valid = None
    if config.calibration == "empirical":
        null_batch = simulate_statistics(config.null_version(), PHASE_NULL, threads, replicate_fn)
        null_valid = null_batch.valid
        crit = {f: empirical_critical_values(null_batch.stats[f], config.alpha, config.p)
                for f in FAMILIES}
    batch = simulate_statistics(config, PHASE_MAIN, threads, replicate_fn)
    fwer, power, n_power = summarize(batch, config.alpha, config.p, crit)
    if crit is None:
        c = norm_ppf(1.0 - config.alpha / config.p)
        crit_out = {f: [c] * config.p for f in FAMILIES}
    else:
        crit_out = {f: [float(v) for v in crit[f]] for f in FAMILIES}
    coverage = None
    if levels is not None:
        coverage = _coverage(batch, levels, config.coverage_dim)
    elapsed = time.perf_counter() - t0
    log.info("ran %d replicates (%d failed) in %.1fs", config.B, batch.failed, elapsed)
    return SimResult(
        config=config,
        fwer=fwer,
        power=power,
        critical_values=crit_out,
        replicates=config.B,
        valid=batch.valid,
        failed=batch.failed,
        failures=batch.failures,
        power_replicates=n_power,
        null_valid=null_valid,
        coverage=coverage,
        elapsed=elapsed,
    )


def _level_key(tau: float) -> str:
    return f"{tau:g}"


def coverage_from_stats(values: np.ndarray, levels: Sequence[float]) -> dict[str, float | None]:
    """Fraction of ``values`` at or below ``Phi^{-1}(tau)`` for each level."""
    values = np.asarray(values, dtype=float)
    out = {}
    for tau in levels:
        out[_level_key(tau)] = float(np.mean(values <= norm_ppf(tau))) if values.size else None
    return out


def _coverage(batch: StatBatch, levels, dim: int):
    return {
        fam: coverage_from_stats(batch.stats[fam][:, dim - 1], levels)
        for fam in ("wald", "combined")
    }


def coverage_table(
    config: SimConfig,
    levels: Sequence[float] = DEFAULT_LEVELS,
    threads: int = 1,
    replicate_fn: ReplicateFn = simulate_replicate,
) -> SimResult:
    """Empirical null coverage of W and TW at each nominal level.

    Requires a null configuration.  The returned result also carries the
    nominal-level FWER of the same replicates.
    """
    if not config.is_null:
        raise ConfigError("coverage is defined under the null; set beta to None")
    if config.calibration != "nominal":
        config = SimConfig(**{**asdict(config), "calibration": "nominal"})
    return run_experiment(config, threads, replicate_fn, levels=levels)
