"""Per-block M-estimation: losses, damped Newton fitting, sandwich covariance.

Everything here is a pure function of its inputs.  The solver works on a
stack of equally sized blocks at once (``design`` of shape ``(K, n, p)``),
which is how the simulation harness fits hundreds of blocks per replicate;
:func:`fit_block` is the single-block entry point built on the same code.

All averaged quantities (score, Hessian, meat matrix) are means over
observations, so duplicating a dataset leaves estimates and covariances
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit

from .errors import (
    NonBinaryResponse,
    NonConvergence,
    NonFiniteInput,
    RankDeficientDesign,
    SingularHessian,
)

__all__ = [
    "BlockData",
    "LossModel",
    "LinearLoss",
    "LogisticLoss",
    "get_loss",
    "SolverSettings",
    "LocalFit",
    "fit_block",
    "fit_stack",
    "sandwich_variance",
    "sandwich_stack",
]


@dataclass(frozen=True)
class BlockData:
    """Observations held by one data block.

    ``design`` is ``(n, p)``, ``response`` is ``(n,)``.  Row order is
    meaningful: prefix splitting takes the leading rows.
    """

    block_id: int
    design: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        design = np.asarray(self.design, dtype=float)
        response = np.asarray(self.response, dtype=float).reshape(-1)
        if design.ndim == 1:
            design = design.reshape(-1, 1)
        if design.ndim != 2:
            raise ValueError("design must be a 2-D array")
        if design.shape[0] != response.shape[0]:
            raise ValueError(
                f"design has {design.shape[0]} rows but response has {response.shape[0]}"
            )
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "response", response)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    def take(self, rows) -> "BlockData":
        return BlockData(self.block_id, self.design[rows], self.response[rows])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------
#
# Evaluators broadcast over leading axes: X is (..., n, p), y is (..., n),
# theta is (..., p).  Outputs are per observation.


class LossModel:
    """Per-observation loss with analytic gradient and Hessian in theta."""

    kind: str = ""

    def linear_predictor(self, X, theta):
        return (X @ np.asarray(theta)[..., None])[..., 0]

    def value(self, X, y, theta):
        raise NotImplementedError

    def weights(self, X, y, theta):
        """Return ``(r, w)`` with gradient ``r * x`` and Hessian ``w * x x^T``."""
        raise NotImplementedError

    def gradient(self, X, y, theta):
        r, _ = self.weights(X, y, theta)
        return r[..., None] * X

    def hessian(self, X, y, theta):
        _, w = self.weights(X, y, theta)
        return w[..., None, None] * (X[..., :, None] * X[..., None, :])

    def check_response(self, y) -> None:
        pass

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class LinearLoss(LossModel):
    """Half squared error, ``(y - x'theta)^2 / 2``."""

    kind = "linear"

    def value(self, X, y, theta):
        e = y - self.linear_predictor(X, theta)
        return 0.5 * e * e

    def weights(self, X, y, theta):
        e = y - self.linear_predictor(X, theta)
        return -e, np.ones_like(e)


class LogisticLoss(LossModel):
    """Negative Bernoulli log-likelihood with logit link."""

    kind = "logistic"

    def value(self, X, y, theta):
        eta = self.linear_predictor(X, theta)
        # log(1 + e^eta) - y*eta, stable for large |eta|
        return np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta))) - y * eta

    def weights(self, X, y, theta):
        mu = expit(self.linear_predictor(X, theta))
        return mu - y, mu * (1.0 - mu)

    def check_response(self, y) -> None:
        y = np.asarray(y)
        bad = ~((y == 0.0) | (y == 1.0))
        if np.any(bad):
            value = y[bad].flat[0]
            raise NonBinaryResponse(f"logistic response must be 0 or 1, found {value:g}")


_LOSSES = {"linear": LinearLoss, "logistic": LogisticLoss}


def get_loss(kind: str | LossModel) -> LossModel:
    if isinstance(kind, LossModel):
        return kind
    try:
        return _LOSSES[kind]()
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {sorted(_LOSSES)}") from None


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-10
    max_iter: int = 100
    max_halvings: int = 50
    rank_tol: float = 1e-10
    # Hessian collapse relative to theta=0 that triggers the separation check
    collapse_ratio: float = 1e-6


@dataclass
class LocalFit:
    theta_hat: np.ndarray
    cov_hat: np.ndarray
    sigma_hat: np.ndarray
    n_used: int
    converged: bool
    iterations: int
    block_id: int = 0
    split: str = "full"
    degenerate: bool = False
    diagnostics: dict = field(default_factory=dict)

    def se(self, dim: int) -> float:
        """Standard error of the estimate for 0-based dimension ``dim``."""
        return float(self.sigma_hat[dim] / np.sqrt(self.n_used))


def _weighted_gram(w, X):
    """Mean of ``w_i x_i x_i'`` over observations."""
    return (np.swapaxes(X * w[..., None], -1, -2) @ X) / X.shape[-2]


def _mean_score(loss, X, y, theta):
    r, _ = loss.weights(X, y, theta)
    return (r[..., None, :] @ X)[..., 0, :] / X.shape[-2]


def _mean_hessian(loss, X, y, theta):
    _, w = loss.weights(X, y, theta)
    return _weighted_gram(w, X)


def _mean_loss(loss, X, y, theta):
    return loss.value(X, y, theta).mean(axis=-1)


def _check_inputs(X, y, loss):
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NonFiniteInput("design or response contains non-finite values")
    loss.check_response(y)


def _check_rank(X, rank_tol):
    """Flag blocks whose design is numerically rank deficient.

    The smallest singular value is compared with ``rank_tol`` times the
    largest column norm.
    """
    n, p = X.shape[-2:]
    if n < p:
        return np.ones(X.shape[:-2], dtype=bool)
    sv = np.linalg.svd(X, compute_uv=False)
    colnorm = np.sqrt((X * X).sum(axis=-2)).max(axis=-1)
    return sv[..., -1] <= rank_tol * np.maximum(colnorm, np.finfo(float).tiny)


def is_separable(X: np.ndarray, y: np.ndarray) -> bool:
    """Whether 0/1 labels are (quasi-)completely separated by a hyperplane through 0.

    Solves ``max sum_i s_i x_i'b`` subject to ``s_i x_i'b >= 0`` and
    ``|b_j| <= 1`` with ``s_i = 2 y_i - 1``.  For a full-rank design a
    positive optimum means the logistic MLE does not exist.
    """
    s = 2.0 * np.asarray(y, dtype=float) - 1.0
    A = s[:, None] * np.asarray(X, dtype=float)
    scale = np.abs(A).max()
    if scale == 0:
        return False
    A = A / scale
    res = linprog(
        -A.sum(axis=0), A_ub=-A, b_ub=np.zeros(A.shape[0]),
        bounds=[(-1.0, 1.0)] * A.shape[1], method="highs",
    )
    return bool(res.status == 0 and -res.fun > 1e-8)


def _newton(loss, X, y, settings):
    """Damped Newton on a stack of blocks.  Returns (theta, converged, iters)."""
    K, _, p = X.shape
    theta = np.zeros((K, p))
    g0 = np.linalg.norm(_mean_score(loss, X, y, theta), axis=-1)
    target = settings.tol * (1.0 + g0)
    converged = np.zeros(K, dtype=bool)
    iters = np.zeros(K, dtype=int)
    active = np.arange(K)

    for _ in range(settings.max_iter):
        Xa, ya, ta = X[active], y[active], theta[active]
        g = _mean_score(loss, Xa, ya, ta)
        done = np.linalg.norm(g, axis=-1) <= target[active]
        converged[active[done]] = True
        keep = ~done
        active, Xa, ya, ta, g = active[keep], Xa[keep], ya[keep], ta[keep], g[keep]
        if active.size == 0:
            break
        H = _mean_hessian(loss, Xa, ya, ta)
        try:
            step = np.linalg.solve(H, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(h, v, rcond=None)[0] for h, v in zip(H, g)])
        f0 = _mean_loss(loss, Xa, ya, ta)
        # near the optimum the decrease drops below the loss's rounding
        # error; accept changes within a few ulps so the step is not halved away
        slack = 16.0 * np.finfo(float).eps * (np.abs(f0) + 1.0)
        t = np.ones(active.size)
        cand = ta - step
        pending = np.ones(active.size, dtype=bool)
        for _ in range(settings.max_halvings):
            f1 = _mean_loss(loss, Xa[pending], ya[pending], cand[pending])
            ok = f1 <= f0[pending] + slack[pending]
            idx = np.flatnonzero(pending)
            pending[idx[ok]] = False
            if not pending.any():
                break
            t[pending] *= 0.5
            cand[pending] = ta[pending] - t[pending, None] * step[pending]
        # blocks that never found descent keep the last (tiny) step
        theta[active] = cand
        iters[active] += 1

    if active.size:
        g = _mean_score(loss, X[active], y[active], theta[active])
        done = np.linalg.norm(g, axis=-1) <= target[active]
        converged[active[done]] = True
    return theta, converged, iters


def sandwich_stack(loss, X, y, theta):
    """Sandwich covariance ``A^{-1} B A^{-T}`` for a stack of blocks.

    ``A`` is the mean Hessian and ``B`` the mean outer product of
    per-observation gradients.  The result estimates the covariance of
    ``sqrt(n) (theta_hat - theta*)``; it is not divided by ``n``.
    """
    loss = get_loss(loss)
    r, w = loss.weights(X, y, theta)
    A = _weighted_gram(w, X)
    B = _weighted_gram(r * r, X)
    ev = np.linalg.eigvalsh(A)
    if np.any(ev[..., 0] <= 1e-12 * np.maximum(np.abs(ev[..., -1]), np.finfo(float).tiny)):
        raise SingularHessian("averaged Hessian is singular at theta_hat")
    left = np.linalg.solve(A, B)
    V = np.swapaxes(np.linalg.solve(A, np.swapaxes(left, -1, -2)), -1, -2)
    return 0.5 * (V + np.swapaxes(V, -1, -2))


def sandwich_variance(data: BlockData, model, theta_hat) -> np.ndarray:
    """Sandwich covariance for one block at ``theta_hat``; returns a p x p matrix."""
    loss = get_loss(model)
    X, y = data.design, data.response
    theta = np.asarray(theta_hat, dtype=float).reshape(-1)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(theta))):
        raise NonFiniteInput("non-finite input to sandwich_variance")
    return sandwich_stack(loss, X[None], y[None], theta[None])[0]


def fit_stack(
    design: np.ndarray,
    response: np.ndarray,
    model,
    settings: SolverSettings | None = None,
    block_ids=None,
    split: str = "full",
) -> list[LocalFit]:
    """Fit every block in a ``(K, n, p)`` stack and attach sandwich covariances.

    Raises on the first block that fails; the message names the block.
    """
    settings = settings or SolverSettings()
    loss = get_loss(model)
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    K, n, p = X.shape
    ids = list(range(1, K + 1)) if block_ids is None else list(block_ids)
    _check_inputs(X, y, loss)

    deficient = _check_rank(X, settings.rank_tol)
    if deficient.any():
        k = int(np.flatnonzero(deficient)[0])
        raise RankDeficientDesign(
            f"block {ids[k]}: design ({n} x {p}) is numerically rank deficient"
        )

    theta, converged, iters = _newton(loss, X, y, settings)

    if loss.kind == "logistic":
        zero = np.zeros((K, p))
        ev0 = np.linalg.eigvalsh(_mean_hessian(loss, X, y, zero))[:, 0]
        ev1 = np.linalg.eigvalsh(_mean_hessian(loss, X, y, theta))[:, 0]
        suspicious = ~converged | (ev1 <= settings.collapse_ratio * ev0)
        for k in np.flatnonzero(suspicious):
            if is_separable(X[k], y[k]):
                raise NonConvergence(
                    f"block {ids[k]}: responses are separated; the logistic MLE does not exist"
                )
    if not converged.all():
        k = int(np.flatnonzero(~converged)[0])
        raise NonConvergence(
            f"block {ids[k]}: Newton did not converge in {settings.max_iter} iterations"
        )

    V = sandwich_stack(loss, X, y, theta)
    diag = np.clip(np.diagonal(V, axis1=-2, axis2=-1), 0.0, None)
    sigma = np.sqrt(diag)
    fits = []
    for k in range(K):
        degenerate = bool(np.any(diag[k] == 0.0))
        fits.append(
            LocalFit(
                theta_hat=theta[k],
                cov_hat=V[k],
                sigma_hat=sigma[k],
                n_used=n,
                converged=True,
                iterations=int(iters[k]),
                block_id=ids[k],
                split=split,
                degenerate=degenerate,
                diagnostics={"zero_variance": degenerate} if degenerate else {},
            )
        )
    return fits


def fit_block(
    data: BlockData,
    model,
    settings: SolverSettings | None = None,
    split: str = "full",
) -> LocalFit:
    """Fit one block by damped Newton from theta = 0 and compute its sandwich covariance.

    Raises
    ------
    RankDeficientDesign
        Fewer rows than columns, or numerically dependent columns.
    NonConvergence
        Iteration limit reached, or separated logistic data.
    NonFiniteInput
        NaN or infinity in the design or response.
    """
    if data.n < data.p:
        raise RankDeficientDesign(
            f"block {data.block_id}: {data.n} observations for {data.p} parameters"
        )
    return fit_stack(
        data.design[None], data.response[None], model, settings,
        block_ids=[data.block_id], split=split,
    )[0]
