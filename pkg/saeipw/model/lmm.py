"""
lmm.py.

Nested-error linear mixed model with a random treatment slope.

    y_ij = x~_ij' beta + w_ij gamma_j + u_j + e_ij,
    gamma_j ~ N(0, s2_gamma), u_j ~ N(0, s2_u), e_ij ~ N(0, s2_eps),

all independent. The covariance of area j is

    V_j = s2_gamma w_j w_j' + s2_u 1 1' + s2_eps I.

Every likelihood evaluation works on per-area sufficient statistics
(Z_j'Z_j, Z_j'X_j, Z_j'y_j with Z_j = [w_j, 1]) and the Woodbury form of
V_j^{-1}, so its cost grows with the number of areas, not units. The dense
n x n projection is only formed for the Fisher information.

Classes
-------
VarianceComponents
    (s2_gamma, s2_u, s2_eps).
LmmFit
    Fitted model: GLS coefficients, variance components, BLUPs, information.

Functions
---------
restricted_loglik(theta, sample, spec, method) -> float
gls_blup(theta, sample, spec) -> (beta, gamma_hat, u_hat)
fit_reml(sample, spec, opts) -> LmmFit
predict_outcomes(fit, pop) -> ndarray
fisher_information(fit) -> Information
"""

import logging
from functools import cached_property

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg
from scipy.optimize import minimize

from saeipw.errors import (
    NO_CONVERGENCE,
    SINGULAR_DESIGN,
    ContractError,
    ConvergenceError,
    RankError,
)
from saeipw.model.frames import PopulationFrame, SampleView
from saeipw.schema.options import LmmOptions, LmmSpec
from saeipw.utils import FloatArray, outcome_design

logger = logging.getLogger(__name__)

COMPONENTS = ("sigma2_gamma", "sigma2_u", "sigma2_eps")
# Variances below this fraction of the outcome variance sit on the boundary.
BOUNDARY = 1e-10
LOWER, UPPER = np.log(1e-12), np.log(1e6)


class VarianceComponents(BaseModel):
    """Variance components of the outcome model."""

    model_config = ConfigDict(frozen=True)

    sigma2_gamma: float = Field(..., ge=0.0, description="Random slope variance.")
    sigma2_u: float = Field(..., ge=0.0, description="Random intercept variance.")
    sigma2_eps: float = Field(..., gt=0.0, description="Unit error variance.")

    def as_array(self) -> FloatArray:
        """Return ``[s2_gamma, s2_u, s2_eps]``."""
        return np.array([self.sigma2_gamma, self.sigma2_u, self.sigma2_eps])

    @classmethod
    def from_array(cls, theta: FloatArray) -> "VarianceComponents":
        """Build from ``[s2_gamma, s2_u, s2_eps]``."""
        return cls(
            sigma2_gamma=float(theta[0]),
            sigma2_u=float(theta[1]),
            sigma2_eps=float(theta[2]),
        )


class Information(BaseModel):
    """Fisher information over ``(s2_gamma, s2_u, s2_eps)``."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    matrix: np.ndarray
    singular: bool


# ----------------------------------------------------------------------
# Sufficient statistics
# ----------------------------------------------------------------------
class AreaStatistics:
    """
    Per-area cross products of the random design, fixed design and outcome.

    Parameters
    ----------
    sample : SampleView
        Sampled units.
    spec : LmmSpec
        Model structure.
    """

    def __init__(self, sample: SampleView, spec: LmmSpec) -> None:
        self.sample = sample
        self.spec = spec
        self.X = outcome_design(sample.x, sample.w, spec.treatment)
        ones = np.ones(sample.n)
        self.Z = np.column_stack([sample.w, ones]) if spec.treatment else ones[:, None]
        self.y = np.asarray(sample.y, dtype=np.float64)
        self.area = sample.area
        self.m = sample.m
        self.n_j = sample.n_j.astype(np.float64)
        self.r = self.Z.shape[1]
        self.k = self.X.shape[1]

        self.ZtZ = np.zeros((self.m, self.r, self.r))
        np.add.at(self.ZtZ, self.area, self.Z[:, :, None] * self.Z[:, None, :])
        self.ZtX = np.zeros((self.m, self.r, self.k))
        np.add.at(self.ZtX, self.area, self.Z[:, :, None] * self.X[:, None, :])
        self.Zty = np.zeros((self.m, self.r))
        np.add.at(self.Zty, self.area, self.Z * self.y[:, None])
        self.XtX = self.X.T @ self.X
        self.Xty = self.X.T @ self.y
        self.yty = float(self.y @ self.y)

    def random_scales(self, theta: FloatArray) -> FloatArray:
        """Standard deviations of the random columns of Z."""
        variances = theta[:2] if self.spec.treatment else theta[1:2]
        return np.sqrt(np.maximum(variances, 0.0))

    def woodbury(self, theta: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        """
        Per-area pieces of ``V_j^{-1} = (I - L_j M_j^{-1} L_j') / s2_eps``.

        Returns
        -------
        s : ndarray (r,)
            Random-effect standard deviations, ``L_j = Z_j diag(s)``.
        M_inv : ndarray (m, r, r)
            Inverses of ``M_j = s2_eps I + L_j'L_j``.
        logdet_v : float
            ``log |V|``.
        """
        s = self.random_scales(theta)
        sigma2_eps = float(theta[2])
        M = sigma2_eps * np.eye(self.r) + s[None, :, None] * self.ZtZ * s[None, None, :]
        chol = np.linalg.cholesky(M)
        logdet_m = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        logdet_v = float(np.sum((self.n_j - self.r) * np.log(sigma2_eps) + logdet_m))
        return s, np.linalg.inv(M), logdet_v

    def gls_parts(self, theta: FloatArray) -> dict[str, object]:
        """
        Quadratic forms in ``V^{-1}`` needed by the likelihood and GLS.

        Raises
        ------
        RankError
            If ``X'V^{-1}X`` is singular.
        """
        s, M_inv, logdet_v = self.woodbury(theta)
        sigma2_eps = float(theta[2])
        sztx = s[None, :, None] * self.ZtX
        szty = s[None, :] * self.Zty
        xtvx = (self.XtX - np.einsum("jra,jrs,jsb->ab", sztx, M_inv, sztx)) / sigma2_eps
        xtvy = (self.Xty - np.einsum("jra,jrs,js->a", sztx, M_inv, szty)) / sigma2_eps
        ytvy = (self.yty - np.einsum("jr,jrs,js->", szty, M_inv, szty)) / sigma2_eps
        xtvx = 0.5 * (xtvx + xtvx.T)
        try:
            factor = linalg.cho_factor(xtvx, lower=True)
        except linalg.LinAlgError as exc:
            raise RankError(SINGULAR_DESIGN) from exc
        beta = linalg.cho_solve(factor, xtvy)
        return {
            "s": s,
            "M_inv": M_inv,
            "logdet_v": logdet_v,
            "logdet_x": 2.0 * float(np.log(np.diag(factor[0])).sum()),
            "xtvx": xtvx,
            "beta": beta,
            "quad": float(ytvy - xtvy @ beta),
        }

    def z_vinv(
        self, theta: FloatArray, s: FloatArray, M_inv: FloatArray, rhs: FloatArray
    ) -> FloatArray:
        """
        ``Z_j' V_j^{-1} R_j`` for per-area right-hand sides ``Z_j'R_j``.

        Parameters
        ----------
        rhs : ndarray (m, r, ...)
            Per-area ``Z_j' R_j``.
        """
        sigma2_eps = float(theta[2])
        inner = np.einsum("r,jrs,s->jrs", s, M_inv, s)
        correction = np.einsum("jab,jbc,jc...->ja...", self.ZtZ, inner, rhs)
        return (rhs - correction) / sigma2_eps

    def dense_inverse(self, theta: FloatArray) -> FloatArray:
        """Dense block-diagonal ``V^{-1}`` in sample order."""
        s, M_inv, _ = self.woodbury(theta)
        sigma2_eps = float(theta[2])
        v_inv = np.zeros((self.sample.n, self.sample.n))
        for j, members in enumerate(self.sample.groups):
            if members.size == 0:
                continue
            L = self.Z[members] * s[None, :]
            block = np.eye(members.size) - L @ M_inv[j] @ L.T
            v_inv[np.ix_(members, members)] = block / sigma2_eps
        return v_inv

    def indicator_matrices(self) -> dict[int, FloatArray]:
        """``A_t`` with ``V_t = A_t A_t'`` for the random components."""
        n, m = self.sample.n, self.m
        rows = np.arange(n)
        intercept = np.zeros((n, m))
        intercept[rows, self.area] = 1.0
        mats = {1: intercept}
        if self.spec.treatment:
            slope = np.zeros((n, m))
            slope[rows, self.area] = self.sample.w
            mats[0] = slope
        return mats


def restricted_loglik(
    theta: VarianceComponents | FloatArray,
    sample: SampleView,
    spec: LmmSpec | None = None,
    method: str = "reml",
) -> float:
    """
    Restricted (or ordinary) log-likelihood up to an additive constant.

    ``-0.5 [log|V| + log|X'V^{-1}X| + y'Py]`` for REML and
    ``-0.5 [log|V| + y'Py]`` for ML.

    Parameters
    ----------
    theta : VarianceComponents or array
        ``(s2_gamma, s2_u, s2_eps)``.
    sample : SampleView
        Sampled units.
    spec : LmmSpec, optional
        Model structure; default includes the treatment slope.
    method : {"reml", "ml"}
        Criterion.

    Raises
    ------
    ContractError
        Negative variances, non-positive error variance or an empty sample.
    RankError
        Singular ``X'V^{-1}X``.
    """
    stats = AreaStatistics(sample, spec or LmmSpec())
    return _criterion(stats, _theta_array(theta), method)


def _theta_array(theta: VarianceComponents | FloatArray) -> FloatArray:
    if isinstance(theta, VarianceComponents):
        return theta.as_array()
    values = np.asarray(theta, dtype=np.float64)
    if values.shape != (3,) or np.any(values[:2] < 0) or values[2] <= 0:
        raise ContractError("theta must be (s2_gamma >= 0, s2_u >= 0, s2_eps > 0)")
    return values


def _criterion(stats: AreaStatistics, theta: FloatArray, method: str) -> float:
    if stats.sample.n == 0:
        raise ContractError("the sample is empty")
    parts = stats.gls_parts(theta)
    value = float(parts["logdet_v"]) + float(parts["quad"])  # type: ignore[arg-type]
    if method == "reml":
        value += float(parts["logdet_x"])  # type: ignore[arg-type]
    return -0.5 * value


def gls_blup(
    theta: VarianceComponents | FloatArray,
    sample: SampleView,
    spec: LmmSpec | None = None,
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """
    GLS fixed effects and BLUPs at given variance components.

    Returns
    -------
    beta : ndarray (k,)
        ``(X'V^{-1}X)^{-1} X'V^{-1} y``.
    gamma_hat : ndarray (m,)
        ``s2_gamma W'V^{-1}(y - X beta)``; zero without the treatment slope.
    u_hat : ndarray (m,)
        ``s2_u Z'V^{-1}(y - X beta)``.
    """
    stats = AreaStatistics(sample, spec or LmmSpec())
    return _blups(stats, _theta_array(theta))


def _blups(
    stats: AreaStatistics, theta: FloatArray
) -> tuple[FloatArray, FloatArray, FloatArray]:
    parts = stats.gls_parts(theta)
    beta = np.asarray(parts["beta"])
    ztr = stats.Zty - stats.ZtX @ beta
    s, M_inv = parts["s"], parts["M_inv"]
    z_vinv_r = stats.z_vinv(theta, s, M_inv, ztr)  # type: ignore[arg-type]
    if stats.spec.treatment:
        gamma = theta[0] * z_vinv_r[:, 0]
        u = theta[1] * z_vinv_r[:, 1]
    else:
        gamma = np.zeros(stats.m)
        u = theta[1] * z_vinv_r[:, 0]
    return beta, gamma, u


# ----------------------------------------------------------------------
# Fitted model
# ----------------------------------------------------------------------
class LmmFit(BaseModel):
    """
    Fitted outcome mixed model.

    Attributes
    ----------
    beta_tilde : ndarray
        GLS coefficients for (intercept, covariates, treatment).
    theta : VarianceComponents
        Estimated variance components.
    gamma_hat, u_hat : ndarray (m,)
        Predicted area slopes and intercepts.
    fisher : ndarray (3, 3)
        Expected information over ``theta``.
    fisher_singular : bool
        Information is numerically singular.
    boundary : tuple[str, ...]
        Components estimated on the boundary.
    converged : bool
        Optimiser reached its tolerances.
    reml_value : float
        Criterion at the optimum.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    beta_tilde: np.ndarray
    theta: VarianceComponents
    gamma_hat: np.ndarray
    u_hat: np.ndarray
    fisher: np.ndarray
    fisher_singular: bool
    boundary: tuple[str, ...]
    converged: bool
    reml_value: float
    method: str
    spec: LmmSpec
    sample: SampleView
    iterations: int = 0

    @cached_property
    def statistics(self) -> AreaStatistics:
        """Sufficient statistics of the fitted sample."""
        return AreaStatistics(self.sample, self.spec)

    @property
    def m(self) -> int:
        """Number of areas."""
        return self.sample.m

    @property
    def free(self) -> tuple[int, ...]:
        """Indices of components estimated in the interior."""
        return tuple(
            t for t, name in enumerate(COMPONENTS) if name not in self.boundary
        )


def _information(
    stats: AreaStatistics, theta: FloatArray, method: str
) -> tuple[FloatArray, FloatArray]:
    """Fisher information and score over the three components."""
    v_inv = stats.dense_inverse(theta)
    v_inv_x = v_inv @ stats.X
    xtvx = stats.X.T @ v_inv_x
    try:
        c_inv = linalg.inv(0.5 * (xtvx + xtvx.T))
    except linalg.LinAlgError as exc:
        raise RankError(SINGULAR_DESIGN) from exc
    P = v_inv - v_inv_x @ c_inv @ v_inv_x.T
    P = 0.5 * (P + P.T)
    Q = P if method == "reml" else v_inv
    py = P @ stats.y

    mats = stats.indicator_matrices()
    qa = {t: Q @ a for t, a in mats.items()}
    info = np.zeros((3, 3))
    score = np.zeros(3)
    for s_idx, a_s in mats.items():
        for t_idx, a_t in mats.items():
            info[s_idx, t_idx] = 0.5 * np.sum((a_s.T @ qa[t_idx]) ** 2)
        info[s_idx, 2] = info[2, s_idx] = 0.5 * np.sum(qa[s_idx] ** 2)
        score[s_idx] = -0.5 * np.sum(a_s * qa[s_idx]) + 0.5 * np.sum((a_s.T @ py) ** 2)
    info[2, 2] = 0.5 * np.sum(Q**2)
    score[2] = -0.5 * np.trace(Q) + 0.5 * float(py @ py)
    return 0.5 * (info + info.T), score


def _is_singular(matrix: FloatArray, active: tuple[int, ...]) -> bool:
    """Numerical singularity of the information restricted to `active`."""
    if not active:
        return True
    eigenvalues = np.linalg.eigvalsh(matrix[np.ix_(active, active)])
    scale = max(float(np.max(np.abs(eigenvalues))), np.finfo(float).tiny)
    return bool(np.min(eigenvalues) <= 1e-10 * scale)


def fisher_information(fit: LmmFit) -> Information:
    """
    Expected information ``I_st = 0.5 tr(P V_s P V_t)`` at the fitted theta.

    ML fits use ``V^{-1}`` in place of ``P``. Components that are not
    identified (no treatment slope in the model, no treated units) give
    zero rows and a singular flag.
    """
    matrix, _ = _information(fit.statistics, fit.theta.as_array(), fit.method)
    singular = _is_singular(matrix, tuple(range(3)))
    return Information(matrix=matrix, singular=singular)


def _ols_start(stats: AreaStatistics) -> tuple[float, float]:
    """OLS residual variance and the outcome variance used for scaling."""
    coef, *_ = linalg.lstsq(stats.X, stats.y)
    resid = stats.y - stats.X @ coef
    dof = max(stats.sample.n - stats.k, 1)
    data_scale = float(np.var(stats.y)) if stats.sample.n > 1 else 0.0
    if not np.isfinite(data_scale) or data_scale <= 0.0:
        data_scale = 1.0
    return float(resid @ resid) / dof, data_scale


def fit_reml(
    sample: SampleView,
    spec: LmmSpec | None = None,
    opts: LmmOptions | None = None,
) -> LmmFit:
    """
    Fit the outcome model by REML (or ML).

    The criterion is maximised over ``log(theta / var(y))`` with a bounded
    Nelder-Mead simplex started at the OLS residual variance (random-effect
    variances at 10% of it), then polished by Fisher scoring on the interior
    components with step halving. Components below ``1e-10 var(y)`` are on the
    boundary: slope and intercept variances are set to exactly zero, the
    error variance keeps its floor value.

    Parameters
    ----------
    sample : SampleView
        Sampled units; every area used must have at least one unit.
    spec : LmmSpec, optional
        Model structure.
    opts : LmmOptions, optional
        Optimiser settings.

    Returns
    -------
    LmmFit

    Raises
    ------
    ConvergenceError
        The polish did not meet the tolerances; carries the best theta.
    RankError
        The fixed design is rank deficient on the sample.
    """
    spec = spec or LmmSpec()
    opts = opts or LmmOptions()
    stats = AreaStatistics(sample, spec)
    if sample.n <= stats.k:
        raise RankError(SINGULAR_DESIGN, n=sample.n, k=stats.k)
    if np.linalg.matrix_rank(stats.X) < stats.k:
        raise RankError(SINGULAR_DESIGN)

    sigma2_ols, data_scale = _ols_start(stats)
    start = max(sigma2_ols, 1e-6 * data_scale)
    free_start = np.array([0.1 * start, 0.1 * start, start]) / data_scale
    estimable = [0, 1, 2] if spec.treatment else [1, 2]

    def to_theta(phi: FloatArray) -> FloatArray:
        theta = np.zeros(3)
        theta[estimable] = np.exp(phi) * data_scale
        return theta

    def objective(phi: FloatArray) -> float:
        try:
            return -_criterion(stats, to_theta(phi), opts.method)
        except (RankError, np.linalg.LinAlgError):
            return np.inf

    phi0 = np.clip(np.log(free_start[estimable]), LOWER, UPPER)
    result = minimize(
        objective,
        phi0,
        method="Nelder-Mead",
        bounds=[(LOWER, UPPER)] * len(estimable),
        options={"maxiter": opts.max_iter, "xatol": 1e-7, "fatol": 1e-11},
    )
    theta = to_theta(np.clip(result.x, LOWER, UPPER))
    theta, value, iterations, converged = _polish(stats, theta, data_scale, spec, opts)
    if not converged:
        raise ConvergenceError(
            NO_CONVERGENCE.format(what="REML polish", iterations=opts.max_iter),
            best=VarianceComponents.from_array(theta),
        )

    boundary = tuple(
        name
        for t, name in enumerate(COMPONENTS)
        if t in estimable and theta[t] < BOUNDARY * data_scale
    )
    if not spec.treatment:
        boundary = ("sigma2_gamma", *boundary)
    for t, name in enumerate(COMPONENTS[:2]):
        if name in boundary:
            theta[t] = 0.0
    if boundary:
        logger.warning(
            "variance component at boundary",
            extra={"component": ",".join(boundary), "method": opts.method},
        )

    beta, gamma, u = _blups(stats, theta)
    fisher, _ = _information(stats, theta, opts.method)
    active = tuple(t for t, name in enumerate(COMPONENTS) if name not in boundary)
    singular = _is_singular(fisher, active)
    if singular:
        logger.warning("fisher information is singular", extra={"method": opts.method})

    return LmmFit(
        beta_tilde=beta,
        theta=VarianceComponents.from_array(theta),
        gamma_hat=gamma,
        u_hat=u,
        fisher=fisher,
        fisher_singular=singular,
        boundary=boundary,
        converged=True,
        reml_value=_criterion(stats, theta, opts.method),
        method=opts.method,
        spec=spec,
        sample=sample,
        iterations=int(result.nit) + iterations,
    )


def _polish(
    stats: AreaStatistics,
    theta: FloatArray,
    data_scale: float,
    spec: LmmSpec,
    opts: LmmOptions,
) -> tuple[FloatArray, float, int, bool]:
    """Fisher scoring on interior components with step halving."""
    floor = BOUNDARY * data_scale
    theta = theta.copy()
    value = _criterion(stats, theta, opts.method)
    estimable = [0, 1, 2] if spec.treatment else [1, 2]
    for iteration in range(1, opts.max_iter + 1):
        free = [t for t in estimable if theta[t] >= floor]
        if not free:
            return theta, value, iteration, True
        info, score = _information(stats, theta, opts.method)
        step, *_ = linalg.lstsq(info[np.ix_(free, free)], score[free])
        scale = 1.0
        accepted = False
        for _ in range(40):
            trial = theta.copy()
            trial[free] = theta[free] + scale * step
            # keep the error variance strictly positive, pin the others
            trial[2] = max(trial[2], floor)
            trial[:2] = np.where(trial[:2] < floor, 0.0, trial[:2])
            try:
                trial_value = _criterion(stats, trial, opts.method)
            except (RankError, np.linalg.LinAlgError):
                trial_value = -np.inf
            if trial_value >= value - 1e-14 * abs(value):
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            # no ascent direction left at machine precision
            return theta, value, iteration, True
        change = float(np.max(np.abs(trial - theta))) / data_scale
        gain = abs(trial_value - value) / max(1.0, abs(value))
        theta, value = trial, trial_value
        if gain < opts.ftol and change < opts.xtol:
            return theta, value, iteration, True
    return theta, value, opts.max_iter, False


def predict_outcomes(fit: LmmFit, pop: PopulationFrame) -> FloatArray:
    """
    EBLUP predictions ``x~'beta + w gamma_j + u_j`` for every population unit.

    Areas without sampled units (or unknown to the fit) get zero random
    effects, i.e. a synthetic prediction, and a warning.
    """
    X = outcome_design(pop.x, pop.w, fit.spec.treatment)
    gamma = np.zeros(pop.m)
    u = np.zeros(pop.m)
    known = min(pop.m, fit.m)
    gamma[:known] = fit.gamma_hat[:known]
    u[:known] = fit.u_hat[:known]
    fitted_counts = np.zeros(pop.m)
    fitted_counts[:known] = fit.sample.n_j[:known]
    for j in np.flatnonzero(fitted_counts == 0):
        if np.any(pop.area == j):
            logger.warning(
                "synthetic prediction for area without sampled units",
                extra={"area": pop.area_labels[j]},
            )
    return X @ fit.beta_tilde + pop.w * gamma[pop.area] + u[pop.area]
