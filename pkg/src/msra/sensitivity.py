"""Marginal risk contributions and allocation sensitivities.

The directional derivative of the risk and its allocation toward a shock Y
comes from the linearized saddle system

    M [dm; dlam] = V,
    M = [[lam E[hess l(X-m)], -(1/lam) 1], [1^T, 0]],
    V = [lam E[hess l(X-m) Y], lam E[grad l(X-m) . Y]],

whose bottom entry is the marginal risk itself.  The same machinery yields
the derivative with respect to the systemic weight for losses of the form
base(x) + alpha * dep(x).  Closed forms are provided for the exponential
bivariate Gaussian case and for the symmetric bivariate shock case study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estimators import ConstraintEstimator
from .loss import LossSpec, UnsupportedOperation, alpha_decomposition
from .scenario import ScenarioSet
from .solver import AllocationResult, solve_allocation

_CONDITION_LIMIT = 1e12


class SensitivityError(ValueError):
    pass


class SingularSystemError(SensitivityError):
    """Saddle matrix numerically singular; use the finite-difference method."""


@dataclass(frozen=True)
class SaddleSystem:
    """Linearized first-order system (M, V) at an optimal allocation."""

    M: np.ndarray
    V: np.ndarray
    condition: float
    cov_V: np.ndarray | None = None


@dataclass(frozen=True)
class SensitivityResult:
    marginal_risk: float
    marginal_alloc: np.ndarray
    lambda_dot: float
    method: str  # "linear_system" | "finite_difference" | "closed_form"
    standard_errors: np.ndarray | None = None  # per component of (alloc, lambda)
    marginal_risk_se: float | None = None
    condition: float | None = None

    def to_json(self) -> dict:
        return {
            "marginal_risk": self.marginal_risk,
            "marginal_alloc": self.marginal_alloc.tolist(),
            "lambda_dot": self.lambda_dot,
            "method": self.method,
            "standard_errors": None
            if self.standard_errors is None
            else self.standard_errors.tolist(),
            "marginal_risk_se": self.marginal_risk_se,
            "condition": self.condition,
        }


def _saddle_matrix(hess: np.ndarray, lam: float) -> np.ndarray:
    d = hess.shape[0]
    m = np.zeros((d + 1, d + 1))
    m[:d, :d] = lam * hess
    m[:d, d] = -1.0 / lam
    m[d, :d] = 1.0
    return m


def marginal_risk(est: ConstraintEstimator, alloc: AllocationResult, shock) -> float:
    """lam* E[grad loss(X - m*) . Y] for a pathwise-aligned shock Y."""
    value, _ = est.grad_dot_moments(alloc.m_star, alloc.lambda_star, shock)
    return value


def build_saddle_system(
    est: ConstraintEstimator, alloc: AllocationResult, shock
) -> SaddleSystem:
    res = est.estimate(alloc.m_star)
    if res.hess is None:
        raise UnsupportedOperation(
            "saddle system needs a twice differentiable loss; "
            "use the finite-difference method"
        )
    m = _saddle_matrix(res.hess, alloc.lambda_star)
    v, cov_v = est.shock_moments(alloc.m_star, alloc.lambda_star, shock)
    return SaddleSystem(M=m, V=v, condition=float(np.linalg.cond(m)), cov_V=cov_v)


def marginal_allocation(system: SaddleSystem) -> SensitivityResult:
    """Solve M z = V and unpack z into the allocation marginals and the
    multiplier derivative."""
    if not np.isfinite(system.condition) or system.condition >= _CONDITION_LIMIT:
        raise SingularSystemError(
            f"saddle matrix condition {system.condition:.3e} >= {_CONDITION_LIMIT:.0e}; "
            "use the finite-difference method"
        )
    z = np.linalg.solve(system.M, system.V)
    d = z.shape[0] - 1
    ses = None
    risk_se = None
    if system.cov_V is not None:
        minv = np.linalg.inv(system.M)
        cov_z = minv @ system.cov_V @ minv.T
        ses = np.sqrt(np.clip(np.diag(cov_z), 0.0, None))
        risk_se = math.sqrt(max(system.cov_V[d, d], 0.0))
    return SensitivityResult(
        marginal_risk=float(system.V[d]),
        marginal_alloc=z[:d],
        lambda_dot=float(z[d]),
        method="linear_system",
        standard_errors=ses,
        marginal_risk_se=risk_se,
        condition=system.condition,
    )


def shock_sensitivity(
    est: ConstraintEstimator, alloc: AllocationResult, shock
) -> SensitivityResult:
    """Convenience wrapper: build the saddle system for the shock and solve it."""
    return marginal_allocation(build_saddle_system(est, alloc, shock))


# ---------------------------------------------------------------------------
# closed forms

def src_closed_form(rho: float, sigma1: float, sigma2: float, alpha: float) -> float:
    """Systemic risk contribution of the exponential bivariate Gaussian case:
    log(1 + alpha * exp(rho s1 s2 - (s1^2 + s2^2)/2))."""
    if alpha < 0:
        raise SensitivityError("alpha must be >= 0")
    if not -1.0 <= rho <= 1.0:
        raise SensitivityError("correlation must lie in [-1, 1]")
    if sigma1 <= 0 or sigma2 <= 0:
        raise SensitivityError("volatilities must be positive")
    return math.log1p(
        alpha * math.exp(rho * sigma1 * sigma2 - 0.5 * (sigma1**2 + sigma2**2))
    )


def exp_bivariate_closed_form(rho: float, sigma1: float, sigma2: float, alpha: float):
    """Optimal allocation and risk for the exponential bivariate loss under a
    centered Gaussian model: RA_i = sigma_i^2 + SRC/2, R = sum sigma_i^2 + SRC."""
    src = src_closed_form(rho, sigma1, sigma2, alpha)
    ra = np.array([sigma1**2 + 0.5 * src, sigma2**2 + 0.5 * src])
    return ra, float(sigma1**2 + sigma2**2 + src)


def bivariate_shock_closed_form(x: np.ndarray, y1: np.ndarray, m: np.ndarray, alpha: float):
    """Plug-in closed forms for a shock (Y1, 0) on the symmetric bivariate
    pure-quadratic systemic loss: returns (marginal risk, RA1 dot, RA2 dot).

    Probabilities and partial moments are estimated on the same scenarios
    (common random numbers), so the outputs carry Monte Carlo noise.
    """
    x = np.asarray(x, dtype=np.float64)
    y1 = np.asarray(y1, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    e1 = np.maximum(x[:, 0] - m[0], 0.0)
    e2 = np.maximum(x[:, 1] - m[1], 0.0)
    i1 = x[:, 0] >= m[0]
    both = i1 & (x[:, 1] >= m[1])
    p = i1.mean()
    r = both.mean()
    denom = e1.mean() + alpha * (e2 * i1).mean()
    risk_dot = (np.mean(y1 * e1) + alpha * np.mean(y1 * e2 * i1)) / denom
    split = (np.mean(y1 * i1) - alpha * np.mean(y1 * both)) / (p - alpha * r)
    return float(risk_dot), float(0.5 * risk_dot + 0.5 * split), float(
        0.5 * risk_dot - 0.5 * split
    )


# ---------------------------------------------------------------------------
# systemic-weight sensitivity

@dataclass(frozen=True)
class AlphaSensitivity:
    d_risk: float
    d_alloc: np.ndarray
    d_lambda: float
    standard_errors: np.ndarray | None = None
    d_risk_se: float | None = None

    def to_json(self) -> dict:
        return {
            "d_risk": self.d_risk,
            "d_alloc": self.d_alloc.tolist(),
            "d_lambda": self.d_lambda,
            "standard_errors": None
            if self.standard_errors is None
            else self.standard_errors.tolist(),
            "d_risk_se": self.d_risk_se,
        }


def alpha_sensitivity(est: ConstraintEstimator, alloc: AllocationResult) -> AlphaSensitivity:
    """Derivative of (R, RA, lam) with respect to the systemic weight for
    losses of the form base(x) + alpha * dep(x).

    dR/dalpha = lam E[dep(X - m*)] and the allocation derivative solves the
    saddle system with right-hand side (lam E[grad dep(X - m*)], dR/dalpha).
    """
    decomp = alpha_decomposition(est.loss)
    if decomp is None:
        raise UnsupportedOperation(
            f"loss family {est.loss.family!r} has no systemic-weight decomposition"
        )
    dep_value, dep_grad = decomp
    res = est.estimate(alloc.m_star)
    if res.hess is None:
        raise UnsupportedOperation("alpha sensitivity needs a twice differentiable loss")
    v, cov_v = est.dep_moments(alloc.m_star, alloc.lambda_star, dep_value, dep_grad)
    m = _saddle_matrix(res.hess, alloc.lambda_star)
    system = SaddleSystem(M=m, V=v, condition=float(np.linalg.cond(m)), cov_V=cov_v)
    out = marginal_allocation(system)
    return AlphaSensitivity(
        d_risk=out.marginal_risk,
        d_alloc=out.marginal_alloc,
        d_lambda=out.lambda_dot,
        standard_errors=out.standard_errors,
        d_risk_se=out.marginal_risk_se,
    )


# ---------------------------------------------------------------------------
# finite-difference oracles (re-solve under common random numbers)

def finite_difference_shock(
    scenarios: ScenarioSet,
    loss: LossSpec,
    shock,
    t: float = 1e-3,
    tol: float | None = None,
    init=None,
    accept_nonunique: bool = False,
) -> SensitivityResult:
    """Central finite differences of the solver along X + t Y on the same
    scenario rows."""
    y = shock.data if isinstance(shock, ScenarioSet) else np.asarray(shock, dtype=np.float64)
    if y.shape != scenarios.data.shape:
        raise SensitivityError("shock scenarios are not pathwise aligned")
    results = []
    for sign in (+1.0, -1.0):
        shifted = ScenarioSet(
            data=scenarios.data + sign * t * y,
            seed=scenarios.seed,
            model_tag=scenarios.model_tag + f"+shock({sign * t:g})",
        )
        est = ConstraintEstimator(shifted, loss)
        results.append(
            solve_allocation(est, init=init, tol=tol, accept_nonunique=accept_nonunique)
        )
    hi, lo = results
    return SensitivityResult(
        marginal_risk=(hi.risk - lo.risk) / (2.0 * t),
        marginal_alloc=(hi.m_star - lo.m_star) / (2.0 * t),
        lambda_dot=(hi.lambda_star - lo.lambda_star) / (2.0 * t),
        method="finite_difference",
    )


def finite_difference_alpha(
    scenarios: ScenarioSet,
    loss: LossSpec,
    t: float = 1e-3,
    tol: float | None = None,
    init=None,
    central: bool = True,
) -> AlphaSensitivity:
    """Finite differences of the solver in the systemic weight."""
    if alpha_decomposition(loss) is None:
        raise UnsupportedOperation(
            f"loss family {loss.family!r} has no systemic-weight decomposition"
        )
    steps = (loss.alpha + t, loss.alpha - t) if central else (loss.alpha + t, loss.alpha)
    if min(steps) < 0:
        raise SensitivityError("alpha step leaves the admissible range; use forward differences")
    results = []
    for a in steps:
        spec = LossSpec(
            family=loss.family,
            d=loss.d,
            alpha=a,
            beta=loss.beta,
            kernel=loss.kernel,
            kernels=loss.kernels,
            kernel_beta=loss.kernel_beta,
            include_linear=loss.include_linear,
        )
        est = ConstraintEstimator(scenarios, spec)
        results.append(solve_allocation(est, init=init, tol=tol))
    hi, lo = results
    span = steps[0] - steps[1]
    return AlphaSensitivity(
        d_risk=(hi.risk - lo.risk) / span,
        d_alloc=(hi.m_star - lo.m_star) / span,
        d_lambda=(hi.lambda_star - lo.lambda_star) / span,
    )
