"""Risk allocation solver.

Solves the constrained program

    R(X) = inf { sum m_k : E[loss(X - m)] <= 0 }

via damped Newton on the first-order system

    lam * E[grad loss(X - m)] = 1,    E[loss(X - m)] = 0,

with an SQP (SLSQP) fallback used for non-smooth losses, box constraints,
or when Newton stalls.  The optimal m is the risk allocation, lam the
Lagrange multiplier, and R = sum(m) the risk measure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .loss import UnsupportedOperation

logger = logging.getLogger(__name__)

_MAX_ITER = 120
_CURVATURE_TOL = 1e-8  # relative eigenvalue threshold for flat zero-sum directions


class SolverError(RuntimeError):
    """Solver failed; carries the last iterate and residual for diagnosis."""

    def __init__(self, message, m=None, lam=None, residual=None):
        super().__init__(message)
        self.m = m
        self.lam = lam
        self.residual = residual


class InfeasibleError(SolverError):
    """Constraint stayed positive up to the probe box bound."""


class NonUniqueAllocationError(SolverError):
    """Loss shows a flat zero-sum direction and the caller did not opt in."""


@dataclass(frozen=True)
class AllocationResult:
    """Optimal allocation, multiplier, risk value and solver diagnostics."""

    m_star: np.ndarray
    lambda_star: float
    risk: float
    kkt_residual: float
    constraint_value: float
    iterations: int
    mc_standard_error: float
    uniqueness_flag: str  # "unique" | "suspect_nonunique"
    method: str  # "kkt" | "sqp"
    alloc_standard_errors: np.ndarray | None = None
    risk_standard_error: float | None = None

    def to_json(self) -> dict:
        return {
            "m_star": self.m_star.tolist(),
            "lambda_star": self.lambda_star,
            "risk": self.risk,
            "kkt_residual": self.kkt_residual,
            "constraint_value": self.constraint_value,
            "iterations": self.iterations,
            "mc_se": self.mc_standard_error,
            "uniqueness_flag": self.uniqueness_flag,
            "method": self.method,
            "alloc_standard_errors": None
            if self.alloc_standard_errors is None
            else self.alloc_standard_errors.tolist(),
            "risk_standard_error": self.risk_standard_error,
        }


def kkt_residual(est, m, lam: float) -> np.ndarray:
    """Stacked first-order residual (lam * E[grad loss(X-m)] - 1, E[loss(X-m)]);
    zero at the optimum."""
    if lam <= 0:
        raise SolverError("multiplier must be positive", m=np.asarray(m), lam=lam)
    res = est.estimate(np.asarray(m, dtype=np.float64))
    grad_x = -res.grad  # estimator reports d/dm
    return np.concatenate([lam * grad_x - 1.0, [res.value]])


def _default_tol(est, m0) -> float:
    se = est.estimate(m0).se
    return max(1e-8, 0.1 * se)


def _initial_lambda(grad_x: np.ndarray) -> float:
    mean_slope = float(grad_x.sum()) / grad_x.shape[0]
    if mean_slope <= 0 or not np.isfinite(mean_slope):
        return 1.0
    return float(np.clip(1.0 / mean_slope, 1e-6, 1e6))


def _restore_feasibility(est, m0: np.ndarray, tol: float) -> np.ndarray:
    """Push the start point up the diagonal until the constraint is <= 0."""
    m = m0.copy()
    res = est.estimate(m)
    if res.value <= 0.0:
        return m
    step = 1.0
    for _ in range(60):
        m = m + step
        res = est.estimate(m)
        if res.value <= 0.0:
            return m
        step *= 2.0
    raise InfeasibleError(
        "constraint stayed positive up to the probe box bound; "
        "the loss appears to grow along every cash direction (unbounded direction)",
        m=m,
        residual=res.value,
    )


def _zero_sum_basis(d: int) -> np.ndarray:
    # orthonormal basis of {u : sum u = 0}
    q, _ = np.linalg.qr(np.eye(d) - np.full((d, d), 1.0 / d))
    # drop the (numerically) zero column aligned with 1
    cols = [q[:, j] for j in range(d) if abs(q[:, j].sum()) < 1e-8]
    basis = np.stack(cols[: d - 1], axis=1) if cols else np.empty((d, 0))
    return basis


def _flat_zero_sum_directions(hess: np.ndarray) -> np.ndarray:
    """Orthonormal zero-sum directions with (numerically) zero curvature of
    E[loss(X-m)]; returns (d, k) with k possibly 0."""
    d = hess.shape[0]
    if d < 2:
        return np.empty((d, 0))
    z = _zero_sum_basis(d)
    reduced = z.T @ hess @ z
    vals, vecs = np.linalg.eigh(reduced)
    scale = max(float(np.max(np.abs(vals))), 1.0)
    flat = vals < _CURVATURE_TOL * scale
    return z @ vecs[:, flat]


def _sandwich_errors(est, m, lam, grad_x, hess):
    """First-order sampling covariance of (m, lam) at the SAA optimum."""
    if hess is None or not hasattr(est, "kkt_sample_cov"):
        return None, None
    d = m.shape[0]
    jac = np.zeros((d + 1, d + 1))
    jac[:d, :d] = -lam * hess
    jac[:d, d] = grad_x
    jac[d, :d] = -grad_x
    try:
        jinv = np.linalg.inv(jac)
    except np.linalg.LinAlgError:
        return None, None
    noise = est.kkt_sample_cov(m, lam)
    cov = jinv @ noise @ jinv.T
    var = np.clip(np.diag(cov)[:d], 0.0, None)
    risk_var = max(float(np.ones(d) @ cov[:d, :d] @ np.ones(d)), 0.0)
    return np.sqrt(var), np.sqrt(risk_var)


def solve_allocation(
    est,
    init=None,
    tol: float | None = None,
    *,
    method: str = "auto",
    max_iter: int = _MAX_ITER,
    positivity: bool = False,
    accept_nonunique: bool = False,
) -> AllocationResult:
    """Compute the optimal risk allocation for the estimator's loss and model.

    method: "auto" picks Newton on the KKT system for smooth losses and SQP
    otherwise; "kkt" / "sqp" force a route.  positivity adds the m >= 0 box
    (SQP route only).  Losses with flat zero-sum directions are rejected
    unless accept_nonunique is set; the result is then the minimum-norm
    selection flagged 'suspect_nonunique'.
    """
    d = est.d
    m0 = np.asarray(init, dtype=np.float64) if init is not None else est.initial_point()
    if m0.shape != (d,):
        raise SolverError(f"initial allocation must have shape ({d},)")
    if tol is None:
        tol = _default_tol(est, m0)

    first = est.estimate(m0)
    smooth = first.hess is not None
    if method == "auto":
        method = "kkt" if (smooth and not positivity) else "sqp"
    if method == "kkt" and not smooth:
        raise UnsupportedOperation("KKT route needs a twice differentiable loss; use sqp")
    if method == "kkt" and positivity:
        raise UnsupportedOperation("positivity constraints are handled by the SQP route")

    flat = np.empty((d, 0))
    if smooth:
        flat = _flat_zero_sum_directions(first.hess)
        if flat.shape[1] and not accept_nonunique:
            raise NonUniqueAllocationError(
                "loss has flat zero-sum directions (non-unique allocation); "
                "pass accept_nonunique=True to get the minimum-norm selection",
                m=m0,
            )

    m0 = _restore_feasibility(est, m0, tol)

    if method == "kkt":
        result = _solve_newton(est, m0, tol, max_iter, flat)
        if result is None:
            logger.warning("Newton stalled; falling back to SQP")
            method = "sqp"
        else:
            m, lam, iters, stalled = result
            if stalled:
                logger.info(
                    "Newton stopped at the empirical resolution floor "
                    "(residual within 10x tol)"
                )
    if method == "sqp":
        m, lam, iters = _solve_sqp(est, m0, tol, max_iter, positivity)

    uniqueness = "unique"
    if flat.shape[1]:
        uniqueness = "suspect_nonunique"
        m = _minimum_norm_projection(est, m, tol, flat)

    res = est.estimate(m)
    grad_x = -res.grad
    residual = float(np.max(np.abs(np.concatenate([lam * grad_x - 1.0, [res.value]]))))
    if residual > 10.0 * tol and uniqueness == "unique" and not positivity:
        raise SolverError(
            f"no convergence after {iters} iterations: residual {residual:.3e} > tol {tol:.3e}",
            m=m,
            lam=lam,
            residual=residual,
        )
    alloc_se, risk_se = _sandwich_errors(est, m, lam, grad_x, res.hess)
    return AllocationResult(
        m_star=m,
        lambda_star=float(lam),
        risk=float(m.sum()),
        kkt_residual=residual,
        constraint_value=res.value,
        iterations=iters,
        mc_standard_error=res.se,
        uniqueness_flag=uniqueness,
        method=method,
        alloc_standard_errors=alloc_se,
        risk_standard_error=risk_se,
    )


def _solve_newton(est, m0, tol, max_iter, flat):
    d = est.d
    m = m0.copy()
    res = est.estimate(m)
    grad_x = -res.grad
    lam = _initial_lambda(grad_x)
    g = np.concatenate([lam * grad_x - 1.0, [res.value]])
    merit = float(g @ g)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) <= tol:
            return m, lam, it - 1, False
        hess = res.hess
        jac = np.zeros((d + 1, d + 1))
        jac[:d, :d] = -lam * hess
        jac[:d, d] = grad_x
        jac[d, :d] = -grad_x
        try:
            step = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(jac, -g, rcond=None)
        dm, dlam = step[:d], step[d]
        if flat.shape[1]:
            dm = dm - flat @ (flat.T @ dm)
        # keep the multiplier strictly positive
        alpha = 1.0
        if dlam < 0:
            alpha = min(alpha, -0.95 * lam / dlam)
        accepted = False
        while alpha > 2.0**-40:
            m_try = m + alpha * dm
            lam_try = lam + alpha * dlam
            res_try = est.estimate(m_try)
            grad_try = -res_try.grad
            g_try = np.concatenate([lam_try * grad_try - 1.0, [res_try.value]])
            merit_try = float(g_try @ g_try)
            if merit_try < merit * (1.0 - 1e-4 * alpha) or merit_try < tol * tol:
                m, lam, res, grad_x, g, merit = m_try, lam_try, res_try, grad_try, g_try, merit_try
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # line search exhausted: the sample-average system cannot be
            # polished further; accept if we are within 10x of tol
            if np.max(np.abs(g)) <= 10.0 * tol:
                return m, lam, it, True
            return None
    if np.max(np.abs(g)) <= tol:
        return m, lam, max_iter, False
    return None


def _recover_multiplier(grad_x: np.ndarray) -> float:
    denom = float(grad_x @ grad_x)
    if denom <= 0:
        return 1.0
    return float(np.clip(grad_x.sum() / denom, 1e-12, 1e12))


def _solve_sqp(est, m0, tol, max_iter, positivity):
    d = est.d

    def objective(m):
        return float(m.sum())

    def objective_jac(m):
        return np.ones(d)

    def constraint(m):
        return -est.estimate(m).value

    def constraint_jac(m):
        return -est.estimate(m).grad

    bounds = [(0.0, None)] * d if positivity else None
    start = np.maximum(m0, 0.0) if positivity else m0
    best = None
    # SLSQP's ftol is absolute; anchor it to the objective scale
    fscale = max(1.0, abs(float(start.sum())))
    for attempt, ftol in enumerate((1e-12 * fscale, 1e-10 * fscale)):
        out = minimize(
            objective,
            start,
            jac=objective_jac,
            method="SLSQP",
            bounds=bounds,
            constraints=[{"type": "ineq", "fun": constraint, "jac": constraint_jac}],
            options={"maxiter": max(200, max_iter), "ftol": ftol},
        )
        feas = abs(est.estimate(out.x).value)
        if best is None or feas < best[1]:
            best = (out, feas)
        if out.success and feas <= max(tol, 1e-9):
            break
        start = out.x
    out, feas = best
    m = np.asarray(out.x, dtype=np.float64)
    if feas > 10.0 * max(tol, 1e-9) and not positivity:
        raise SolverError(
            f"SQP did not reach feasibility: |constraint| = {feas:.3e}",
            m=m,
            residual=feas,
        )
    lam = _recover_multiplier(-est.estimate(m).grad)
    return m, lam, int(out.nit)


def _minimum_norm_projection(est, m, tol, flat):
    """Among KKT points differing by flat zero-sum shifts, pick the smallest
    Euclidean norm; revert if the constraint actually moved."""
    m_min = m - flat @ (flat.T @ m)
    if abs(est.estimate(m_min).value) <= max(10.0 * tol, 2.0 * est.estimate(m).se + 10.0 * tol):
        return m_min
    return m


def risk_measure(est, tol: float | None = None) -> float:
    """The overall risk value R = sum of the optimal allocation."""
    return solve_allocation(est, tol=tol).risk
