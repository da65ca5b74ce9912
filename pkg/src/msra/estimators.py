"""Estimation of E[loss(X-m)] and its derivatives.

Three routes:
  * ConstraintEstimator: sample averages over a stored ScenarioSet (common
    random numbers), blockwise with a deterministic pairwise-tree reduction.
  * ChebyshevSurrogate: opt-in tensor polynomial acceleration of the scalar
    constraint map.
  * QuadratureOracle: deterministic tensor quadrature for Gaussian models in
    d <= 3, with per-axis panels split at the allocation kinks so kinked
    integrands converge at full order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as ncheb
from scipy.linalg import solve_triangular
from scipy.special import ndtri

from .loss import LossSpec, UnsupportedOperation, loss_eval, loss_grad, loss_hess
from .scenario import BLOCK_SIZE, GaussianModel, ScenarioSet

__all__ = [
    "EstimateResult",
    "ConstraintEstimator",
    "ChebyshevSurrogate",
    "chebyshev_fit",
    "chebyshev_eval",
    "QuadratureOracle",
    "quadrature_oracle",
    "SurrogateEstimator",
]


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class EstimateResult:
    """Constraint value F(m) = E[loss(X-m)], its m-derivatives and the
    standard error of the value estimate (0 for deterministic oracles)."""

    value: float
    grad: np.ndarray
    hess: np.ndarray | None
    se: float


def _pairwise_reduce(parts):
    """Sum a list in a fixed pairwise tree so the result does not depend on
    how blocks were scheduled."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to reduce")
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


class ConstraintEstimator:
    """Monte Carlo estimator of the acceptability constraint over a stored
    scenario set.  All evaluations reuse the identical scenario rows, so the
    map m -> estimate(m) is deterministic."""

    def __init__(self, scenarios: ScenarioSet, loss: LossSpec, cache: bool = True):
        if scenarios.n < 1:
            raise EstimatorError("empty scenario set")
        if scenarios.d != loss.d:
            raise EstimatorError(
                f"scenario dimension {scenarios.d} != loss dimension {loss.d}"
            )
        self.scenarios = scenarios
        self.loss = loss
        self.cache = cache
        self._cached = None  # (m, EstimateResult)

    @property
    def d(self) -> int:
        return self.loss.d

    @property
    def n(self) -> int:
        return self.scenarios.n

    def _blocks(self):
        data = self.scenarios.data
        for lo in range(0, data.shape[0], BLOCK_SIZE):
            yield data[lo : lo + BLOCK_SIZE]

    def _check_m(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (self.d,):
            raise EstimatorError(f"allocation must have shape ({self.d},), got {m.shape}")
        if not np.isfinite(m).all():
            raise EstimatorError("allocation must be finite")
        return m

    def estimate(self, m) -> EstimateResult:
        m = self._check_m(m)
        if self.cache and self._cached is not None and np.array_equal(self._cached[0], m):
            return self._cached[1]
        smooth = self.loss.smooth
        sv, sv2, sg, sh = [], [], [], []
        for block in self._blocks():
            y = block - m
            v = loss_eval(self.loss, y)
            sv.append(v.sum())
            sv2.append((v * v).sum())
            sg.append(loss_grad(self.loss, y).sum(axis=0))
            if smooth:
                sh.append(loss_hess(self.loss, y).sum(axis=0))
        n = self.n
        value = _pairwise_reduce(sv) / n
        var = max(_pairwise_reduce(sv2) / n - value * value, 0.0)
        se = math.sqrt(var / n)
        grad = -_pairwise_reduce(sg) / n
        hess = _pairwise_reduce(sh) / n if smooth else None
        result = EstimateResult(value=float(value), grad=grad, hess=hess, se=se)
        if self.cache:
            self._cached = (m.copy(), result)
        return result

    def initial_point(self, level: float = 0.8) -> np.ndarray:
        return np.quantile(self.scenarios.data, level, axis=0)

    # -- pathwise moments used by the solver and sensitivity module --------

    def kkt_sample_cov(self, m, lam: float) -> np.ndarray:
        """Covariance of the MC noise of the KKT residual estimator, i.e.
        Cov_s[(lam * grad_x loss(X_s-m), loss(X_s-m))] / n."""
        m = self._check_m(m)
        d, n = self.d, self.n
        sums = np.zeros(d + 1)
        outer = np.zeros((d + 1, d + 1))
        for block in self._blocks():
            y = block - m
            g = np.empty((block.shape[0], d + 1))
            g[:, :d] = lam * loss_grad(self.loss, y)
            g[:, d] = loss_eval(self.loss, y)
            sums += g.sum(axis=0)
            outer += g.T @ g
        mean = sums / n
        cov = outer / n - np.outer(mean, mean)
        return cov / n

    def _check_aligned(self, y_scn) -> np.ndarray:
        y = y_scn.data if isinstance(y_scn, ScenarioSet) else np.asarray(y_scn, dtype=np.float64)
        if y.shape != self.scenarios.data.shape:
            raise EstimatorError(
                f"shock scenarios of shape {y.shape} are not pathwise aligned "
                f"with the loss scenarios of shape {self.scenarios.data.shape}"
            )
        if not np.isfinite(y).all():
            raise EstimatorError("shock scenarios must be finite")
        return y

    def stacked_moments(self, m, lam: float, top_fn, bottom_fn):
        """Mean and covariance-of-the-mean of per-scenario vectors
        W_s = (top_fn(Y_s), bottom_fn(Y_s)) with Y_s = X_s - m.

        top_fn maps a block (b, d) of Y to (b, d); bottom_fn maps it to (b,).
        Returns (mean (d+1,), cov_of_mean (d+1, d+1)).
        """
        m = self._check_m(m)
        d, n = self.d, self.n
        sums = np.zeros(d + 1)
        outer = np.zeros((d + 1, d + 1))
        offset = 0
        for block in self._blocks():
            b = block.shape[0]
            y = block - m
            w = np.empty((b, d + 1))
            w[:, :d] = top_fn(y, slice(offset, offset + b))
            w[:, d] = bottom_fn(y, slice(offset, offset + b))
            sums += w.sum(axis=0)
            outer += w.T @ w
            offset += b
        mean = sums / n
        cov = (outer / n - np.outer(mean, mean)) / n
        return lam * mean, (lam * lam) * cov

    def shock_moments(self, m, lam: float, y_scn):
        """V of the saddle sensitivity system and its MC covariance:
        V = (lam E[hess loss(X-m) Y], lam E[grad loss(X-m) . Y])."""
        if not self.loss.smooth:
            raise UnsupportedOperation(
                "sensitivity system needs a twice differentiable loss; "
                "use finite differences for PH families"
            )
        yv = self._check_aligned(y_scn)

        def top(y, rows):
            return np.einsum("sij,sj->si", loss_hess(self.loss, y), yv[rows])

        def bottom(y, rows):
            return np.einsum("sj,sj->s", loss_grad(self.loss, y), yv[rows])

        return self.stacked_moments(m, lam, top, bottom)

    def grad_dot_moments(self, m, lam: float, y_scn):
        """lam * E[grad loss(X-m) . Y] and its standard error."""
        yv = self._check_aligned(y_scn)
        m = self._check_m(m)
        n = self.n
        s1, s2 = [], []
        offset = 0
        for block in self._blocks():
            y = block - m
            w = np.einsum("sj,sj->s", loss_grad(self.loss, y), yv[offset : offset + block.shape[0]])
            s1.append(w.sum())
            s2.append((w * w).sum())
            offset += block.shape[0]
        mean = _pairwise_reduce(s1) / n
        var = max(_pairwise_reduce(s2) / n - mean * mean, 0.0)
        return lam * mean, lam * math.sqrt(var / n)

    def dep_moments(self, m, lam: float, dep_value, dep_grad):
        """V of the systemic-weight sensitivity system and its covariance:
        V = (lam E[grad dep(X-m)], lam E[dep(X-m)])."""

        def top(y, rows):
            return dep_grad(y)

        def bottom(y, rows):
            return dep_value(y)

        return self.stacked_moments(m, lam, top, bottom)


# ---------------------------------------------------------------------------
# Chebyshev tensor surrogate

def _cgl_nodes(n: int) -> np.ndarray:
    # Chebyshev-Gauss-Lobatto points, descending from +1 to -1
    return np.cos(np.pi * np.arange(n) / (n - 1))


def _cgl_coeff_matrix(n: int) -> np.ndarray:
    j = np.arange(n)
    k = j[:, None]
    c = np.cos(np.pi * k * j / (n - 1)) * (2.0 / (n - 1))
    c[:, 0] *= 0.5
    c[:, -1] *= 0.5
    c[0, :] *= 0.5
    c[-1, :] *= 0.5
    return c


@dataclass(frozen=True)
class ChebyshevSurrogate:
    """Tensor Chebyshev interpolant of a scalar field over an axis-aligned box.

    Exact (to round-off) on polynomials of per-axis degree <= nodes_per_axis-1.
    No extrapolation: evaluation outside the box is rejected.
    """

    domain: np.ndarray  # (d, 2) columns lo, hi
    coeffs: np.ndarray  # (N,) * d tensor
    nodes_per_axis: int
    error_estimate: float

    @property
    def d(self) -> int:
        return self.domain.shape[0]

    def _to_unit(self, points: np.ndarray) -> np.ndarray:
        lo, hi = self.domain[:, 0], self.domain[:, 1]
        slack = 1e-9 * np.maximum(1.0, hi - lo)
        if np.any(points < lo - slack) or np.any(points > hi + slack):
            raise EstimatorError("evaluation outside the surrogate domain (no extrapolation)")
        z = (2.0 * points - (lo + hi)) / (hi - lo)
        return np.clip(z, -1.0, 1.0)

    def __call__(self, points):
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 1
        points = np.atleast_2d(points)
        z = self._to_unit(points)
        b = np.broadcast_to(self.coeffs, (points.shape[0],) + self.coeffs.shape)
        for axis in range(self.d):
            t = ncheb.chebvander(z[:, axis], self.coeffs.shape[0] - 1)
            b = np.einsum("pk...,pk->p...", b, t)
        return float(b[0]) if single else b

    def gradient(self, points):
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 1
        points = np.atleast_2d(points)
        z = self._to_unit(points)
        lo, hi = self.domain[:, 0], self.domain[:, 1]
        out = np.empty_like(points)
        for axis in range(self.d):
            dc = ncheb.chebder(self.coeffs, axis=axis)
            b = np.broadcast_to(dc, (points.shape[0],) + dc.shape)
            for a in range(self.d):
                t = ncheb.chebvander(z[:, a], dc.shape[a] - 1)
                b = np.einsum("pk...,pk->p...", b, t)
            out[:, axis] = b * (2.0 / (hi[axis] - lo[axis]))
        return out[0] if single else out

    def to_json(self) -> dict:
        return {
            "domain": self.domain.tolist(),
            "nodes_per_axis": self.nodes_per_axis,
            "coefficients": self.coeffs.tolist(),
            "error_estimate": self.error_estimate,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ChebyshevSurrogate":
        return cls(
            domain=np.asarray(obj["domain"], dtype=np.float64),
            coeffs=np.asarray(obj["coefficients"], dtype=np.float64),
            nodes_per_axis=int(obj["nodes_per_axis"]),
            error_estimate=float(obj["error_estimate"]),
        )


def _call_field(f, points: np.ndarray) -> np.ndarray:
    try:
        vals = np.asarray(f(points), dtype=np.float64)
        if vals.shape == (points.shape[0],):
            return vals
    except TypeError:
        pass
    return np.asarray([float(f(p)) for p in points], dtype=np.float64)


def chebyshev_fit(f, domain, nodes_per_axis: int, validation_points: int = 50, seed: int = 0):
    """Interpolate the scalar field f on Chebyshev-Gauss-Lobatto tensor nodes.

    Node evaluations are independent of each other (parallelizable); here they
    are evaluated in one vectorized call.
    """
    domain = np.atleast_2d(np.asarray(domain, dtype=np.float64))
    if domain.shape[1] != 2 or np.any(domain[:, 1] <= domain[:, 0]):
        raise EstimatorError("domain must be rows of (lo, hi) with lo < hi")
    n = int(nodes_per_axis)
    if n < 2:
        raise EstimatorError("nodes_per_axis must be >= 2")
    d = domain.shape[0]
    t = _cgl_nodes(n)
    axes = [domain[k, 0] + (domain[k, 1] - domain[k, 0]) * (t + 1.0) / 2.0 for k in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([g.ravel() for g in mesh], axis=1)
    vals = _call_field(f, points)
    if not np.isfinite(vals).all():
        raise EstimatorError("field returned non-finite values on interpolation nodes")
    tensor = vals.reshape((n,) * d)

    cmat = _cgl_coeff_matrix(n)
    coeffs = tensor
    for axis in range(d):
        coeffs = np.moveaxis(np.tensordot(cmat, np.moveaxis(coeffs, axis, 0), axes=1), 0, axis)

    surrogate = ChebyshevSurrogate(
        domain=domain, coeffs=coeffs, nodes_per_axis=n, error_estimate=0.0
    )
    node_gap = float(np.max(np.abs(np.atleast_1d(surrogate(points)) - vals)))
    err = node_gap
    if validation_points > 0:
        rng = np.random.default_rng(seed)
        probe = domain[:, 0] + (domain[:, 1] - domain[:, 0]) * rng.random((validation_points, d))
        err = max(err, float(np.max(np.abs(np.atleast_1d(surrogate(probe)) - _call_field(f, probe)))))
    return ChebyshevSurrogate(
        domain=domain, coeffs=coeffs, nodes_per_axis=n, error_estimate=err
    )


def chebyshev_eval(surrogate: ChebyshevSurrogate, m) -> float:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        return float(surrogate(m[None, :]))
    return surrogate(m)


class SurrogateEstimator:
    """Constraint estimator backed by a Chebyshev surrogate of the value map.

    Gradients come from the differentiated interpolant; no Hessian, so the
    solver takes the SQP path.  Opt-in acceleration: in low dimension the
    direct Monte Carlo estimator is usually faster and more accurate.
    """

    def __init__(self, surrogate: ChebyshevSurrogate, se: float = 0.0, initial=None):
        self.surrogate = surrogate
        self._se = se
        self._initial = initial

    @property
    def d(self) -> int:
        return self.surrogate.d

    def estimate(self, m) -> EstimateResult:
        m = np.asarray(m, dtype=np.float64)
        return EstimateResult(
            value=self.surrogate(m),
            grad=self.surrogate.gradient(m),
            hess=None,
            se=self._se,
        )

    def initial_point(self) -> np.ndarray:
        if self._initial is not None:
            return np.asarray(self._initial, dtype=np.float64)
        return self.surrogate.domain.mean(axis=1)

    @classmethod
    def from_estimator(cls, est: ConstraintEstimator, nodes_per_axis: int, span: float = 3.0):
        """Fit the surrogate on a box around the estimator's search region:
        per-component [q20 - span*sd, q80 + span*sd] of the scenario columns."""
        data = est.scenarios.data
        q20 = np.quantile(data, 0.2, axis=0)
        q80 = np.quantile(data, 0.8, axis=0)
        sd = data.std(axis=0)
        domain = np.stack([q20 - span * sd, q80 + span * sd], axis=1)

        def field(points):
            return np.asarray([est.estimate(p).value for p in points])

        surrogate = chebyshev_fit(field, domain, nodes_per_axis, validation_points=20)
        se = est.estimate(est.initial_point()).se
        return cls(surrogate, se=se, initial=est.initial_point())


# ---------------------------------------------------------------------------
# deterministic quadrature oracle for Gaussian models, d <= 3

class QuadratureOracle:
    """Tensor quadrature of E[loss(X-m)] and derivatives for Gaussian X.

    Per axis, the integration range mean_k +- box_sigmas * sd_k is cut into
    panels of at most panel_width * sd_k, additionally split at the kink
    m_k, and each panel carries a Gauss-Legendre rule; the tensor nodes are
    weighted by the joint density.  The kink split keeps the rule at full
    order for the positive-part integrands.
    """

    def __init__(
        self,
        model: GaussianModel,
        loss: LossSpec,
        nodes_per_panel: int | None = None,
        panel_width: float | None = None,
        box_sigmas: float | None = None,
    ):
        d = model.d
        if d > 3:
            raise UnsupportedOperation("quadrature oracle supports d <= 3")
        if loss.d != d:
            raise EstimatorError(f"loss dimension {loss.d} != model dimension {d}")
        if not loss.smooth:
            raise UnsupportedOperation("quadrature oracle needs a smooth loss")
        try:
            self._chol = np.linalg.cholesky(model.covariance)
        except np.linalg.LinAlgError:
            raise EstimatorError(
                "quadrature oracle needs a positive-definite covariance"
            ) from None
        self.model = model
        self.loss = loss
        self.nodes_per_panel = nodes_per_panel or (16 if d <= 2 else 12)
        self.panel_width = panel_width or (1.0 if d <= 2 else 2.0)
        self.box_sigmas = box_sigmas or (12.0 if d <= 2 else 9.0)
        self._log_norm = -0.5 * d * math.log(2.0 * math.pi) - float(
            np.sum(np.log(np.diag(self._chol)))
        )
        self._gl_nodes, self._gl_weights = np.polynomial.legendre.leggauss(
            self.nodes_per_panel
        )

    @property
    def d(self) -> int:
        return self.model.d

    def initial_point(self) -> np.ndarray:
        return self.model.mean + ndtri(0.8) * np.sqrt(np.diag(self.model.covariance))

    def _axis_rule(self, k: int, kink: float):
        mu = self.model.mean[k]
        sd = math.sqrt(self.model.covariance[k, k])
        lo = mu - self.box_sigmas * sd
        hi = mu + self.box_sigmas * sd
        if self.loss.family == "exp_bivariate":
            # the exponential tilts shift the effective Gaussian center right
            hi += 2.0 * float(np.abs(self.model.covariance[k]).sum())
        cuts = {lo, hi}
        if lo < kink < hi:
            cuts.add(kink)
        cuts = sorted(cuts)
        edges = []
        width = self.panel_width * sd
        for a, b in zip(cuts[:-1], cuts[1:]):
            pieces = max(1, int(math.ceil((b - a) / width)))
            edges.extend(np.linspace(a, b, pieces + 1)[:-1])
        edges.append(hi)
        edges = np.asarray(edges)
        half = 0.5 * (edges[1:] - edges[:-1])
        mid = 0.5 * (edges[1:] + edges[:-1])
        nodes = (mid[:, None] + half[:, None] * self._gl_nodes[None, :]).ravel()
        weights = (half[:, None] * self._gl_weights[None, :]).ravel()
        return nodes, weights

    def _log_pdf(self, x: np.ndarray) -> np.ndarray:
        centered = x - self.model.mean
        sol = solve_triangular(self._chol, centered.T, lower=True)
        return self._log_norm - 0.5 * np.einsum("ij,ij->j", sol, sol)

    def estimate(self, m) -> EstimateResult:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (self.d,):
            raise EstimatorError(f"allocation must have shape ({self.d},), got {m.shape}")
        d = self.d
        rules = [self._axis_rule(k, m[k]) for k in range(d)]
        axis_nodes = [r[0] for r in rules]
        axis_weights = [r[1] for r in rules]

        value = 0.0
        grad = np.zeros(d)
        hess = np.zeros((d, d))
        # strip over the first axis to bound memory in d = 3
        n0 = axis_nodes[0].shape[0]
        strip = max(1, int(2e5 // max(1, np.prod([a.shape[0] for a in axis_nodes[1:]]))))
        for lo in range(0, n0, strip):
            sel = slice(lo, min(lo + strip, n0))
            mesh = np.meshgrid(axis_nodes[0][sel], *axis_nodes[1:], indexing="ij")
            x = np.stack([g.ravel() for g in mesh], axis=1)
            wmesh = np.meshgrid(axis_weights[0][sel], *axis_weights[1:], indexing="ij")
            w = np.ones_like(wmesh[0])
            for g in wmesh:
                w = w * g
            w = (w.ravel() * np.exp(self._log_pdf(x)))
            y = x - m
            value += float(w @ loss_eval(self.loss, y))
            grad += w @ loss_grad(self.loss, y)
            hess += np.einsum("s,sij->ij", w, loss_hess(self.loss, y))
        return EstimateResult(value=value, grad=-grad, hess=hess, se=0.0)


def quadrature_oracle(model: GaussianModel, loss: LossSpec, m):
    """One-shot oracle evaluation; returns (value, grad, hess) of E[loss(X-m)]
    with grad/hess taken with respect to m."""
    res = QuadratureOracle(model, loss).estimate(m)
    return res.value, res.grad, res.hess
