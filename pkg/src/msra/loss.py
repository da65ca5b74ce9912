"""Multivariate loss functions with value / gradient / generalized-Hessian
evaluation and numerical validation of their structural assumptions.

All evaluators accept a single point of shape (d,) or a batch (n, d) and
vectorize over the batch.  At kinks of x+ the right derivative is used
(value 1 at 0), consistently with the almost-everywhere Hessian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

FAMILIES = (
    "quadratic_systemic",
    "exp_bivariate",
    "ph1",
    "ph2",
    "c1",
    "c2",
    "c3",
)

KERNELS = ("hinge", "quad", "exp")

#: slope threshold under which a zero-sum recession probe is declared bounded
RECESSION_SLOPE_TOL = 1e-6
RECESSION_RADIUS = 1e6


class LossError(ValueError):
    """Invalid loss specification or evaluation input."""


class UnsupportedOperation(LossError):
    """Operation not defined for this family (e.g. Hessian of a PH loss)."""


# ---------------------------------------------------------------------------
# univariate kernels h: value, derivative, second derivative (a.e.)

def _kernel_value(name, beta, x):
    if name == "hinge":
        return np.maximum(x, 0.0) - beta * np.maximum(-x, 0.0)
    if name == "quad":
        return x + 0.5 * np.maximum(x, 0.0) ** 2
    if name == "exp":
        return np.expm1(x)
    raise LossError(f"unknown kernel {name!r}")


def _kernel_deriv(name, beta, x):
    if name == "hinge":
        return np.where(x >= 0.0, 1.0, beta)
    if name == "quad":
        return 1.0 + np.maximum(x, 0.0)
    if name == "exp":
        return np.exp(x)
    raise LossError(f"unknown kernel {name!r}")


def _kernel_second(name, beta, x):
    if name == "hinge":
        raise UnsupportedOperation("kernel 'hinge' has no second derivative; use the SQP path")
    if name == "quad":
        return (x >= 0.0).astype(np.float64)
    if name == "exp":
        return np.exp(x)
    raise LossError(f"unknown kernel {name!r}")


def _kernel_smooth(name):
    return name in ("quad", "exp")


@dataclass(frozen=True)
class LossSpec:
    """A parameterized multivariate loss function.

    family 'quadratic_systemic': sum(x) [optional] + 1/2 sum(x+^2)
        + alpha * sum_{j<k} xj+ xk+ - 1.  `include_linear=False` drops the
        linear term (the variant used by the shock / dependence-sensitivity
        case studies).
    family 'exp_bivariate': 1/2 e^{2x1} + 1/2 e^{2x2} + alpha e^{x1+x2} - 1.
    family 'ph1': beta sum(x+) - alpha sum(x-), positively homogeneous.
    family 'ph2': ph1 plus beta sum_{k<j} (xk+xj)+ - alpha sum_{k<j} (xk+xj)-.
    family 'c1': h(sum x_k) for a univariate kernel h.
    family 'c2': sum_k h_k(x_k), kernels possibly per component.
    family 'c3': alpha * h(sum x_k) + beta * sum_k h(x_k).
    """

    family: str
    d: int
    alpha: float = 0.0
    beta: float = 0.0
    kernel: str | None = None
    kernels: tuple | None = None
    kernel_beta: float = 0.0
    include_linear: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise LossError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.d < 1:
            raise LossError("dimension must be >= 1")
        if self.family == "exp_bivariate" and self.d != 2:
            raise LossError("exp_bivariate is defined for d=2 only")
        if self.family in ("quadratic_systemic", "exp_bivariate", "c3") and self.alpha < 0:
            raise LossError("systemic weight alpha must be >= 0")
        if self.family in ("ph1", "ph2"):
            if not (0.0 < self.alpha <= 1.0 <= self.beta):
                raise LossError("ph families need 0 < alpha <= 1 <= beta")
        if self.family in ("c1", "c3"):
            if self.kernel not in KERNELS:
                raise LossError(f"family {self.family!r} needs kernel in {KERNELS}")
        if self.family == "c2":
            kernels = self.kernels if self.kernels is not None else (
                (self.kernel,) * self.d if self.kernel else None
            )
            if kernels is None or len(kernels) != self.d:
                raise LossError("c2 needs one kernel per component")
            for k in kernels:
                if k not in KERNELS:
                    raise LossError(f"unknown kernel {k!r}")
            object.__setattr__(self, "kernels", tuple(kernels))
        if self.kernel is not None and self.kernel not in KERNELS:
            raise LossError(f"unknown kernel {self.kernel!r}")
        if not (0.0 <= self.kernel_beta < 1.0):
            raise LossError("hinge kernel slope must satisfy 0 <= beta < 1")

    # -- structural properties -------------------------------------------

    @property
    def smooth(self) -> bool:
        """Twice differentiable (almost everywhere, generalized Hessian)."""
        if self.family in ("quadratic_systemic", "exp_bivariate"):
            return True
        if self.family in ("ph1", "ph2"):
            return False
        if self.family == "c1":
            return _kernel_smooth(self.kernel)
        if self.family == "c2":
            return all(_kernel_smooth(k) for k in self.kernels)
        return _kernel_smooth(self.kernel)

    @property
    def positively_homogeneous(self) -> bool:
        return self.family in ("ph1", "ph2") or (
            self.family in ("c1", "c2", "c3")
            and self._all_kernels() == {"hinge"}
        )

    @property
    def permutation_invariant(self) -> bool:
        if self.family == "c2":
            return len(set(self.kernels)) == 1
        return True

    @property
    def lower_bound_constant(self) -> float | None:
        """Documented constant c with loss(x) >= sum(x_k) - c, or None when
        no finite constant exists for this parameterization.

        ph2 with d >= 3: the pairwise gain credit outweighs the linear term
        along the all-negative diagonal, so the linear lower bound fails even
        though the risk measure stays well posed (the recession function is
        strictly positive along every cost-reducing direction).
        """
        if self.family == "quadratic_systemic":
            return 1.0 if self.include_linear else 1.0 + 0.5 * self.d
        if self.family == "exp_bivariate":
            return 1.0
        if self.family in ("ph1", "c1", "c2"):
            return 0.0
        if self.family == "ph2":
            return 0.0 if self.d == 2 else None
        # c3
        if abs(self.alpha + self.beta - 1.0) < 1e-12:
            return 0.0
        if self.kernel == "exp" and self.alpha > 0.0:
            return self.alpha + self.beta * self.d - math.log(self.alpha) - 1.0
        return None

    def _all_kernels(self):
        if self.family == "c2":
            return set(self.kernels)
        return {self.kernel}

    # -- serialization ----------------------------------------------------

    def to_json(self) -> dict:
        params = {}
        if self.family in ("quadratic_systemic", "exp_bivariate", "c3"):
            params["alpha"] = self.alpha
        if self.family in ("ph1", "ph2"):
            params["alpha"] = self.alpha
            params["beta"] = self.beta
        if self.family == "c3":
            params["beta"] = self.beta
        if self.family == "quadratic_systemic":
            params["include_linear"] = self.include_linear
        if self.kernel is not None:
            params["kernel"] = self.kernel
        if self.family == "c2":
            params["kernels"] = list(self.kernels)
        if "hinge" in self._all_kernels() and self.family in ("c1", "c2", "c3"):
            params["kernel_beta"] = self.kernel_beta
        return {"family": self.family, "d": self.d, "params": params}

    @classmethod
    def from_json(cls, obj: dict) -> "LossSpec":
        params = dict(obj.get("params", {}))
        kernels = params.pop("kernels", None)
        kwargs = dict(
            alpha=float(params.pop("alpha", 0.0)),
            beta=float(params.pop("beta", 0.0)),
            kernel=params.pop("kernel", None),
            kernels=tuple(kernels) if kernels is not None else None,
            kernel_beta=float(params.pop("kernel_beta", 0.0)),
            include_linear=bool(params.pop("include_linear", True)),
        )
        if params:
            raise LossError(f"unknown loss parameters {sorted(params)}")
        return cls(family=obj["family"], d=int(obj["d"]), **kwargs)

    # convenience evaluators

    def value(self, x):
        return loss_eval(self, x)

    def grad(self, x):
        return loss_grad(self, x)

    def hess(self, x):
        return loss_hess(self, x)


def quadratic_systemic(alpha: float, d: int = 2, include_linear: bool = True) -> LossSpec:
    return LossSpec(family="quadratic_systemic", d=d, alpha=alpha, include_linear=include_linear)


def exp_bivariate(alpha: float) -> LossSpec:
    return LossSpec(family="exp_bivariate", d=2, alpha=alpha)


def ph1(alpha: float, beta: float = 1.0, d: int = 2) -> LossSpec:
    return LossSpec(family="ph1", d=d, alpha=alpha, beta=beta)


def ph2(alpha: float, beta: float = 1.0, d: int = 2) -> LossSpec:
    return LossSpec(family="ph2", d=d, alpha=alpha, beta=beta)


# ---------------------------------------------------------------------------
# evaluation

def _as_batch(spec: LossSpec, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.d:
        raise LossError(f"expected points of dimension {spec.d}, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise LossError("loss evaluation requires finite inputs")
    return x, single


def _pair_sum_products(p):
    # sum_{j<k} p_j p_k = ((sum p)^2 - sum p^2) / 2
    s = p.sum(axis=1)
    return 0.5 * (s * s - (p * p).sum(axis=1))


@lru_cache(maxsize=64)
def _pair_incidence(d: int):
    """Upper-triangle pair indices and the (n_pairs, d) 0/1 incidence matrix."""
    iu, ju = np.triu_indices(d, k=1)
    inc = np.zeros((iu.shape[0], d))
    inc[np.arange(iu.shape[0]), iu] = 1.0
    inc[np.arange(ju.shape[0]), ju] = 1.0
    return iu, ju, inc


def loss_eval(spec: LossSpec, x):
    """Evaluate the loss at x; x may be (d,) or (n, d)."""
    x, single = _as_batch(spec, x)
    fam = spec.family
    if fam == "quadratic_systemic":
        p = np.maximum(x, 0.0)
        out = 0.5 * (p * p).sum(axis=1) + spec.alpha * _pair_sum_products(p) - 1.0
        if spec.include_linear:
            out += x.sum(axis=1)
    elif fam == "exp_bivariate":
        out = (
            0.5 * np.exp(2.0 * x[:, 0])
            + 0.5 * np.exp(2.0 * x[:, 1])
            + spec.alpha * np.exp(x[:, 0] + x[:, 1])
            - 1.0
        )
    elif fam == "ph1":
        out = spec.beta * np.maximum(x, 0.0).sum(axis=1) - spec.alpha * np.maximum(
            -x, 0.0
        ).sum(axis=1)
    elif fam == "ph2":
        out = spec.beta * np.maximum(x, 0.0).sum(axis=1) - spec.alpha * np.maximum(
            -x, 0.0
        ).sum(axis=1)
        iu, ju, _ = _pair_incidence(spec.d)
        s = x[:, iu] + x[:, ju]
        out += spec.beta * np.maximum(s, 0.0).sum(axis=1) - spec.alpha * np.maximum(
            -s, 0.0
        ).sum(axis=1)
    elif fam == "c1":
        out = _kernel_value(spec.kernel, spec.kernel_beta, x.sum(axis=1))
    elif fam == "c2":
        out = np.zeros(x.shape[0])
        for k, name in enumerate(spec.kernels):
            out += _kernel_value(name, spec.kernel_beta, x[:, k])
    elif fam == "c3":
        out = spec.alpha * _kernel_value(spec.kernel, spec.kernel_beta, x.sum(axis=1))
        out += spec.beta * _kernel_value(spec.kernel, spec.kernel_beta, x).sum(axis=1)
    else:  # pragma: no cover
        raise LossError(fam)
    return float(out[0]) if single else out


def loss_grad(spec: LossSpec, x):
    """Gradient (an element of the subdifferential at kinks: right derivative)."""
    x, single = _as_batch(spec, x)
    fam = spec.family
    if fam == "quadratic_systemic":
        p = np.maximum(x, 0.0)
        ind = (x >= 0.0).astype(np.float64)
        g = p + spec.alpha * ind * (p.sum(axis=1, keepdims=True) - p)
        if spec.include_linear:
            g = g + 1.0
    elif fam == "exp_bivariate":
        es = spec.alpha * np.exp(x[:, 0] + x[:, 1])
        g = np.stack([np.exp(2.0 * x[:, 0]) + es, np.exp(2.0 * x[:, 1]) + es], axis=1)
    elif fam == "ph1":
        g = np.where(x >= 0.0, spec.beta, spec.alpha)
    elif fam == "ph2":
        g = np.where(x >= 0.0, spec.beta, spec.alpha).astype(np.float64)
        iu, ju, inc = _pair_incidence(spec.d)
        c = np.where(x[:, iu] + x[:, ju] >= 0.0, spec.beta, spec.alpha)
        g = g + c @ inc
    elif fam == "c1":
        g = np.repeat(
            _kernel_deriv(spec.kernel, spec.kernel_beta, x.sum(axis=1))[:, None],
            spec.d,
            axis=1,
        )
    elif fam == "c2":
        g = np.empty_like(x)
        for k, name in enumerate(spec.kernels):
            g[:, k] = _kernel_deriv(name, spec.kernel_beta, x[:, k])
    elif fam == "c3":
        g = spec.alpha * _kernel_deriv(spec.kernel, spec.kernel_beta, x.sum(axis=1))[
            :, None
        ] + spec.beta * _kernel_deriv(spec.kernel, spec.kernel_beta, x)
    else:  # pragma: no cover
        raise LossError(fam)
    return g[0] if single else g


def loss_hess(spec: LossSpec, x):
    """Generalized (almost-everywhere) Hessian; PH families are rejected."""
    x, single = _as_batch(spec, x)
    if not spec.smooth:
        raise UnsupportedOperation(
            f"family {spec.family!r} is not twice differentiable; use the SQP solver path"
        )
    fam = spec.family
    n, d = x.shape
    if fam == "quadratic_systemic":
        ind = (x >= 0.0).astype(np.float64)
        h = spec.alpha * ind[:, :, None] * ind[:, None, :]
        idx = np.arange(d)
        h[:, idx, idx] = ind
    elif fam == "exp_bivariate":
        es = spec.alpha * np.exp(x[:, 0] + x[:, 1])
        h = np.empty((n, 2, 2))
        h[:, 0, 0] = 2.0 * np.exp(2.0 * x[:, 0]) + es
        h[:, 1, 1] = 2.0 * np.exp(2.0 * x[:, 1]) + es
        h[:, 0, 1] = es
        h[:, 1, 0] = es
    elif fam == "c1":
        h2 = _kernel_second(spec.kernel, spec.kernel_beta, x.sum(axis=1))
        h = np.repeat(h2[:, None, None], d, axis=1).repeat(d, axis=2)
    elif fam == "c2":
        h = np.zeros((n, d, d))
        idx = np.arange(d)
        for k, name in enumerate(spec.kernels):
            h[:, k, k] = _kernel_second(name, spec.kernel_beta, x[:, k])
    elif fam == "c3":
        h2 = spec.alpha * _kernel_second(spec.kernel, spec.kernel_beta, x.sum(axis=1))
        h = np.repeat(h2[:, None, None], d, axis=1).repeat(d, axis=2)
        idx = np.arange(d)
        h[:, idx, idx] += spec.beta * _kernel_second(spec.kernel, spec.kernel_beta, x)
    else:  # pragma: no cover
        raise LossError(fam)
    return h[0] if single else h


# ---------------------------------------------------------------------------
# systemic-weight decomposition  loss = base(x) + alpha * dep(x)

def alpha_decomposition(spec: LossSpec):
    """Return (dep_value, dep_grad) callables for losses of the form
    base(x) + alpha * dep(x), or None when the family is not decomposable."""
    if spec.family == "quadratic_systemic":

        def dep_value(x):
            p = np.maximum(x, 0.0)
            return _pair_sum_products(p)

        def dep_grad(x):
            p = np.maximum(x, 0.0)
            return (x >= 0.0) * (p.sum(axis=1, keepdims=True) - p)

        return dep_value, dep_grad
    if spec.family == "exp_bivariate":

        def dep_value(x):
            return np.exp(x[:, 0] + x[:, 1])

        def dep_grad(x):
            e = np.exp(x[:, 0] + x[:, 1])
            return np.stack([e, e], axis=1)

        return dep_value, dep_grad
    if spec.family == "c3" and _kernel_smooth(spec.kernel):

        def dep_value(x):
            return _kernel_value(spec.kernel, spec.kernel_beta, x.sum(axis=1))

        def dep_grad(x):
            der = _kernel_deriv(spec.kernel, spec.kernel_beta, x.sum(axis=1))
            return np.repeat(der[:, None], spec.d, axis=1)

        return dep_value, dep_grad
    return None


# ---------------------------------------------------------------------------
# validation

@dataclass
class LossValidationReport:
    """Pass/fail flags for the structural loss-function assumptions."""

    family: str
    d: int
    monotone: bool
    convex: bool
    negative_somewhere: bool
    lower_bound: bool | None
    permutation_invariant: bool | None
    recession_slopes: list = field(default_factory=list)
    uniqueness_flag: str = "unique"
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        core = self.monotone and self.convex and self.negative_somewhere
        return (
            core
            and self.lower_bound is not False
            and self.permutation_invariant is not False
        )

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "d": self.d,
            "passed": self.passed,
            "checks": {
                "monotone": self.monotone,
                "convex": self.convex,
                "negative_somewhere": self.negative_somewhere,
                "lower_bound": self.lower_bound,
                "permutation_invariant": self.permutation_invariant,
            },
            "recession_slopes": self.recession_slopes,
            "uniqueness_flag": self.uniqueness_flag,
            "details": self.details,
        }


def _zero_sum_directions(d: int, rng: np.random.Generator, count: int):
    dirs = []
    if d >= 2:
        u = np.zeros(d)
        u[0], u[1] = 1.0, -1.0
        dirs.append(u / np.linalg.norm(u))
    for _ in range(count):
        u = rng.standard_normal(d)
        u -= u.mean()
        nrm = np.linalg.norm(u)
        if nrm > 1e-12:
            dirs.append(u / nrm)
    return dirs


def validate_loss(spec: LossSpec, sample_count: int = 2000, seed: int = 0) -> LossValidationReport:
    """Check (monotone, convex, somewhere-negative, linear lower bound) and
    permutation invariance on random samples, and probe growth along
    zero-sum directions to flag non-uniqueness risk of the risk allocation.

    The recession probe is advisory: slope below RECESSION_SLOPE_TOL at
    radius RECESSION_RADIUS along some zero-sum direction flags the loss
    as 'suspect_nonunique'.
    """
    rng = np.random.default_rng(seed)
    d = spec.d
    details = []

    x = rng.standard_normal((sample_count, d)) * 2.0
    y = x + np.abs(rng.standard_normal((sample_count, d)))
    monotone = bool(np.all(loss_eval(spec, y) - loss_eval(spec, x) >= -1e-12))
    if not monotone:
        details.append("monotonicity failed on sampled pairs")

    a = rng.standard_normal((sample_count, d)) * 3.0
    b = rng.standard_normal((sample_count, d)) * 3.0
    fa, fb = loss_eval(spec, a), loss_eval(spec, b)
    convex = True
    for lam in (0.25, 0.5, 0.75):
        mid = loss_eval(spec, lam * a + (1.0 - lam) * b)
        scale = 1.0 + np.abs(fa) + np.abs(fb)
        if not np.all(mid <= lam * fa + (1.0 - lam) * fb + 1e-12 * scale):
            convex = False
            details.append(f"midpoint convexity failed at lambda={lam}")
            break

    negative_somewhere = bool(loss_eval(spec, np.full(d, -40.0)) < 0.0)
    if not negative_somewhere:
        details.append("loss not negative deep in the loss-free orthant")

    c = spec.lower_bound_constant
    if c is None:
        lower_bound = None
        details.append("no documented linear lower-bound constant for this parameterization")
    else:
        z = rng.standard_normal((sample_count, d)) * 5.0
        lower_bound = bool(np.all(loss_eval(spec, z) - z.sum(axis=1) + c >= -1e-9))
        if not lower_bound:
            details.append(f"lower bound loss(x) >= sum(x) - {c} violated")

    perm_ok = None
    if spec.permutation_invariant:
        perm_ok = True
        sample = rng.standard_normal((64, d)) * 2.0
        base = loss_eval(spec, sample)
        n_perms = math.factorial(d) if d <= 4 else 24
        for _ in range(n_perms):
            p = rng.permutation(d)
            if not np.allclose(loss_eval(spec, sample[:, p]), base, rtol=0.0, atol=1e-12):
                perm_ok = False
                details.append(f"permutation invariance failed for permutation {p.tolist()}")
                break

    slopes = []
    flag = "unique"
    if d >= 2:
        base_pts = rng.standard_normal((4, d))
        for u in _zero_sum_directions(d, rng, count=8):
            f0 = np.asarray(loss_eval(spec, base_pts))
            fr = np.asarray(loss_eval(spec, base_pts + RECESSION_RADIUS * u))
            slope = float(np.max((fr - f0) / RECESSION_RADIUS))
            slopes.append({"direction": u.tolist(), "slope": slope})
            if slope < RECESSION_SLOPE_TOL:
                flag = "suspect_nonunique"
    if flag == "suspect_nonunique":
        details.append(
            "bounded growth along a zero-sum direction: risk allocation may be non-unique"
        )

    return LossValidationReport(
        family=spec.family,
        d=d,
        monotone=monotone,
        convex=convex,
        negative_somewhere=negative_somewhere,
        lower_bound=lower_bound,
        permutation_invariant=perm_ok,
        recession_slopes=slopes,
        uniqueness_flag=flag,
        details=details,
    )
