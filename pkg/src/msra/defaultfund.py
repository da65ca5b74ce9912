"""Default-fund sizing and allocation for a clearing house.

Initial margin is the per-member empirical value-at-risk of the stored loss
scenarios.  The fund is sized by a Cover-2 rule (worst simulated scenario's
two largest excess losses over initial margin) and allocated either
proportionally to initial margins or by relative shortfall-risk
contributions RC_k = RA_k / R computed with a positively homogeneous loss,
which makes the weights invariant under rescaling of the book.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import ConstraintEstimator
from .loss import LossSpec, ph1, ph2
from .scenario import ScenarioSet
from .solver import solve_allocation

__all__ = [
    "DefaultFundReport",
    "initial_margin",
    "cover2",
    "im_weights",
    "shortfall_weights",
    "allocate_default_fund",
]


class DefaultFundError(ValueError):
    pass


class DegenerateDenominatorError(DefaultFundError):
    """Total risk is zero; relative risk contributions are undefined."""


def initial_margin(scenarios: ScenarioSet, level: float) -> np.ndarray:
    """Per-member empirical VaR of the loss columns at the given confidence
    level, with linear interpolation between order statistics
    (index (n - 1) * level + 1 in 1-based terms)."""
    if not 0.0 < level < 1.0:
        raise DefaultFundError("confidence level must lie in (0, 1)")
    if scenarios.n < 100:
        raise DefaultFundError("initial margin needs at least 100 scenarios")
    return np.quantile(scenarios.data, level, axis=0, method="linear")


def cover2(scenarios: ScenarioSet, im: np.ndarray) -> float:
    """Worst-scenario sum of the two largest member losses in excess of their
    posted initial margin."""
    im = np.asarray(im, dtype=np.float64)
    if im.shape != (scenarios.d,):
        raise DefaultFundError(f"initial margin must have shape ({scenarios.d},)")
    excess = np.maximum(scenarios.data - im, 0.0)
    if scenarios.d == 1:
        return float(excess.max())
    top2 = np.partition(excess, scenarios.d - 2, axis=1)[:, -2:]
    return float(top2.sum(axis=1).max())


def im_weights(scenarios: ScenarioSet, level: float) -> np.ndarray:
    im = initial_margin(scenarios, level)
    total = im.sum()
    if total == 0.0:
        raise DegenerateDenominatorError("total initial margin is zero")
    return im / total


def shortfall_weights(scenarios: ScenarioSet, loss: LossSpec, tol: float | None = None):
    """Relative risk contributions RC_k = RA_k / R for the given loss.

    For positively homogeneous losses the weights are invariant under
    rescaling of the book, so the solve runs on scenarios normalized by the
    average column scale; this keeps the optimizer well conditioned for
    monetary inputs.
    """
    work = scenarios
    scale = 1.0
    if loss.positively_homogeneous:
        scale = float(np.mean(scenarios.data.std(axis=0)))
        if scale > 0.0 and not math.isclose(scale, 1.0):
            work = ScenarioSet(
                data=scenarios.data / scale,
                seed=scenarios.seed,
                model_tag=scenarios.model_tag + "/normalized",
                labels=scenarios.labels,
            )
        else:
            scale = 1.0
    est = ConstraintEstimator(work, loss)
    alloc = solve_allocation(est, tol=tol, method="sqp" if not loss.smooth else "auto")
    if abs(alloc.risk) < 1e-12:
        raise DegenerateDenominatorError("total shortfall risk is zero")
    return alloc.m_star / alloc.risk, alloc


@dataclass(frozen=True)
class DefaultFundReport:
    """Per-member margins, fund size and allocation weights per rule."""

    labels: tuple
    im: np.ndarray
    im_level: float
    df_total: float
    weights: dict  # rule name -> weight vector summing to 1
    deltas: dict = field(default_factory=dict)  # "a_vs_b" -> percent differences
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, w in self.weights.items():
            gap = abs(float(np.sum(w)) - 1.0)
            if gap > 1e-12:
                raise DefaultFundError(f"weights[{name}] sum to 1 {gap:.2e} away from 1")

    def amounts(self, rule: str) -> np.ndarray:
        return self.weights[rule] * self.df_total

    def to_json(self) -> dict:
        return {
            "members": list(self.labels),
            "im": self.im.tolist(),
            "im_level": self.im_level,
            "df_total": self.df_total,
            "weights": {k: v.tolist() for k, v in self.weights.items()},
            "deltas_pct": {k: v.tolist() for k, v in self.deltas.items()},
            "diagnostics": self.diagnostics,
        }

    def to_csv(self, path) -> None:
        """Weights table; for the standard rule trio the columns are
        member, im, weight_im, weight_l1, weight_l2, pct_diff_l1_im,
        pct_diff_l1_l2."""
        names = list(self.weights)
        if set(names) == {"im", "l1", "l2"}:
            names = ["im", "l1", "l2"]
            delta_cols = [("pct_diff_l1_im", "l1_vs_im"), ("pct_diff_l1_l2", "l1_vs_l2")]
        else:
            delta_cols = [(f"pct_diff_{k}", k) for k in self.deltas]
        headers = (
            ["member", "im"]
            + [f"weight_{n}" for n in names]
            + [name for name, _ in delta_cols]
        )
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(headers)
            for i, label in enumerate(self.labels):
                row = [label, f"{self.im[i]:.10g}"]
                row += [f"{self.weights[n][i]:.10g}" for n in names]
                row += [f"{self.deltas[k][i]:.10g}" for _, k in delta_cols]
                writer.writerow(row)


def _pct_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 100.0 * (a - b) / b


def allocate_default_fund(
    scenarios: ScenarioSet,
    df_total: float | None = None,
    rules=("im_proportional", "shortfall_l1", "shortfall_l2"),
    im_level: float = 0.99,
    gain_credit: float = 0.5,
    tol: float | None = None,
    labels=None,
) -> DefaultFundReport:
    """Build the allocation report for the requested rules.

    Rules: "im_proportional" (weights proportional to initial margins),
    "shortfall_l1" / "shortfall_l2" (relative shortfall-risk contributions
    under the componentwise and the pairwise-aggregating positively
    homogeneous losses with gain credit `gain_credit`), or a (name, LossSpec)
    pair.  The fund size defaults to the Cover-2 value at `im_level`.
    Percentage relative differences are reported against the first rule and
    between the first two shortfall rules.
    """
    d = scenarios.d
    im = initial_margin(scenarios, im_level)
    if df_total is None:
        df_total = cover2(scenarios, im)
    labels = tuple(labels) if labels is not None else (
        scenarios.labels if scenarios.labels else tuple(f"M{i + 1}" for i in range(d))
    )
    if len(labels) != d:
        raise DefaultFundError(f"{len(labels)} labels for {d} members")

    weights: dict[str, np.ndarray] = {}
    diagnostics: dict[str, dict] = {}
    for rule in rules:
        if isinstance(rule, tuple):
            name, spec = rule
            w, alloc = shortfall_weights(scenarios, spec, tol=tol)
            diagnostics[name] = {"risk": alloc.risk, "iterations": alloc.iterations}
        elif rule == "im_proportional":
            name, w = "im", im_weights(scenarios, im_level)
        elif rule == "shortfall_l1":
            name = "l1"
            w, alloc = shortfall_weights(scenarios, ph1(gain_credit, 1.0, d), tol=tol)
            diagnostics[name] = {"risk": alloc.risk, "iterations": alloc.iterations}
        elif rule == "shortfall_l2":
            name = "l2"
            w, alloc = shortfall_weights(scenarios, ph2(gain_credit, 1.0, d), tol=tol)
            diagnostics[name] = {"risk": alloc.risk, "iterations": alloc.iterations}
        else:
            raise DefaultFundError(f"unknown allocation rule {rule!r}")
        weights[name] = w / w.sum()

    deltas = {}
    names = list(weights)
    if len(names) >= 2:
        base = names[0]
        for other in names[1:]:
            deltas[f"{other}_vs_{base}"] = _pct_diff(weights[other], weights[base])
    if "l1" in weights and "l2" in weights:
        deltas["l1_vs_l2"] = _pct_diff(weights["l1"], weights["l2"])

    return DefaultFundReport(
        labels=labels,
        im=im,
        im_level=im_level,
        df_total=float(df_total),
        weights=weights,
        deltas=deltas,
        diagnostics=diagnostics,
    )
