"""Scenario generation and ingestion for vectors of component losses.

Sign convention: entries of a scenario matrix are losses, positive = bad.

Reproducibility contract: all random draws come from the counter-based
Philox 4x64 generator keyed by (seed, block_index), with standard normals
obtained by inverse-CDF from open-interval uniforms.  The same
(generator, parameters, seed, n) therefore reproduces the identical
matrix bit-for-bit, independently of how many threads generate blocks.
"""

from __future__ import annotations

import csv
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincinv, ndtri, stdtr, stdtrit

logger = logging.getLogger(__name__)

MAGIC = b"MSRA"
CONTAINER_VERSION = 1

#: scenarios per generation block; each block draws from Philox keyed (seed, block)
BLOCK_SIZE = 1 << 16

_EIG_CLIP = -1e-10  # eigenvalues in (_EIG_CLIP, 0) are clipped, below rejected
_SYM_TOL = 1e-12
_COLSUM_TOL = 1e-9


class ScenarioError(ValueError):
    """Invalid scenario input (model parameters, matrix contents, container)."""


class PositionsError(ScenarioError):
    """Malformed positions CSV; carries row/column coordinates when known."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


def _block_generator(seed: int, block_index: int) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(block_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _open_uniforms(rng: np.random.Generator, shape) -> np.ndarray:
    # (k + 0.5) / 2^53 lies strictly inside (0, 1), so ndtri stays finite
    return (rng.integers(0, 1 << 53, size=shape, dtype=np.int64) + 0.5) / float(1 << 53)


def _standard_normals(rng: np.random.Generator, shape) -> np.ndarray:
    return ndtri(_open_uniforms(rng, shape))


def _block_ranges(n: int):
    for j, start in enumerate(range(0, n, BLOCK_SIZE)):
        yield j, start, min(start + BLOCK_SIZE, n)


def _run_blocks(n: int, worker, threads: int = 1):
    """Fill an n-row output by blocks; identical output for any thread count."""
    blocks = list(_block_ranges(n))
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda b: worker(*b), blocks))
    else:
        for b in blocks:
            worker(*b)


@dataclass(frozen=True)
class ScenarioSet:
    """Stored matrix of simulated loss vectors, reused across all evaluations.

    data: (n, d) float64, rows = scenarios, columns = risk components.
    """

    data: np.ndarray
    seed: int
    model_tag: str
    labels: tuple | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ScenarioError(f"scenario matrix must be (n>=1, d>=1), got shape {data.shape}")
        if not np.isfinite(data).all():
            bad = np.argwhere(~np.isfinite(data))[0]
            raise ScenarioError(f"non-finite scenario entry at row {bad[0]}, column {bad[1]}")
        object.__setattr__(self, "data", data)
        if self.labels is not None:
            labels = tuple(str(x) for x in self.labels)
            if len(labels) != data.shape[1]:
                raise ScenarioError(f"{len(labels)} labels for {data.shape[1]} columns")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def column_stats(self) -> dict:
        d = self.data
        return {
            "mean": d.mean(axis=0).tolist(),
            "std": d.std(axis=0, ddof=1).tolist() if self.n > 1 else [0.0] * self.d,
            "min": d.min(axis=0).tolist(),
            "max": d.max(axis=0).tolist(),
        }

    def save(self, path) -> None:
        """Binary container: MAGIC, version u16, n u64, d u64, row-major
        float64 little-endian data, seed u64, tag length u32, tag utf-8."""
        tag = self.model_tag.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HQQ", CONTAINER_VERSION, self.n, self.d))
            fh.write(self.data.astype("<f8", copy=False).tobytes(order="C"))
            fh.write(struct.pack("<QI", self.seed, len(tag)))
            fh.write(tag)

    @classmethod
    def load(cls, path) -> "ScenarioSet":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MAGIC:
                raise ScenarioError(f"bad container magic {magic!r}, expected {MAGIC!r}")
            version, n, d = struct.unpack("<HQQ", fh.read(18))
            if version != CONTAINER_VERSION:
                raise ScenarioError(f"unsupported container version {version}")
            raw = fh.read(8 * n * d)
            if len(raw) != 8 * n * d:
                raise ScenarioError("truncated scenario container")
            data = np.frombuffer(raw, dtype="<f8").reshape(n, d)
            seed, tag_len = struct.unpack("<QI", fh.read(12))
            tag = fh.read(tag_len).decode("utf-8")
        return cls(data=data.copy(), seed=seed, model_tag=tag)

    def to_csv(self, path) -> None:
        header = ",".join(self.labels) if self.labels else ",".join(
            f"X{k + 1}" for k in range(self.d)
        )
        np.savetxt(path, self.data, delimiter=",", header=header, comments="")


def _check_square_symmetric(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ScenarioError(f"{name} must be square, got shape {mat.shape}")
    gap = np.max(np.abs(mat - mat.T)) if mat.size else 0.0
    if gap > _SYM_TOL:
        raise ScenarioError(f"{name} not symmetric: max asymmetry {gap:.3e} > {_SYM_TOL}")
    return 0.5 * (mat + mat.T)


def _psd_factor(mat: np.ndarray, name: str) -> np.ndarray:
    """Eigenvalue-clipped factor L with L @ L.T == mat (up to clipping)."""
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < _EIG_CLIP:
        raise ScenarioError(
            f"{name} is not positive semi-definite: eigenvalue {vals.min():.6e} < {_EIG_CLIP}"
        )
    clipped = vals < 0
    if clipped.any():
        logger.warning(
            "%s: clipping %d negative eigenvalue(s) in (%.1e, 0) to zero, smallest %.3e",
            name, int(clipped.sum()), _EIG_CLIP, vals.min(),
        )
        vals = np.where(clipped, 0.0, vals)
    return vecs * np.sqrt(vals)


@dataclass(frozen=True)
class GaussianModel:
    """Multivariate Gaussian loss model with mean vector and covariance matrix."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = _check_square_symmetric(self.covariance, "covariance")
        if mean.shape[0] != cov.shape[0]:
            raise ScenarioError(f"mean has length {mean.shape[0]}, covariance is {cov.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def factor(self) -> np.ndarray:
        return _psd_factor(self.covariance, "covariance")


def simulate_gaussian(model: GaussianModel, n: int, seed: int, threads: int = 1) -> ScenarioSet:
    """Draw n i.i.d. loss vectors from N(mean, covariance)."""
    if n < 1:
        raise ScenarioError("n must be >= 1")
    L = model.factor()
    d = model.d
    out = np.empty((n, d))

    def worker(j, lo, hi):
        z = _standard_normals(_block_generator(seed, j), (hi - lo, d))
        out[lo:hi] = model.mean + z @ L.T

    _run_blocks(n, worker, threads)
    return ScenarioSet(data=out, seed=seed, model_tag=f"gaussian(d={d})")


@dataclass(frozen=True)
class StudentCopulaModel:
    """Member losses driven by Student-t underlyings coupled by a t copula.

    Three-day underlying moves are kappa_i * T_i * spot_i with T_i Student-t
    with marginal_dof[i] degrees of freedom; the T_i are coupled by a
    Student-t copula with matrix `correlation` and `copula_dof` degrees of
    freedom.  Member losses are X = -P (S_3d - S_0) for the position matrix P.
    """

    correlation: np.ndarray
    copula_dof: float
    marginal_dof: np.ndarray
    fudge: np.ndarray
    spot: np.ndarray
    positions: np.ndarray
    member_labels: tuple | None = None
    tickers: tuple | None = None

    def __post_init__(self):
        corr = _check_square_symmetric(self.correlation, "correlation")
        du = corr.shape[0]
        if np.max(np.abs(np.diag(corr) - 1.0)) > _SYM_TOL:
            raise ScenarioError("correlation matrix must have unit diagonal")
        nu = float(self.copula_dof)
        if not nu > 0:
            raise ScenarioError("copula_dof must be > 0")
        mdof = np.broadcast_to(np.asarray(self.marginal_dof, dtype=np.float64), (du,)).copy()
        if not (mdof > 0).all():
            raise ScenarioError("marginal_dof must all be > 0")
        fudge = np.broadcast_to(np.asarray(self.fudge, dtype=np.float64), (du,)).copy()
        if not (fudge > 0).all():
            raise ScenarioError("fudge coefficients must all be > 0")
        spot = np.broadcast_to(np.asarray(self.spot, dtype=np.float64), (du,)).copy()
        if not (spot > 0).all():
            raise ScenarioError("spot prices must all be > 0")
        pos = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if pos.shape[1] != du:
            raise ScenarioError(
                f"positions have {pos.shape[1]} columns, correlation is {du}x{du}"
            )
        colsum = pos.sum(axis=0)
        worst = int(np.argmax(np.abs(colsum)))
        if np.abs(colsum[worst]) > _COLSUM_TOL:
            name = self.tickers[worst] if self.tickers else f"#{worst}"
            raise ScenarioError(f"column {name} sums to {colsum[worst]:.6g}, expected 0")
        object.__setattr__(self, "correlation", corr)
        object.__setattr__(self, "copula_dof", nu)
        object.__setattr__(self, "marginal_dof", mdof)
        object.__setattr__(self, "fudge", fudge)
        object.__setattr__(self, "spot", spot)
        object.__setattr__(self, "positions", pos)
        if self.member_labels is not None:
            object.__setattr__(self, "member_labels", tuple(str(x) for x in self.member_labels))
        if self.tickers is not None:
            object.__setattr__(self, "tickers", tuple(str(x) for x in self.tickers))

    @property
    def n_members(self) -> int:
        return self.positions.shape[0]

    @property
    def n_underlyings(self) -> int:
        return self.positions.shape[1]

    def diagnostics(self) -> list:
        notes = []
        if self.copula_dof <= 2:
            notes.append(f"copula_dof={self.copula_dof:g} <= 2: infinite variance")
        low = self.marginal_dof <= 2
        if low.any():
            idx = np.flatnonzero(low).tolist()
            notes.append(f"marginal_dof <= 2 for underlyings {idx}: infinite variance")
        return notes


def _chi_square(rng: np.random.Generator, n: int, dof: float) -> np.ndarray:
    # sum of squares for integer dof, otherwise Gamma(dof/2, 2) via inverse CDF
    if float(dof).is_integer():
        z = _standard_normals(rng, (n, int(dof)))
        return np.einsum("ij,ij->i", z, z)
    return 2.0 * gammaincinv(dof / 2.0, _open_uniforms(rng, n))


def simulate_student_copula(
    model: StudentCopulaModel, n: int, seed: int, threads: int = 1
) -> ScenarioSet:
    """Simulate member losses by the five-step t-copula recipe.

    Per scenario: correlated Gaussian G; chi-square xi with copula_dof
    degrees of freedom; R = sqrt(dof/xi) G; U = F_dof(R); T_i = inverse
    marginal t CDF of U_i; underlying move kappa*T*spot; loss X = -P dS.
    """
    if n < 1:
        raise ScenarioError("n must be >= 1")
    for note in model.diagnostics():
        logger.warning("student copula model: %s", note)
    L = _psd_factor(model.correlation, "correlation")
    du, dm = model.n_underlyings, model.n_members
    nu = model.copula_dof
    out = np.empty((n, dm))

    def worker(j, lo, hi):
        rng = _block_generator(seed, j)
        b = hi - lo
        g = _standard_normals(rng, (b, du)) @ L.T
        xi = np.maximum(_chi_square(rng, b, nu), 1e-300)
        r = np.sqrt(nu / xi)[:, None] * g
        u = stdtr(nu, r)
        t = stdtrit(model.marginal_dof, u)
        ds = model.fudge * t * model.spot
        out[lo:hi] = -ds @ model.positions.T

    _run_blocks(n, worker, threads)
    tag = f"student_copula(members={dm},underlyings={du},nu={nu:g})"
    return ScenarioSet(data=out, seed=seed, model_tag=tag, labels=model.member_labels)


@dataclass(frozen=True)
class PositionsTable:
    """Position matrix P (members x underlyings) with labels preserved."""

    matrix: np.ndarray
    members: tuple
    tickers: tuple


def load_positions(path) -> PositionsTable:
    """Read a positions CSV: header row of tickers, first column member labels.

    Verifies the clearing identity that every underlying column sums to zero.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise PositionsError("positions CSV needs a header row and at least one member row")
    tickers = tuple(cell.strip() for cell in rows[0][1:])
    if not tickers:
        raise PositionsError("positions CSV header has no ticker columns", row=0)
    width = len(rows[0])
    members = []
    body = []
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != width:
            raise PositionsError(
                f"row {i} has {len(row)} cells, header has {width}", row=i
            )
        members.append(row[0].strip())
        vals = []
        for jcol, cell in enumerate(row[1:]):
            try:
                vals.append(float(cell))
            except ValueError:
                raise PositionsError(
                    f"non-numeric cell {cell!r} at row {i}, column {tickers[jcol]}",
                    row=i,
                    column=tickers[jcol],
                ) from None
        body.append(vals)
    matrix = np.asarray(body, dtype=np.float64)
    colsum = matrix.sum(axis=0)
    worst = int(np.argmax(np.abs(colsum)))
    if np.abs(colsum[worst]) > _COLSUM_TOL:
        raise PositionsError(
            f"column {tickers[worst]} sums to {colsum[worst]:.6g}",
            column=tickers[worst],
        )
    return PositionsTable(matrix=matrix, members=tuple(members), tickers=tickers)
