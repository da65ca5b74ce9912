import numpy as np
import pytest

from msra import (
    GaussianModel,
    ScenarioSet,
    StudentCopulaModel,
    simulate_gaussian,
    simulate_student_copula,
)

SEED = 20260809


def bivariate_gaussian(rho: float, n: int, seed: int = SEED, s1: float = 1.0, s2: float = 1.0):
    cov = np.array([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])
    return simulate_gaussian(GaussianModel(np.zeros(2), cov), n, seed)


def trivariate_gaussian(rho: float, n: int, seed: int = SEED, v1: float = 0.5, v3: float = 0.6):
    cov = np.array([[v1, v1 * rho, 0.0], [v1 * rho, v1, 0.0], [0.0, 0.0, v3]])
    return simulate_gaussian(GaussianModel(np.zeros(3), cov), n, seed)


BOOK_CORRELATION = np.array(
    [
        [1.00, 0.55, 0.45, 0.35, 0.50],
        [0.55, 1.00, 0.40, 0.30, 0.45],
        [0.45, 0.40, 1.00, 0.35, 0.40],
        [0.35, 0.30, 0.35, 1.00, 0.30],
        [0.50, 0.45, 0.40, 0.30, 1.00],
    ]
)

BOOK_POSITIONS = np.array(
    [
        [+100, +50, 0, 0, +20],
        [-100, +50, 0, +10, 0],
        [+80, -40, +30, -10, 0],
        [-80, -40, -30, 0, -20],
        [+60, 0, +25, +15, +10],
        [-60, 0, -25, -15, -10],
        [+30, -10, +12, +8, +5],
        [-30, -10, -12, -8, -5],
        [+20, +15, +9, +6, +3],
        [-20, -15, -9, -6, -3],
    ],
    dtype=float,
)


def synthetic_book_model() -> StudentCopulaModel:
    return StudentCopulaModel(
        correlation=BOOK_CORRELATION,
        copula_dof=6.0,
        marginal_dof=[4.0, 5.0, 6.0, 7.0, 8.0],
        fudge=[0.02, 0.025, 0.03, 0.035, 0.04],
        spot=[4463.0, 443.0, 120.0, 55.0, 210.0],
        positions=BOOK_POSITIONS,
        member_labels=[f"PB{i}" for i in range(1, 11)],
        tickers=["U1", "U2", "U3", "U4", "U5"],
    )


@pytest.fixture(scope="session")
def std_normal_2d_small() -> ScenarioSet:
    return bivariate_gaussian(0.0, 200_000)


@pytest.fixture(scope="session")
def book_scenarios() -> ScenarioSet:
    return simulate_student_copula(synthetic_book_model(), 100_000, seed=31)
