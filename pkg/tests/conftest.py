import numpy as np
import pytest

from mfsv.factor_ml import StaticFactorEstimate, projection_matrix
from mfsv.montecarlo import build_design_params
from mfsv.params import ReturnPanel
from mfsv.simulate import simulate


@pytest.fixture(scope="session")
def design_small():
    """True parameters of the N=5, k=1 study design."""
    return build_design_params(5, 1)


@pytest.fixture(scope="session")
def design_10_2():
    return build_design_params(10, 2)


@pytest.fixture(scope="session")
def panel_small(design_small):
    theta1, theta2 = design_small
    return ReturnPanel(simulate(theta1, theta2, 1500, 314).returns)


def truth_estimate(theta1) -> StaticFactorEstimate:
    """Step-one estimate object populated with the true parameters."""
    return StaticFactorEstimate(
        B_star=theta1.loadings,
        Sigma_star=theta1.sigma2,
        Gamma_star=theta1.gamma2,
        Pi_star=projection_matrix(
            theta1.loadings.entries, theta1.sigma2, theta1.gamma2
        ),
        loglik=0.0,
        iterations=0,
        converged=True,
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240811)
