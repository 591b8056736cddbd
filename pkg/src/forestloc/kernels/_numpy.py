"""Pure-numpy implementation of the registration hot kernels."""

import numpy as np

BACKEND = "numpy"


def gicp_reduce(d, J, C):
    """Accumulate Gauss-Newton normal equations for distribution-to-distribution residuals.

    d: (m, 3) residuals, J: (m, 3, 6) residual Jacobians, C: (m, 3, 3) SPD
    combined covariances. Returns (H, b, cost) with H = sum J^T C^-1 J,
    b = sum J^T C^-1 d, cost = sum d^T C^-1 d.
    """
    omega = np.linalg.inv(C)
    od = np.einsum("mab,mb->ma", omega, d)
    cost = float(np.einsum("ma,ma->", d, od))
    b = np.einsum("mai,ma->i", J, od)
    oJ = np.einsum("mab,mbi->mai", omega, J)
    H = np.einsum("mai,maj->ij", J, oJ)
    return H, b, cost


def weighted_cost(d, C):
    """sum_i d_i^T C_i^-1 d_i for (m,3) residuals and (m,3,3) covariances."""
    omega = np.linalg.inv(C)
    return float(np.einsum("ma,mab,mb->", d, omega, d))
