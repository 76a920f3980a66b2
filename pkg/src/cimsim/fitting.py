"""Small damped least-squares (Levenberg-Marquardt) solver for device fits.

The contract the device fits rely on: the accepted residual norm is monotone
non-increasing, iteration stops when the relative step drops below ``step_tol``
or after ``max_iter`` iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import FitError


@dataclass(frozen=True)
class SolverInfo:
    residual_norm: float
    iterations: int
    converged: bool
    residual_history: np.ndarray


def _jacobian(residuals, theta, r0, rel_step=1e-7):
    n = theta.size
    jac = np.empty((r0.size, n))
    for k in range(n):
        h = rel_step * max(abs(theta[k]), 1.0)
        tp = theta.copy()
        tp[k] += h
        jac[:, k] = (residuals(tp) - r0) / h
    return jac


def levenberg_marquardt(
    residuals,
    theta0,
    max_iter: int = 500,
    step_tol: float = 1e-10,
    lam0: float = 1e-3,
):
    """Minimize ||residuals(theta)||^2 from ``theta0``.

    Returns (theta, SolverInfo).  Steps that would increase the residual are
    rejected and the damping is raised, so the accepted residual history is
    non-increasing by construction.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    r = np.asarray(residuals(theta), dtype=float)
    if not np.all(np.isfinite(r)):
        raise FitError("residuals are not finite at the initial guess")
    cost = float(r @ r)
    lam = lam0
    history = [np.sqrt(cost)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        jac = _jacobian(residuals, theta, r)
        jtj = jac.T @ jac
        jtr = jac.T @ r
        accepted = False
        for _ in range(50):
            try:
                step = np.linalg.solve(jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12)), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = theta + step
            r_trial = np.asarray(residuals(trial), dtype=float)
            if np.all(np.isfinite(r_trial)):
                cost_trial = float(r_trial @ r_trial)
                if cost_trial <= cost:
                    accepted = True
                    break
            lam *= 10.0
        if not accepted:
            break
        rel_step = np.max(np.abs(step) / np.maximum(np.abs(theta), 1.0))
        theta, r, cost = trial, r_trial, cost_trial
        lam = max(lam / 10.0, 1e-14)
        history.append(np.sqrt(cost))
        if rel_step < step_tol:
            converged = True
            break
    return theta, SolverInfo(
        residual_norm=np.sqrt(cost),
        iterations=it,
        converged=converged,
        residual_history=np.array(history),
    )
