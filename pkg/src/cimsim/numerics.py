"""Overflow-safe elementary functions used by the device laws and the tape."""

import math

import numpy as np


def ln1pexp(x):
    """ln(1 + e^x) evaluated as max(x, 0) + log1p(e^{-|x|}).

    Safe for arguments of either sign with magnitudes in the hundreds,
    which occur when exponents carry 1/(2*U_T) ~ 20/V factors.
    """
    x = np.asarray(x)
    if x.ndim == 0:
        xf = float(x)
        return np.float64(max(xf, 0.0) + math.log1p(math.exp(-abs(xf))))
    t = np.abs(x)
    np.negative(t, out=t)
    np.exp(t, out=t)
    np.log1p(t, out=t)
    m = np.maximum(x, 0)
    return np.add(m, t, out=t)


def sigmoid(x):
    """Logistic function, the derivative of ln1pexp."""
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
