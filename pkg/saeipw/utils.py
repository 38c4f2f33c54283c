"""
utils.py.

Small numerical and bookkeeping helpers shared across the toolkit.

This module provides helper functions to compute:
- logistic transforms with clipping
- the outcome and propensity design matrices
- per-area group sums in fixed area order
- the SHA-256 hash that identifies a run configuration
"""

import hashlib
import json
from collections.abc import Mapping
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit

from saeipw.errors import DomainError, OUTSIDE_UNIT_INTERVAL

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

# Linear predictors are clipped here so propensities stay strictly in (0, 1).
ETA_BOUND = 35.0


def inverse_logit(eta: FloatArray) -> FloatArray:
    """
    Logistic function on a clipped linear predictor.

    Parameters
    ----------
    eta : ndarray
        Linear predictor.

    Returns
    -------
    ndarray
        Probabilities strictly inside (0, 1).

    Example
    -------
    >>> float(inverse_logit(np.array([0.0]))[0])
    0.5
    """
    return np.asarray(expit(np.clip(eta, -ETA_BOUND, ETA_BOUND)), dtype=np.float64)


def log_odds(e: FloatArray) -> FloatArray:
    """
    Log-odds of probabilities.

    Raises
    ------
    DomainError
        If any probability is 0, 1 or outside the unit interval.
    """
    e = np.asarray(e, dtype=np.float64)
    if np.any(~np.isfinite(e)) or np.any(e <= 0.0) or np.any(e >= 1.0):
        raise DomainError(OUTSIDE_UNIT_INTERVAL)
    return np.asarray(logit(e), dtype=np.float64)


def outcome_design(x: FloatArray, w: FloatArray, treatment: bool = True) -> FloatArray:
    """
    Fixed design of the outcome models: intercept, covariates, treatment.

    Parameters
    ----------
    x : ndarray of shape (n, p)
        Covariates; p may be 0.
    w : ndarray of shape (n,)
        Treatment indicators.
    treatment : bool, default True
        Append the treatment column.

    Returns
    -------
    ndarray of shape (n, p + 2) or (n, p + 1)
    """
    columns = [np.ones((x.shape[0], 1)), x]
    if treatment:
        columns.append(np.asarray(w, dtype=np.float64)[:, None])
    return np.hstack(columns)


def propensity_design(x: FloatArray) -> FloatArray:
    """Fixed design of the propensity models: intercept and covariates."""
    return np.hstack([np.ones((x.shape[0], 1)), x])


def area_sums(values: FloatArray, area: IntArray, m: int) -> FloatArray:
    """
    Sum values by area.

    `np.bincount` accumulates in index order, so the result does not depend
    on how the caller ordered the areas.
    """
    return np.bincount(area, weights=values, minlength=m).astype(np.float64)


def area_counts(area: IntArray, m: int) -> IntArray:
    """Count units per area."""
    return np.bincount(area, minlength=m).astype(np.int64)


def huber_psi(u: FloatArray, c: float) -> FloatArray:
    """Classical Huber influence function."""
    return np.clip(u, -c, c)


def tilt(u: FloatArray, q: float) -> FloatArray:
    """Quantile tilt: ``q`` above zero, ``1 - q`` at or below."""
    return np.where(u > 0.0, q, 1.0 - q)


def tilted_psi(u: FloatArray, q: float, c: float) -> FloatArray:
    """Asymmetric Huber influence ``2 psi(u) [q 1(u>0) + (1-q) 1(u<=0)]``."""
    return 2.0 * huber_psi(u, c) * tilt(u, q)


def tilted_psi_prime(u: FloatArray, q: float, c: float) -> FloatArray:
    """Derivative of `tilted_psi`: twice the tilt inside ``|u| <= c``."""
    return 2.0 * tilt(u, q) * (np.abs(u) <= c)


def get_sha256(payload: Mapping[str, Any]) -> str:
    """
    Hash a configuration mapping.

    The mapping is serialised as canonical JSON (sorted keys, no spaces), so
    equal configurations always hash equally.

    Parameters
    ----------
    payload : Mapping[str, Any]
        JSON-serialisable configuration.

    Returns
    -------
    str
        A 64-character hexadecimal SHA-256 hash.
    """
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
