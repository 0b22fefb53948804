"""Linear and logistic imputation regressions with approximate posterior draws.

Both draw routines follow the usual normal-approximation recipe used by
chained-equation imputation software: fit by maximum likelihood on rows with
an observed response, then perturb the estimate.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

from .errors import DataError, SeparationError

SEPARATION_BOUND = 15.0


class CollinearityWarning(UserWarning):
    pass


class InsufficientDataError(DataError):
    pass


def independent_columns(X, tol: float = 1e-9) -> np.ndarray:
    """Indices of a maximal linearly independent subset of the columns of ``X``.

    Columns are chosen by pivoted QR after scaling each column to unit norm;
    the returned indices are sorted.
    """
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=0)
    keep = norms > 0
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return idx
    Z = X[:, idx] / norms[idx]
    _, R, piv = scipy.linalg.qr(Z, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > tol * d[0])) if d.size else 0
    return np.sort(idx[piv[:rank]])


def drop_collinear(X, names=None, tol: float = 1e-9):
    """Remove linearly dependent columns, warning about each one dropped."""
    X = np.asarray(X, dtype=float)
    names = list(names) if names is not None else [f"c{j}" for j in range(X.shape[1])]
    keep = independent_columns(X, tol)
    if keep.size < X.shape[1]:
        dropped = [names[j] for j in range(X.shape[1]) if j not in set(keep.tolist())]
        warnings.warn(f"dropping collinear design columns: {', '.join(dropped)}", CollinearityWarning,
                      stacklevel=2)
    return X[:, keep], [names[j] for j in keep], keep


def posterior_draw_linear(design, response, rng: np.random.Generator):
    """Draw (coefficients, residual variance) for a normal linear regression.

    sigma2* = rss / g with g ~ chi-square(n - p), then
    beta* ~ N(beta_hat, sigma2* (X'X)^-1).
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    n, p = X.shape
    if n < p + 2:
        raise InsufficientDataError(f"linear imputation model needs >= {p + 2} rows, got {n}")
    Q, R = np.linalg.qr(X)
    if np.min(np.abs(np.diag(R))) <= 1e-12 * np.max(np.abs(np.diag(R))):
        raise InsufficientDataError("singular X'X in linear imputation model")
    beta = scipy.linalg.solve_triangular(R, Q.T @ y)
    resid = y - X @ beta
    df = n - p
    rss = float(resid @ resid)
    g = rng.chisquare(df)
    sigma2 = rss / g
    z = rng.standard_normal(p)
    beta_star = beta + np.sqrt(sigma2) * scipy.linalg.solve_triangular(R, z)
    return beta_star, sigma2


def fit_logistic(X, y, names=None, max_iter: int = 50, tol: float = 1e-10):
    """Newton-Raphson logistic regression; returns (beta, inverse information).

    The fit runs on an orthonormal basis of the design (QR, columns rescaled
    to unit root-mean-square), so the separation bound is not tripped by
    near-collinear columns whose large coefficients cancel. Direction j of
    that basis is the part of column j not explained by earlier columns.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    Q, R = np.linalg.qr(X)
    d = np.abs(np.diag(R))
    if d.size and np.min(d) <= 1e-10 * np.max(d):
        raise SeparationError("logistic imputation design is rank deficient")
    gamma, cov = _fit_logistic_scaled(Q * np.sqrt(n), y, names, max_iter, tol)
    T = np.sqrt(n) * scipy.linalg.solve_triangular(R, np.eye(R.shape[0]))
    return T @ gamma, T @ cov @ T.T


def _fit_logistic_scaled(X, y, names, max_iter, tol):
    n, p = X.shape
    beta = np.zeros(p)
    dev_old = np.inf
    for _ in range(max_iter):
        eta = X @ beta
        mu = np.exp(-np.logaddexp(0.0, -eta))
        w = mu * (1 - mu)
        info = (X * w[:, None]).T @ X
        score = X.T @ (y - mu)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            _check_separation(beta, names)
        eta = X @ beta
        dev = -2.0 * float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        if abs(dev - dev_old) < tol * (abs(dev) + 0.1):
            break
        dev_old = dev
    _check_separation(beta, names)
    mu = np.exp(-np.logaddexp(0.0, -(X @ beta)))
    info = (X * (mu * (1 - mu))[:, None]).T @ X
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise SeparationError("singular information in logistic imputation model") from None
    return beta, 0.5 * (cov + cov.T)


def _check_separation(beta, names):
    big = np.flatnonzero(~np.isfinite(beta) | (np.abs(beta) > SEPARATION_BOUND))
    if big.size:
        j = int(big[0])
        col = names[j] if names is not None else f"column {j}"
        raise SeparationError(f"separation in logistic imputation model at {col}", column=col)


def posterior_draw_logistic(design, response, rng: np.random.Generator, names=None):
    """Draw coefficients from N(beta_hat, V_hat) for a logistic regression."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.shape[0] < X.shape[1] + 2:
        raise InsufficientDataError(f"logistic imputation model needs >= {X.shape[1] + 2} rows")
    if np.all(y == y[0]):
        raise SeparationError("response is constant in logistic imputation model", column="intercept")
    beta, cov = fit_logistic(X, y, names)
    return beta + _mvn_factor(cov) @ rng.standard_normal(beta.size)


def _mvn_factor(cov):
    """Symmetric square root of a covariance matrix, negative eigenvalues clipped to 0."""
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def expit(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=float)))
