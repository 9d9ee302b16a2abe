"""Small numerical and randomness helpers shared across modules."""

from __future__ import annotations

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def as_generator(seed=None) -> np.random.Generator:
    """Return a ``numpy.random.Generator`` built from ``seed``.

    Accepts ``None``, an int, a ``SeedSequence`` or an existing generator
    (returned as is).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.RandomState):
        raise TypeError("legacy RandomState is not supported; pass a Generator or an int")
    return np.random.default_rng(seed)


def replicate_rng(seed: int, *index: int) -> np.random.Generator:
    """Independent stream for replicate ``index`` (one or more ints) under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in index)))


def logsumexp_rows(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Log-sum-exp along ``axis`` that returns -inf (without warnings) for all -inf slices."""
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    finite = np.isfinite(amax)
    shift = np.where(finite, amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - shift), axis=axis, keepdims=True)) + shift
    out = np.where(finite, out, amax)
    return np.squeeze(out, axis=axis)


def inverse_cdf_rows(weights: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF lookup.

    ``weights`` has shape (B, N) with nonnegative rows summing to a positive
    value; ``uniforms`` has shape (B, M) with entries in [0, 1).  Returns the
    (B, M) indices ``k`` with ``cdf[k-1] <= u < cdf[k]``.  Zero-weight entries
    are never selected.
    """
    weights = np.asarray(weights, dtype=float)
    uniforms = np.asarray(uniforms, dtype=float)
    n_rows, n = weights.shape
    cdf = np.cumsum(weights, axis=1)
    cdf /= cdf[:, -1:]
    cdf[:, -1] = 1.0
    offsets = np.arange(n_rows, dtype=float)[:, None]
    flat = (cdf + offsets).ravel()
    idx = np.searchsorted(flat, (uniforms + offsets).ravel(), side="right")
    idx = idx.reshape(uniforms.shape) - np.arange(n_rows)[:, None] * n
    # offset rounding near u -> 1 may step past the last positive weight
    last_positive = n - 1 - np.argmax(weights[:, ::-1] > 0, axis=1)
    return np.clip(idx, 0, last_positive[:, None])


def gaussian_logpdf(x, mean, var):
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)
