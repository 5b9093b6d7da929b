from beartype import beartype
import numpy as np


SMOOTHING_EPS: float = 1e-4


@beartype
def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest, ties away from zero (odd function, unlike numpy's banker rounding)"""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@beartype
def rel_err(a: float, b: float) -> float:
    """Relative error that degrades into an absolute one for magnitudes below 1"""
    return abs(a - b) / max(1., abs(a), abs(b))


@beartype
def smooth_distribution(p: np.ndarray, eps: float = SMOOTHING_EPS) -> np.ndarray:
    """Give every empty bin `eps` of mass, taken evenly from the non-empty bins.
    Raises when there is nothing to take from.
    """
    is_zeros = (p == 0)
    n_zeros = int(is_zeros.sum())
    n_nonzeros = p.size - n_zeros
    if n_nonzeros == 0:
        raise ValueError("cannot smooth an all-zero distribution")
    eps1 = eps * n_zeros / n_nonzeros
    out = p.astype(np.float64)
    out += np.where(is_zeros, eps, -eps1)
    if (out <= 0).any():
        raise ValueError("smoothing pushed a bin to non-positive mass")
    return out


@beartype
def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p||q) of two strictly positive, not necessarily normalized, distributions"""
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))
