"""The N-torus as blockwise unit vectors in R^(2N).

Arrays here have the 2N axis last; blocks are consecutive (cos, sin) pairs.
Leading batch axes are allowed everywhere.
"""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2 * math.pi


class SingularProjectionError(ArithmeticError):
    """A block had zero norm, so it has no direction to project onto."""


def _blocks(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] % 2:
        raise ValueError(f"last axis must have even length, got {x.shape}")
    return x.reshape(x.shape[:-1] + (x.shape[-1] // 2, 2))


def wrap(theta):
    """Map angles into [0, 2pi)."""
    out = np.mod(theta, TWO_PI)
    # np.mod can return exactly 2pi for tiny negative inputs
    return np.where(out >= TWO_PI, 0.0, out)


def embed_phases(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1).reshape(theta.shape[:-1] + (-1,))


# blocks this close to unit norm are already on the torus; leaving them
# untouched makes the projection exactly idempotent
_UNIT_TOL = 8 * np.finfo(float).eps


def project_torus(x) -> np.ndarray:
    b = _blocks(x)
    norms = np.sqrt(b[..., 0] ** 2 + b[..., 1] ** 2)[..., None]
    if np.any(norms == 0):
        raise SingularProjectionError("zero-norm block in torus projection")
    norms = np.where(np.abs(norms - 1.0) <= _UNIT_TOL, 1.0, norms)
    return (b / norms).reshape(np.shape(x))


def project_tangent(x, xi) -> np.ndarray:
    bx, bxi = _blocks(x), _blocks(xi)
    radial = (bx * bxi).sum(axis=-1, keepdims=True)
    return (bxi - radial * bx).reshape(np.shape(xi))


def recover_phases(x) -> np.ndarray:
    b = _blocks(x)
    return wrap(np.arctan2(b[..., 1], b[..., 0]))


def quantize_phases(theta, bits: int) -> np.ndarray:
    """Snap to the nearest of 2^bits uniform levels; ties go to the lower level index."""
    if not 1 <= bits <= 8:
        raise ValueError("bits must be in [1, 8]")
    levels = 2 ** bits
    step = TWO_PI / levels
    pos = wrap(theta) / step
    lower = np.floor(pos)
    frac = pos - lower
    idx = np.where(frac > 0.5, lower + 1, lower).astype(int) % levels
    return idx * step


def tangent_lift(x, dtheta) -> np.ndarray:
    """Push a per-angle derivative to the ambient tangent direction (-sin, cos) * d."""
    b = _blocks(x)
    dtheta = np.asarray(dtheta, dtype=float)
    lifted = np.stack([-b[..., 1] * dtheta, b[..., 0] * dtheta], axis=-1)
    return lifted.reshape(np.shape(x))


def uniform_torus(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Uniform random torus point(s); ``shape`` counts angles, result has 2x on the last axis."""
    return embed_phases(rng.uniform(0.0, TWO_PI, size=shape))


def sample_von_mises(mu: float, kappa: float, rng: np.random.Generator, size=None):
    """Best-Fisher rejection sampler; ``kappa == 0`` gives the uniform circle.

    Results are wrapped to [0, 2pi). ``size=None`` returns a scalar.
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    n = 1 if size is None else int(np.prod(size))
    if kappa == 0:
        out = rng.uniform(0.0, TWO_PI, size=n)
    else:
        tau = 1.0 + math.sqrt(1.0 + 4.0 * kappa * kappa)
        rho = (tau - math.sqrt(2.0 * tau)) / (2.0 * kappa)
        r = (1.0 + rho * rho) / (2.0 * rho)
        out = np.empty(n)
        filled = 0
        while filled < n:
            u1 = rng.uniform()
            z = math.cos(math.pi * u1)
            f = (1.0 + r * z) / (r + z)
            c = kappa * (r - f)
            u2 = rng.uniform()
            if c * (2.0 - c) - u2 > 0 or math.log(c / u2) + 1.0 - c >= 0:
                u3 = rng.uniform()
                out[filled] = mu + math.copysign(math.acos(f), u3 - 0.5)
                filled += 1
        out = wrap(out)
    if size is None:
        return float(out[0])
    return out.reshape(size)


def von_mises_torus(rng: np.random.Generator, kappa: float, shape: tuple, mu: float = 0.0) -> np.ndarray:
    """Torus point with every angle drawn from a von Mises(mu, kappa)."""
    return embed_phases(sample_von_mises(mu, kappa, rng, size=shape))


def quadratic_kappa_schedule(T: int, kappa_max: float = 50.0) -> np.ndarray:
    """Concentration per step k = 1..T decaying quadratically toward k = T."""
    k = np.arange(1, T + 1)
    return kappa_max * (1.0 - (k - 1) / max(T, 1)) ** 2
