"""Learned densities that feed the entropy coder.

Two families:

* FactorizedDensity: a per-dimension monotone CDF built from K affine
  layers with positive slopes interleaved with bounded nonlinear bumps,
  finished by a sigmoid.  Used as the stationary model for the global
  state and the first frame's local state.
* Conditional normals: mean/scale pairs emitted by the temporal priors.

Both are always evaluated on width-1 bins (cdf at v+1/2 minus cdf at
v-1/2), matching the uniform-noise posterior used in training, and both
can produce the exact integer bin masses the coder quantizes into tables.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

from . import autograd as ag
from .autograd import Tensor
from .layers import ParamRegistry

SIGMA_FLOOR = 1e-6
MASS_FLOOR = 1e-24
_SQRT1_2 = 1.0 / np.sqrt(2.0)


class FactorizedDensity:
    """Independent monotone-flow CDF per latent dimension.

    Layer k applies x -> softplus(h_k) * x + b_k, followed (except after
    the last layer) by x -> x + tanh(a_k) * tanh(x); a final sigmoid maps
    to (0, 1).  The slope is positive and |tanh(a_k)| < 1, so the result
    is strictly increasing with limits 0 and 1.

    Initialized so the whole chain is the identity affine map, i.e. the
    initial CDF is exactly a standard logistic.
    """

    def __init__(self, reg: ParamRegistry, name: str, dim: int, layers: int = 4):
        if layers < 1:
            raise ValueError("need at least one composition layer")
        self.dim = dim
        self.layers = layers
        ident = np.log(np.expm1(1.0))  # softplus(ident) == 1
        self.h = reg.register(f"{name}.h", np.full((layers, dim), ident))
        self.b = reg.register(f"{name}.b", np.zeros((layers, dim)))
        self.a = reg.register(f"{name}.a", np.zeros((max(layers - 1, 0), dim)))

    def cdf(self, x: Tensor) -> Tensor:
        """Cumulative probability, elementwise over (..., dim) inputs."""
        if x.data.shape[-1] != self.dim:
            raise ag.GraphError(f"factorized cdf: last axis {x.data.shape} != dim {self.dim}")
        u = x
        for k in range(self.layers):
            u = ag.add(ag.mul(u, ag.softplus(self.h[k])), self.b[k])
            if k < self.layers - 1:
                u = ag.add(u, ag.mul(ag.tanh(u), ag.tanh(self.a[k])))
        return ag.sigmoid(u)

    def cdf_np(self, x: np.ndarray) -> np.ndarray:
        """Tape-free evaluation for the coding path (same arithmetic)."""
        x = np.asarray(x, dtype=np.float64)
        u = x
        for k in range(self.layers):
            u = u * np.logaddexp(0.0, self.h.data[k]) + self.b.data[k]
            if k < self.layers - 1:
                u = u + np.tanh(u) * np.tanh(self.a.data[k])
        return _sp.expit(u)

    def bin_mass(self, x: Tensor) -> Tensor:
        """cdf(x + 1/2) - cdf(x - 1/2), floored for log stability."""
        hi = self.cdf(ag.shift(x, 0.5))
        lo = self.cdf(ag.shift(x, -0.5))
        return ag.lower_bound(ag.sub(hi, lo), MASS_FLOOR)

    def integer_pmf(self, bound: int) -> np.ndarray:
        """Exact bin masses over the alphabet [-bound, bound], tails absorbed.

        Returns shape (dim, 2*bound + 1); each row sums to 1 by construction
        up to float rounding.
        """
        edges = np.arange(-bound, bound, dtype=np.float64) + 0.5
        c = self.cdf_np(np.repeat(edges[:, None], self.dim, axis=1)).T  # (dim, 2*bound)
        pmf = np.empty((self.dim, 2 * bound + 1))
        pmf[:, 0] = c[:, 0]
        pmf[:, 1:-1] = np.diff(c, axis=1)
        pmf[:, -1] = 1.0 - c[:, -1]
        return pmf


def normal_bin_mass(v: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Mass of the width-1 bin centered at v under Normal(mu, sigma).

    Evaluated in the left tail for numerical stability far from the mean,
    then floored so the log stays finite.
    """
    z = ag.div(ag.sub(v, mu), sigma)
    az = ag.scale(ag.absolute(z), -1.0)
    w = ag.div(Tensor(np.full(sigma.data.shape, 0.5)), sigma)
    hi = _std_normal_cdf(ag.add(az, w))
    lo = _std_normal_cdf(ag.sub(az, w))
    return ag.lower_bound(ag.sub(hi, lo), MASS_FLOOR)


def _std_normal_cdf(x: Tensor) -> Tensor:
    return ag.shift(ag.scale(ag.erf(ag.scale(x, _SQRT1_2)), 0.5), 0.5)


def normal_integer_pmf(mu: np.ndarray, sigma: np.ndarray, bound: int) -> np.ndarray:
    """Integer bin masses for Normal(mu, sigma), tails absorbed at +-bound.

    mu and sigma have shape (dim,); the result is (dim, 2*bound + 1) with
    rows summing to 1 up to float rounding.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    edges = np.arange(-bound, bound, dtype=np.float64) + 0.5
    c = _sp.ndtr((edges[None, :] - mu[:, None]) / sigma[:, None])
    pmf = np.empty((len(mu), 2 * bound + 1))
    pmf[:, 0] = c[:, 0]
    pmf[:, 1:-1] = np.diff(c, axis=1)
    pmf[:, -1] = 1.0 - c[:, -1]
    return pmf


def integer_pmf(kind: str, n: int, bound: int, *, mu: float = 0.0, sigma: float = 1.0,
                density: FactorizedDensity | None = None, dim_index: int = 0) -> float:
    """Probability mass of integer n under one latent dimension's model.

    kind is "normal" (uses mu/sigma) or "factorized" (uses density and
    dim_index).  Boundary bins absorb the tails.
    """
    if not -bound <= n <= bound:
        raise ValueError(f"symbol {n} outside alphabet [-{bound}, {bound}]")
    if kind == "normal":
        row = normal_integer_pmf(np.array([mu]), np.array([sigma]), bound)[0]
    elif kind == "factorized":
        if density is None:
            raise ValueError("factorized pmf needs a density")
        row = density.integer_pmf(bound)[dim_index]
    else:
        raise ValueError(f"unknown distribution kind: {kind}")
    return float(row[n + bound])
