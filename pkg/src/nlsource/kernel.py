"""Horizon kernel families: compact support, normalization, fractional bound.

A kernel k_delta is radial, supported in the ball of radius delta, and
normalized so that (1/C_N) * integral over the ball equals 1, where C_N is
the angular average of |w.e|^p over the unit sphere.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import beta as beta_fn, gamma as gamma_fn


class KernelError(ValueError):
    """Kernel hypothesis violation."""


class KernelFamily(enum.Enum):
    FRACTIONAL_TRUNCATED = "fractional_truncated"
    CONSTANT = "constant"


@dataclass(frozen=True)
class NormConstant:
    """Angular normalization constant: mean of |w.e|^p over the unit sphere."""

    value: float


def compute_c_n(dim: int, p: float) -> NormConstant:
    """Angular average (1/|S^{N-1}|) * integral of |w.e|^p over S^{N-1}.

    For dim = 1 the sphere is {-1, +1} and the value is exactly 1 for every p.
    For dim >= 2 the average reduces to a ratio of Beta functions.
    """
    if dim < 1:
        raise KernelError(f"dim must be >= 1, got {dim}")
    if p <= 1:
        raise KernelError(f"p must be > 1, got {p}")
    if dim == 1:
        return NormConstant(1.0)
    # integral over S^{N-1} of |cos(theta)|^p splits into the polar angle:
    # B((p+1)/2, (N-1)/2) / B(1/2, (N-1)/2)
    value = beta_fn((p + 1) / 2, (dim - 1) / 2) / beta_fn(0.5, (dim - 1) / 2)
    return NormConstant(float(value))


def _ball_surface_measure(dim: int) -> float:
    """Measure of the unit sphere S^{N-1} in R^N (2 for N=1)."""
    return 2 * math.pi ** (dim / 2) / gamma_fn(dim / 2)


@dataclass(frozen=True)
class Kernel:
    """A normalized horizon kernel.

    amplitude is fixed at construction so the normalization holds in closed
    form; for the fractional family the lower-bound constant c0 equals the
    amplitude.
    """

    family: KernelFamily
    delta: float
    p: float
    s: float
    c0: float
    dim: int
    amplitude: float

    def to_manifest(self) -> dict:
        return {
            "family": self.family.value,
            "delta": self.delta,
            "p": self.p,
            "s": self.s,
            "c0": self.c0,
            "dim": self.dim,
            "amplitude": self.amplitude,
        }


def build_kernel(
    family: KernelFamily,
    delta: float,
    p: float,
    s: float = 0.5,
    dim: int = 1,
) -> Kernel:
    """Construct a kernel with closed-form normalization.

    Fractional truncated: k(r) = amplitude / r^(N + (s-1)p) on 0 < r < delta,
    with amplitude = C_N (1-s) p / (|S^{N-1}| delta^((1-s)p)).
    Constant: k(r) = C_N / vol(B_delta) on the support.
    """
    if delta <= 0:
        raise KernelError(f"delta must be positive, got {delta}")
    if not 0 < s < 1:
        raise KernelError(f"s must lie in (0, 1), got {s}")
    if dim < p * s - 1e-14:
        raise KernelError(
            f"standing hypothesis N >= p*s violated: N={dim}, p*s={p * s}"
        )
    c_n = compute_c_n(dim, p).value
    surf = _ball_surface_measure(dim)
    if family is KernelFamily.FRACTIONAL_TRUNCATED:
        q = (1 - s) * p
        amplitude = c_n * q / (surf * delta**q)
        c0 = amplitude
    elif family is KernelFamily.CONSTANT:
        ball_vol = surf * delta**dim / dim
        amplitude = c_n / ball_vol
        c0 = amplitude * delta ** (dim + (s - 1) * p)
    else:
        raise KernelError(f"unknown kernel family {family!r}")
    return Kernel(
        family=family, delta=delta, p=p, s=s, c0=c0, dim=dim, amplitude=amplitude
    )


def kernel_radial_mass(kernel: Kernel, lo: float, hi: float) -> float:
    """Closed-form integral of the 1-D kernel profile over [lo, hi].

    Used by the pair assembly to carry exact kernel mass per radial cell, so
    the discrete pair sum conserves the normalization.
    """
    if kernel.dim != 1:
        raise KernelError("radial cell mass is implemented for dim = 1 only")
    lo = max(lo, 0.0)
    hi = min(hi, kernel.delta)
    if hi <= lo:
        return 0.0
    if kernel.family is KernelFamily.CONSTANT:
        return kernel.amplitude * (hi - lo)
    # fractional: k(r) = amplitude * r^(q - 1) with q = (1 - s) p > 0
    q = (1 - kernel.s) * kernel.p
    return kernel.amplitude * (hi**q - lo**q) / q


def eval_kernel(kernel: Kernel, r) -> float:
    """Evaluate k_delta at radius r >= 0 (vectorized over r)."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise KernelError("kernel radius must be nonnegative")
    inside = r < kernel.delta
    if kernel.family is KernelFamily.CONSTANT:
        out = np.where(inside, kernel.amplitude, 0.0)
    else:
        expo = kernel.dim + (kernel.s - 1) * kernel.p
        vals = kernel.amplitude * np.where(r > 0, r, 1.0) ** (-expo)
        out = np.where(inside & (r > 0), vals, 0.0)
        if expo == 0:
            # exponent zero: the kernel is constant up to the origin
            out = np.where(inside & (r == 0), kernel.amplitude, out)
    if out.ndim == 0:
        return float(out)
    return out
