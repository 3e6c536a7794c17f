"""Kernel construction, normalization, and admissibility."""

import numpy as np
import pytest
from scipy.integrate import quad

from nlsource import KernelError, KernelFamily, build_kernel, compute_c_n
from nlsource.kernel import eval_kernel, kernel_radial_mass


def test_c_n_is_one_in_1d():
    for p in (1.5, 2.0, 3.0, 4.0):
        assert compute_c_n(1, p).value == 1.0


def test_c_n_higher_dim_beta_ratio():
    # dim=3, p=2: mean of cos^2 over the sphere is 1/3
    assert compute_c_n(3, 2.0).value == pytest.approx(1.0 / 3.0)


@pytest.mark.parametrize("family", list(KernelFamily))
def test_normalization_by_quadrature(family):
    kern = build_kernel(family, delta=0.1, p=2.0, s=0.5)
    mass, _ = quad(lambda r: eval_kernel(kern, r), 0.0, kern.delta, limit=200)
    assert 2.0 * mass == pytest.approx(compute_c_n(1, 2.0).value, abs=1e-10)


def test_radial_mass_matches_quadrature():
    kern = build_kernel(KernelFamily.FRACTIONAL_TRUNCATED, 0.2, 2.0, s=0.5)
    for lo, hi in ((0.0, 0.05), (0.05, 0.13), (0.13, 0.2)):
        ref, _ = quad(lambda r: eval_kernel(kern, r), lo, hi, limit=200)
        assert kernel_radial_mass(kern, lo, hi) == pytest.approx(ref, rel=1e-10)


def test_support_is_the_horizon_ball():
    kern = build_kernel(KernelFamily.CONSTANT, 0.1, 2.0)
    assert eval_kernel(kern, 0.05) > 0
    assert eval_kernel(kern, 0.1) == 0.0
    assert eval_kernel(kern, 0.2) == 0.0


def test_fractional_lower_bound_on_support():
    kern = build_kernel(KernelFamily.FRACTIONAL_TRUNCATED, 0.1, 2.0, s=0.5)
    r = np.linspace(1e-6, 0.1, 50, endpoint=False)
    expo = kern.dim + (kern.s - 1) * kern.p
    assert np.all(eval_kernel(kern, r) >= kern.c0 / r**expo * (1 - 1e-12))


def test_admissibility_boundary_case_allowed():
    # dim = p*s exactly is the boundary of the fractional hypothesis
    build_kernel(KernelFamily.FRACTIONAL_TRUNCATED, 0.1, 2.0, s=0.5)


def test_inadmissible_exponent_rejected():
    with pytest.raises(KernelError):
        build_kernel(KernelFamily.FRACTIONAL_TRUNCATED, 0.1, 3.0, s=0.5)


def test_bad_parameters_rejected():
    with pytest.raises(KernelError):
        build_kernel(KernelFamily.CONSTANT, -0.1, 2.0)
    with pytest.raises(KernelError):
        build_kernel(KernelFamily.FRACTIONAL_TRUNCATED, 0.1, 2.0, s=1.5)
