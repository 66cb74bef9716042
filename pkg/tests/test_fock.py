import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvfade import fock
from cvfade.fock import DensityOperator


def bell_state():
    v = np.zeros(4, complex)
    v[0] = v[3] = 1 / math.sqrt(2)
    return DensityOperator((2, 2), np.outer(v, v.conj()))


def test_overlap_closed_form():
    for a, b in [(0.5, -0.5), (1 + 1j, 0.3), (0, 2j)]:
        expected = math.exp(-abs(a - b) ** 2 / 2)
        assert abs(fock.coherent_overlap(a, b)) == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5, 2.2])
def test_truncated_overlap_matches_formula(alpha):
    n = fock.default_cutoff(alpha)
    u = fock.coherent_state(alpha, n)
    v = fock.coherent_state(-alpha, n)
    assert abs(u.inner(v)) == pytest.approx(math.exp(-2 * alpha**2), abs=1e-10)
    assert u.norm_defect < fock.NORM_TOL


def test_default_cutoff_rule():
    assert fock.default_cutoff(0.0) == fock.MIN_CUTOFF
    n = fock.default_cutoff(3.0)
    assert fock.poisson_tail(9.0, n) < 1e-10 <= fock.poisson_tail(9.0, n - 1)


def test_truncation_warning():
    with pytest.warns(fock.TruncationWarning):
        fock.coherent_state(3.0, 8)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fock.coherent_state(0.5, 12)


def test_vacuum_and_coherent_quadratures():
    ops = fock.quadrature_operators(20)
    vac = fock.coherent_state(0, 20).density()
    assert vac.expect(ops.X2).real == pytest.approx(1.0)
    assert vac.expect(ops.P2).real == pytest.approx(1.0)
    alpha = 0.7 - 0.4j
    rho = fock.coherent_state(alpha, 20).density()
    assert rho.expect(ops.X).real == pytest.approx(2 * alpha.real, abs=1e-9)
    assert rho.expect(ops.P).real == pytest.approx(2 * alpha.imag, abs=1e-9)
    var_x = rho.expect(ops.X2).real - rho.expect(ops.X).real ** 2
    assert var_x == pytest.approx(1.0, abs=1e-8)


def test_squared_quadratures_exact_below_cutoff():
    # X2 is the compression of the untruncated square, so it differs from X @ X
    ops = fock.quadrature_operators(6)
    diff = ops.X2 - ops.X @ ops.X
    assert np.allclose(diff[:-1, :-1], 0)
    assert abs(diff[-1, -1]) > 1


def test_partial_trace_of_product():
    a = DensityOperator((3,), np.diag([0.5, 0.3, 0.2]).astype(complex))
    b = fock.coherent_state(0.4, 12).density()
    prod = fock.tensor(a, b)
    assert np.allclose(fock.partial_trace(prod, 0).matrix, a.matrix * b.trace())
    assert np.allclose(fock.partial_trace(prod, 1).matrix, b.matrix * a.trace())


def test_bell_negativity():
    assert fock.negativity_exact(bell_state()) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("p", [0.0, 0.2, 1 / 3, 0.5, 0.9, 1.0])
def test_werner_negativity(p):
    rho = p * bell_state().matrix + (1 - p) * np.eye(4) / 4
    n = fock.negativity_exact(DensityOperator((2, 2), rho))
    assert n == pytest.approx(max(0.0, (3 * p - 1) / 4), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_product_states_have_no_negativity(seed):
    rng = np.random.default_rng(seed)

    def rand_rho(d):
        g = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        r = g @ g.conj().T
        return r / np.trace(r)

    rho = np.kron(rand_rho(2), rand_rho(3))
    assert fock.negativity_exact(DensityOperator((2, 3), rho)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_partial_transpose_is_involution(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6))
    rho = DensityOperator((2, 3), m + m.conj().T)
    twice = fock.partial_transpose(fock.partial_transpose(rho, 0), 0)
    assert np.allclose(twice.matrix, rho.matrix)
    assert np.trace(fock.partial_transpose(rho, 1).matrix) == pytest.approx(np.trace(rho.matrix))


def test_non_hermitian_rejected():
    m = np.zeros((4, 4), complex)
    m[0, 1] = 1
    with pytest.raises(ValueError):
        fock.negativity_exact(DensityOperator((2, 2), m))


def test_q_function_coherent():
    alpha = 0.6 + 0.2j
    rho = fock.coherent_state(alpha, 25).density()
    betas = np.array([0, alpha, 1j, -0.5])
    expected = np.exp(-np.abs(betas - alpha) ** 2) / np.pi
    assert np.allclose(fock.q_function(rho, betas), expected, atol=1e-10)
    vac = fock.coherent_state(0, 12).density()
    assert fock.q_function(vac, 0) == pytest.approx(1 / np.pi)
