"""Truncated Fock-space numerics.

States live on |0>, ..., |N_c - 1>. Quadratures follow X = a + a^dag,
P = i(a^dag - a), so the vacuum has Var(X) = Var(P) = 1 (one shot-noise unit)
and a coherent state |alpha> has <X> = 2 Re(alpha), <P> = 2 Im(alpha).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import gammaln

NORM_TOL = 1e-10
MIN_CUTOFF = 12


class TruncationWarning(UserWarning):
    """Raised when a Fock cutoff drops non-negligible weight."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FockVector:
    """A (possibly truncated) ket on a single mode."""

    cutoff: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.cutoff < 2:
            raise ValueError(f"cutoff must be >= 2, got {self.cutoff}")
        if self.amplitudes.shape != (self.cutoff,):
            raise ValueError("amplitude vector does not match cutoff")
        object.__setattr__(self, "amplitudes", _frozen(self.amplitudes.astype(complex)))

    @property
    def norm_defect(self) -> float:
        """1 - <psi|psi>; the weight lost to truncation for coherent states."""
        return float(1.0 - np.vdot(self.amplitudes, self.amplitudes).real)

    def inner(self, other: "FockVector") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def density(self) -> "DensityOperator":
        v = self.amplitudes
        return DensityOperator((self.cutoff,), np.outer(v, v.conj()))


@dataclass(frozen=True)
class DensityOperator:
    """Operator on a tensor product of truncated spaces.

    ``dims`` lists the subsystem dimensions; ``matrix`` is the full
    prod(dims) x prod(dims) array in row-major (first subsystem slowest) order.
    """

    dims: tuple
    matrix: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        n = math.prod(dims)
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (n, n):
            raise ValueError(f"matrix shape {m.shape} does not match dims {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "matrix", _frozen(m))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def trace(self) -> complex:
        return complex(np.trace(self.matrix))

    def hermiticity_error(self) -> float:
        """Relative size of the anti-Hermitian part."""
        m = self.matrix
        scale = max(np.abs(m).max(), 1e-300)
        return float(np.abs(m - m.conj().T).max() / scale)

    def eigvalsh(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def expect(self, op: np.ndarray) -> complex:
        return complex(np.trace(self.matrix @ op))


def annihilation(cutoff: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, cutoff)), 1).astype(complex)


def coherent_amplitudes(alpha: complex, cutoff: int) -> np.ndarray:
    """Fock coefficients exp(-|alpha|^2/2) alpha^n / sqrt(n!), n < cutoff."""
    n = np.arange(cutoff)
    alpha = complex(alpha)
    if alpha == 0:
        c = np.zeros(cutoff, dtype=complex)
        c[0] = 1.0
        return c
    r, phi = abs(alpha), np.angle(alpha)
    log_mag = -0.5 * r * r + n * math.log(r) - 0.5 * gammaln(n + 1)
    return np.exp(log_mag) * np.exp(1j * phi * n)


def coherent_state(alpha: complex, cutoff: int, tol: float = NORM_TOL) -> FockVector:
    """Truncated coherent state.

    The returned vector is *not* renormalised; its ``norm_defect`` is the
    Poisson tail beyond the cutoff. A ``TruncationWarning`` is issued when that
    tail exceeds ``tol``.
    """
    if cutoff < 2:
        raise ValueError(f"cutoff must be >= 2, got {cutoff}")
    vec = FockVector(cutoff, coherent_amplitudes(alpha, cutoff))
    if vec.norm_defect > tol:
        warnings.warn(
            f"cutoff {cutoff} loses {vec.norm_defect:.2e} of |{alpha}>",
            TruncationWarning,
            stacklevel=2,
        )
    return vec


def coherent_overlap(alpha: complex, beta: complex) -> complex:
    """<alpha|beta> = exp(-|alpha|^2/2 - |beta|^2/2 + conj(alpha) beta)."""
    alpha, beta = complex(alpha), complex(beta)
    return complex(np.exp(-0.5 * abs(alpha) ** 2 - 0.5 * abs(beta) ** 2 + alpha.conjugate() * beta))


def poisson_tail(mean: float, cutoff: int) -> float:
    """P(n >= cutoff) for a Poisson distribution, computed without cancellation."""
    from scipy.stats import poisson

    return float(poisson.sf(cutoff - 1, mean))


def default_cutoff(max_amplitude: float, tol: float = NORM_TOL, floor: int = MIN_CUTOFF) -> int:
    """Smallest cutoff whose coherent-state norm defect is below ``tol``."""
    mean = float(max_amplitude) ** 2
    n = max(2, int(floor))
    while poisson_tail(mean, n) >= tol:
        n += 1
    return n


@dataclass(frozen=True)
class QuadratureOps:
    """Quadrature matrices on a truncated mode.

    ``X2``/``P2`` are the projections of the untruncated squares onto the
    retained levels, so they are exact for states supported below the cutoff
    (``X @ X`` differs from ``X2`` in the last level).
    """

    cutoff: int
    X: np.ndarray
    P: np.ndarray
    X2: np.ndarray
    P2: np.ndarray
    XP_sym: np.ndarray


@lru_cache(maxsize=64)
def quadrature_operators(cutoff: int) -> QuadratureOps:
    if cutoff < 2:
        raise ValueError(f"cutoff must be >= 2, got {cutoff}")
    big = cutoff + 2
    a = annihilation(big)
    ad = a.conj().T
    x = a + ad
    p = 1j * (ad - a)
    sl = slice(0, cutoff)
    ops = {
        "X": x[sl, sl],
        "P": p[sl, sl],
        "X2": (x @ x)[sl, sl],
        "P2": (p @ p)[sl, sl],
        "XP_sym": (0.5 * (x @ p + p @ x))[sl, sl],
    }
    return QuadratureOps(cutoff, **{k: _frozen(v) for k, v in ops.items()})


def tensor(a: DensityOperator, b: DensityOperator) -> DensityOperator:
    return DensityOperator(a.dims + b.dims, np.kron(a.matrix, b.matrix))


def _check_index(rho: DensityOperator, index: int) -> None:
    if not 0 <= index < len(rho.dims):
        raise IndexError(f"subsystem {index} out of range for dims {rho.dims}")


def partial_trace(rho: DensityOperator, keep: int | Sequence[int]) -> DensityOperator:
    """Trace out every subsystem not listed in ``keep``."""
    keep = [keep] if isinstance(keep, (int, np.integer)) else sorted(set(keep))
    for k in keep:
        _check_index(rho, k)
    dims = rho.dims
    n = len(dims)
    t = rho.matrix.reshape(dims + dims)
    # contract traced subsystems pairwise, highest index first so axes stay valid
    for i in reversed(range(n)):
        if i not in keep:
            t = np.trace(t, axis1=i, axis2=i + t.ndim // 2)
    kept = tuple(dims[k] for k in keep)
    d = math.prod(kept)
    return DensityOperator(kept, t.reshape(d, d))


def partial_transpose(rho: DensityOperator, subsystem: int = 0) -> DensityOperator:
    """Transpose the indices of one subsystem of a bipartite operator."""
    if len(rho.dims) != 2:
        raise ValueError("partial_transpose expects a bipartite operator")
    _check_index(rho, subsystem)
    da, db = rho.dims
    t = rho.matrix.reshape(da, db, da, db)
    if subsystem == 0:
        t = t.transpose(2, 1, 0, 3)
    else:
        t = t.transpose(0, 3, 2, 1)
    return DensityOperator(rho.dims, t.reshape(da * db, da * db))


def negativity_exact(rho: DensityOperator, herm_tol: float = 1e-12) -> float:
    """Sum of |negative eigenvalues| of the partial transpose on subsystem 0."""
    err = rho.hermiticity_error()
    if err > herm_tol:
        raise ValueError(f"operator is not Hermitian (relative error {err:.1e})")
    pt = partial_transpose(rho, 0).matrix
    pt = 0.5 * (pt + pt.conj().T)
    ev = np.linalg.eigvalsh(pt)
    return float(-ev[ev < 0].sum())


def q_function(rho: DensityOperator, beta, warn_ratio: float = 0.25) -> np.ndarray | float:
    """Husimi function <beta|rho|beta>/pi for a single-mode operator.

    ``beta`` may be a scalar or an array of complex points.
    """
    if len(rho.dims) != 1:
        raise ValueError("q_function expects a single-mode operator")
    cutoff = rho.dims[0]
    b = np.asarray(beta, dtype=complex)
    if np.max(np.abs(b)) ** 2 > warn_ratio * cutoff:
        warnings.warn(
            f"|beta|^2 up to {np.max(np.abs(b)) ** 2:.2f} is large for cutoff {cutoff}",
            TruncationWarning,
            stacklevel=2,
        )
    flat = b.ravel()
    kets = np.stack([coherent_amplitudes(z, cutoff) for z in flat], axis=1)
    vals = np.einsum("ik,ij,jk->k", kets.conj(), rho.matrix, kets).real / np.pi
    vals = np.clip(vals, 0.0, None)
    if b.ndim == 0:
        return float(vals[0])
    return vals.reshape(b.shape)
