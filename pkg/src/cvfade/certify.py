"""Effective-entanglement certification by negativity minimisation.

For each transmission sub-channel we minimise the negativity of a bipartite
state rho_AB over all states that reproduce Alice's fixed marginal (the
alphabet Gram matrix) and Bob's measured first and second quadrature moments
conditioned on each sent symbol. Negativity enters through the split
rho^{T_A} = sigma_plus - sigma_minus with both parts PSD, minimising tr sigma_minus.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from . import sdp
from .alphabet import Alphabet, SourceModel, build_alphabet, source_model
from .channel import ChannelParams, propagate
from .fock import DensityOperator, default_cutoff, negativity_exact, quadrature_operators

log = logging.getLogger(__name__)

RHO, SIGMA_PLUS, SIGMA_MINUS = 0, 1, 2
MOMENT_NAMES = ("X", "X2", "P", "P2")


@dataclass(frozen=True)
class StateMoments:
    """Bob's quadrature moments conditioned on one sent symbol (SNU)."""

    mean_x: float
    mean_p: float
    var_x: float
    var_p: float
    se_mean: float = 0.0
    se_var: float = 0.0
    cov_xp: float | None = None

    def targets(self) -> dict[str, tuple[float, float]]:
        """Raw moment targets and their standard errors."""
        se_x2 = math.hypot(self.se_var, 2 * self.mean_x * self.se_mean)
        se_p2 = math.hypot(self.se_var, 2 * self.mean_p * self.se_mean)
        out = {
            "X": (self.mean_x, self.se_mean),
            "X2": (self.var_x + self.mean_x**2, se_x2),
            "P": (self.mean_p, self.se_mean),
            "P2": (self.var_p + self.mean_p**2, se_p2),
        }
        if self.cov_xp is not None:
            se_xp = math.hypot(self.se_var, math.hypot(self.mean_x, self.mean_p) * self.se_mean)
            out["XP"] = (self.cov_xp + self.mean_x * self.mean_p, se_xp)
        return out

    @property
    def amplitude(self) -> complex:
        return complex(self.mean_x, self.mean_p) / 2


@dataclass(frozen=True)
class CertificationProblem:
    source: SourceModel
    moments: tuple
    sigma_level: float = 0.0
    include_cross: bool = False

    def __post_init__(self):
        object.__setattr__(self, "moments", tuple(self.moments))
        if len(self.moments) != self.source.alphabet.size:
            raise ValueError(
                f"{len(self.moments)} moment sets for an alphabet of {self.source.alphabet.size} states"
            )
        if self.sigma_level < 0:
            raise ValueError("sigma_level must be >= 0")
        if self.include_cross and any(m.cov_xp is None for m in self.moments):
            raise ValueError("include_cross needs cov_xp for every state")

    @property
    def cutoff(self) -> int:
        return self.source.cutoff


@dataclass
class CertificationResult:
    negativity_min: float
    log_negativity: float
    status: str
    duality_gap: float
    primal_value: float = math.nan
    dual_value: float = math.nan
    log_base: float = 2.0
    binding_constraints: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == sdp.OPTIMAL


def log_negativity(n: float, base: float = 2.0) -> float:
    """log(2N + 1) in the given base."""
    if n < 0:
        raise ValueError(f"negativity must be >= 0, got {n}")
    return math.log(2 * n + 1) / math.log(base)


# ---------------------------------------------------------------------------
# constraint rows


def hermitian_basis_rows(n: int) -> tuple[sp.csr_matrix, list[tuple[str, int, int]]]:
    """Rows vec(A_i) of a real basis of functionals on n x n Hermitian matrices.

    For p == q the functional is Z[p, p]; for p < q the pair gives Re Z[p, q]
    and Im Z[p, q].
    """
    rows, cols, vals, tags = [], [], [], []
    r = 0
    for p in range(n):
        rows.append(r)
        cols.append(p * n + p)
        vals.append(1.0)
        tags.append(("diag", p, p))
        r += 1
    for p in range(n):
        for q in range(p + 1, n):
            rows += [r, r]
            cols += [p * n + q, q * n + p]
            vals += [0.5, 0.5]
            tags.append(("re", p, q))
            r += 1
            rows += [r, r]
            cols += [p * n + q, q * n + p]
            vals += [0.5j, -0.5j]
            tags.append(("im", p, q))
            r += 1
    mat = sp.csr_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n * n, n * n))
    return mat, tags


def _pt_column_map(da: int, db: int) -> np.ndarray:
    """perm[col] = vec index of the A-partially-transposed entry."""
    n = da * db
    idx = np.arange(n * n)
    p, q = np.divmod(idx, n)
    a, b = np.divmod(p, db)
    a2, b2 = np.divmod(q, db)
    return (a2 * db + b) * n + (a * db + b2)


def _permute_cols(mat: sp.csr_matrix, perm: np.ndarray) -> sp.csr_matrix:
    coo = mat.tocoo()
    return sp.csr_matrix((coo.data, (coo.row, perm[coo.col])), shape=mat.shape)


def negativity_builder(dims: tuple[int, int]) -> sdp.SdpBuilder:
    """Three-block builder (rho, sigma+, sigma-) with rho^{T_A} = sigma+ - sigma-."""
    da, db = dims
    n = da * db
    builder = sdp.SdpBuilder([n, n, n])
    basis, tags = hermitian_basis_rows(n)
    builder.add_equalities(
        {
            RHO: _permute_cols(basis, _pt_column_map(da, db)),
            SIGMA_PLUS: -basis,
            SIGMA_MINUS: basis,
        },
        np.zeros(n * n),
        [f"pt:{t}[{p},{q}]" for t, p, q in tags],
    )
    builder.set_objective(SIGMA_MINUS, np.eye(n))
    return builder


def tomography_problem(rho: DensityOperator) -> sdp.SdpProblem:
    """Negativity SDP whose rho is pinned entrywise to ``rho``."""
    if len(rho.dims) != 2:
        raise ValueError("expected a bipartite state")
    builder = negativity_builder(rho.dims)
    n = rho.dim
    basis, tags = hermitian_basis_rows(n)
    target = (basis @ rho.matrix.T.ravel()).real
    builder.add_equalities({RHO: basis}, target, [f"tomo:{t}[{p},{q}]" for t, p, q in tags])
    return builder.build()


def _local_op(k: int, da: int, op: np.ndarray) -> sp.csr_matrix:
    proj = sp.csr_matrix(([1.0], ([k], [k])), shape=(da, da))
    return sp.kron(proj, sp.csr_matrix(op), format="csr")


def build_sdp(problem: CertificationProblem, skip_states: Iterable[int] = ()) -> sdp.SdpProblem:
    """Negativity minimisation constrained by the Gram matrix and measured moments.

    Moment constraints of the states in ``skip_states`` are left out (used when
    those states are pinned by a face restriction instead).
    """
    skip = set(skip_states)
    src = problem.source
    gram = src.gram
    ev = np.linalg.eigvalsh(0.5 * (gram + gram.conj().T))
    if ev.min() < -1e-10 or not np.isclose(np.trace(gram).real, 1.0, atol=1e-10):
        raise ValueError("Gram matrix must be PSD with unit trace")
    da, db = src.dims
    builder = negativity_builder((da, db))

    # tr_B rho = G
    basis_a, tags_a = hermitian_basis_rows(da)
    ident_b = sp.identity(db, dtype=complex, format="csr")
    rows = []
    for i in range(da * da):
        a = basis_a[i].toarray().reshape(da, da)
        rows.append(sp.csr_matrix(sp.kron(sp.csr_matrix(a), ident_b).toarray().reshape(1, -1)))
    rhs = (basis_a @ gram.T.ravel()).real
    builder.add_equalities(
        {RHO: sp.vstack(rows, format="csr")}, rhs, [f"gram:{t}[{p},{q}]" for t, p, q in tags_a]
    )

    ops = quadrature_operators(db)
    op_map = {"X": ops.X, "X2": ops.X2, "P": ops.P, "P2": ops.P2, "XP": ops.XP_sym}
    s = problem.sigma_level
    for k, (mom, prior) in enumerate(zip(problem.moments, src.alphabet.priors)):
        if prior == 0 or k in skip:
            continue
        for name, (target, se) in mom.targets().items():
            if name == "XP" and not problem.include_cross:
                continue
            half = s * se
            builder.add_box(
                {RHO: _local_op(k, da, op_map[name])},
                prior * (target - half),
                prior * (target + half),
                label=f"state{k}:{name}",
            )
    return builder.build()


# ---------------------------------------------------------------------------
# symmetry reduction
#
# For a cyclic alphabet alpha_k = e^{i k theta} alpha_0 with uniform priors,
# U = (|k> -> |k+1>) (x) exp(i theta n) maps every admissible state to another
# one whenever Bob's moments rotate along with the symbols. The objective and
# the partial transpose commute with U (the shift is a real permutation), so
# averaging over the group shows the minimum is attained on U-invariant
# matrices, which are block diagonal in the eigenspaces of U.

SYMMETRY_TOL = 1e-12


def _rotate_moments(m: StateMoments, k_size: int) -> StateMoments | None:
    if k_size == 2:
        return StateMoments(-m.mean_x, -m.mean_p, m.var_x, m.var_p, m.se_mean, m.se_var, m.cov_xp)
    if k_size == 4:
        cov = None if m.cov_xp is None else -m.cov_xp
        return StateMoments(-m.mean_p, m.mean_x, m.var_p, m.var_x, m.se_mean, m.se_var, cov)
    return None


def symmetry_sectors(problem: CertificationProblem, tol: float = SYMMETRY_TOL) -> list[np.ndarray] | None:
    """Orthonormal bases of the U-eigenspaces, or None when U is not a symmetry."""
    src = problem.source
    al = src.alphabet
    k_size = al.size
    if k_size not in (2, 4) or problem.include_cross:
        return None
    if max(al.priors) - min(al.priors) > tol:
        return None
    theta = 2 * math.pi / k_size
    a0 = al.amplitudes[0]
    scale = max(1.0, abs(a0))
    for k, a in enumerate(al.amplitudes):
        if abs(a - a0 * np.exp(1j * theta * k)) > tol * scale:
            return None
    for k, m in enumerate(problem.moments):
        rot = _rotate_moments(m, k_size)
        nxt = problem.moments[(k + 1) % k_size]
        a = np.array([rot.mean_x, rot.mean_p, rot.var_x, rot.var_p, rot.se_mean, rot.se_var])
        b = np.array([nxt.mean_x, nxt.mean_p, nxt.var_x, nxt.var_p, nxt.se_mean, nxt.se_var])
        if np.abs(a - b).max() > tol * max(1.0, np.abs(a).max()):
            return None
    shift = np.roll(np.eye(k_size), 1, axis=0)
    if np.abs(shift @ src.gram @ shift.T - src.gram).max() > tol:
        return None

    n_b = src.cutoff
    sectors = []
    for j in range(k_size):
        cols = []
        for m in range(k_size):
            f = np.exp(-2j * math.pi * m * np.arange(k_size) / k_size) / math.sqrt(k_size)
            for n in range(n_b):
                if (m + n) % k_size == j:
                    e = np.zeros(n_b)
                    e[n] = 1.0
                    cols.append(np.kron(f, e))
        if cols:
            sectors.append(np.array(cols).T)
    return sectors


def _sector_rows(mats: np.ndarray, sectors: Sequence[np.ndarray]) -> list[sp.csr_matrix]:
    """Rows vec(V_i^H A V_i) per sector for a stack of full-space coefficients."""
    out = []
    for v in sectors:
        r = np.einsum("pi,kpq,qj->kij", v.conj(), mats, v, optimize=True)
        r = r.reshape(len(mats), -1)
        r[np.abs(r) < 1e-14] = 0.0
        out.append(sp.csr_matrix(r))
    return out


def _independent_rows(blocks: Sequence[sp.csr_matrix], rhs: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Indices of a maximal independent subset of equality rows.

    Raises when a dropped row's right-hand side disagrees with the kept ones
    (the reduced system would then be infeasible).
    """
    a = sp.hstack(blocks, format="csr").toarray()
    a = np.hstack([a.real, a.imag])
    _, r, piv = la.qr(a.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    rank = int(np.sum(d > tol * max(d.max(initial=0.0), 1.0)))
    keep = np.sort(piv[:rank])
    coef, *_ = np.linalg.lstsq(a[keep].T, a.T, rcond=None)
    if np.abs(coef.T @ rhs[keep] - rhs).max() > 1e-9:
        raise ValueError("symmetry-reduced equalities are inconsistent")
    return keep


def build_symmetric_sdp(problem: CertificationProblem, sectors: Sequence[np.ndarray]) -> sdp.SdpProblem:
    """Negativity SDP restricted to U-invariant rho and sigma+-.

    Blocks are rho_j, then sigma+_j, then sigma-_j for each sector j; the full
    matrices are sum_j V_j X_j V_j^H.
    """
    src = problem.source
    da, db = src.dims
    n = da * db
    ns = len(sectors)
    dims = [v.shape[1] for v in sectors]
    builder = sdp.SdpBuilder(dims * 3)

    def rho_rows(mats):
        return {i: r for i, r in enumerate(_sector_rows(mats, sectors))}

    for j, v in enumerate(sectors):
        d = dims[j]
        basis, tags = hermitian_basis_rows(d)
        bmats = basis.toarray().reshape(-1, d, d)
        # coefficient A of functional Re tr(A X): the row holds vec(A); lift to the full space
        full = np.einsum("pi,kij,qj->kpq", v, bmats, v.conj(), optimize=True)
        pt = full.reshape(-1, da, db, da, db).transpose(0, 3, 2, 1, 4).reshape(-1, n, n)
        rows = rho_rows(pt)
        rows[ns + j] = -basis
        rows[2 * ns + j] = basis
        builder.add_equalities(rows, np.zeros(d * d), [f"pt{j}:{t}[{p},{q}]" for t, p, q in tags])
        builder.set_objective(2 * ns + j, np.eye(d))

    basis_a, tags_a = hermitian_basis_rows(da)
    amats = basis_a.toarray().reshape(-1, da, da)
    gmats = np.einsum("kab,cd->kacbd", amats, np.eye(db)).reshape(-1, n, n)
    rhs = (basis_a @ src.gram.T.ravel()).real
    grows = rho_rows(gmats)
    # on invariant matrices several Gram functionals coincide or vanish
    keep = _independent_rows([grows[i] for i in range(ns)], rhs)
    builder.add_equalities(
        {i: r[keep] for i, r in grows.items()}, rhs[keep], [f"gram:{tags_a[i][0]}[{tags_a[i][1]},{tags_a[i][2]}]" for i in keep]
    )

    ops = quadrature_operators(db)
    op_map = {"X": ops.X, "X2": ops.X2, "P": ops.P, "P2": ops.P2}
    s = problem.sigma_level
    # the other symbols' constraints are images of symbol 0's under U
    for k, (mom, prior) in enumerate(zip(problem.moments[:1], src.alphabet.priors)):
        for name, (target, se) in mom.targets().items():
            if name not in op_map:
                continue
            coef = _local_op(k, da, op_map[name]).toarray()[None]
            rows = {i: r for i, r in enumerate(_sector_rows(coef, sectors))}
            half = s * se
            builder.add_box(
                {i: r.toarray().reshape(dims[i], dims[i]) for i, r in rows.items()},
                prior * (target - half),
                prior * (target + half),
                label=f"state{k}:{name}",
            )
    return builder.build()


# ---------------------------------------------------------------------------
# moments


def state_moments_from_density(rho: np.ndarray, cutoff: int, se_mean: float = 0.0, se_var: float = 0.0) -> StateMoments:
    """Exact moments of a single-mode (possibly unnormalised) density matrix."""
    ops = quadrature_operators(cutoff)
    norm = np.trace(rho).real

    def ev(op):
        return float(np.trace(rho @ op).real / norm)

    mx, mp = ev(ops.X), ev(ops.P)
    return StateMoments(
        mean_x=mx,
        mean_p=mp,
        var_x=ev(ops.X2) - mx**2,
        var_p=ev(ops.P2) - mp**2,
        se_mean=se_mean,
        se_var=se_var,
        cov_xp=ev(ops.XP_sym) - mx * mp,
    )


def purification_moments(source: SourceModel) -> list[StateMoments]:
    """Moments of Bob's conditional states in the (truncated) purification."""
    out = []
    for row in source.purification:
        out.append(state_moments_from_density(np.outer(row, row.conj()), source.cutoff))
    return out


def ideal_moments(
    alphabet: Alphabet, transmission: float, params: ChannelParams | None = None
) -> list[StateMoments]:
    """Noise-free expected moments after the channel (all variances equal)."""
    params = params or ChannelParams()
    out = []
    for a in alphabet.amplitudes:
        amp, var = propagate(a, 1.0, transmission, params)
        out.append(StateMoments(2 * amp.real, 2 * amp.imag, var, var, cov_xp=0.0))
    return out


def trusted_detector_moments(moments: Sequence[StateMoments], efficiency: float) -> list[StateMoments]:
    """Undo a trusted detector loss on measured moments (inverse pure-loss map)."""
    if not 0 < efficiency <= 1:
        raise ValueError("efficiency must be in (0, 1]")
    r = math.sqrt(efficiency)
    out = []
    for m in moments:
        out.append(
            StateMoments(
                m.mean_x / r,
                m.mean_p / r,
                1 + (m.var_x - 1) / efficiency,
                1 + (m.var_p - 1) / efficiency,
                m.se_mean / r,
                m.se_var / efficiency,
                None if m.cov_xp is None else m.cov_xp / efficiency,
            )
        )
    return out


def cutoff_for_moments(moments: Iterable[StateMoments], floor: int = 12) -> int:
    amp = max(abs(m.amplitude) for m in moments)
    return default_cutoff(amp, floor=floor)


# ---------------------------------------------------------------------------
# minimum-uncertainty faces
#
# With X = a + a^dag and P = i(a^dag - a),
#   <(a - m)^dag (a - m)> = (Var X + Var P - 2) / 4   for m = <a>.
# When the constraints force this to zero, every admissible conditional state
# is annihilated by (a - m), i.e. it is the coherent state |m>. On a truncated
# space that kernel only exists approximately, which leaves the SDP with a
# feasible set of vanishing width and no interior point. We impose the face
# explicitly instead.

PIN_TOL = 1e-9
GRAM_FACE_TOL = 1e-6


def truncation_floor(amplitude: complex, cutoff: int) -> float:
    """Smallest <(a - m)^dag (a - m)> reachable on the truncated space.

    Zero without truncation; here it is of the order of the Poisson tail of
    |m|^2 beyond the cutoff.
    """
    ops = quadrature_operators(cutoff)
    a = 0.5 * (ops.X + 1j * ops.P)
    m = complex(amplitude)
    q = 0.25 * (ops.X2 + ops.P2) - 0.5 * np.eye(cutoff) - np.conj(m) * a - m * a.conj().T
    q = q + abs(m) ** 2 * np.eye(cutoff)
    return max(float(np.linalg.eigvalsh(0.5 * (q + q.conj().T))[0]), 0.0)


def pinned_states(problem: CertificationProblem, tol: float = PIN_TOL) -> list[bool]:
    """Which conditional states are forced to be coherent by the constraints.

    A state counts as pinned when its constraint set allows no more excess
    variance than the truncation floor itself (with a factor 2 of headroom).
    """
    out = []
    for m, prior in zip(problem.moments, problem.source.alphabet.priors):
        if prior == 0:
            out.append(False)
            continue
        width = problem.sigma_level * max(m.se_mean, m.se_var)
        excess = 0.5 * (0.5 * (m.var_x + m.var_p) - 1.0)
        floor = truncation_floor(m.amplitude, problem.cutoff)
        out.append(width <= tol and abs(excess) <= 2.0 * floor + tol)
    return out


def _pinned_kets(problem: CertificationProblem, pinned: Sequence[bool]) -> dict[int, np.ndarray]:
    from .fock import coherent_amplitudes

    kets = {}
    for k, (m, flag) in enumerate(zip(problem.moments, pinned)):
        if flag:
            v = coherent_amplitudes(m.amplitude, problem.cutoff)
            kets[k] = v / np.linalg.norm(v)
    return kets


def face_basis(problem: CertificationProblem, pinned: Sequence[bool]) -> np.ndarray:
    """Columns spanning the allowed support of rho: |k> (x) |m_k> for pinned k."""
    da, db = problem.source.dims
    kets = _pinned_kets(problem, pinned)
    cols = []
    for k in range(da):
        if k in kets:
            c = np.zeros(da * db, dtype=complex)
            c[k * db : (k + 1) * db] = kets[k]
            cols.append(c[:, None])
        else:
            c = np.zeros((da * db, db), dtype=complex)
            c[k * db : (k + 1) * db] = np.eye(db)
            cols.append(c)
    return np.hstack(cols)


def pinned_state(problem: CertificationProblem) -> DensityOperator | None:
    """The unique admissible state when every symbol is pinned, else None.

    Returns None as well when the Gram matrix cannot be matched by any PSD
    state on the pinned face.
    """
    src = problem.source
    kets = _pinned_kets(problem, pinned_states(problem))
    da, db = src.dims
    if len(kets) != da:
        return None
    y = np.empty((da, da), dtype=complex)
    for k in range(da):
        for l in range(da):
            ov = np.vdot(kets[l], kets[k])
            y[k, l] = src.gram[k, l] / ov
    # y is rank one for an exact coherent alphabet; truncation leaves O(tail)
    # negative eigenvalues, which are clipped. Anything larger is a real mismatch.
    y = 0.5 * (y + y.conj().T)
    ev, vec = np.linalg.eigh(y)
    if ev.min() < -GRAM_FACE_TOL:
        return None
    y = (vec * np.maximum(ev, 0.0)) @ vec.conj().T
    y /= np.trace(y).real
    basis = face_basis(problem, [True] * da)
    rho = basis @ y @ basis.conj().T
    return DensityOperator(src.dims, 0.5 * (rho + rho.conj().T))


# ---------------------------------------------------------------------------
# solving


def _verify(problem: CertificationProblem, prog: sdp.SdpProblem, rho_m: np.ndarray) -> dict:
    """Independent checks on a candidate optimal state, bypassing solver residuals."""
    da, db = problem.source.dims
    rho = DensityOperator((da, db), 0.5 * (rho_m + rho_m.conj().T))
    trb = rho.matrix.reshape(da, db, da, db).trace(axis1=1, axis2=3)
    gram_err = float(np.abs(trb - problem.source.gram).max())
    n = da * db
    _, _, box = prog.evaluate([rho.matrix, np.zeros((n, n)), np.zeros((n, n))])
    viol = np.maximum(prog.box_lower - box, box - prog.box_upper)
    return {
        "trace": float(rho.trace().real),
        "gram_error": gram_err,
        "moment_violation": float(max(viol.max(initial=0.0), 0.0)),
        "min_eig_rho": float(rho.eigvalsh()[0]),
        "negativity_of_rho": negativity_exact(rho, herm_tol=1e-8),
    }


def _binding(prog: sdp.SdpProblem, sol: sdp.SdpSolution, rel: float = 1e-6) -> list[str]:
    scale = max(1.0, float(np.abs(sol.box_duals_lower).max(initial=0.0)), float(np.abs(sol.box_duals_upper).max(initial=0.0)))
    out = []
    for label, lo, hi in zip(prog.box_labels, sol.box_duals_lower, sol.box_duals_upper):
        if lo > rel * scale:
            out.append(f"{label}:lower")
        if hi > rel * scale:
            out.append(f"{label}:upper")
    return out


def solve_certification(
    problem: CertificationProblem,
    log_base: float = 2.0,
    tol: float = sdp.DEFAULT_TOL,
    max_iter: int = sdp.DEFAULT_MAX_ITER,
    use_symmetry: bool = True,
) -> CertificationResult:
    pinned = pinned_states(problem)
    full = build_sdp(problem)
    if all(pinned):
        return _solve_pinned(problem, full, log_base)

    sectors = None
    basis = None
    if any(pinned):
        skip = [k for k, f in enumerate(pinned) if f]
        basis = face_basis(problem, pinned)
        prog = sdp.restrict_block(build_sdp(problem, skip), RHO, basis)
    else:
        sectors = symmetry_sectors(problem) if use_symmetry else None
        prog = full if sectors is None else build_symmetric_sdp(problem, sectors)
    sol = sdp.solve(prog, tol=tol, max_iter=max_iter)
    if not sol.optimal:
        log.warning("certification not optimal: %s (%s)", sol.status, sol.message)
        return CertificationResult(
            negativity_min=0.0,
            log_negativity=0.0,
            status=sol.status,
            duality_gap=sol.duality_gap,
            primal_value=sol.objective_value,
            dual_value=sol.dual_value,
            log_base=log_base,
            iterations=sol.iterations,
        )
    if sectors is not None:
        rho = sum(v @ y @ v.conj().T for v, y in zip(sectors, sol.block_values[: len(sectors)]))
    else:
        rho = sol.block_values[RHO]
    if basis is not None:
        rho = basis @ rho @ basis.conj().T
    # the dual value is the certified lower bound; clip tiny negative roundoff
    n_min = max(0.0, sol.dual_value)
    return CertificationResult(
        negativity_min=n_min,
        log_negativity=log_negativity(n_min, log_base),
        status=sol.status,
        duality_gap=sol.duality_gap,
        primal_value=sol.objective_value,
        dual_value=sol.dual_value,
        log_base=log_base,
        binding_constraints=_binding(prog, sol),
        checks=_verify(problem, full, rho),
        iterations=sol.iterations,
    )


def _solve_pinned(problem: CertificationProblem, full: sdp.SdpProblem, log_base: float) -> CertificationResult:
    """Every symbol pinned: the feasible set is a single state."""
    rho = pinned_state(problem)
    if rho is None:
        return CertificationResult(0.0, 0.0, sdp.INFEASIBLE, math.nan, log_base=log_base)
    n = negativity_exact(rho, herm_tol=1e-10)
    return CertificationResult(
        negativity_min=n,
        log_negativity=log_negativity(n, log_base),
        status=sdp.OPTIMAL,
        duality_gap=0.0,
        primal_value=n,
        dual_value=n,
        log_base=log_base,
        binding_constraints=["all states pinned to coherent states"],
        checks=_verify(problem, full, rho.matrix),
    )


def certify_bin(
    moments: Sequence[StateMoments],
    source: SourceModel,
    sigma_level: float = 0.0,
    include_cross: bool = False,
    log_base: float = 2.0,
    tol: float = sdp.DEFAULT_TOL,
) -> CertificationResult:
    problem = CertificationProblem(source, tuple(moments), sigma_level, include_cross)
    return solve_certification(problem, log_base=log_base, tol=tol)


def _certify_job(args):
    key, moments, source, sigma, include_cross, log_base, tol = args
    return key, certify_bin(moments, source, sigma, include_cross, log_base, tol)


def certify_all(
    binned: Mapping[object, Sequence[StateMoments]],
    source: SourceModel,
    sigma_levels: Sequence[float] = (0, 1, 2, 3),
    include_cross: bool = False,
    log_base: float = 2.0,
    tol: float = sdp.DEFAULT_TOL,
    workers: int = 1,
) -> dict:
    """Certify every (bin, sigma) pair; returns {(bin_key, sigma): result}."""
    jobs = [
        ((key, float(s)), tuple(moms), source, float(s), include_cross, log_base, tol)
        for key, moms in binned.items()
        for s in sigma_levels
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = dict(pool.map(_certify_job, jobs))
    else:
        done = dict(_certify_job(j) for j in jobs)
    return {k: done[k] for k in sorted(done, key=lambda t: (t[0], t[1]))}


# ---------------------------------------------------------------------------
# theoretical references and sweeps


def theoretical_point(
    family: str,
    amplitude: float,
    transmission: float,
    epsilon: float,
    noise_at: str = "receiver",
    cutoff: int | None = None,
    tol: float = sdp.DEFAULT_TOL,
    cutoff_margin: int = 0,
) -> CertificationResult:
    """Certified negativity for ideal moments of one alphabet at one amplitude.

    Without an explicit ``cutoff`` the default rule is used, plus ``cutoff_margin``.
    """
    alphabet = build_alphabet(family, amplitude)
    params = ChannelParams(efficiency=1.0, excess_noise=epsilon, noise_at=noise_at)
    moments = ideal_moments(alphabet, transmission, params)
    if cutoff is None:
        cutoff = default_cutoff(math.sqrt(transmission) * amplitude) + cutoff_margin
    return certify_bin(moments, source_model(alphabet, cutoff), 0.0, tol=tol)


def theoretical_curve(
    family: str,
    transmission: float,
    epsilon: float,
    amplitude_grid: Sequence[float],
    noise_at: str = "receiver",
    cutoff: int | None = None,
    tol: float = sdp.DEFAULT_TOL,
    cutoff_margin: int = 0,
) -> np.ndarray:
    """Negativity versus amplitude with every variance set to 1 + epsilon."""
    grid = list(amplitude_grid)
    if not grid:
        raise ValueError("amplitude grid is empty")
    return np.array(
        [
            theoretical_point(family, a, transmission, epsilon, noise_at, cutoff, tol, cutoff_margin).negativity_min
            for a in grid
        ]
    )


@dataclass
class ComparisonRow:
    family: str
    epsilon: float
    best_amplitude: float
    max_negativity: float


def compare_alphabets(
    transmission: float,
    epsilon_grid: Sequence[float],
    amplitude_grid: Sequence[float],
    families: Sequence[str] = ("two", "four"),
    noise_at: str = "receiver",
    zero_tol: float = 1e-6,
    cutoff_margin: int = 0,
) -> tuple[list[ComparisonRow], dict[str, float]]:
    """Max-over-amplitude negativity per epsilon and the epsilon where it vanishes.

    The threshold is the smallest grid epsilon whose maximum is below
    ``zero_tol`` (``inf`` if none is).
    """
    rows: list[ComparisonRow] = []
    thresholds: dict[str, float] = {}
    for fam in families:
        thresholds[fam] = math.inf
        for eps in sorted(epsilon_grid):
            curve = theoretical_curve(fam, transmission, eps, amplitude_grid, noise_at, cutoff_margin=cutoff_margin)
            i = int(np.argmax(curve))
            rows.append(ComparisonRow(fam, float(eps), float(amplitude_grid[i]), float(curve[i])))
            if curve[i] < zero_tol and math.isinf(thresholds[fam]):
                thresholds[fam] = float(eps)
    return rows, thresholds
