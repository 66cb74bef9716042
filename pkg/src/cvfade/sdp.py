"""Small dense semidefinite programs over Hermitian blocks.

Problems are stated as

    minimize    sum_b <C_b, X_b>
    subject to  sum_b <A_ib, X_b> = b_i                 (equalities)
                lo_j <= sum_b <B_jb, X_b> <= hi_j        (box constraints)
                X_b Hermitian PSD

with <A, X> = Re tr(A X). Box constraints become equalities with
nonnegative slacks. The solver is a primal-dual path-following method on the
homogeneous self-dual embedding, with Nesterov-Todd scaling and a Mehrotra
predictor-corrector step. Infeasible problems are reported with a Farkas-type
certificate taken from the embedding.

Constraint coefficients are held as sparse rows of vec(A) (row-major), so the
Schur complement for elementary-matrix constraints costs O(nnz * n^2) to form.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from numba import njit

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration_limit"
NUMERICAL_FAILURE = "numerical_failure"

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 200
DEFAULT_SIZE_CAP = 400
STATIC_REG = 1e-12


def _as_row(coef, n: int) -> sp.csr_matrix:
    """One coefficient matrix as a 1 x n^2 sparse row of vec(A)."""
    if sp.issparse(coef):
        c = sp.coo_matrix(coef)
        if c.shape != (n, n):
            raise ValueError(f"coefficient shape {c.shape} != ({n}, {n})")
        return sp.csr_matrix((c.data.astype(complex), (np.zeros_like(c.row), c.row * n + c.col)), shape=(1, n * n))
    a = np.asarray(coef, dtype=complex)
    if a.shape != (n, n):
        raise ValueError(f"coefficient shape {a.shape} != ({n}, {n})")
    return sp.csr_matrix(a.reshape(1, n * n))


@dataclass
class SdpProblem:
    """Constraint data in stacked sparse form.

    ``eq_rows[b]`` is an (m_eq x n_b^2) sparse matrix whose i-th row is vec of
    the i-th equality's coefficient on block b; ``box_rows`` likewise. Use
    :class:`SdpBuilder` rather than filling these by hand.
    """

    blocks: tuple
    objective: list
    eq_rows: list
    eq_rhs: np.ndarray
    box_rows: list
    box_lower: np.ndarray
    box_upper: np.ndarray
    eq_labels: list = field(default_factory=list)
    box_labels: list = field(default_factory=list)

    def __post_init__(self):
        self.blocks = tuple(int(n) for n in self.blocks)
        nb = len(self.blocks)
        if not (len(self.objective) == len(self.eq_rows) == len(self.box_rows) == nb):
            raise ValueError("per-block data does not match the number of blocks")
        self.eq_rhs = np.asarray(self.eq_rhs, dtype=float)
        self.box_lower = np.asarray(self.box_lower, dtype=float)
        self.box_upper = np.asarray(self.box_upper, dtype=float)
        for n, c, e, bx in zip(self.blocks, self.objective, self.eq_rows, self.box_rows):
            if np.shape(c) != (n, n):
                raise ValueError("objective block has wrong shape")
            if e.shape != (self.n_eq, n * n) or bx.shape != (self.n_box, n * n):
                raise ValueError("constraint rows have wrong shape")
        if np.any(self.box_lower > self.box_upper):
            bad = int(np.argmax(self.box_lower > self.box_upper))
            raise ValueError(f"box constraint {bad} has lower > upper")
        if not self.eq_labels:
            self.eq_labels = [f"eq{i}" for i in range(self.n_eq)]
        if not self.box_labels:
            self.box_labels = [f"box{i}" for i in range(self.n_box)]

    @property
    def n_eq(self) -> int:
        return len(self.eq_rhs)

    @property
    def n_box(self) -> int:
        return len(self.box_lower)

    def evaluate(self, blocks: Sequence[np.ndarray]) -> tuple[float, np.ndarray, np.ndarray]:
        """Objective, equality values and box values at the given block matrices."""
        obj = sum(float(np.vdot(c, x).real) for c, x in zip(self.objective, blocks))
        eq = np.zeros(self.n_eq)
        box = np.zeros(self.n_box)
        for b, x in enumerate(blocks):
            v = np.asarray(x).T.ravel()
            eq += (self.eq_rows[b] @ v).real
            box += (self.box_rows[b] @ v).real
        return obj, eq, box


class SdpBuilder:
    """Incremental construction of an :class:`SdpProblem`."""

    def __init__(self, blocks: Sequence[int]):
        self.blocks = tuple(int(n) for n in blocks)
        self.objective = [np.zeros((n, n), dtype=complex) for n in self.blocks]
        self._eq: list[list[sp.csr_matrix]] = [[] for _ in self.blocks]
        self._box: list[list[sp.csr_matrix]] = [[] for _ in self.blocks]
        self._eq_rhs: list[np.ndarray] = []
        self._box_lo: list[np.ndarray] = []
        self._box_hi: list[np.ndarray] = []
        self.eq_labels: list[str] = []
        self.box_labels: list[str] = []

    def set_objective(self, block: int, coef) -> None:
        n = self.blocks[block]
        c = coef.toarray() if sp.issparse(coef) else np.asarray(coef)
        if c.shape != (n, n):
            raise ValueError("objective block has wrong shape")
        self.objective[block] = c.astype(complex)

    def _rows(self, coeffs: Mapping[int, object]) -> list[sp.csr_matrix]:
        out = []
        for b, n in enumerate(self.blocks):
            if b in coeffs and coeffs[b] is not None:
                out.append(_as_row(coeffs[b], n))
            else:
                out.append(sp.csr_matrix((1, n * n), dtype=complex))
        unknown = set(coeffs) - set(range(len(self.blocks)))
        if unknown:
            raise IndexError(f"unknown blocks {sorted(unknown)}")
        return out

    def add_equality(self, coeffs: Mapping[int, object], rhs: float, label: str | None = None) -> None:
        for b, r in enumerate(self._rows(coeffs)):
            self._eq[b].append(r)
        self._eq_rhs.append(np.array([rhs], dtype=float))
        self.eq_labels.append(label or f"eq{len(self.eq_labels)}")

    def add_equalities(self, rows: Mapping[int, sp.spmatrix], rhs, labels: Sequence[str] | None = None) -> None:
        """Append a batch of equalities given as stacked vec-rows per block."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        m = len(rhs)
        for b, n in enumerate(self.blocks):
            r = rows.get(b)
            r = sp.csr_matrix((m, n * n), dtype=complex) if r is None else sp.csr_matrix(r, dtype=complex)
            if r.shape != (m, n * n):
                raise ValueError(f"batch rows for block {b} have shape {r.shape}")
            self._eq[b].append(r)
        self._eq_rhs.append(rhs)
        start = len(self.eq_labels)
        self.eq_labels.extend(labels if labels is not None else [f"eq{start + i}" for i in range(m)])

    def add_box(self, coeffs: Mapping[int, object], lower: float, upper: float, label: str | None = None) -> None:
        for b, r in enumerate(self._rows(coeffs)):
            self._box[b].append(r)
        self._box_lo.append(np.array([lower], dtype=float))
        self._box_hi.append(np.array([upper], dtype=float))
        self.box_labels.append(label or f"box{len(self.box_labels)}")

    def build(self) -> SdpProblem:
        def stack(parts, n):
            if not parts:
                return sp.csr_matrix((0, n * n), dtype=complex)
            return sp.vstack(parts, format="csr")

        eq_rhs = np.concatenate(self._eq_rhs) if self._eq_rhs else np.zeros(0)
        lo = np.concatenate(self._box_lo) if self._box_lo else np.zeros(0)
        hi = np.concatenate(self._box_hi) if self._box_hi else np.zeros(0)
        return SdpProblem(
            blocks=self.blocks,
            objective=list(self.objective),
            eq_rows=[stack(p, n) for p, n in zip(self._eq, self.blocks)],
            eq_rhs=eq_rhs,
            box_rows=[stack(p, n) for p, n in zip(self._box, self.blocks)],
            box_lower=lo,
            box_upper=hi,
            eq_labels=list(self.eq_labels),
            box_labels=list(self.box_labels),
        )


def restrict_block(problem: SdpProblem, block: int, basis: np.ndarray) -> SdpProblem:
    """Substitute X_b = V Y V^H for block ``block``, with V = ``basis`` (n_b x r).

    This restricts the block to a face of the PSD cone. Coefficients transform
    as A -> V^H A V, so a solution Y of the restricted problem maps back to a
    feasible X_b of the original one.
    """
    v = np.asarray(basis, dtype=complex)
    n = problem.blocks[block]
    if v.ndim != 2 or v.shape[0] != n:
        raise ValueError(f"basis must have {n} rows")
    r = v.shape[1]
    # vec_row(V^H A V) = vec_row(A) @ kron(conj(V), V)
    t = np.kron(v.conj(), v)

    def tr(rows):
        return sp.csr_matrix(rows @ t) if rows.shape[0] else sp.csr_matrix((0, r * r), dtype=complex)

    blocks = list(problem.blocks)
    blocks[block] = r
    objective = list(problem.objective)
    objective[block] = v.conj().T @ objective[block] @ v
    eq_rows = list(problem.eq_rows)
    eq_rows[block] = tr(eq_rows[block])
    box_rows = list(problem.box_rows)
    box_rows[block] = tr(box_rows[block])
    return SdpProblem(
        blocks=tuple(blocks),
        objective=objective,
        eq_rows=eq_rows,
        eq_rhs=problem.eq_rhs.copy(),
        box_rows=box_rows,
        box_lower=problem.box_lower.copy(),
        box_upper=problem.box_upper.copy(),
        eq_labels=list(problem.eq_labels),
        box_labels=list(problem.box_labels),
    )


@dataclass
class SdpSolution:
    status: str
    block_values: list
    objective_value: float
    dual_value: float
    duality_gap: float
    primal_residual: float
    dual_residual: float
    min_eigenvalue: float
    iterations: int
    eq_duals: np.ndarray
    box_values: np.ndarray
    box_duals_lower: np.ndarray
    box_duals_upper: np.ndarray
    certificate_norm: float = math.nan
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


# ---------------------------------------------------------------------------
# standard form


class _StandardForm:
    """min <c, x> s.t. A x = b, x in (PSD blocks) x (R_+^l), rows unit-normalised."""

    def __init__(self, prob: SdpProblem):
        self.prob = prob
        self.dims = prob.blocks
        lo, hi = prob.box_lower, prob.box_upper
        tight = np.isclose(lo, hi, rtol=0.0, atol=0.0)
        has_lo = np.isfinite(lo) & ~tight
        has_hi = np.isfinite(hi) & ~tight
        self.box_tight = np.flatnonzero(tight)
        self.box_lo_idx = np.flatnonzero(has_lo)
        self.box_hi_idx = np.flatnonzero(has_hi)

        rows_per_block = []
        for b, n in enumerate(self.dims):
            parts = [prob.eq_rows[b], prob.box_rows[b][self.box_tight]]
            parts += [prob.box_rows[b][self.box_lo_idx], prob.box_rows[b][self.box_hi_idx]]
            rows_per_block.append(sp.vstack(parts, format="csr"))
        n_lo, n_hi = len(self.box_lo_idx), len(self.box_hi_idx)
        m0 = prob.n_eq + len(self.box_tight)
        m = m0 + n_lo + n_hi
        l = n_lo + n_hi
        # slack columns: <a,x> - s = lo, <a,x> + s = hi
        rows = np.arange(m0, m)
        vals = np.concatenate([-np.ones(n_lo), np.ones(n_hi)])
        lin = sp.csr_matrix((vals, (rows, np.arange(l))), shape=(m, l))
        b = np.concatenate([prob.eq_rhs, lo[self.box_tight], lo[self.box_lo_idx], hi[self.box_hi_idx]])

        norms2 = np.asarray(lin.multiply(lin).sum(axis=1)).ravel()
        for r in rows_per_block:
            norms2 += np.asarray(abs(r).power(2).sum(axis=1)).ravel()
        if np.any(norms2 == 0):
            raise ValueError(f"constraint row {int(np.argmin(norms2))} is identically zero")
        scale = 1.0 / np.sqrt(norms2)
        d = sp.diags(scale)
        self.row_scale = scale
        self.S = [sp.csr_matrix(d @ r) for r in rows_per_block]
        self.ST = [s.T.tocsr() for s in self.S]
        self.splits = [_split_rows(_to_coords(s, n), n) for s, n in zip(self.S, self.dims)]
        self.L = sp.csr_matrix(d @ lin)
        self.LT = self.L.T.tocsr()
        self.b = b * scale
        self.m = m
        self.l = l
        self.m0 = m0
        self.c = [np.asarray(c, dtype=complex) for c in prob.objective]
        self.nu = sum(self.dims) + l
        self._check_hermitian()

    def _check_hermitian(self) -> None:
        for s, n in zip(self.S, self.dims):
            idx = np.arange(n * n)
            perm = (idx % n) * n + idx // n
            diff = s - s[:, perm].conj()
            if diff.nnz and abs(diff).max() > 1e-12:
                raise ValueError("constraint coefficient matrices must be Hermitian")
        for c in self.c:
            if np.abs(c - c.conj().T).max() > 1e-12 * max(1.0, np.abs(c).max()):
                raise ValueError("objective coefficient matrices must be Hermitian")

    # linear maps --------------------------------------------------------
    def A(self, x) -> np.ndarray:
        blocks, xl = x
        out = self.L @ xl if self.l else np.zeros(self.m)
        for s, xb in zip(self.S, blocks):
            out = out + (s @ xb.T.ravel()).real
        return out

    def At(self, y):
        blocks = []
        for st, n in zip(self.ST, self.dims):
            yb = (st @ y).reshape(n, n)
            blocks.append(0.5 * (yb + yb.conj().T))
        return blocks, (self.LT @ y if self.l else np.zeros(0))

    def cvec(self):
        return self.c, np.zeros(self.l)


# cone vector helpers: a point is (list of Hermitian blocks, ndarray)


def _inner(u, v) -> float:
    return sum(float(np.vdot(a, b).real) for a, b in zip(u[0], v[0])) + float(u[1] @ v[1])


def _axpy(a, x, y):
    return [a * xb + yb for xb, yb in zip(x[0], y[0])], a * x[1] + y[1]


def _scale(a, x):
    return [a * xb for xb in x[0]], a * x[1]


def _norm(x) -> float:
    return math.sqrt(_inner(x, x))


def _identity(fm: _StandardForm):
    return [np.eye(n, dtype=complex) for n in fm.dims], np.ones(fm.l)


def _herm(a):
    return 0.5 * (a + a.conj().T)


@dataclass
class _Scaling:
    G: list
    Ginv: list
    lam: list
    W: list
    gl: np.ndarray
    laml: np.ndarray

    def apply_w(self, v):
        """W v W (blocks), w^2 v (orthant)."""
        return [_herm(w @ vb @ w) for w, vb in zip(self.W, v[0])], self.gl**2 * v[1]

    def unscale_z(self, z):
        """Map a scaled-space direction Z to R_x = G Z G^H."""
        return [_herm(g @ zb @ g.conj().T) for g, zb in zip(self.G, z[0])], self.gl * z[1]

    def scale_x(self, dx):
        return [gi @ d @ gi.conj().T for gi, d in zip(self.Ginv, dx[0])], dx[1] / self.gl

    def scale_s(self, ds):
        return [g.conj().T @ d @ g for g, d in zip(self.G, ds[0])], ds[1] * self.gl


def _factor(a: np.ndarray):
    ev, q = np.linalg.eigh(_herm(a))
    floor = max(ev.max(), 1e-300) * 1e-15
    ev = np.maximum(ev, floor)
    r = np.sqrt(ev)
    return q * r, (q / r).conj().T


def _nt_scaling(x, s) -> _Scaling:
    G, Ginv, lam, W = [], [], [], []
    for xb, sb in zip(x[0], s[0]):
        lx, _ = _factor(xb)
        ls, _ = _factor(sb)
        u, lm, vh = np.linalg.svd(ls.conj().T @ lx)
        isq = 1.0 / np.sqrt(lm)
        g = (lx @ vh.conj().T) * isq
        ginv = (u.conj().T * isq[:, None]) @ ls.conj().T
        G.append(g)
        Ginv.append(ginv)
        lam.append(lm)
        W.append(_herm(g @ g.conj().T))
    gl = np.sqrt(x[1] / s[1])
    laml = np.sqrt(x[1] * s[1])
    return _Scaling(G, Ginv, lam, W, gl, laml)


@lru_cache(maxsize=32)
def _coord_index(n: int):
    """Index pairs of the real coordinates of an n x n Hermitian matrix.

    Coordinates are X[p, p] (p < n), then Re X[p, q] and Im X[p, q] for p < q.
    """
    iu, ju = np.triu_indices(n, 1)
    diag = np.arange(n)
    p = np.concatenate([diag, iu])
    q = np.concatenate([diag, ju])
    return p, q, iu, ju


def _to_coords(rows: sp.csr_matrix, n: int) -> sp.csr_matrix:
    """Real coordinate rows R with <A, X> = R . h(X) for Hermitian A, X."""
    _, _, iu, ju = _coord_index(n)
    d = np.arange(n) * (n + 1)
    off = iu * n + ju
    rows = rows.tocsc()
    parts = [rows[:, d].real, 2.0 * rows[:, off].real, 2.0 * rows[:, off].imag]
    out = sp.hstack(parts, format="csr")
    out.data[np.abs(out.data) < 1e-15 * max(1.0, np.abs(out.data).max(initial=0.0))] = 0.0
    out.eliminate_zeros()
    return out


@njit(cache=True)
def _single_schur(M, w, rows, p, q, kind, v):  # pragma: no cover - compiled
    """Upper triangle of sum <A_a, W A_b W> for single-coordinate rows.

    Row a is v[a] times coordinate (p[a], q[a], kind[a]) with kind 0 = diagonal,
    1 = Re, 2 = Im.
    """
    m = rows.shape[0]
    for a in range(m):
        pa, qa, ka, va, ia = p[a], q[a], kind[a], v[a], rows[a]
        for b in range(a, m):
            pb, qb, kb = p[b], q[b], kind[b]
            t1 = w[pa, pb] * w[qb, qa]
            if kb == 0:
                val = t1
            else:
                t2 = w[pa, qb] * w[pb, qa]
                if kb == 1:
                    val = 0.5 * (t1 + t2)
                else:
                    val = 0.5j * (t1 - t2)
            x = val.imag if ka == 2 else val.real
            M[ia, rows[b]] += va * v[b] * x


@dataclass
class _RowSplit:
    """Constraint rows of one block in Hermitian coordinates.

    Rows touching a single coordinate are kept as (row, p, q, kind, value);
    the rest are held as sparse coordinate rows and explicit matrices.
    """

    single_rows: np.ndarray
    single_p: np.ndarray
    single_q: np.ndarray
    single_kind: np.ndarray
    single_cols: np.ndarray
    single_vals: np.ndarray
    other_rows: np.ndarray
    other: sp.csr_matrix
    other_mats: np.ndarray


def _coords_to_matrix(c: np.ndarray, n: int) -> np.ndarray:
    _, _, iu, ju = _coord_index(n)
    npair = len(iu)
    a = np.diag(c[:n]).astype(complex)
    z = 0.5 * (c[n : n + npair] + 1j * c[n + npair :])
    a[iu, ju] = z
    a[ju, iu] = z.conj()
    return a


def _split_rows(r: sp.csr_matrix, n: int) -> _RowSplit:
    p, q, iu, ju = _coord_index(n)
    npair = len(iu)
    cp = np.concatenate([p, iu])
    cq = np.concatenate([q, ju])
    ck = np.concatenate([np.zeros(n, np.int64), np.ones(npair, np.int64), np.full(npair, 2, np.int64)])
    nnz = np.diff(r.indptr)
    single = np.flatnonzero(nnz == 1)
    other = np.flatnonzero(nnz > 1)
    cols = r.indices[r.indptr[single]]
    vals = r.data[r.indptr[single]]
    oth = r[other]
    mats = np.array([_coords_to_matrix(oth[i].toarray().ravel(), n) for i in range(len(other))])
    return _RowSplit(
        single.astype(np.int64), cp[cols], cq[cols], ck[cols], cols, vals.astype(float),
        other, oth, mats.reshape(len(other), n, n),
    )


def _hcoords(x: np.ndarray) -> np.ndarray:
    """h(X) for a stack of Hermitian matrices (last two axes)."""
    n = x.shape[-1]
    _, _, iu, ju = _coord_index(n)
    d = np.arange(n)
    off = x[..., iu, ju]
    return np.concatenate([x[..., d, d].real, off.real, off.imag], axis=-1)


def _schur(fm: _StandardForm, sc: _Scaling) -> np.ndarray:
    """M_ij = sum_b <A_ib, W_b A_jb W_b> (+ orthant part)."""
    m = fm.m
    upper = np.zeros((m, m))
    for split, w in zip(fm.splits, sc.W):
        if split.single_rows.size:
            _single_schur(upper, w, split.single_rows, split.single_p, split.single_q, split.single_kind, split.single_vals)
    M = np.add(upper, upper.T, out=np.empty_like(upper))
    M[np.diag_indices(m)] -= np.diag(upper)
    del upper
    for split, w in zip(fm.splits, sc.W):
        o = split.other_rows
        if o.size:
            wa = _hcoords(w @ split.other_mats @ w)  # (k, n^2): h(W A_o W)
            oo = np.asarray(split.other @ wa.T)
            M[np.ix_(o, o)] += 0.5 * (oo + oo.T)
            if split.single_rows.size:
                cross = wa[:, split.single_cols] * split.single_vals[None, :]
                M[np.ix_(o, split.single_rows)] += cross
                M[np.ix_(split.single_rows, o)] += cross.T
    if fm.l:
        M += (fm.L @ sp.diags(sc.gl**2) @ fm.LT).toarray()
    return M


def _jordan_solve(lam: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Solve lam o Z = R for Z, with lam diagonal and o the symmetrised product."""
    return r * (2.0 / (lam[:, None] + lam[None, :]))


def _max_step(lam, d) -> float:
    """Largest a with lam + a d in the cone (lam diagonal, scaled coordinates)."""
    isq = 1.0 / np.sqrt(lam)
    e = np.linalg.eigvalsh(_herm(d * isq[:, None] * isq[None, :]))
    return math.inf if e[0] >= 0 else -1.0 / e[0]


def _max_step_vec(v, d) -> float:
    neg = d < 0
    return math.inf if not neg.any() else float(np.min(-v[neg] / d[neg]))


def solve(
    problem: SdpProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    size_cap: int = DEFAULT_SIZE_CAP,
    step_factor: float = 0.98,
    verbose: bool = False,
) -> SdpSolution:
    """Solve ``problem`` and return primal/dual values with certificates."""
    total = sum(problem.blocks)
    if total > size_cap:
        raise ValueError(f"total block dimension {total} exceeds cap {size_cap}")
    fm = _StandardForm(problem)
    c = fm.cvec()
    b = fm.b
    nb, nc = 1.0 + np.linalg.norm(b), 1.0 + _norm(c)

    x = _identity(fm)
    s = _identity(fm)
    y = np.zeros(fm.m)
    tau = kappa = 1.0
    status, message, cert = ITERATION_LIMIT, "", math.nan
    it = 0
    stalls = 0

    def finish(status, message="", cert=math.nan):
        return _solution(fm, problem, x, s, y, tau, status, it, message, cert)

    for it in range(max_iter + 1):
        Ax = fm.A(x)
        Aty = fm.At(y)
        rp = Ax - b * tau
        rd = _axpy(-tau, c, _axpy(1.0, s, Aty))
        cx = _inner(c, x)
        by = float(b @ y)
        rg = by - cx - kappa
        mu = (_inner(x, s) + tau * kappa) / (fm.nu + 1)

        pres = np.linalg.norm(rp) / tau / nb
        dres = _norm(rd) / tau / nc
        pobj, dobj = cx / tau, by / tau
        gap = pobj - dobj
        if verbose:
            log.info("it %3d pobj % .9e dobj % .9e pres %.1e dres %.1e gap % .1e tau %.1e kappa %.1e",
                     it, pobj, dobj, pres, dres, gap, tau, kappa)
        if pres <= tol and dres <= tol and abs(gap) <= tol * max(1.0, abs(pobj)):
            return finish(OPTIMAL)
        # Farkas certificates from the embedding
        if by > 0:
            r = _norm(_axpy(1.0, s, Aty)) / by
            if r <= tol and tau < kappa:
                return finish(INFEASIBLE, "primal infeasible", r)
        if cx < 0:
            r = np.linalg.norm(Ax) / -cx
            if r <= tol and tau < kappa:
                return finish(INFEASIBLE, "dual infeasible (primal unbounded)", r)
        if it == max_iter:
            break

        sc = _nt_scaling(x, s)
        M = _schur(fm, sc)
        chol = None
        reg = STATIC_REG
        diag = np.diag_indices(fm.m)
        for _ in range(6):
            work = M.copy()
            work[diag] += reg
            try:
                chol = la.cho_factor(work, lower=True, overwrite_a=True, check_finite=False)
                break
            except la.LinAlgError:
                reg *= 1e3
        if chol is None:
            return finish(NUMERICAL_FAILURE, "Schur complement not positive definite")

        def msolve(r):
            # one step of iterative refinement against the unregularised M
            z = la.cho_solve(chol, r, check_finite=False)
            return z + la.cho_solve(chol, r - M @ z, check_finite=False)

        wc = sc.apply_w(c)
        rhs2 = fm.A(wc) + b
        dy2 = msolve(rhs2)
        dx2 = sc.apply_w(_axpy(-1.0, c, fm.At(dy2)))
        denom_base = float(b @ dy2) - _inner(c, dx2)

        def newton(eta, z, rtk):
            rx = sc.unscale_z(z)
            wrd = sc.apply_w(rd)
            rhs1 = -eta * rp - fm.A(rx) - eta * fm.A(wrd)
            dy1 = msolve(rhs1)
            dx1 = _axpy(1.0, rx, sc.apply_w(_axpy(eta, rd, fm.At(dy1))))
            dtau = (-eta * rg - float(b @ dy1) + _inner(c, dx1) + rtk / tau) / (denom_base + kappa / tau)
            dy = dy1 + dtau * dy2
            dx = _axpy(dtau, dx2, dx1)
            ds = _axpy(dtau, c, _axpy(-1.0, fm.At(dy), _scale(-eta, rd)))
            dkappa = (rtk - kappa * dtau) / tau
            return dx, dy, ds, dtau, dkappa

        def step_length(dx, ds, dtau, dkappa):
            sx, ss = sc.scale_x(dx), sc.scale_s(ds)
            a = math.inf
            for lam, ddx, dds in zip(sc.lam, sx[0], ss[0]):
                a = min(a, _max_step(lam, ddx), _max_step(lam, dds))
            if fm.l:
                a = min(a, _max_step_vec(sc.laml, sx[1]), _max_step_vec(sc.laml, ss[1]))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a, sx, ss

        # predictor
        z_aff = ([-np.diag(lam).astype(complex) for lam in sc.lam], -sc.laml)
        dxa, dya, dsa, dtaua, dkappaa = newton(1.0, z_aff, -tau * kappa)
        a_aff, sxa, ssa = step_length(dxa, dsa, dtaua, dkappaa)
        a_aff = min(1.0, a_aff)
        sigma = (1.0 - a_aff) ** 3

        # corrector
        gm = sigma * mu
        zc_blocks = []
        for lam, ddx, dds in zip(sc.lam, sxa[0], ssa[0]):
            r = gm * np.eye(len(lam)) - np.diag(lam**2) - 0.5 * (ddx @ dds + dds @ ddx)
            zc_blocks.append(_jordan_solve(lam, r))
        zl = (gm - sc.laml**2 - sxa[1] * ssa[1]) / sc.laml if fm.l else np.zeros(0)
        rtk = gm - tau * kappa - dtaua * dkappaa
        dx, dy, ds, dtau, dkappa = newton(1.0 - sigma, (zc_blocks, zl), rtk)
        a_max, _, _ = step_length(dx, ds, dtau, dkappa)
        alpha = min(1.0, step_factor * a_max)
        if alpha < 1e-10:
            stalls += 1
            if stalls >= 3:
                return finish(NUMERICAL_FAILURE, "step length collapsed")
        else:
            stalls = 0

        x = _axpy(alpha, dx, x)
        s = _axpy(alpha, ds, s)
        x = ([_herm(a) for a in x[0]], x[1])
        s = ([_herm(a) for a in s[0]], s[1])
        y = y + alpha * dy
        tau += alpha * dtau
        kappa += alpha * dkappa

    return finish(ITERATION_LIMIT, f"no convergence in {max_iter} iterations")


def _solution(fm, problem, x, s, y, tau, status, it, message, cert) -> SdpSolution:
    blocks = [_herm(xb / tau) for xb in x[0]]
    obj, eqv, boxv = problem.evaluate(blocks)
    yy = y / tau
    dual = float(fm.b @ yy)
    rp = fm.A(_scale(1.0 / tau, x)) - fm.b
    rd = _axpy(-1.0, fm.cvec(), _axpy(1.0, _scale(1.0 / tau, s), fm.At(yy)))
    mins = [float(np.linalg.eigvalsh(bk)[0]) for bk in blocks]
    if fm.l:
        mins.append(float(np.min(x[1] / tau)))
    n_lo = len(fm.box_lo_idx)
    sl = s[1] / tau
    duals_lo = np.zeros(problem.n_box)
    duals_hi = np.zeros(problem.n_box)
    duals_lo[fm.box_lo_idx] = sl[:n_lo]
    duals_hi[fm.box_hi_idx] = sl[n_lo:]
    # multipliers for tight boxes carry their sign: positive pushes up from the lower side
    ytight = yy[problem.n_eq : fm.m0] * fm.row_scale[problem.n_eq : fm.m0]
    duals_lo[fm.box_tight] = np.maximum(ytight, 0.0)
    duals_hi[fm.box_tight] = np.maximum(-ytight, 0.0)
    return SdpSolution(
        status=status,
        block_values=blocks,
        objective_value=obj,
        dual_value=dual,
        duality_gap=obj - dual,
        primal_residual=float(np.linalg.norm(rp)),
        dual_residual=_norm(rd),
        min_eigenvalue=min(mins) if mins else 0.0,
        iterations=it,
        eq_duals=yy[: problem.n_eq] * fm.row_scale[: problem.n_eq],
        box_values=boxv,
        box_duals_lower=duals_lo,
        box_duals_upper=duals_hi,
        certificate_norm=cert,
        message=message,
    )


# ---------------------------------------------------------------------------
# text dump


def write_problem(problem: SdpProblem, path) -> None:
    """Write a plain-text dump readable by :func:`read_problem`.

    Layout: a ``blocks`` line, counts, then one ``<kind> <index> <block> <row>
    <col> <re> <im>`` triplet line per nonzero coefficient (kind is ``obj``,
    ``eq`` or ``box``), followed by ``rhs``/``bounds`` lines. Only entries on or
    above the diagonal are written; the rest follow from Hermiticity.
    """
    lines = ["# cvfade sdp dump v1", "blocks " + " ".join(map(str, problem.blocks))]
    lines.append(f"equalities {problem.n_eq}")
    lines.append(f"boxes {problem.n_box}")
    for b, (cmat, n) in enumerate(zip(problem.objective, problem.blocks)):
        r, q = np.nonzero(np.triu(cmat))
        for i, j in zip(r, q):
            v = cmat[i, j]
            lines.append(f"obj 0 {b} {i} {j} {float(v.real)!r} {float(v.imag)!r}")
    for kind, rows in (("eq", problem.eq_rows), ("box", problem.box_rows)):
        for b, (mat, n) in enumerate(zip(rows, problem.blocks)):
            coo = mat.tocoo()
            for k, col, v in zip(coo.row, coo.col, coo.data):
                i, j = divmod(int(col), n)
                if i <= j and v != 0:
                    lines.append(f"{kind} {k} {b} {i} {j} {float(v.real)!r} {float(v.imag)!r}")
    for k, v in enumerate(problem.eq_rhs):
        lines.append(f"rhs {k} {float(v)!r}")
    for k, (lo, hi) in enumerate(zip(problem.box_lower, problem.box_upper)):
        lines.append(f"bounds {k} {float(lo)!r} {float(hi)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_problem(path) -> SdpProblem:
    blocks: tuple = ()
    n_eq = n_box = 0
    entries: dict[str, list] = {"obj": [], "eq": [], "box": []}
    rhs: dict[int, float] = {}
    bounds: dict[int, tuple] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] == "blocks":
            blocks = tuple(int(t) for t in tok[1:])
        elif tok[0] == "equalities":
            n_eq = int(tok[1])
        elif tok[0] == "boxes":
            n_box = int(tok[1])
        elif tok[0] in entries:
            k, b, i, j = (int(t) for t in tok[1:5])
            entries[tok[0]].append((k, b, i, j, complex(float(tok[5]), float(tok[6]))))
        elif tok[0] == "rhs":
            rhs[int(tok[1])] = float(tok[2])
        elif tok[0] == "bounds":
            bounds[int(tok[1])] = (float(tok[2]), float(tok[3]))
        else:
            raise ValueError(f"unrecognised line: {raw!r}")

    def assemble(kind, m):
        out = []
        for b, n in enumerate(blocks):
            rr, cc, vv = [], [], []
            for k, bb, i, j, v in entries[kind]:
                if bb != b:
                    continue
                rr.append(k)
                cc.append(i * n + j)
                vv.append(v)
                if i != j:
                    rr.append(k)
                    cc.append(j * n + i)
                    vv.append(v.conjugate())
            out.append(sp.csr_matrix((np.array(vv, dtype=complex), (rr, cc)), shape=(m, n * n)))
        return out

    objective = []
    for b, n in enumerate(blocks):
        cm = np.zeros((n, n), dtype=complex)
        for _, bb, i, j, v in entries["obj"]:
            if bb == b:
                cm[i, j] = v
                cm[j, i] = v.conjugate()
        objective.append(cm)
    return SdpProblem(
        blocks=blocks,
        objective=objective,
        eq_rows=assemble("eq", n_eq),
        eq_rhs=np.array([rhs[k] for k in range(n_eq)]),
        box_rows=assemble("box", n_box),
        box_lower=np.array([bounds[k][0] for k in range(n_box)]),
        box_upper=np.array([bounds[k][1] for k in range(n_box)]),
    )
