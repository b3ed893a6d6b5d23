"""Linear Hamiltonian fields in doubled coordinates X = (u, u-bar) and Lie-series transforms.

A quadratic Hamiltonian

    H = <R^uu u, u> + <R^ub u, u-bar> + <R^bb u-bar, u-bar>

(bilinear brackets, no conjugation) has gradient Hess @ X with

    Hess = [[2 R^uu, R^ub^T], [R^ub, 2 R^bb]]

and generates u' = i dH/du-bar, u-bar' = -i dH/du, i.e. X' = A X with
A = E @ Hess and E = [[0, i I], [-i I, 0]].  Note E @ E = I, so Hess = E @ A,
and the invariant form is Psi^T E Psi = E (equivalently with -E).

A time dependent change X = exp(K(theta)) Y, theta = omega t, maps the field
A to exp(-K) A exp(K) - exp(-K) omega.d exp(K).  Writing Z = omega.dK - [A_N, K]
for a constant normal part A_N and the rest W, the new field is

    A_N + (W - Z) + sum_j [W, K]_j / j! - sum_j [Z, K]_j / (j+1)!,

with [X, K]_1 = XK - KX and [X, K]_j = [[X, K]_(j-1), K].  Z is known in closed
form from the equation that defines K, so the large bracket [A_N, K] is never
formed numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .torus_fourier import TorusSeries, matmul


class SeriesDivergence(ArithmeticError):
    """Raised when the terms of a Lie series stop shrinking."""


# ---------------------------------------------------------------------------
# conversions


def doubling_form(d: int) -> np.ndarray:
    """E = [[0, iI], [-iI, 0]] on the doubled space of dimension 2d."""
    E = np.zeros((2 * d, 2 * d), complex)
    E[:d, d:] = 1j * np.eye(d)
    E[d:, :d] = -1j * np.eye(d)
    return E


def symplectic_form(d: int) -> np.ndarray:
    """The invariant skew form (-E); Psi^T J Psi = J for Hamiltonian flows."""
    return -doubling_form(d)


def _left(Mat, s: TorusSeries, real_valued=None) -> TorusSeries:
    return s.map_coeffs(lambda c: Mat @ c, real_valued)


def hessian_from_parts(uu: TorusSeries, ub: TorusSeries, bb: TorusSeries) -> TorusSeries:
    K = max(uu.cutoff, ub.cutoff, bb.cutoff)
    uu, ub, bb = uu.resize(K), ub.resize(K), bb.resize(K)
    d = ub.shape[-1]
    c = np.zeros(ub.coeffs.shape[:-2] + (2 * d, 2 * d), complex)
    c[..., :d, :d] = 2 * uu.coeffs
    c[..., :d, d:] = np.swapaxes(ub.coeffs, -1, -2)
    c[..., d:, :d] = ub.coeffs
    c[..., d:, d:] = 2 * bb.coeffs
    return TorusSeries(c, ub.dim, K)


def field_from_parts(uu, ub, bb, scale: float = 1.0) -> TorusSeries:
    """Field matrix A = E Hess of the Hamiltonian with the given blocks (times scale)."""
    H = hessian_from_parts(uu, ub, bb)
    d = ub.shape[-1]
    return _left(scale * doubling_form(d), H)


def field_from_triple(R, scale: float = 1.0) -> TorusSeries:
    return field_from_parts(R.uu.series, R.ub.series, R.bb.series, scale)


def parts_from_field(A: TorusSeries):
    """(R^uu, R^ub, R^bb, asymmetry) of a field; Hess is symmetrized first."""
    d = A.shape[-1] // 2
    H = _left(doubling_form(d), A).coeffs
    Ht = np.swapaxes(H, -1, -2)
    asym = float(np.max(np.abs(H - Ht), initial=0.0))
    H = 0.5 * (H + Ht)
    mk = lambda c: TorusSeries(c, A.dim, A.cutoff)
    return mk(0.5 * H[..., :d, :d]), mk(H[..., d:, :d]), mk(0.5 * H[..., d:, d:]), asym


def hamiltonian_defect(A) -> float:
    """max |E A - (E A)^T| over coefficients (zero for Hamiltonian fields)."""
    c = A.coeffs if isinstance(A, TorusSeries) else np.asarray(A)
    d = c.shape[-1] // 2
    H = doubling_form(d) @ c
    return float(np.max(np.abs(H - np.swapaxes(H, -1, -2)), initial=0.0))


def normal_field(Lam: np.ndarray) -> np.ndarray:
    """Constant field of <Lam u, u-bar>: diag(i Lam, -i Lam^T)."""
    d = Lam.shape[0]
    A = np.zeros((2 * d, 2 * d), complex)
    A[:d, :d] = 1j * Lam
    A[d:, d:] = -1j * Lam.T
    return A


def generator_field(Fuu, Fub, Fbb, eps: float) -> TorusSeries:
    """K = eps E Hess(F): the vector field of the generator eps F."""
    return field_from_parts(Fuu, Fub, Fbb, eps)


# ---------------------------------------------------------------------------
# Lie series


def commutator(X: TorusSeries, K: TorusSeries, cutoff: int) -> TorusSeries:
    """[X, K] = XK - KX, kept up to the given cutoff."""
    return matmul(X, K, cutoff) - matmul(K, X, cutoff)


def _zero_like(X: TorusSeries, cutoff: int) -> TorusSeries:
    return TorusSeries.zeros(X.dim, cutoff, X.shape, real_valued=False)


def default_norm(s: TorusSeries) -> float:
    return s.strip_norm(0.0)


@dataclass
class SeriesLog:
    terms: int = 0
    norms: list = field(default_factory=list)
    dropped: float = 0.0


def lie_sum(X: TorusSeries, K: TorusSeries, weight, cutoff: int, rel_tol: float,
            norm=default_norm, max_terms: int = 60, patience: int = 5, abs_floor: float = 0.0):
    """sum_{j>=1} weight(j) [X, K]_j with the stopping rule used throughout.

    Stops after the first term whose norm is below rel_tol * (first term norm)
    (that term is included).  Raises SeriesDivergence when the term norms fail
    to halve for `patience` consecutive terms while still above threshold.
    """
    log = SeriesLog()
    total = _zero_like(X, cutoff)
    term = X.resize(min(X.cutoff, cutoff))
    first = None
    stalls = 0
    prev = None
    for j in range(1, max_terms + 1):
        term = commutator(term, K, cutoff)
        piece = term * weight(j)
        nrm = norm(piece)
        total = total + piece
        log.terms = j
        log.norms.append(nrm)
        if first is None:
            first = nrm
        thresh = max(rel_tol * first, abs_floor)
        if nrm <= thresh or nrm == 0.0:
            log.dropped = nrm
            return total, log
        if prev is not None and nrm > 0.5 * prev:
            stalls += 1
            if stalls >= patience:
                raise SeriesDivergence(f"terms stopped halving after {j} terms (|term| = {nrm:.3e})")
        else:
            stalls = 0
        prev = nrm
    raise SeriesDivergence(f"no convergence in {max_terms} terms")


def _inv_factorial(j):
    return 1.0 / float(np.prod(np.arange(1, j + 1)))


def _inv_factorial_shift(j):
    return 1.0 / float(np.prod(np.arange(1, j + 2)))


def conjugate_layer(W: TorusSeries, K: TorusSeries, cutoff: int, rel_tol: float, norm=default_norm):
    """exp(-K) W exp(K) - W = sum_{j>=1} [W, K]_j / j!."""
    return lie_sum(W, K, _inv_factorial, cutoff, rel_tol, norm)


def transform_field(W: TorusSeries, Z: TorusSeries, K: TorusSeries, cutoff: int, rel_tol: float,
                    norm=default_norm):
    """Second-order part sum_j [W,K]_j/j! - sum_j [Z,K]_j/(j+1)! of a Lie transform.

    The new field is A_N + (W - Z) + (this); see the module docstring.
    """
    a, loga = lie_sum(W, K, _inv_factorial, cutoff, rel_tol, norm)
    b, logb = lie_sum(Z, K, _inv_factorial_shift, cutoff, rel_tol, norm)
    return a - b, (loga, logb)


def expm_series(K: np.ndarray, tol: float = 1e-18, max_terms: int = 60) -> np.ndarray:
    """exp(K) - I by its Taylor series (K small); keeps full relative accuracy."""
    term = np.array(K, dtype=complex)
    total = term.copy()
    for j in range(2, max_terms):
        term = term @ K / j
        total = total + term
        if np.max(np.abs(term), initial=0.0) <= tol * max(np.max(np.abs(total), initial=0.0), 1e-300):
            break
    return total


# ---------------------------------------------------------------------------
# elimination of the b0 term


@dataclass(frozen=True)
class KillB0Result:
    """Output of the preparatory transform.

    R: new R-triple with H = <rho Lam u, u-bar> + eps (R terms) and no b0 term;
    field: eps times its field; generator: the field K_G of eps G so that the
    map is exp(K_G(theta)); b1: the coefficient of G; logs: series diagnostics.
    """

    R: object
    field: TorusSeries
    generator: TorusSeries
    b1: TorusSeries
    logs: tuple
    identity: bool


def b0_field(b0: TorusSeries, d: int, eps: float) -> TorusSeries:
    """Field of the term i eps b0/2 (<u-bar, u-bar> - <u, u>)."""
    E = doubling_form(d)
    H = np.zeros((2 * d, 2 * d), complex)
    H[:d, :d] = -1j * np.eye(d)
    H[d:, d:] = 1j * np.eye(d)
    A = eps * (E @ H)
    return b0.map_coeffs(lambda c: c[:, None, None] * A)


def kill_b0(lam, b0: TorusSeries, rho: float, R, eps: float, omega, M: float = 1.0, N: float = 0,
            K_store: int | None = None, rel_tol: float = 1e-3, norm=default_norm) -> KillB0Result:
    """Symplectic change exp(eps X_G) removing the b0 term.

    G = b1 (<Lam^-1 u, u> + <Lam^-1 u-bar, u-bar>) with Lam = diag sqrt(lambda)
    and b1 = -b0/(4 rho), which makes {N, G} cancel the b0 term exactly at
    fixed theta; the left-over omega.d b1 term and all brackets are collected
    into the new remainder.  The series are cut once a term drops below
    rel_tol * eps^2 * (first term).
    """
    from .wave_model import RTriple, QPBlockOperator, packed_lambda

    J = R.J
    d = 2 * J + 1
    plam = packed_lambda(M, J) if lam is None else np.asarray(lam, float)[np.abs(_modes(J))]
    dim = b0.dim
    identity = eps == 0 or float(np.max(np.abs(b0.coeffs), initial=0.0)) == 0.0
    if identity:
        zero = TorusSeries.zeros(dim, 0, (2 * d, 2 * d), real_valued=False)
        return KillB0Result(R, field_from_triple(R, eps), zero, TorusSeries.zeros(dim, 0), (), True)
    if rho == 0:
        raise ValueError("rho must be nonzero")
    Kr = max(R.ub.series.cutoff, b0.cutoff)
    Ks = 2 * Kr if K_store is None else K_store
    b1 = b0 * (-1.0 / (4.0 * rho))
    inv = np.diag(plam ** -0.5)
    Gmat = np.zeros((2 * d, 2 * d), complex)
    Gmat[:d, :d] = 2 * inv
    Gmat[d:, d:] = 2 * inv
    KG_const = eps * (doubling_form(d) @ Gmat)
    KG = b1.map_coeffs(lambda c: c[:, None, None] * KG_const).resize(Ks)
    KGdot = KG.directional_derivative(omega)
    Q = b0_field(b0, d, eps).resize(Ks)
    W0 = field_from_triple(R, eps).resize(Ks)
    W = Q + W0
    Z = KGdot + Q  # omega.dK - [A_N, K] with [A_N, K] = -Q
    tol = rel_tol * eps ** 2
    second, logs = transform_field(W, Z, KG, Ks, tol, norm)
    new = (W - Z) + second
    uu, ub, bb, _ = parts_from_field(new)
    tri = RTriple(QPBlockOperator(uu * (1 / eps), J, "symmetric"),
                  QPBlockOperator(ub * (1 / eps), J, "plain"),
                  QPBlockOperator(bb * (1 / eps), J, "symmetric"))
    return KillB0Result(tri, new, KG, b1, logs, False)


def _modes(J):
    out = [0]
    for j in range(1, J + 1):
        out += [j, -j]
    return np.array(out)
