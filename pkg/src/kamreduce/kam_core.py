"""KAM iteration for the reduced quadratic Hamiltonian.

State at step m: constant normal form <Lam^(m) u, u-bar> (real symmetric
blocks) plus remainder layers W_l, l >= m, stored as doubled fields of their
actual size (eps_l R_l).  One step solves the homological equations for the
Fourier-truncated layer m, moves the averaged diagonal into Lam, conjugates
everything by exp(K) with K the field of eps_m F, and collects the second
order terms into layer m+1.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .linear_hamiltonian import (
    SeriesDivergence,
    conjugate_layer,
    field_from_parts,
    generator_field,
    normal_field,
    parts_from_field,
    symplectic_form,
    transform_field,
)
from .resonance import ResonanceHit, divisor_floor, kron_operator
from .torus_fourier import TorusSeries, ball_mask, grid_points, grid_size, mode_norms, mode_vectors
from .wave_model import (
    QPBlockOperator,
    RTriple,
    block_slice,
    weighted_norm,
)
from .smoothing import split_layers

__all__ = [
    "InvalidParams", "NonHermitianAverage", "BudgetExceeded", "ContractionFailure",
    "ResonanceHit", "SeriesDivergence", "KamSchedule", "make_schedule", "divisor_floor",
    "NormalForm", "HomologicalSolution", "solve_homological", "update_normal_form",
    "FlowMap", "flow_transform", "lie_push", "IterState", "StepReport", "initial_state",
    "kam_iterate", "NormSpec", "homological_residual", "average_part", "picard_flow",
    "symplectic_defect", "brute_force_block", "kron_block",
]


class InvalidParams(ValueError):
    pass


class NonHermitianAverage(ArithmeticError):
    pass


class BudgetExceeded(UserWarning):
    pass


class ContractionFailure(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class KamSchedule:
    eps_seq: np.ndarray
    strip_seq: np.ndarray
    trunc_seq: np.ndarray
    trunc_raw: np.ndarray
    gamma_seq: np.ndarray
    nu_max: int
    K_cap: int
    cap_applied: tuple

    @property
    def K_store(self) -> int:
        return 2 * self.K_cap


def make_schedule(eps: float, N: float, gamma: float, nu_max: int, K_cap: int = 64) -> KamSchedule:
    """eps_nu = eps^((4/3)^nu), s_nu = eps_(nu+1)^(1/N), K_nu = 100 2^nu |log eps| / s_nu."""
    if not 0 < eps < 1:
        raise InvalidParams("eps must lie in (0, 1)")
    if not 0 < gamma < 1:
        raise InvalidParams("gamma must lie in (0, 1)")
    if N < 4:
        raise InvalidParams("N must be at least 4")
    if nu_max < 1 or K_cap < 1:
        raise InvalidParams("nu_max and K_cap must be positive")
    nus = np.arange(nu_max + 2)
    eps_seq = np.exp(np.log(eps) * (4.0 / 3.0) ** nus)
    strips = eps_seq[1:] ** (1.0 / N)
    raw = 100.0 / strips * 2.0 ** nus[:-1] * abs(np.log(eps))
    trunc = np.minimum(np.floor(raw), K_cap).astype(int)
    capped = tuple(bool(r > K_cap) for r in raw)
    gam = gamma / 2.0 ** nus[:-1]
    return KamSchedule(eps_seq, strips, trunc, raw, gam, nu_max, K_cap, capped)


# ---------------------------------------------------------------------------
# normal form


@dataclass
class NormalForm:
    """Blocks Lam_j = base_j + shift_j; the accumulated shift is kept separately
    so that Lam - rho sqrt(lambda) is available without cancellation."""

    blocks: list
    rho: float
    history: list = field(default_factory=list)
    base: list | None = None
    shift: list | None = None

    def __post_init__(self):
        if self.base is None:
            self.base = [np.array(b, float) for b in self.blocks]
        if self.shift is None:
            self.shift = [np.zeros_like(b, dtype=float) for b in self.blocks]

    @classmethod
    def unperturbed(cls, rho: float, M: float, J: int):
        lam = np.arange(J + 1, dtype=float) ** 2 + M
        blocks = [np.array([[rho * np.sqrt(lam[0])]])]
        blocks += [rho * np.sqrt(l) * np.eye(2) for l in lam[1:]]
        return cls(blocks, rho)

    @property
    def J(self) -> int:
        return len(self.blocks) - 1

    def _dense(self, blocks) -> np.ndarray:
        d = 2 * self.J + 1
        out = np.zeros((d, d))
        for j, b in enumerate(blocks):
            out[block_slice(j), block_slice(j)] = b
        return out

    def dense(self) -> np.ndarray:
        return self._dense(self.blocks)

    def dense_base(self) -> np.ndarray:
        return self._dense(self.base)

    def dense_shift(self) -> np.ndarray:
        return self._dense(self.shift)

    def asymmetry(self) -> float:
        return max(float(np.max(np.abs(b - b.T))) for b in self.blocks)

    def imag_part(self) -> float:
        return max(float(np.max(np.abs(np.imag(b)))) for b in self.blocks)

    def check(self, tol: float = 1e-12):
        if self.asymmetry() > tol or self.imag_part() > tol:
            raise NonHermitianAverage("normal form lost real symmetric structure")

    def copy(self):
        return NormalForm([b.copy() for b in self.blocks], self.rho, list(self.history),
                          [b.copy() for b in self.base], [b.copy() for b in self.shift])

    def eigenvalues(self):
        return [np.linalg.eigvalsh(b) for b in self.blocks]


# ---------------------------------------------------------------------------
# homological equations

_FAMILY_OF = {"uu": "sum", "bb": "sum", "ub": "diff"}


def _system(fam: str, kw: np.ndarray, Li, Lj):
    """Stacked matrices of the vectorized equation for one block pair.

    uu: (<k,w> + I(x)Li + Lj^T(x)I) vec F = -i vec R
    bb: (<k,w> - I(x)Li - Lj^T(x)I) vec F = -i vec R
    ub: (<k,w> - I(x)Li + Lj^T(x)I) vec F = -i vec(R - [R])
    """
    if fam == "uu":
        L = kron_operator(Li, Lj, "sum")
    elif fam == "bb":
        L = -kron_operator(Li, Lj, "sum")
    else:
        L = -kron_operator(Li, Lj, "diff")
    m = L.shape[0]
    return kw[:, None, None] * np.eye(m) + L[None], L


def _vec(X):
    # column stacking of the trailing two axes
    return np.swapaxes(X, -1, -2).reshape(X.shape[:-2] + (-1,))


def _unvec(v, a, b):
    return np.swapaxes(v.reshape(v.shape[:-1] + (b, a)), -1, -2)


def brute_force_block(fam: str, kw: float, Li, Lj, R):
    """Direct elementwise solve of the Sylvester-type block equation.

    Unknowns F[r, c] are enumerated row by row and each scalar equation is
    written out from its definition; used as an oracle for the Kronecker path.
    """
    a, b = R.shape
    sign_i = {"uu": 1.0, "bb": -1.0, "ub": -1.0}[fam]
    sign_j = {"uu": 1.0, "bb": -1.0, "ub": 1.0}[fam]
    nunk = a * b
    A = np.zeros((nunk, nunk), complex)
    rhs = np.zeros(nunk, complex)
    for r in range(a):
        for c in range(b):
            eq = r * b + c
            A[eq, r * b + c] += kw
            for s in range(a):  # (Li F)[r, c] = sum_s Li[r, s] F[s, c]
                A[eq, s * b + c] += sign_i * Li[r, s]
            for s in range(b):  # (F Lj)[r, c] = sum_s F[r, s] Lj[s, c]
                A[eq, r * b + s] += sign_j * Lj[s, c]
            rhs[eq] = -1j * R[r, c]
    return np.linalg.solve(A, rhs).reshape(a, b)


def kron_block(fam: str, kw: float, Li, Lj, R):
    """Kronecker-assembled solve of one block equation (single mode)."""
    Ms, _ = _system(fam, np.array([kw]), Li, Lj)
    a, b = R.shape
    v = np.linalg.solve(Ms[0], -1j * _vec(np.asarray(R, complex)))
    return _unvec(v, a, b)


@dataclass
class HomologicalSolution:
    Fuu: TorusSeries
    Fub: TorusSeries
    Fbb: TorusSeries
    avg: np.ndarray
    min_margin: float
    residual: float
    solved: int


def _triple_series(R):
    if isinstance(R, RTriple):
        return R.uu.series, R.ub.series, R.bb.series
    return R


def solve_homological(nf: NormalForm, R, omega, K_m: int, gamma_m: float, n: int | None = None,
                      check: bool = True, residual_tol: float = 1e-10) -> HomologicalSolution:
    """Solve the three homological equations mode by mode for |k| <= K_m.

    R is an RTriple or a (R^uu, R^ub, R^bb) tuple of matrix series.  Raises
    ResonanceHit when a divisor falls below divisor_floor (the same function
    the frequency screen uses).  The k = 0 diagonal blocks of R^ub form the
    returned average.
    """
    Ruu, Rub, Rbb = _triple_series(R)
    dim = Rub.dim
    n = dim if n is None else n
    omega = np.asarray(omega, float).reshape(dim)
    J = nf.J
    d = 2 * J + 1
    K = min(K_m, max(Ruu.cutoff, Rub.cutoff, Rbb.cutoff))
    ks_all = mode_vectors(dim, K)
    mask = ball_mask(dim, K)
    ks = ks_all[mask]
    kw = ks @ omega
    knorm = np.abs(ks).sum(axis=-1)
    zero = np.flatnonzero(knorm == 0)[0]
    base_floor = np.array([divisor_floor(k, 0, 0, gamma_m, n) for k in ks])
    out = {fam: np.zeros(ks_all.shape[:-1] + (d, d), complex) for fam in ("uu", "ub", "bb")}
    avg = np.zeros((d, d), complex)
    margin = np.inf
    resid = 0.0
    solved = 0
    for fam, Rs in (("uu", Ruu), ("ub", Rub), ("bb", Rbb)):
        Rc = Rs.resize(K).coeffs[mask]
        for i in range(J + 1):
            si = block_slice(i)
            Li = nf.blocks[i]
            for j in range(J + 1):
                sj = block_slice(j)
                Lj = nf.blocks[j]
                rhs = np.array(Rc[:, si, sj])
                if not np.any(rhs):
                    continue
                Ms, L = _system(fam, kw, Li, Lj)
                active = np.ones(len(ks), bool)
                if fam == "ub" and i == j:
                    avg[si, sj] = rhs[zero]
                    active[zero] = False
                elif i == j and fam != "ub":
                    # the sum-family divisor at k = 0 is +-(eigs of Li + Lj), never small
                    mu0 = np.abs(np.linalg.eigvalsh(0.5 * (L + L.conj().T)))
                    assert mu0.min() > 0, "degenerate normal form in the uu/bb equation"
                if check:
                    mus = np.linalg.eigvalsh(0.5 * (L + L.conj().T))
                    div = np.abs(kw[:, None] + mus[None, :])
                    floors = (abs(i - j) + 1) * base_floor
                    ratio = div / floors[:, None]
                    ratio[~active] = np.inf
                    bad = np.argwhere(ratio < 1.0)
                    if len(bad):
                        p, l = bad[0]
                        raise ResonanceHit(tuple(int(x) for x in ks[p]), i, j, int(l),
                                           float(div[p, l]), float(floors[p]), _FAMILY_OF[fam])
                    margin = min(margin, float(np.min(ratio)))
                a, b = rhs.shape[1:]
                idx = np.flatnonzero(active)
                v = np.linalg.solve(Ms[idx], -1j * _vec(rhs[idx])[..., None])[..., 0]
                F = _unvec(v, a, b)
                back = np.einsum("pxy,py->px", Ms[idx], v)
                scale = np.maximum(np.abs(_vec(rhs[idx])).max(axis=-1), 1e-300)
                r = float(np.max(np.abs(back + 1j * _vec(rhs[idx])).max(axis=-1) / scale))
                resid = max(resid, r)
                solved += len(idx)
                block = np.zeros((len(ks), a, b), complex)
                block[idx] = F
                tgt = out[fam]
                tgt[mask, si, sj] = block
    if resid > residual_tol:
        raise ArithmeticError(f"homological back-substitution residual {resid:.2e}")
    mk = lambda c: TorusSeries(c, dim, K)
    return HomologicalSolution(mk(out["uu"]), mk(out["ub"]), mk(out["bb"]), avg, margin, resid, solved)


def homological_residual(sol: HomologicalSolution, nf: NormalForm, R, omega, K_m: int) -> float:
    """Independent check: apply the differential operators to F and compare with R.

    omega.d F + i(Lam F + F Lam) = R (uu), omega.d F - i(Lam F + F Lam) = R (bb),
    omega.d F - i(Lam F - F Lam) = R - [R] (ub), relative majorant residual.
    """
    Ruu, Rub, Rbb = [s.truncate(K_m) for s in _triple_series(R)]
    L = nf.dense()
    worst = 0.0
    for fam, F, Rs in (("uu", sol.Fuu, Ruu), ("bb", sol.Fbb, Rbb), ("ub", sol.Fub, Rub)):
        dF = F.directional_derivative(omega)
        LF = F.map_coeffs(lambda c: L @ c)
        FL = F.map_coeffs(lambda c: c @ L)
        if fam == "uu":
            lhs = dF + (LF + FL) * 1j
            tgt = Rs
        elif fam == "bb":
            lhs = dF - (LF + FL) * 1j
            tgt = Rs
        else:
            lhs = dF - (LF - FL) * 1j
            tgt = Rs - TorusSeries.constant(sol.avg, Rs.dim)
        scale = max(tgt.strip_norm(0.0), 1e-300)
        worst = max(worst, (lhs - tgt.resize(lhs.cutoff)).strip_norm(0.0) / scale)
    return worst


def average_part(avg: np.ndarray, J: int):
    """Real symmetric part of the averaged diagonal blocks, and the left-over."""
    used = np.zeros_like(avg)
    for j in range(J + 1):
        s = block_slice(j)
        b = avg[s, s]
        used[s, s] = np.real(0.5 * (b + b.T))
    return used, avg - used


def update_normal_form(nf: NormalForm, avg: np.ndarray, eps_m: float, tol: float = 1e-10) -> NormalForm:
    """Lam_j += eps_m sym(Re mu_j) with mu_j the averaged diagonal blocks."""
    J = nf.J
    scale = max(1.0, float(np.max(np.abs(avg), initial=0.0)))
    new = nf.copy()
    mus = []
    for j in range(J + 1):
        s = block_slice(j)
        b = np.asarray(avg[s, s])
        if np.max(np.abs(b - b.conj().T), initial=0.0) > tol * scale:
            raise NonHermitianAverage(f"averaged block {j} is not Hermitian")
        mu = np.real(0.5 * (b + b.T))
        new.shift[j] = nf.shift[j] + eps_m * mu
        new.blocks[j] = nf.base[j] + new.shift[j]
        mus.append(mu)
    new.history.append({"eps": float(eps_m), "mu": mus})
    new.check()
    return new


# ---------------------------------------------------------------------------
# flow maps


def _gauss_legendre(s: int):
    x, w = np.polynomial.legendre.leggauss(s)
    c = 0.5 * (x + 1.0)
    b = 0.5 * w
    # A[i, j] = int_0^{c_i} l_j(t) dt through the Lagrange basis at c
    V = np.vander(c, s, increasing=True)
    powers = np.arange(1, s + 1)
    integ = c[:, None] ** powers[None, :] / powers[None, :]
    A = integ @ np.linalg.inv(V)
    return c, b, A


@dataclass(frozen=True)
class FlowMap:
    """Stored transform Psi_m(theta) = I + P(theta)."""

    P: TorusSeries
    generator: TorusSeries
    eps: float
    iterations: int

    def eval(self, theta):
        return self.P.eval(theta)

    def psi(self, theta):
        return np.eye(self.P.shape[-1]) + self.P.eval(theta)


def picard_flow(Kfun, nodes: int = 8, tol: float = 1e-12, max_iter: int = 60):
    """Time-one map minus identity of X' = K(t) X on [0, 1], by Picard iteration.

    Kfun(t) returns the field at the given times (array of shape (s, m, m)).
    Collocation at Gauss-Legendre nodes; iterates on the small part Y - I.
    """
    c, b, A = _gauss_legendre(nodes)
    Ks = np.asarray(Kfun(c))
    m = Ks.shape[-1]
    eye = np.eye(m)
    Pi = np.zeros((nodes, m, m), complex)
    prev = None
    for it in range(1, max_iter + 1):
        G = Ks @ (eye + Pi)
        new = np.einsum("ij,jab->iab", A, G)
        inc = float(np.max(np.abs(new - Pi), initial=0.0))
        Pi = new
        size = float(np.max(np.abs(Pi), initial=0.0))
        if inc <= tol and inc <= 1e-15 * max(size, 1e-300) or inc == 0.0:
            break
        if prev is not None and it > 2 and inc > 0.9 * prev:
            raise ContractionFailure(f"Picard increments not contracting ({inc:.2e} after {it} iterations)")
        prev = inc
    else:
        raise ContractionFailure("Picard iteration cap reached")
    end = np.einsum("j,jab->ab", b, Ks @ (eye + Pi))
    return end, it


def flow_transform(F, eps_m: float, omega=None, P: int | None = None, cutoff: int | None = None,
                   advect: bool = False, nodes: int = 8, tol: float = 1e-12, max_norm: float = 0.5,
                   trim: bool = True):
    """Flow map of eps_m F on a theta grid, returned as the series P_m with Psi_m = I + P_m.

    F is a HomologicalSolution or (F^uu, F^ub, F^bb).  By default the phase is
    frozen along the flow (Psi_m(theta) = exp(K(theta))), which is the map the
    Lie transform conjugates by; advect=True follows theta0 + omega t instead.
    """
    if isinstance(F, HomologicalSolution):
        F = (F.Fuu, F.Fub, F.Fbb)
    K = generator_field(*F, eps_m)
    dim = K.dim
    Kc = K.cutoff if cutoff is None else cutoff
    Kout = max(2 * K.cutoff, Kc)
    P = grid_size(Kout, 4) if P is None else P
    pts = grid_points(dim, P).reshape(-1, dim)
    vals = K.samples(P).reshape((-1,) + K.shape)
    if np.max(np.linalg.norm(vals, ord=2, axis=(-2, -1)), initial=0.0) > max_norm:
        raise ContractionFailure("generator too large for the contraction regime")
    m = K.shape[-1]
    out = np.zeros_like(vals)
    iters = 0
    if eps_m != 0 and np.any(vals):
        omega = np.zeros(dim) if omega is None else np.asarray(omega, float).reshape(dim)
        for g, th in enumerate(pts):
            if advect:
                fun = lambda t, th=th: K.eval(th[None, :] + t[:, None] * omega[None, :])
            else:
                fun = lambda t, g=g: np.broadcast_to(vals[g], (len(t), m, m))
            out[g], it = picard_flow(fun, nodes, tol)
            iters = max(iters, it)
    series = TorusSeries.from_samples(out.reshape((P,) * dim + (m, m)), dim, Kout if cutoff is None else Kc)
    if trim:
        series = _trim_noise(series, float(np.max(np.abs(out), initial=0.0)))
    return FlowMap(series, K, eps_m, iters)


def _trim_noise(s: TorusSeries, sup: float) -> TorusSeries:
    floor = np.finfo(float).eps * sup
    norms = mode_norms(s.dim, s.cutoff)
    size = np.abs(s.coeffs).reshape(norms.shape + (-1,)).max(axis=-1)
    live = norms[size > floor]
    keep = int(live.max()) if live.size else 0
    return s.truncate(keep)


def symplectic_defect(flow: FlowMap, thetas) -> float:
    m = flow.P.shape[-1]
    Jf = symplectic_form(m // 2)
    worst = 0.0
    for th in np.atleast_2d(thetas):
        Psi = flow.psi(th)
        worst = max(worst, float(np.linalg.norm(Psi.T @ Jf @ Psi - Jf, 2)))
    return worst


# ---------------------------------------------------------------------------
# norms of layers


@dataclass(frozen=True)
class NormSpec:
    """Weights used for all weighted norms: lambda_k = k^2 + M and Sobolev index."""

    M: float = 1.0
    index: float = 0.0

    def field_norm(self, A: TorusSeries, strip: float) -> float:
        """Sum of the weighted norms of the three quadratic-form parts of a field."""
        uu, ub, bb, _ = parts_from_field(A)
        return sum(weighted_norm(p, strip, self.M, self.index) for p in (uu, ub, bb))

    def map_norm(self, P: TorusSeries, strip: float = 0.0) -> float:
        return weighted_norm(P, strip, self.M, self.index, conjugate=False)


# ---------------------------------------------------------------------------
# iteration


@dataclass
class StepReport:
    nu: int
    r_nu: float
    r_next: float
    min_divisor_margin: float
    K_used: int
    wall_ms: float
    P_norm: float
    P_bound: float
    symplectic_defect: float
    homological_residual: float
    normal_form_asymmetry: float
    series_terms: int
    budget_ratio: float
    screen: dict | None = None

    def row(self):
        return {"nu": self.nu, "r_nu": self.r_nu, "min_divisor_margin": self.min_divisor_margin,
                "K_used": self.K_used, "wall_ms": self.wall_ms}


@dataclass
class IterState:
    nu: int
    normal_form: NormalForm
    layers: dict
    strips: tuple
    transform_log: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    @property
    def J(self):
        return self.normal_form.J

    def remainder(self) -> TorusSeries:
        items = [self.layers[l] for l in sorted(self.layers)]
        out = items[0]
        for x in items[1:]:
            out = out + x
        return out

    def remainder_norm(self, norms: NormSpec, strip: float) -> float:
        return sum(norms.field_norm(W, strip) for W in self.layers.values())

    def triple(self, l: int, eps_l: float) -> RTriple:
        uu, ub, bb, _ = parts_from_field(self.layers[l])
        J = self.J
        return RTriple(QPBlockOperator(uu * (1 / eps_l), J, "symmetric"),
                       QPBlockOperator(ub * (1 / eps_l), J, "plain"),
                       QPBlockOperator(bb * (1 / eps_l), J, "symmetric"))


def initial_state(remainder_field: TorusSeries, rho: float, M: float, J: int,
                  schedule: KamSchedule) -> IterState:
    """Split the remainder field into the layers l = 0..nu_max on the schedule strips."""
    strips = tuple(schedule.strip_seq[: schedule.nu_max + 1])
    Ks = schedule.K_store
    W = remainder_field.resize(max(Ks, remainder_field.cutoff)).truncate(Ks).resize(Ks)
    split = split_layers(W, strips)
    layers = {l: split.layers[l] for l in range(len(strips))}
    return IterState(0, NormalForm.unperturbed(rho, M, J), layers, strips)


def lie_push(state: IterState, sol: HomologicalSolution, schedule: KamSchedule, omega,
             series_tol: float = 1e-16, norms: NormSpec | None = None):
    """Remainder layers of step m+1 after conjugating by exp(eps_m F).

    Layer m+1 collects the truncation tail (1 - Gamma_K) W_m, the left-over of
    the average, the second-order brackets of W_m, and the pushed W_(m+1);
    deeper layers are conjugated as they are.  The bracket series run until a
    term falls below series_tol times the first one (rounding level by default,
    so the conjugacy defect can be re-measured at the size of the final remainder).
    """
    m = state.nu
    eps_m = float(schedule.eps_seq[m])
    Ks = schedule.K_store
    K_m = int(schedule.trunc_seq[m])
    J = state.J
    Wm = state.layers[m]
    uu, ub, bb, _ = parts_from_field(Wm)
    avg = eps_m * sol.avg
    used, left = average_part(avg, J)
    # Z = omega.dK - [A_N, K] = eps_m field(Gamma R - [R]) by the homological equations
    Z = field_from_parts(uu.truncate(K_m), ub.truncate(K_m) - TorusSeries.constant(avg, Wm.dim),
                         bb.truncate(K_m), 1.0)
    Kf = generator_field(sol.Fuu, sol.Fub, sol.Fbb, eps_m)
    second, logs = transform_field(Wm, Z, Kf, Ks, series_tol)
    first_order = (Wm - Z.resize(Ks)) - TorusSeries.constant(normal_field(used), Wm.dim)
    new_layers = {}
    terms = logs[0].terms + logs[1].terms
    for l, W in state.layers.items():
        if l <= m:
            continue
        pushed, lg = conjugate_layer(W, Kf, Ks, series_tol)
        terms += lg.terms
        new_layers[l] = (W + pushed).resize(Ks)
    extra = (first_order + second).resize(Ks)
    if m + 1 in new_layers:
        new_layers[m + 1] = new_layers[m + 1] + extra
    else:
        new_layers[m + 1] = extra
    return new_layers, terms


def kam_iterate(state: IterState, schedule: KamSchedule, omega, n: int | None = None,
                screen=None, norms: NormSpec | None = None, nu_max: int | None = None,
                flow_nodes: int = 8, check_symplectic: int = 16, seed: int = 0,
                budget_factor: float = 10.0):
    """Run the steps nu = state.nu .. nu_max-1 and return (state, [StepReport]).

    `screen(nu, normal_form, K, gamma)` is called before each solve; it may
    raise ResonanceHit or return a verdict dictionary that is stored in the
    report.
    """
    omega = np.atleast_1d(np.asarray(omega, float))
    n = len(omega) if n is None else n
    norms = NormSpec() if norms is None else norms
    nu_max = schedule.nu_max if nu_max is None else nu_max
    rng = np.random.default_rng(seed)
    reports = []
    for m in range(state.nu, nu_max):
        t0 = time.perf_counter()
        eps_m = float(schedule.eps_seq[m])
        K_m = int(schedule.trunc_seq[m])
        r_m = state.remainder_norm(norms, float(schedule.strip_seq[m]))
        verdict = screen(m, state.normal_form, K_m, float(schedule.gamma_seq[m])) if screen else None
        R = state.triple(m, eps_m)
        sol = solve_homological(state.normal_form, R, omega, K_m, float(schedule.gamma_seq[m]), n)
        hres = homological_residual(sol, state.normal_form, R, omega, K_m)
        nf = update_normal_form(state.normal_form, sol.avg, eps_m)
        flow = flow_transform(sol, eps_m, omega, cutoff=schedule.K_store, nodes=flow_nodes)
        sdef = symplectic_defect(flow, rng.uniform(0, 2 * np.pi, (check_symplectic, len(omega))))
        new_layers, terms = lie_push(state, sol, schedule, omega, norms=norms)
        state = IterState(m + 1, nf, new_layers, state.strips, state.transform_log + [flow],
                          state.diagnostics)
        r_next = state.remainder_norm(norms, float(schedule.strip_seq[m + 1]))
        budget = r_next / (budget_factor * float(schedule.eps_seq[m + 1]))
        if budget > 1:
            warnings.warn(f"step {m}: remainder {r_next:.2e} exceeds 10 x eps_{m + 1}", BudgetExceeded)
        rep = StepReport(m, r_m, r_next, sol.min_margin, K_m, 1e3 * (time.perf_counter() - t0),
                         norms.map_norm(flow.P), float(np.sqrt(eps_m)), sdef, max(sol.residual, hres),
                         nf.asymmetry(), terms, budget, verdict)
        reports.append(rep)
        state.diagnostics.append(rep)
    return state, reports
