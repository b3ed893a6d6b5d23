"""Finite-dimensional Hamiltonian data of the quasi-periodic wave equation.

    u_tt - u_xx + M u + eps (V0(wt) u_xx + V(wt, x) u) = 0,  x in R / 2pi Z.

The pipeline is: rescale by beta = (1 - eps V0)^(-1/4), pass to complex
coordinates z = (q - i p)/sqrt 2, reparametrize time on the torus so that the
frequency factor becomes the constant rho, expand in the modes exp(ikx) and
pack modes +-j into 2x2 blocks.  The Fourier coefficients of the conjugate
function play the role of u-bar, so mode k of u-bar is conj(z_{-k}).

Packed ordering of the 2J+1 modes: (z_0, z_1, z_-1, z_2, z_-2, ...).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linear_hamiltonian import KillB0Result, kill_b0
from .torus_fourier import (
    TorusDiffeo,
    TorusSeries,
    compose_samples,
    grid_size,
    invert_diffeo,
    invert_directional,
    _alias_check,
)

GALERKIN_NORM = 2 * np.pi


class DegeneratePotential(ValueError):
    """Raised when 1 - eps V0 is not positive (the rescaling breaks down)."""


# ---------------------------------------------------------------------------
# mode packing


def packed_index(k: int) -> int:
    """Position of spatial mode k in the packed ordering."""
    return 0 if k == 0 else (2 * k - 1 if k > 0 else -2 * k)


def packed_modes(J: int) -> np.ndarray:
    """Spatial mode number at each packed position."""
    out = [0]
    for j in range(1, J + 1):
        out += [j, -j]
    return np.array(out)


def block_slice(j: int) -> slice:
    return slice(0, 1) if j == 0 else slice(2 * j - 1, 2 * j + 1)


def block_of_position(J: int) -> np.ndarray:
    """Block index |k| at each packed position."""
    return np.abs(packed_modes(J))


def parity_permutation(J: int) -> np.ndarray:
    """Permutation matrix exchanging z_j and z_-j (k -> -k)."""
    d = 2 * J + 1
    P = np.zeros((d, d))
    modes = packed_modes(J)
    for p, k in enumerate(modes):
        P[packed_index(-k), p] = 1.0
    return P


# ---------------------------------------------------------------------------
# model parameters


@dataclass(frozen=True)
class ModelParams:
    n: int
    M: float
    eps: float
    gamma: float
    N: int
    J: int
    V0: TorusSeries
    Vmodes: dict
    omega: np.ndarray
    tau: float | None = None
    theta_cutoff: int = 32
    galerkin_norm: float = GALERKIN_NORM

    def __post_init__(self):
        object.__setattr__(self, "omega", np.atleast_1d(np.asarray(self.omega, float)))
        if self.tau is None:
            object.__setattr__(self, "tau", float(self.n + 1))
        if self.M <= 0:
            raise ValueError("mass M must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.J < 1:
            raise ValueError("J must be at least 1")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if len(self.omega) != self.n:
            raise ValueError("omega must have n components")
        if self.V0.dim != self.n:
            raise ValueError("V0 lives on the wrong torus")
        JV = max([abs(j) for j in self.Vmodes] + [0])
        if JV > 2 * self.J:
            raise ValueError(f"potential modes up to {JV} exceed 2J = {2 * self.J}")
        for j, vj in self.Vmodes.items():
            partner = self.Vmodes.get(-j)
            if partner is None:
                raise ValueError(f"mode {-j} missing: potential must be real")
            if vj.dim != self.n:
                raise ValueError("potential mode lives on the wrong torus")
            diff = (vj - partner.conj_reflect()).strip_norm(0.0)
            if diff > 1e-12 * max(1.0, vj.strip_norm(0.0)):
                raise ValueError(f"v_{-j} is not the conjugate of v_{j}")
        if self.V0.reality_defect() > 1e-12 * max(1.0, self.V0.strip_norm(0.0)):
            raise ValueError("V0 must be real valued")
        P = grid_size(max(self.V0.cutoff, 8), 8)
        sup = float(np.max(np.abs(self.eps * self.V0.samples(P)), initial=0.0))
        if sup >= 1.0:
            raise DegeneratePotential(f"sup |eps V0| = {sup:.3f} >= 1")

    @property
    def lam(self) -> np.ndarray:
        return sturm_spectrum(self.M, self.J)[0]

    def x_even(self, tol: float = 1e-12) -> bool:
        """True when V(theta, -x) = V(theta, x), so every v_j is real valued."""
        return all((v - self.Vmodes[-j]).strip_norm(0.0) <= tol * max(1.0, v.strip_norm(0.0))
                   for j, v in self.Vmodes.items())


def sturm_spectrum(M: float, J: int):
    """Eigenvalues lambda_k = k^2 + M for k = 0..J and weights lambda_k^(1/4)."""
    if M <= 0:
        raise ValueError("mass M must be positive")
    lam = np.arange(J + 1, dtype=float) ** 2 + M
    return lam, lam ** 0.25


def packed_lambda(M: float, J: int) -> np.ndarray:
    """lambda_|k| at each packed position."""
    return block_of_position(J).astype(float) ** 2 + M


# ---------------------------------------------------------------------------
# steps 1 and 3


def _model_grid(p: ModelParams, extra: int = 0):
    K = max(p.theta_cutoff, p.V0.cutoff)
    return K, grid_size(K + extra)


def step1_rescale(p: ModelParams):
    """Rescaling by beta = (1 - eps V0)^(-1/4).

    Returns (a0, a1, V1tilde) with a0 = (1 - eps V0)^(1/2), eps a1 =
    omega.d beta / beta and V1tilde_j = beta^2 (v_j + M V0 delta_j0).
    """
    K, P = _model_grid(p)
    base = 1.0 - p.eps * np.real(p.V0.samples(P))
    if np.any(base <= 0):
        raise DegeneratePotential("1 - eps V0 must stay positive")
    a0, tail = TorusSeries.from_samples(np.sqrt(base), p.n, K, real_valued=True, return_tail=True)
    _alias_check(tail, "a0")
    if p.eps == 0:
        a1 = TorusSeries.zeros(p.n, 0)
    else:
        # omega.d beta / (eps beta) = omega.d V0 / (4 (1 - eps V0))
        dV0 = np.real(p.V0.directional_derivative(p.omega).samples(P))
        a1, tail = TorusSeries.from_samples(dV0 / (4.0 * base), p.n, K, real_valued=True, return_tail=True)
        _alias_check(tail, "a1")
    beta2 = 1.0 / np.sqrt(base)
    V1t = {}
    modes = set(p.Vmodes) | {0}
    for j in sorted(modes):
        vj = p.Vmodes.get(j, TorusSeries.zeros(p.n, 0)).resize(K).samples(P)
        if j == 0:
            vj = vj + p.M * np.real(p.V0.resize(K).samples(P))
        series, tail = TorusSeries.from_samples(beta2 * vj, p.n, K, return_tail=True)
        _alias_check(tail, f"V1tilde mode {j}")
        V1t[j] = series
    return a0, a1, V1t


@dataclass(frozen=True)
class Reparametrization:
    rho: float
    a: TorusSeries
    diffeo: TorusDiffeo
    b0: TorusSeries
    Vmodes: dict
    identity_residual: float


def step3_reparam(a0: TorusSeries, a1: TorusSeries, V1tilde: dict, omega, gamma: float,
                  tau: float | None = None, cutoff: int | None = None, tol: float = 1e-12):
    """Time change vartheta = theta + omega a(theta) making the frequency factor constant.

    rho is the torus mean of a0 and a solves omega.d a = a0/rho - 1; b0 and the
    potential modes are pulled back through the inverse map and divided by
    [1 + omega.d a].  Returns (rho, diffeo, b0, Vmodes) plus diagnostics via
    `step3_details`.
    """
    r = step3_details(a0, a1, V1tilde, omega, gamma, tau, cutoff, tol)
    return r.rho, r.diffeo, r.b0, r.Vmodes


def step3_details(a0, a1, V1tilde, omega, gamma, tau=None, cutoff=None, tol=1e-12) -> Reparametrization:
    omega = np.atleast_1d(np.asarray(omega, float))
    dim = a0.dim
    K = a0.cutoff if cutoff is None else cutoff
    P = grid_size(K, 8)
    if np.any(np.real(a0.samples(P)) <= 0):
        raise DegeneratePotential("a0 must be positive")
    rho = float(np.real(a0.mean()))
    g = a0 * (1.0 / rho) - 1.0
    g = TorusSeries(g.coeffs, dim, g.cutoff, real_valued=True)
    c = np.array(g.coeffs)
    c[(g.cutoff,) * dim] = 0.0  # mean is zero up to rounding
    g = TorusSeries(c, dim, g.cutoff, True)
    a = invert_directional(g, omega, gamma, tau)
    one_plus = a.directional_derivative(omega) + 1.0
    resid = (one_plus * rho - a0).strip_norm(0.0) / max(a0.strip_norm(0.0), 1e-300)
    d = invert_diffeo(a, omega, tol=tol)
    Pc = grid_size(K, 4)
    den = compose_samples(one_plus, d, Pc)
    b0, tail = TorusSeries.from_samples(compose_samples(a1, d, Pc) / den, dim, K,
                                        real_valued=True, return_tail=True)
    _alias_check(tail, "b0")
    Vm = {}
    for j, vj in V1tilde.items():
        s, tail = TorusSeries.from_samples(compose_samples(vj, d, Pc) / den, dim, K, return_tail=True)
        _alias_check(tail, f"V mode {j}")
        Vm[j] = s
    return Reparametrization(rho, a, d, b0, Vm, float(resid))


# ---------------------------------------------------------------------------
# block operators


class BlockOperator:
    """Dense (2J+1)x(2J+1) matrix viewed through the +-j block packing."""

    __slots__ = ("J", "matrix")

    def __init__(self, matrix, J: int):
        m = np.array(matrix, dtype=complex)
        if m.shape != (2 * J + 1, 2 * J + 1):
            raise ValueError("matrix does not match cutoff J")
        m.setflags(write=False)
        self.J = J
        self.matrix = m

    def block(self, i: int, j: int) -> np.ndarray:
        return self.matrix[block_slice(i), block_slice(j)]

    def block_transpose(self) -> "BlockOperator":
        return BlockOperator(self.matrix.T, self.J)

    @classmethod
    def from_blocks(cls, blocks: dict, J: int):
        m = np.zeros((2 * J + 1, 2 * J + 1), complex)
        for (i, j), b in blocks.items():
            m[block_slice(i), block_slice(j)] = b
        return cls(m, J)

    @classmethod
    def identity(cls, J: int):
        return cls(np.eye(2 * J + 1), J)


class QPBlockOperator:
    """Torus series of block operators, tagged 'symmetric' or 'plain'."""

    __slots__ = ("series", "J", "tag")

    def __init__(self, series: TorusSeries, J: int, tag: str = "plain"):
        if series.shape != (2 * J + 1, 2 * J + 1):
            raise ValueError("coefficient shape does not match J")
        if tag not in ("symmetric", "plain"):
            raise ValueError("tag must be 'symmetric' or 'plain'")
        self.series = series
        self.J = J
        self.tag = tag

    @classmethod
    def zeros(cls, J: int, dim: int, tag: str = "plain", cutoff: int = 0):
        return cls(TorusSeries.zeros(dim, cutoff, (2 * J + 1, 2 * J + 1)), J, tag)

    def coefficient(self, k) -> BlockOperator:
        return BlockOperator(self.series.coeff(k), self.J)

    def eval(self, theta) -> np.ndarray:
        return self.series.eval(theta)

    def symmetry_defect(self) -> float:
        c = self.series.coeffs
        return float(np.max(np.abs(c - np.swapaxes(c, -1, -2)), initial=0.0))

    def reality_defect(self) -> float:
        return self.series.reality_defect()

    def __add__(self, other):
        tag = self.tag if self.tag == other.tag else "plain"
        return QPBlockOperator(self.series + other.series, self.J, tag)

    def __sub__(self, other):
        tag = self.tag if self.tag == other.tag else "plain"
        return QPBlockOperator(self.series - other.series, self.J, tag)

    def __mul__(self, scalar):
        return QPBlockOperator(self.series * scalar, self.J, self.tag)

    __rmul__ = __mul__

    def truncate(self, K):
        return QPBlockOperator(self.series.truncate(K), self.J, self.tag)

    def tail(self, K):
        return QPBlockOperator(self.series.tail(K), self.J, self.tag)


@dataclass(frozen=True)
class RTriple:
    """The three quadratic-form operators (R^uu, R^uu-bar, R^u-bar u-bar)."""

    uu: QPBlockOperator
    ub: QPBlockOperator
    bb: QPBlockOperator

    @property
    def J(self):
        return self.ub.J

    def __add__(self, other):
        return RTriple(self.uu + other.uu, self.ub + other.ub, self.bb + other.bb)

    def __mul__(self, s):
        return RTriple(self.uu * s, self.ub * s, self.bb * s)

    __rmul__ = __mul__

    def parts(self):
        return (self.uu, self.ub, self.bb)


def galerkin_blocks(Vmodes: dict, lam, J: int, norm: float = GALERKIN_NORM) -> RTriple:
    """Galerkin operators of the coupling i eps |D|^(-1/4) (V/2) |D|^(-1/4) (z + z-bar).

    R^uu-bar_{k,l} = (norm/2) v_{k-l} / (lambda_k lambda_l)^(1/4), with norm the
    value of the selection integral (2 pi for unnormalized exp(ikx)); R^uu and
    R^u-bar u-bar are half of R^uu-bar entrywise.
    """
    lam = np.asarray(lam, float)
    modes = packed_modes(J)
    d = len(modes)
    first = next(iter(Vmodes.values()))
    dim = first.dim
    K = max(v.cutoff for v in Vmodes.values())
    w = lam[np.abs(modes)] ** -0.25
    c = np.zeros((2 * K + 1,) * dim + (d, d), complex)
    for p, k in enumerate(modes):
        for q, l in enumerate(modes):
            v = Vmodes.get(int(k - l))
            if v is None:
                continue
            c[..., p, q] = (0.5 * norm) * (w[p] * w[q]) * v.resize(K).coeffs
    real = all(v.reality_defect() < 1e-14 * max(1.0, v.abs_sum()) for v in Vmodes.values())
    ub = TorusSeries(c, dim, K, real_valued=real)
    half = TorusSeries(0.5 * c, dim, K, real_valued=real)
    sym = bool(np.max(np.abs(c - np.swapaxes(c, -1, -2)), initial=0.0) == 0.0)
    tag = "symmetric" if sym else "plain"
    return RTriple(QPBlockOperator(half, J, tag), QPBlockOperator(ub, J, "plain"),
                   QPBlockOperator(half, J, tag))


# ---------------------------------------------------------------------------
# weighted norms


def sobolev_weights(J: int, N: float) -> np.ndarray:
    """|k|^N at each packed position, with |0|^N := 1."""
    b = block_of_position(J).astype(float)
    out = np.where(b == 0, 1.0, b ** N)
    return out


def _weights(J, M, N):
    lam = packed_lambda(M, J)
    return lam ** 0.25, sobolev_weights(J, N)


def weighted_matrix(B: np.ndarray, J: int, M: float, N: float, conjugate: bool = True) -> np.ndarray:
    """W (Jw B Jw) W^-1 with Jw = diag(lambda^(1/4)) and W the h_N weights.

    With conjugate=False the lambda^(1/4) factors are omitted (plain h_N
    operator norm of a map).  Works on stacked matrices and on doubled
    (2d x 2d) matrices, where the weights repeat on both halves.
    """
    d = 2 * J + 1
    jw, sw = _weights(J, M, N)
    size = B.shape[-1]
    reps = size // d
    jw = np.tile(jw, reps)
    sw = np.tile(sw, reps)
    left = sw * (jw if conjugate else 1.0)
    right = (jw if conjugate else 1.0) / sw
    return left[:, None] * B * right[None, :]


def weighted_norm(B, strip: float = 0.0, M: float = 1.0, N: float = 0.0,
                  conjugate: bool = True) -> float:
    """Weighted h_N -> h_N norm of J B J (a strip majorant for torus series).

    B may be a BlockOperator, a QPBlockOperator, an RTriple (sum of the
    three parts), a dense matrix or a TorusSeries of matrices with the packed
    (or doubled) layout.
    """
    if isinstance(B, RTriple):
        return sum(weighted_norm(p, strip, M, N, conjugate) for p in B.parts())
    if isinstance(B, QPBlockOperator):
        B = B.series
    if isinstance(B, BlockOperator):
        B = B.matrix
    if isinstance(B, TorusSeries):
        size = B.shape[-1]
        J = _infer_J(size)
        W = weighted_matrix(B.coeffs, J, M, N, conjugate)
        ws = TorusSeries(W, B.dim, B.cutoff)
        return ws.strip_norm(strip)
    B = np.asarray(B)
    J = _infer_J(B.shape[-1])
    return float(np.linalg.norm(weighted_matrix(B, J, M, N, conjugate), 2))


def _infer_J(size: int) -> int:
    if size % 2 == 1:
        return (size - 1) // 2
    d = size // 2
    return (d - 1) // 2


# ---------------------------------------------------------------------------
# full preparation of the reduced problem


@dataclass(frozen=True)
class PreparedModel:
    params: ModelParams
    a0: TorusSeries
    a1: TorusSeries
    V1tilde: dict
    reparam: Reparametrization
    R: RTriple
    killed: KillB0Result

    @property
    def rho(self):
        return self.reparam.rho


def prepare(p: ModelParams, series_tol: float | None = None) -> PreparedModel:
    """Run steps 1-3, the Galerkin projection and the b0 elimination."""
    a0, a1, V1t = step1_rescale(p)
    rep = step3_details(a0, a1, V1t, p.omega, p.gamma, p.tau, cutoff=p.theta_cutoff)
    lam = p.lam
    R = galerkin_blocks(rep.Vmodes, lam, p.J, p.galerkin_norm)
    killed = kill_b0(lam, rep.b0, rep.rho, R, p.eps, p.omega, M=p.M, N=p.N)
    return PreparedModel(p, a0, a1, V1t, rep, R, killed)
