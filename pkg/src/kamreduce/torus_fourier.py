"""Truncated Fourier series on the n-torus.

A `TorusSeries` stores the coefficients of sum_k c_k exp(i<k, theta>) for
integer vectors k in the l1 ball |k|_1 <= cutoff.  Coefficients may be
scalars or small matrices (any fixed trailing shape).  The dense layout is a
(2K+1)^n cube with the entries outside the ball held at zero, which keeps
FFT based products and compositions simple.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class NonZeroMean(ValueError):
    """Raised when inverting omega.d on data with a nonzero average."""


class SmallDivisor(ArithmeticError):
    """Raised when |<k, omega>| falls below the Diophantine floor."""

    def __init__(self, k, value, floor):
        self.k = tuple(int(x) for x in k)
        self.value = float(value)
        self.floor = float(floor)
        super().__init__(f"small divisor at k={self.k}: |<k,w>|={value:.3e} < {floor:.3e}")


class NotADiffeo(ValueError):
    """Raised when theta -> theta + omega a(theta) is not invertible."""


class NoConvergence(RuntimeError):
    """Raised when a fixed-point iteration misses its tolerance."""


class AliasingWarning(UserWarning):
    """Emitted when sample-and-retransform discards noticeable energy."""


class StripOverflow(ArithmeticError):
    """Raised when a strip majorant overflows (strip too wide for the data)."""


ALIAS_TOL = 1e-8


@lru_cache(maxsize=64)
def _mode_table(dim: int, cutoff: int):
    """Integer mode vectors of the cube and their l1 norms."""
    r = np.arange(-cutoff, cutoff + 1)
    grids = np.meshgrid(*([r] * dim), indexing="ij")
    modes = np.stack(grids, axis=-1)
    l1 = np.abs(modes).sum(axis=-1)
    modes.setflags(write=False)
    l1.setflags(write=False)
    return modes, l1


def mode_vectors(dim: int, cutoff: int) -> np.ndarray:
    """Array of shape (2K+1,)*dim + (dim,) holding k for every cube slot."""
    return _mode_table(dim, cutoff)[0]


def mode_norms(dim: int, cutoff: int) -> np.ndarray:
    """l1 norm |k| for every cube slot."""
    return _mode_table(dim, cutoff)[1]


def ball_mask(dim: int, cutoff: int) -> np.ndarray:
    return mode_norms(dim, cutoff) <= cutoff


def grid_points(dim: int, P: int) -> np.ndarray:
    """Uniform grid on the torus, shape (P,)*dim + (dim,)."""
    t = 2 * np.pi * np.arange(P) / P
    return np.stack(np.meshgrid(*([t] * dim), indexing="ij"), axis=-1)


def grid_size(cutoff: int, oversample: int = 4) -> int:
    """Grid size per dimension for sampling: at least oversample*cutoff and 2K+1."""
    return max(oversample * max(cutoff, 1), 2 * cutoff + 1, 4)


class TorusSeries:
    """Fourier series on T^n with coefficients of a fixed shape."""

    __slots__ = ("dim", "cutoff", "coeffs", "shape", "real_valued")

    def __init__(self, coeffs, dim: int, cutoff: int, real_valued: bool = False):
        coeffs = np.array(coeffs, dtype=complex)
        side = 2 * cutoff + 1
        if coeffs.shape[:dim] != (side,) * dim:
            raise ValueError(f"coefficient cube must be {(side,) * dim}, got {coeffs.shape[:dim]}")
        mask = ball_mask(dim, cutoff)
        coeffs[~mask] = 0.0
        coeffs.setflags(write=False)
        self.dim = int(dim)
        self.cutoff = int(cutoff)
        self.coeffs = coeffs
        self.shape = coeffs.shape[dim:]
        self.real_valued = bool(real_valued)

    # construction -----------------------------------------------------
    @classmethod
    def zeros(cls, dim: int, cutoff: int = 0, shape=(), real_valued=True):
        return cls(np.zeros((2 * cutoff + 1,) * dim + tuple(shape), complex), dim, cutoff, real_valued)

    @classmethod
    def constant(cls, value, dim: int, cutoff: int = 0):
        value = np.asarray(value, dtype=complex)
        c = np.zeros((2 * cutoff + 1,) * dim + value.shape, complex)
        c[(cutoff,) * dim] = value
        return cls(c, dim, cutoff, real_valued=bool(np.all(value.imag == 0)))

    @classmethod
    def from_modes(cls, modes: dict, dim: int, cutoff: int | None = None, shape=None,
                   real_valued: bool = False):
        """Build from a {k: coefficient} map; k is an int (n=1) or a tuple."""
        keys = [(k,) if np.isscalar(k) else tuple(k) for k in modes]
        if cutoff is None:
            cutoff = max([sum(abs(x) for x in k) for k in keys] + [0])
        if shape is None:
            shape = np.asarray(next(iter(modes.values()))).shape if modes else ()
        c = np.zeros((2 * cutoff + 1,) * dim + tuple(shape), complex)
        for key, val in zip(keys, modes.values()):
            if len(key) != dim:
                raise ValueError(f"mode {key} does not match dimension {dim}")
            if sum(abs(x) for x in key) > cutoff:
                continue
            c[tuple(x + cutoff for x in key)] += np.asarray(val, dtype=complex)
        return cls(c, dim, cutoff, real_valued)

    @classmethod
    def from_samples(cls, values, dim: int, cutoff: int, real_valued: bool = False,
                     return_tail: bool = False):
        """Discrete Fourier analysis of values on a uniform P^dim grid.

        With return_tail the relative energy of the discarded modes is also
        returned (the aliasing diagnostic).
        """
        values = np.asarray(values)
        P = values.shape[0]
        if 2 * cutoff + 1 > P:
            raise ValueError(f"grid of {P} points cannot resolve cutoff {cutoff}")
        axes = tuple(range(dim))
        spec = np.fft.fftn(values, axes=axes) / P ** dim
        idx = np.arange(-cutoff, cutoff + 1) % P
        cube = spec[np.ix_(*([idx] * dim))]
        out = cls(cube, dim, cutoff, real_valued)
        if not return_tail:
            return out
        total = float(np.sum(np.abs(spec) ** 2))
        kept = float(np.sum(np.abs(out.coeffs) ** 2))
        tail = max(total - kept, 0.0) / total if total > 0 else 0.0
        return out, tail

    @classmethod
    def from_function(cls, func, dim: int, cutoff: int, oversample: int = 4,
                      real_valued: bool = False):
        """Sample func(theta) (theta of shape (..., dim)) and retransform."""
        P = grid_size(cutoff, oversample)
        vals = np.asarray(func(grid_points(dim, P)))
        out, tail = cls.from_samples(vals, dim, cutoff, real_valued, return_tail=True)
        _alias_check(tail)
        return out

    # basic access -------------------------------------------------------
    def coeff(self, k):
        k = (k,) if np.isscalar(k) else tuple(k)
        if sum(abs(x) for x in k) > self.cutoff:
            return np.zeros(self.shape, complex)
        return self.coeffs[tuple(x + self.cutoff for x in k)]

    def mean(self):
        return self.coeffs[(self.cutoff,) * self.dim]

    def modes(self, tol: float = 0.0):
        """Yield (k, coefficient) for stored modes with norm above tol."""
        ks = mode_vectors(self.dim, self.cutoff)
        mags = self.coeff_norms()
        for pos in zip(*np.nonzero(mags > tol)):
            yield tuple(int(x) for x in ks[pos]), self.coeffs[pos]

    def coeff_norms(self) -> np.ndarray:
        """Norm of each coefficient (spectral norm for matrices)."""
        c = self.coeffs
        if len(self.shape) == 0:
            return np.abs(c)
        if len(self.shape) == 1:
            return np.linalg.norm(c, axis=-1)
        if len(self.shape) == 2:
            return np.linalg.norm(c, ord=2, axis=(-2, -1))
        flat = c.reshape(c.shape[: self.dim] + (-1,))
        return np.linalg.norm(flat, axis=-1)

    def abs_sum(self) -> float:
        return float(self.coeff_norms().sum())

    def __repr__(self):
        return f"TorusSeries(dim={self.dim}, cutoff={self.cutoff}, shape={self.shape})"

    # evaluation ---------------------------------------------------------
    def eval(self, theta):
        """Evaluate at points theta (shape (..., dim), or scalars when dim=1)."""
        theta = np.asarray(theta, dtype=complex)
        if self.dim == 1 and (theta.ndim == 0 or theta.shape[-1] != 1):
            theta = theta[..., None]
        lead = theta.shape[:-1]
        pts = theta.reshape(-1, self.dim)
        mask = ball_mask(self.dim, self.cutoff)
        ks = mode_vectors(self.dim, self.cutoff)[mask]
        cs = self.coeffs[mask].reshape(len(ks), -1)
        vals = np.exp(1j * pts @ ks.T) @ cs
        return vals.reshape(lead + self.shape)

    def samples(self, P: int) -> np.ndarray:
        """Values on the uniform P^dim grid (P >= 2*cutoff+1)."""
        if P < 2 * self.cutoff + 1:
            raise ValueError(f"grid of {P} points cannot represent cutoff {self.cutoff}")
        buf = np.zeros((P,) * self.dim + self.shape, complex)
        idx = np.arange(-self.cutoff, self.cutoff + 1) % P
        buf[np.ix_(*([idx] * self.dim))] = self.coeffs
        return np.fft.ifftn(buf, axes=tuple(range(self.dim))) * P ** self.dim

    # projections ----------------------------------------------------------
    def resize(self, cutoff: int) -> "TorusSeries":
        """Same function stored with a different cutoff (drops modes above it)."""
        cutoff = int(cutoff)
        if cutoff == self.cutoff:
            return self
        c = np.zeros((2 * cutoff + 1,) * self.dim + self.shape, complex)
        m = min(cutoff, self.cutoff)
        src = tuple(slice(self.cutoff - m, self.cutoff + m + 1) for _ in range(self.dim))
        dst = tuple(slice(cutoff - m, cutoff + m + 1) for _ in range(self.dim))
        c[dst] = self.coeffs[src]
        return TorusSeries(c, self.dim, cutoff, self.real_valued)

    def truncate(self, K: int) -> "TorusSeries":
        """Gamma_K: keep exactly the modes |k| <= K (cutoff unchanged)."""
        if K < 0:
            raise ValueError("truncation order must be nonnegative")
        c = np.array(self.coeffs)
        c[mode_norms(self.dim, self.cutoff) > K] = 0.0
        return TorusSeries(c, self.dim, self.cutoff, self.real_valued)

    def tail(self, K: int) -> "TorusSeries":
        """(1 - Gamma_K): the modes |k| > K."""
        if K < 0:
            raise ValueError("truncation order must be nonnegative")
        c = np.array(self.coeffs)
        c[mode_norms(self.dim, self.cutoff) <= K] = 0.0
        return TorusSeries(c, self.dim, self.cutoff, self.real_valued)

    def multiplier(self, weights) -> "TorusSeries":
        """Multiply coefficient k by weights[k] (a cube-shaped array)."""
        w = np.asarray(weights).reshape(self.coeffs.shape[: self.dim] + (1,) * len(self.shape))
        return TorusSeries(self.coeffs * w, self.dim, self.cutoff, self.real_valued)

    def strip_norm(self, strip: float = 0.0) -> float:
        """Majorant sum_k |c_k| exp(strip |k|), an upper bound for the strip sup."""
        if strip < 0:
            raise ValueError("strip width must be nonnegative")
        with np.errstate(over="ignore"):
            w = np.exp(strip * mode_norms(self.dim, self.cutoff))
            total = float(np.sum(self.coeff_norms() * w))
        if not np.isfinite(total):
            raise StripOverflow(f"strip {strip} too wide for stored decay")
        return total

    # algebra ----------------------------------------------------------------
    def _aligned(self, other):
        if other.dim != self.dim:
            raise ValueError("torus dimensions differ")
        K = max(self.cutoff, other.cutoff)
        return self.resize(K), other.resize(K), K

    def __add__(self, other):
        if isinstance(other, TorusSeries):
            a, b, K = self._aligned(other)
            return TorusSeries(a.coeffs + b.coeffs, self.dim, K, a.real_valued and b.real_valued)
        c = np.array(self.coeffs)
        c[(self.cutoff,) * self.dim] += other
        return TorusSeries(c, self.dim, self.cutoff, self.real_valued and np.isrealobj(other))

    __radd__ = __add__

    def __neg__(self):
        return TorusSeries(-self.coeffs, self.dim, self.cutoff, self.real_valued)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scalar):
        if isinstance(scalar, TorusSeries):
            return product(self, scalar)
        real = self.real_valued and np.isrealobj(scalar) and np.ndim(scalar) == 0
        return TorusSeries(self.coeffs * scalar, self.dim, self.cutoff, real)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / scalar)

    def conj_reflect(self) -> "TorusSeries":
        """Series of conj(s(theta)) for real theta: c_k -> conj(c_{-k})."""
        flip = self.coeffs[(slice(None, None, -1),) * self.dim]
        return TorusSeries(np.conj(flip), self.dim, self.cutoff, self.real_valued)

    def transpose(self) -> "TorusSeries":
        return TorusSeries(np.swapaxes(self.coeffs, -1, -2), self.dim, self.cutoff, self.real_valued)

    def reality_defect(self) -> float:
        """max_k |c(-k) - conj c(k)|, zero for real-valued data."""
        return float(np.max(np.abs(self.coeffs - self.conj_reflect().coeffs), initial=0.0))

    def directional_derivative(self, omega) -> "TorusSeries":
        """omega . d/dtheta, i.e. c_k -> i<k, omega> c_k."""
        kw = mode_vectors(self.dim, self.cutoff) @ np.asarray(omega, float).reshape(self.dim)
        return self.multiplier(1j * kw)

    def map_coeffs(self, func, real_valued=None) -> "TorusSeries":
        """Apply a linear map to every coefficient (e.g. block extraction)."""
        lead = self.coeffs.shape[: self.dim]
        flat = self.coeffs.reshape((-1,) + self.shape)
        out = np.asarray(func(flat))
        rv = self.real_valued if real_valued is None else real_valued
        return TorusSeries(out.reshape(lead + out.shape[1:]), self.dim, self.cutoff, rv)


def _alias_check(tail: float, what: str = "sample-and-retransform"):
    if tail > ALIAS_TOL:
        warnings.warn(f"{what} discarded relative tail energy {tail:.2e}", AliasingWarning,
                      stacklevel=3)


def pointwise(func, *series: TorusSeries, cutoff: int | None = None, oversample: int = 4,
              real_valued: bool = False, return_tail: bool = False):
    """Series of func(s1(theta), s2(theta), ...) by sample-and-retransform."""
    dim = series[0].dim
    if cutoff is None:
        cutoff = max(s.cutoff for s in series)
    P = grid_size(max([cutoff] + [s.cutoff for s in series]), oversample)
    vals = func(*[s.samples(P) for s in series])
    out, tail = TorusSeries.from_samples(vals, dim, cutoff, real_valued, return_tail=True)
    if return_tail:
        return out, tail
    _alias_check(tail)
    return out


def product(a: TorusSeries, b: TorusSeries, cutoff: int | None = None) -> TorusSeries:
    """Pointwise product (elementwise for matching shapes, broadcast for scalars)."""
    K = a.cutoff + b.cutoff if cutoff is None else cutoff
    P = _product_grid(a.cutoff, b.cutoff, K)
    vals = _broadcast_mul(a.samples(P), b.samples(P), a.dim)
    return TorusSeries.from_samples(vals, a.dim, K, a.real_valued and b.real_valued)


def _broadcast_mul(x, y, dim):
    if x.ndim > y.ndim:
        y = y.reshape(y.shape + (1,) * (x.ndim - y.ndim))
    elif y.ndim > x.ndim:
        x = x.reshape(x.shape + (1,) * (y.ndim - x.ndim))
    return x * y


def _product_grid(Ka, Kb, Kout):
    # exact for all kept modes: aliases of the product land beyond Kout
    return max(Ka + Kb + Kout + 1, 2 * Kout + 1, 2)


def matmul(a: TorusSeries, b: TorusSeries, cutoff: int | None = None) -> TorusSeries:
    """Pointwise matrix product a(theta) @ b(theta), exact on kept modes."""
    K = a.cutoff + b.cutoff if cutoff is None else cutoff
    P = _product_grid(a.cutoff, b.cutoff, K)
    vals = a.samples(P) @ b.samples(P)
    return TorusSeries.from_samples(vals, a.dim, K)


# ---------------------------------------------------------------------------
# directional derivative inversion and torus diffeomorphisms


def diophantine_floor(k, gamma: float, tau: float) -> float:
    n1 = float(np.abs(np.asarray(k)).sum())
    return gamma / n1 ** tau if n1 > 0 else 0.0


def invert_directional(g: TorusSeries, omega, gamma: float, tau: float | None = None,
                       mean_tol: float = 1e-12) -> TorusSeries:
    """Solve omega . d a = g for zero-mean a (coefficientwise division)."""
    omega = np.asarray(omega, float).reshape(g.dim)
    if tau is None:
        tau = g.dim + 1
    scale = g.strip_norm(0.0)
    m = g.coeff_norms()[(g.cutoff,) * g.dim]
    if m > mean_tol * max(scale, 1.0) and m > 0:
        raise NonZeroMean(f"mean {m:.3e} must vanish before inverting omega.d")
    ks = mode_vectors(g.dim, g.cutoff)
    l1 = mode_norms(g.dim, g.cutoff)
    kw = ks @ omega
    inside = (l1 <= g.cutoff) & (l1 > 0)
    with np.errstate(divide="ignore"):
        floor = np.where(l1 > 0, gamma / np.maximum(l1, 1).astype(float) ** tau, 0.0)
    bad = inside & (np.abs(kw) < floor)
    if np.any(bad):
        pos = tuple(np.argwhere(bad)[0])
        raise SmallDivisor(ks[pos], abs(kw[pos]), floor[pos])
    div = np.where(inside, 1j * kw, 1.0)
    w = np.where(inside, 1.0 / div, 0.0)
    return g.multiplier(w)


@dataclass(frozen=True)
class TorusDiffeo:
    """The pair vartheta = theta + omega a(theta), theta = vartheta + omega atilde(vartheta)."""

    forward: TorusSeries
    inverse: TorusSeries
    omega: np.ndarray

    @classmethod
    def identity(cls, omega, cutoff: int = 0):
        omega = np.atleast_1d(np.asarray(omega, float))
        z = TorusSeries.zeros(len(omega), cutoff)
        return cls(z, z, omega)

    def forward_map(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta + self.omega * np.real(self.forward.eval(theta))[..., None]

    def inverse_map(self, vartheta):
        vartheta = np.asarray(vartheta, dtype=float)
        return vartheta + self.omega * np.real(self.inverse.eval(vartheta))[..., None]

    def roundtrip_defect(self, npts: int = 512, seed: int = 0) -> float:
        """sup |inverse(forward(theta)) - theta| over a dense random sample."""
        dim = len(self.omega)
        rng = np.random.default_rng(seed)
        theta = rng.uniform(0, 2 * np.pi, size=(npts, dim))
        back = self.inverse_map(self.forward_map(theta))
        return float(np.max(np.abs(back - theta)))


def _check_pts(dim, P):
    pts = grid_points(dim, P)
    return pts.reshape(-1, dim), pts


def invert_diffeo(a: TorusSeries, omega, tol: float = 1e-12, max_iter: int = 200,
                  cutoff: int | None = None, oversample: int = 4,
                  max_cutoff: int = 256) -> TorusDiffeo:
    """Invert vartheta = theta + omega a(theta) by the fixed point
    atilde <- -a(vartheta + omega atilde) on an oversampled grid.

    The output cutoff is doubled until the round-trip defect meets tol.
    """
    omega = np.atleast_1d(np.asarray(omega, float))
    dim = a.dim
    da = a.directional_derivative(omega)
    probe = grid_size(max(a.cutoff, 8), 8)
    lip = float(np.max(np.abs(da.samples(probe)), initial=0.0))
    if lip >= 1.0:
        raise NotADiffeo(f"sup |omega.d a| = {lip:.3f} >= 1")
    if a.strip_norm(0.0) == 0.0:
        return TorusDiffeo(a, TorusSeries.zeros(dim, 0), omega)
    K = max(2 * a.cutoff, 8) if cutoff is None else cutoff
    defect = np.inf
    while True:
        P = grid_size(K, oversample)
        flat, pts = _check_pts(dim, P)
        inv = np.zeros(len(flat))
        for _ in range(max_iter):
            new = -np.real(a.eval(flat + omega * inv[:, None]))
            step = np.max(np.abs(new - inv))
            inv = new
            if step < 0.1 * tol:
                break
        atil = TorusSeries.from_samples(inv.reshape(pts.shape[:-1]), dim, K, real_valued=True)
        # round-trip defect measured off-grid
        rng = np.random.default_rng(12345)
        theta = rng.uniform(0, 2 * np.pi, size=(512, dim))
        vt = theta + omega * np.real(a.eval(theta))[:, None]
        defect = float(np.max(np.abs(omega * (np.real(a.eval(theta)) + np.real(atil.eval(vt)))[:, None])))
        if defect <= tol or cutoff is not None or K >= max_cutoff:
            break
        K *= 2
    if defect > tol:
        raise NoConvergence(f"diffeo inversion defect {defect:.2e} > {tol:.1e}")
    return TorusDiffeo(a, atil, omega)


def compose_samples(h: TorusSeries, d: TorusDiffeo, P: int) -> np.ndarray:
    """Values of h(vartheta + omega atilde(vartheta)) on the uniform P-grid."""
    flat, pts = _check_pts(h.dim, P)
    shifted = flat + d.omega * np.real(d.inverse.eval(flat))[:, None]
    vals = h.eval(shifted)
    return vals.reshape(pts.shape[:-1] + h.shape)


def compose(h: TorusSeries, d: TorusDiffeo, cutoff: int | None = None,
            oversample: int = 4) -> TorusSeries:
    """Series of [h](vartheta) = h(vartheta + omega atilde(vartheta))."""
    K = h.cutoff if cutoff is None else cutoff
    if d.inverse.strip_norm(0.0) == 0.0:
        return h.resize(K)
    P = grid_size(K, oversample)
    out, tail = TorusSeries.from_samples(compose_samples(h, d, P), h.dim, K, h.real_valued,
                                         return_tail=True)
    _alias_check(tail, "composition")
    return out
