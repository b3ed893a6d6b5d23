"""Independent checks of a reduction: time integration of the truncated systems,
Lyapunov exponents, Sobolev-type norm ratios and the conjugacy defect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linear_hamiltonian import (
    b0_field,
    doubling_form,
    expm_series,
    field_from_triple,
    normal_field,
)
from .torus_fourier import TorusSeries, grid_size
from .wave_model import (
    ModelParams,
    PreparedModel,
    packed_lambda,
    packed_modes,
    sobolev_weights,
    weighted_matrix,
)


class StepTooLarge(ValueError):
    """dt does not resolve the field: dt * |A| exceeds the allowed bound."""


# ---------------------------------------------------------------------------
# fields


@dataclass
class LinearField:
    """x' = A(t) x with A(t) = const + series(omega t).

    form: matrix G with G A(t) symmetric (the Hamiltonian structure).
    coords: 'z' for doubled complex modes (u, u-bar), 'qp' for (u_k, d/dt u_k).
    """

    dimension: int
    const: np.ndarray
    series: TorusSeries | None
    omega: np.ndarray
    form: np.ndarray
    coords: str = "z"
    stage: str = ""

    def generator(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        if self.series is None:
            return np.broadcast_to(self.const, (len(t),) + self.const.shape)
        th = t[:, None] * self.omega[None, :]
        return self.const[None] + self.series.eval(th)

    def __call__(self, t):
        return self.generator(t)[0]

    @property
    def periodic(self) -> bool:
        return self.series is None or len(self.omega) == 1

    @property
    def period(self) -> float | None:
        if self.series is None:
            return None
        if len(self.omega) == 1:
            return 2 * np.pi / abs(float(self.omega[0]))
        return None

    def norm_bound(self) -> float:
        n = float(np.linalg.norm(self.const, 2))
        if self.series is not None:
            n += self.series.strip_norm(0.0)
        return n

    def hamiltonian_defect(self, ts) -> float:
        worst = 0.0
        for A in self.generator(ts):
            H = self.form @ A
            worst = max(worst, float(np.max(np.abs(H - H.T))))
        return worst


def _V1_matrix(p: ModelParams, coupling: float):
    """Series of the matrix (V + M V0 delta)_(k-l) on the packed modes."""
    modes = packed_modes(p.J)
    d = len(modes)
    K = max([p.V0.cutoff] + [v.cutoff for v in p.Vmodes.values()])
    c = np.zeros((2 * K + 1,) * p.n + (d, d), complex)
    for a, k in enumerate(modes):
        for b, l in enumerate(modes):
            j = int(k - l)
            v = p.Vmodes.get(j)
            if v is not None:
                c[..., a, b] += coupling * v.resize(K).coeffs
            if j == 0:
                c[..., a, b] += coupling * p.M * p.V0.resize(K).coeffs
    return TorusSeries(c, p.n, K)


def assemble_original(p: ModelParams, stage: str = "raw", prepared: PreparedModel | None = None) -> LinearField:
    """Field of the truncated system at a given stage of the preparation.

    raw: Galerkin truncation of the wave equation in (u_k, u_k'), with the
    coupling sum_l (V + M V0)_(k-l) u_l scaled by galerkin_norm (1 for the
    physical equation) so that every stage describes the same system.
    post-step3: doubled complex modes after rescaling and time change.
    post-kill-b0: the same after the b0 elimination.
    """
    J = p.J
    d = 2 * J + 1
    lam = packed_lambda(p.M, J)
    if stage == "raw":
        kappa = p.galerkin_norm
        V1 = _V1_matrix(p, p.eps * kappa)
        Kc = max(V1.cutoff, p.V0.cutoff)
        # Omega(theta) = diag(lambda) (1 - eps V0) + eps kappa V1(theta), minus its constant diag(lambda)
        om = V1.resize(Kc).coeffs.copy()
        c0 = p.V0.resize(Kc).coeffs
        idx = np.arange(d)
        om[..., idx, idx] += -p.eps * c0[..., None] * lam
        c = np.zeros(om.shape[:-2] + (2 * d, 2 * d), complex)
        c[..., d:, :d] = -om
        series = TorusSeries(c, p.n, Kc)
        const = np.zeros((2 * d, 2 * d), complex)
        const[:d, d:] = np.eye(d)
        const[d:, :d] = -np.diag(lam)
        form = np.zeros((2 * d, 2 * d))
        form[:d, d:] = -np.eye(d)
        form[d:, :d] = np.eye(d)  # form @ A = diag(Omega, I)
        return LinearField(2 * d, const, series, p.omega, form, "qp", stage)
    if prepared is None:
        from .wave_model import prepare

        prepared = prepare(p)
    rho = prepared.rho
    const = normal_field(rho * np.diag(np.sqrt(lam)))
    E = doubling_form(d)
    if stage == "post-step3":
        W = field_from_triple(prepared.R, p.eps) + b0_field(prepared.reparam.b0, d, p.eps)
    elif stage == "post-kill-b0":
        W = prepared.killed.field
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return LinearField(2 * d, const, W, p.omega, E, "z", stage)


def reduced_field(Lam: np.ndarray, omega) -> LinearField:
    """Constant field of the reduced system <Lam u, u-bar>."""
    d = Lam.shape[0]
    return LinearField(2 * d, normal_field(Lam), None, np.atleast_1d(np.asarray(omega, float)),
                       doubling_form(d), "z", "reduced")


def raw_to_z(p: ModelParams, state: np.ndarray, t: float) -> np.ndarray:
    """Map (u_k, u_k') at time t to (z_k, z-bar_k) of the rescaled system."""
    d = 2 * p.J + 1
    lam = packed_lambda(p.M, p.J)
    th = np.atleast_1d(p.omega * t)
    beta = float(np.real(1.0 - p.eps * p.V0.eval(th))) ** -0.25
    u, v = state[:d], state[d:]
    q = lam ** 0.25 * u / beta
    pp = beta * lam ** -0.25 * v
    z = (q - 1j * pp) / np.sqrt(2)
    zb = (q + 1j * pp) / np.sqrt(2)
    return np.concatenate([z, zb])


# ---------------------------------------------------------------------------
# integration


def _gauss(s: int):
    x, w = np.polynomial.legendre.leggauss(s)
    c = 0.5 * (x + 1)
    b = 0.5 * w
    V = np.vander(c, s, increasing=True)
    pw = np.arange(1, s + 1)
    A = (c[:, None] ** pw[None, :] / pw[None, :]) @ np.linalg.inv(V)
    return c, b, A


def step_matrix(f: LinearField, t: float, dt: float, stages: int = 3) -> np.ndarray:
    """One Gauss-Legendre collocation step of a linear system as a matrix."""
    c, b, A = _gauss(stages)
    As = f.generator(t + c * dt)
    m = As.shape[-1]
    big = np.eye(stages * m, dtype=complex)
    for i in range(stages):
        for j in range(stages):
            big[i * m:(i + 1) * m, j * m:(j + 1) * m] -= dt * A[i, j] * As[i]
    rhs = np.concatenate(list(As), axis=0)
    Kst = np.linalg.solve(big, rhs)
    S = np.eye(m, dtype=complex)
    for i in range(stages):
        S = S + dt * b[i] * Kst[i * m:(i + 1) * m]
    return S


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    coords: str
    J: int


def _resolve_dt(f: LinearField, T: float, dt: float, max_ratio: float):
    if dt * f.norm_bound() > max_ratio:
        raise StepTooLarge(f"dt * |A| = {dt * f.norm_bound():.3f} exceeds {max_ratio}")
    period = f.period
    if period is not None:
        per = int(np.ceil(period / dt))
        dt = period / per
        return dt, per
    return dt, None


def integrate(f: LinearField, u0, T: float, dt: float, method: str = "gauss6", t0: float = 0.0,
              save_every: int = 1, max_ratio: float = 0.1) -> Trajectory:
    """Integrate x' = A(t) x from t0 to t0 + T.

    method 'gauss6' (3-stage Gauss-Legendre, order 6) or 'gauss4'.  For a
    single frequency the step is adjusted to divide the period and the step
    matrices of one period are reused.  Raises StepTooLarge if dt |A| > max_ratio.
    u0 may be a vector or a matrix of column vectors.
    """
    stages = {"gauss6": 3, "gauss4": 2}[method]
    dt, per = _resolve_dt(f, T, dt, max_ratio)
    nsteps = int(np.ceil(T / dt - 1e-9))
    x = np.array(u0, dtype=complex)
    ts = [t0]
    xs = [x.copy()]
    cache = {}
    const = f.series is None
    for s in range(nsteps):
        t = t0 + s * dt
        h = min(dt, t0 + T - t)
        key = 0 if const else (s % per if per is not None and abs(h - dt) < 1e-14 else None)
        if key is not None and key in cache:
            S = cache[key]
        else:
            S = step_matrix(f, t, h, stages)
            if key is not None:
                cache[key] = S
        x = S @ x
        if (s + 1) % save_every == 0 or s == nsteps - 1:
            ts.append(t + h)
            xs.append(x.copy())
    return Trajectory(np.array(ts), np.array(xs), f.coords, (f.dimension // 2 - 1) // 2)


def energy_drift(traj: Trajectory) -> float:
    """max_t | |x(t)| / |x(0)| - 1 | (conserved for the unperturbed z system)."""
    n = np.linalg.norm(traj.x.reshape(len(traj.t), -1), axis=1)
    return float(np.max(np.abs(n / n[0] - 1)))


@dataclass
class LyapunovReport:
    top: float
    band: tuple
    exponents: np.ndarray
    T: float
    renorm: float


def lyapunov_estimate(f: LinearField, T: float, renorm: float, dt: float = 0.01, seed: int = 0,
                      frame: int | None = None) -> LyapunovReport:
    """Growth rates of a propagated orthonormal frame with QR re-orthonormalization.

    The band is the top exponent +- twice the standard error of the slope of
    the cumulative log growth against time.
    """
    m = f.dimension
    k = m if frame is None else frame
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(m, k)) + 1j * rng.normal(size=(m, k)))
    dt_eff, per = _resolve_dt(f, T, dt, 0.1)
    per_block = max(1, int(round(renorm / dt_eff)))
    nblocks = max(1, int(np.ceil(T / (per_block * dt_eff))))
    logs = np.zeros(k)
    cum = []
    times = []
    cache = {}
    const = f.series is None
    s = 0
    for blk in range(nblocks):
        for _ in range(per_block):
            key = 0 if const else (s % per if per is not None else None)
            if key is not None and key in cache:
                S = cache[key]
            else:
                S = step_matrix(f, s * dt_eff, dt_eff)
                if key is not None:
                    cache[key] = S
            Q = S @ Q
            s += 1
        Q, Rm = np.linalg.qr(Q)
        g = np.log(np.abs(np.diag(Rm)))
        logs += g
        cum.append(logs[0])
        times.append(s * dt_eff)
    Ttot = s * dt_eff
    ex = logs / Ttot
    times = np.array(times)
    cum = np.array(cum)
    if len(times) > 2:
        A = np.vstack([times, np.ones_like(times)]).T
        coef, res, *_ = np.linalg.lstsq(A, cum, rcond=None)
        resid = cum - A @ coef
        se = np.sqrt(np.sum(resid ** 2) / max(len(times) - 2, 1) / np.sum((times - times.mean()) ** 2))
    else:
        se = 0.0
    top = float(ex[0])
    return LyapunovReport(top, (top - 2 * se, top + 2 * se), ex, Ttot, per_block * dt_eff)


def sobolev_ratio(traj: Trajectory, N: float):
    """(sup, inf) over time of (|z|_N + |z-bar|_N) / initial value.

    Weights |k|^N with |0|^N := 1 on the packed modes; for a 'qp' trajectory
    the two halves are u_k and u_k'.
    """
    J = traj.J
    d = 2 * J + 1
    w = sobolev_weights(J, N)
    x = traj.x
    if x.ndim == 3:
        x = x[..., 0]
    a = np.linalg.norm(w * x[:, :d], axis=1)
    b = np.linalg.norm(w * x[:, d:], axis=1)
    tot = a + b
    r = tot / tot[0]
    return float(r.max()), float(r.min())


# ---------------------------------------------------------------------------
# conjugacy defect


def transform_factors(prepared: PreparedModel | None, transform_log, include_b0: bool = True) -> list:
    """Series P_i of the factors Psi = (I + P_G)(I + P_0)(I + P_1)...

    P_G (the b0 elimination exp(K_G) - I) is sampled on a grid; every factor
    is trimmed of trailing modes below rounding level.
    """
    from .kam_core import _trim_noise

    parts = []
    if include_b0 and prepared is not None and not prepared.killed.identity:
        KG = prepared.killed.generator
        K = 2 * KG.cutoff
        P = grid_size(K, 2)
        vals = KG.resize(K).samples(P)
        flat = vals.reshape((-1,) + KG.shape)
        out = np.array([expm_series(v) for v in flat]).reshape(vals.shape)
        s = TorusSeries.from_samples(out, KG.dim, K)
        parts.append(_trim_noise(s, float(np.max(np.abs(out), initial=0.0))))
    for fl in transform_log:
        parts.append(fl.P)
    return parts


def compose_at(parts, omega, theta):
    """Pi(theta) and omega.dPi(theta) for I + Pi = prod (I + P_i), by the product rule."""
    Pi = dPi = None
    for s in parts:
        v = s.eval(theta)
        dv = s.directional_derivative(omega).eval(theta)
        if Pi is None:
            Pi, dPi = v, dv
        else:
            Pi, dPi = Pi + v + Pi @ v, dPi + dv + dPi @ v + Pi @ dv
    return Pi, dPi


@dataclass
class ConjugacyReport:
    residual: float
    per_sample: np.ndarray
    thetas: np.ndarray


def conjugacy_residual(transform_log, Lam_final, f: LinearField, thetas,
                       prepared: PreparedModel | None = None, include_b0: bool = True,
                       M: float = 1.0, index: float = 0.0) -> ConjugacyReport:
    """max over theta of the weighted norm of D = omega.dPsi - A Psi + Psi A_red.

    Psi = I + Pi is the composition of the stored maps (and the b0 elimination
    when the field is the post-step3 one).  D is expanded in small parts so
    that no O(1) terms cancel:
        D = omega.dPi - [A_N, Pi] - W - W Pi + dA + Pi dA,
    with A = A_N + W, A_red = A_N + dA and A_N diagonal.  Lam_final may be a
    NormalForm, whose separately stored shift then gives dA without rounding
    at the scale of the eigenvalues.
    """
    thetas = np.atleast_2d(np.asarray(thetas, float))
    m = f.dimension
    d = m // 2
    J = (d - 1) // 2
    AN = np.asarray(f.const)
    if np.max(np.abs(AN - np.diag(np.diag(AN))), initial=0.0) != 0:
        raise ValueError("the constant part of the field must be diagonal")
    a = np.diag(AN)
    if hasattr(Lam_final, "dense_shift"):
        dA = normal_field(Lam_final.dense_shift()) + (normal_field(Lam_final.dense_base()) - AN)
    else:
        dA = normal_field(np.asarray(Lam_final)) - AN
    parts = transform_factors(prepared, transform_log, include_b0)
    out = []
    for th in thetas:
        W = f.series.eval(th) if f.series is not None else np.zeros((m, m))
        if not parts:
            Pv = np.zeros((m, m), complex)
            dP = np.zeros((m, m), complex)
        else:
            Pv, dP = compose_at(parts, f.omega, th)
        comm = (a[:, None] - a[None, :]) * Pv
        D = dP - comm - W - W @ Pv + dA + Pv @ dA
        out.append(np.linalg.norm(weighted_matrix(D, J, M, index), 2))
    out = np.array(out)
    return ConjugacyReport(float(out.max()), out, thetas)


# ---------------------------------------------------------------------------
# spectrum


@dataclass
class SpectrumReport:
    eigenvalues: list
    Q_norms: np.ndarray
    decay_constant: float
    min_gap: float
    max_imag: float

    def as_dict(self):
        return {"eigenvalues": [list(map(float, e)) for e in self.eigenvalues],
                "Q_norms": list(map(float, self.Q_norms)),
                "decay_constant": float(self.decay_constant),
                "min_gap": float(self.min_gap), "max_imag": float(self.max_imag)}


def spectrum_report(blocks, rho: float, lam, eps: float) -> SpectrumReport:
    """Eigenvalues of each final block, |Q_j| with Q_j = (Lam_j - rho sqrt(lam_j))/eps, and max_j j |Q_j|."""
    lam = np.asarray(lam, float)
    eigs = []
    qn = []
    imag = 0.0
    for j, b in enumerate(blocks):
        ev = np.linalg.eigvals(b)
        imag = max(imag, float(np.max(np.abs(ev.imag))))
        eigs.append(np.sort(ev.real))
        Q = (b - rho * np.sqrt(lam[j]) * np.eye(b.shape[0])) / eps if eps else np.zeros_like(b)
        qn.append(float(np.linalg.norm(Q, 2)))
    qn = np.array(qn)
    js = np.arange(len(blocks))
    C = float(np.max(js[1:] * qn[1:])) if len(blocks) > 1 else 0.0
    # gap between eigenvalues of different blocks (the +-j pair of one block may coincide)
    gap = np.inf
    for i in range(len(eigs)):
        for j in range(i + 1, len(eigs)):
            gap = min(gap, float(np.min(np.abs(eigs[i][:, None] - eigs[j][None, :]))))
    return SpectrumReport(eigs, qn, C, gap, imag)
