from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from kamreduce.kam_core import NormalForm
from kamreduce.linear_hamiltonian import doubling_form
from kamreduce.torus_fourier import TorusSeries
from kamreduce.verify import (
    LinearField,
    StepTooLarge,
    assemble_original,
    conjugacy_residual,
    energy_drift,
    integrate,
    lyapunov_estimate,
    raw_to_z,
    reduced_field,
    sobolev_ratio,
    spectrum_report,
)
from kamreduce.wave_model import ModelParams, prepare


def cos_theta(a):
    return TorusSeries.from_modes({1: a / 2, -1: a / 2}, 1, real_valued=True)


def small_params(eps=1e-3, J=3, **kw):
    return ModelParams(n=1, M=1.0, eps=eps, gamma=1e-2, N=8, J=J, V0=cos_theta(1.0),
                       Vmodes={1: cos_theta(1.0), -1: cos_theta(1.0)}, omega=[1.3], **kw)


def random_hamiltonian_field(rng, d, scale=1.0):
    H = rng.normal(size=(2 * d, 2 * d)) + 1j * rng.normal(size=(2 * d, 2 * d))
    A = doubling_form(d) @ (H + H.T)
    return scale * A / np.linalg.norm(A, 2)


# --- integrator -------------------------------------------------------


def test_constant_field_matches_matrix_exponential(rng):
    d = 3
    A = random_hamiltonian_field(rng, d)
    f = LinearField(2 * d, A, None, np.array([1.0]), doubling_form(d))
    x0 = rng.normal(size=2 * d) + 0j
    tr = integrate(f, x0, 3.0, 0.05)
    assert np.max(np.abs(tr.x[-1] - expm(3.0 * A) @ x0)) <= 1e-9
    tr4 = integrate(f, x0, 3.0, 0.05, method="gauss4")
    assert np.max(np.abs(tr4.x[-1] - expm(3.0 * A) @ x0)) <= 1e-6


def test_periodic_field_matches_reference_solver():
    p = small_params(eps=1e-2)
    f = assemble_original(p, "post-step3")
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=f.dimension) + 1j * rng.normal(size=f.dimension)
    tr = integrate(f, x0, 5.0, 0.01)
    ref = solve_ivp(lambda t, y: f(t) @ y, (0, 5.0), x0, method="DOP853", rtol=1e-12, atol=1e-13)
    assert np.max(np.abs(tr.x[-1] - ref.y[:, -1])) <= 1e-8 * np.linalg.norm(x0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(-2, 2), st.floats(-2, 2))
def test_integration_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    d = 2
    f = LinearField(2 * d, random_hamiltonian_field(rng, d), None, np.array([1.0]), doubling_form(d))
    x, y = rng.normal(size=(2, 2 * d)) + 0j
    tx, ty = integrate(f, x, 1.0, 0.05), integrate(f, y, 1.0, 0.05)
    txy = integrate(f, a * x + b * y, 1.0, 0.05)
    assert np.allclose(txy.x[-1], a * tx.x[-1] + b * ty.x[-1], atol=1e-12)


def test_step_size_guard():
    p = small_params()
    f = assemble_original(p, "raw")
    with pytest.raises(StepTooLarge):
        integrate(f, np.ones(f.dimension), 1.0, 0.05)


def test_fields_are_hamiltonian():
    p = small_params(eps=1e-2)
    ts = np.linspace(0, 5, 7)
    for stage in ("raw", "post-step3", "post-kill-b0"):
        f = assemble_original(p, stage)
        assert f.hamiltonian_defect(ts) <= 1e-13
    with pytest.raises(ValueError):
        assemble_original(p, "nonsense")


def test_raw_coupling_entry():
    # V = 2 cos x (v_1 = v_-1 = 1), V0 = 0: the raw coupling of modes 1 and 0 is eps * galerkin_norm
    p = ModelParams(n=1, M=1.0, eps=1e-2, gamma=1e-2, N=8, J=2, V0=TorusSeries.zeros(1, 0),
                    Vmodes={1: TorusSeries.constant(1.0, 1), -1: TorusSeries.constant(1.0, 1)}, omega=[1.3])
    f = assemble_original(p, "raw")
    d = 5
    A = f(0.0)
    assert abs(-A[d + 1, 0] - 1e-2 * 2 * np.pi) < 1e-15
    assert abs(-A[d + 1, 1] - 2.0) < 1e-15  # lambda_1 = 2
    q = assemble_original(replace(p, galerkin_norm=1.0), "raw")
    assert abs(-q(0.0)[d + 1, 0] - 1e-2) < 1e-15


def test_raw_and_prepared_systems_agree():
    p = small_params(eps=1e-2, J=3)
    raw = assemble_original(p, "raw")
    z = assemble_original(p, "post-step3")
    rng = np.random.default_rng(2)
    d = 7
    u0 = np.concatenate([rng.normal(size=d), rng.normal(size=d)]) + 0j
    T = 10.0
    tr_raw = integrate(raw, u0, T, 0.0015, save_every=10 ** 9)
    # the prepared system runs in the reparametrized time s = t + a(omega t)
    pm = prepare(p)
    a = pm.reparam.a
    s_of_t = lambda t: t + float(np.real(a.eval(np.array([p.omega[0] * t]))))
    s0, s1 = s_of_t(0.0), s_of_t(T)
    tr_z = integrate(z, raw_to_z(p, u0, 0.0), s1 - s0, 0.012, t0=s0, save_every=10 ** 9)
    want = raw_to_z(p, tr_raw.x[-1], T)
    assert np.linalg.norm(tr_z.x[-1] - want) <= 1e-6 * np.linalg.norm(want)


# --- unperturbed gates ------------------------------------------------


def test_unperturbed_gates():
    p = small_params(eps=0.0, J=4)
    f = assemble_original(p, "post-step3")
    rng = np.random.default_rng(3)
    z0 = rng.normal(size=f.dimension) + 1j * rng.normal(size=f.dimension)
    tr = integrate(f, z0, 200.0, 0.012, save_every=50)
    assert energy_drift(tr) <= 1e-8
    for N in (0, 4, 8):
        hi, lo = sobolev_ratio(tr, N)
        assert abs(hi - 1) <= 1e-8 and abs(lo - 1) <= 1e-8
    ly = lyapunov_estimate(f, 200.0, 1.0, 0.012)
    assert abs(ly.top) <= 1e-6
    assert ly.band[0] <= ly.top <= ly.band[1]


def test_lyapunov_detects_growth():
    # x' = diag(0.2, -0.2) x: top exponent 0.2
    A = np.diag([0.2, -0.2]) + 0j
    f = LinearField(2, A, None, np.array([1.0]), np.array([[0, 1], [1, 0]]))
    T = 200.0
    ly = lyapunov_estimate(f, T, 1.0, 0.05)
    # the alignment transient of the random initial frame costs O(1/T)
    assert abs(ly.top - 0.2) < 2 / T and abs(ly.exponents[1] + 0.2) < 2 / T
    assert abs(ly.exponents.sum()) < 1e-10


def test_reduced_field_is_diagonal_rotation():
    Lam = np.diag([1.0, 2.0, 2.0])
    f = reduced_field(Lam, [1.3])
    tr = integrate(f, np.ones(6) + 0j, 1.0, 0.01)
    assert np.allclose(tr.x[-1][:3], np.exp(1j * np.diag(Lam)), atol=1e-12)


# --- conjugacy defect and spectrum -----------------------------------


def test_conjugacy_without_perturbation_is_zero():
    p = small_params(eps=0.0)
    f = assemble_original(p, "post-step3")
    nf = NormalForm.unperturbed(1.0, 1.0, p.J)
    rep = conjugacy_residual([], nf, f, np.zeros((3, 1)))
    assert rep.residual == 0.0


def test_conjugacy_on_reference(ref_reduction):
    red = ref_reduction
    p, pm = red.params, red.prepared
    f = assemble_original(p, "post-step3", pm)
    th = np.random.default_rng(4).uniform(0, 2 * np.pi, (16, 1))
    maps, nf = red.state.transform_log, red.state.normal_form
    full = conjugacy_residual(maps, nf, f, th, prepared=pm)
    assert full.residual <= 10 * red.r_final
    # each dropped transform makes the defect larger
    prev = full.residual
    for k in (1, 2, 3):
        cut = conjugacy_residual(maps[:-k], nf, f, th, prepared=pm).residual
        assert cut >= 10 * prev
        prev = cut
    # a field that skips the b0 elimination does not match the stored maps
    bare = conjugacy_residual(maps, nf, f, th, prepared=pm, include_b0=False).residual
    assert bare > 1e3 * full.residual


def test_spectrum_report_unperturbed():
    J = 4
    nf = NormalForm.unperturbed(1.2, 1.0, J)
    lam = np.arange(J + 1) ** 2 + 1.0
    sp = spectrum_report(nf.blocks, 1.2, lam, 0.0)
    assert sp.decay_constant == 0.0 and sp.max_imag == 0.0
    assert np.allclose([e[0] for e in sp.eigenvalues], 1.2 * np.sqrt(lam))
    assert abs(sp.min_gap - 1.2 * (np.sqrt(2) - 1)) < 1e-14


def test_spectrum_report_reference(ref_reduction):
    red = ref_reduction
    nf = red.state.normal_form
    sp = spectrum_report(nf.blocks, red.prepared.rho, red.params.lam, red.params.eps)
    js = np.arange(1, len(nf.blocks))
    assert np.all(js * sp.Q_norms[1:] <= sp.decay_constant * (1 + 1e-12))
    assert np.isfinite(sp.decay_constant) and sp.decay_constant < 1.0
    assert sp.max_imag <= 1e-12 and sp.min_gap > 0.1
